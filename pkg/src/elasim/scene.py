"""Analytic driving scene: pinhole cameras, vehicle routes, sign geometry, rendering.

World frame: x to the right of the road, y along the road (direction of
travel), z up. Camera frame: x right, y down, z forward. Pixel coordinates
use ``i`` = column (x, rightward) and ``j`` = row (y, downward); an image
array is indexed ``img[j, i]`` and pixel ``(i, j)`` has its centre at
``(i, j)``.

Sign ellipses use the convention of the rotated quadratic form

    u = (i - xc) cos(D) - (j - yc) sin(D)
    v = (i - xc) sin(D) + (j - yc) cos(D)
    (u / a)^2 + (v / b)^2 <= 1

so the major axis points along ``(cos D, -sin D)`` in pixel coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding, textures
from .errors import DegeneracyError, FitError, VisibilityError

UP = np.array([0.0, 0.0, 1.0])
TRAJECTORY_KINDS = ("straight", "lane-change", "curved")
SEGMENT_LENGTH = 5
SIGN_BOUNDARY_POINTS = 64
# peak lateral excursion (m) of each route kind, scaled per route by a random factor
ROUTE_AMPLITUDE = {"straight": 0.0, "lane-change": 0.3, "curved": 0.35}


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    rotation: np.ndarray  # rows: right, down, forward (world -> camera)
    focal: float
    width: int
    height: int

    @property
    def cx(self):
        return self.width / 2.0

    @property
    def cy(self):
        return self.height / 2.0

    def to_camera(self, points):
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T

    def project(self, points):
        """Project world points; returns ``(pixels (n, 2), depth (n,))``."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * pc[..., 0] / z + self.cx
            v = self.focal * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z


def look_rotation(direction):
    f = np.asarray(direction, dtype=np.float64)
    f = f / np.linalg.norm(f)
    r = np.cross(f, UP)
    n = np.linalg.norm(r)
    if n < 1e-9:
        raise ValueError("camera cannot look straight up or down")
    r = r / n
    d = np.cross(f, r)
    return np.stack([r, d, f])


def look_at(position, target, focal, width, height):
    position = np.asarray(position, dtype=np.float64)
    rot = look_rotation(np.asarray(target, dtype=np.float64) - position)
    return Camera(position, rot, float(focal), int(width), int(height))


# ---------------------------------------------------------------------------
# world description


def sign_normal_from_yaw(yaw):
    """Unit normal of a sign facing oncoming traffic, turned ``yaw`` rad toward the road."""
    return np.array([-math.sin(yaw), -math.cos(yaw), 0.0])


@dataclass(frozen=True)
class WorldConfig:
    label: str = "30"
    sign_center: tuple = (1.2, 40.0, 2.2)
    sign_radius: float = 0.45
    sign_normal: tuple = tuple(sign_normal_from_yaw(0.6))
    attacker_position: tuple = (-6.0, 44.0, 6.0)
    attacker_look_at: tuple = (0.0, 25.0, 0.5)
    attacker_focal: float = 150.0
    attacker_size: tuple = (160, 120)
    victim_focal: float = 250.0
    victim_size: tuple = (128, 128)
    mount_height: float = 1.3
    mount_forward: float = 1.0
    mount_yaw: float = 0.115  # rad toward the right of the heading
    mount_pitch: float = 0.06  # rad upward
    vehicle_dims: tuple = (4.5, 1.8, 1.5)  # length, width, height
    lane_width: float = 3.5

    def __post_init__(self):
        if self.sign_radius <= 0:
            raise ValueError("sign radius must be positive")
        if self.attacker_focal <= 0 or self.victim_focal <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(np.linalg.norm(self.sign_normal) - 1.0) > 1e-9:
            raise ValueError("sign normal must be unit length")

    @property
    def shape(self):
        return textures.shape_of(self.label)

    @property
    def sign_y(self):
        return self.sign_center[1]

    def attacker_camera(self):
        w, h = self.attacker_size
        return look_at(self.attacker_position, self.attacker_look_at, self.attacker_focal, w, h)

    def sign_axes(self):
        """(right, up) unit vectors spanning the sign plane, as seen from the front."""
        n = np.asarray(self.sign_normal, dtype=np.float64)
        right = np.cross(-n, UP)
        right /= np.linalg.norm(right)
        up = np.cross(right, -n)
        return right, up


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Pose:
    position: np.ndarray  # vehicle centre on the ground plane
    heading: float  # rad, counter-clockwise from +y
    t: int

    @property
    def forward(self):
        return np.array([-math.sin(self.heading), math.cos(self.heading), 0.0])

    @property
    def right(self):
        return np.array([math.cos(self.heading), math.sin(self.heading), 0.0])


@dataclass
class Trajectory:
    kind: str
    poses: list
    speed: np.ndarray  # metres per frame, len(poses) - 1
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.poses)

    def distances(self, sign_y):
        return np.array([sign_y - p.position[1] for p in self.poses])


# per-kind lateral profiles over progress s in [0, 1]; return (offset, d offset / ds)
def _profile(kind, s, base, amp):
    if kind == "straight":
        return base + 0 * s, 0 * s
    if kind == "lane-change":
        return base + amp * np.sin(np.pi * s) ** 2, amp * np.pi * np.sin(2 * np.pi * s)
    if kind == "curved":
        return base + amp * (1 - s) ** 2, -2 * amp * (1 - s)
    raise ValueError(f"unknown trajectory kind {kind!r}")


def make_trajectory(
    config,
    kind="straight",
    frames=100,
    seed=0,
    start=None,
    end=None,
    lateral=None,
    amplitude=None,
    warp=None,
):
    """Vehicle route approaching the sign.

    Distance to the sign (along the road) decreases monotonically from
    ``start`` to ``end`` metres; unspecified shape parameters are drawn from
    the seed.
    """
    if frames < SEGMENT_LENGTH:
        raise ValueError(f"need at least {SEGMENT_LENGTH} frames, got {frames}")
    if kind not in TRAJECTORY_KINDS:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    rng = seeding.rng(seed, "trajectory", kind)
    start = float(rng.uniform(14.0, 16.0) if start is None else start)
    end = float(rng.uniform(6.5, 7.5) if end is None else end)
    if not start > end > 0:
        raise ValueError("require start distance > end distance > 0")
    base = float(rng.uniform(-0.5, 0.5) if lateral is None else lateral)
    if amplitude is None:
        amplitude = ROUTE_AMPLITUDE[kind]
        amplitude *= float(rng.uniform(0.6, 1.0)) * (1 if rng.random() < 0.5 else -1)
    warp = float(rng.uniform(0.85, 1.2) if warp is None else warp)

    s = (np.arange(frames) / (frames - 1)) ** warp
    dist = start - (start - end) * s
    x, dx_ds = _profile(kind, s, base, amplitude)
    # chain rule: dx/dy = dx/ds * ds/dy, with dy/ds = start - end
    heading = -np.arctan(dx_ds / (start - end))
    sign_y = config.sign_center[1]
    poses = [
        Pose(np.array([x[t], sign_y - dist[t], 0.0]), float(heading[t]), t) for t in range(frames)
    ]
    speed = -np.diff(dist)
    params = dict(start=start, end=end, lateral=base, amplitude=float(amplitude), warp=warp)
    return Trajectory(kind, poses, speed, params)


# ---------------------------------------------------------------------------
# projections


@dataclass
class AttackerObservation:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    clamped: bool = False

    def as_array(self):
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])


@dataclass
class SignGeometry:
    x_center: float
    y_center: float
    a: float
    b: float
    delta: float
    shape: str = "circle"

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError(f"require a >= b > 0, got a={self.a}, b={self.b}")
        if not 0.0 <= self.delta < math.pi:
            raise ValueError(f"delta {self.delta} outside [0, pi)")
        if not (math.isfinite(self.x_center) and math.isfinite(self.y_center)):
            raise ValueError("centre must be finite")

    def as_array(self):
        return np.array([self.x_center, self.y_center, self.a, self.b, self.delta])

    @property
    def axis_a(self):
        return np.array([math.cos(self.delta), -math.sin(self.delta)])

    @property
    def axis_b(self):
        return np.array([math.sin(self.delta), math.cos(self.delta)])

    def affine(self):
        """2x2 matrix sending the unit circle onto this ellipse (about the centre)."""
        return np.column_stack([self.a * self.axis_a, self.b * self.axis_b])

    def boundary(self, n=64):
        t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        pts = np.stack([np.cos(t), np.sin(t)], axis=-1) @ self.affine().T
        return pts + [self.x_center, self.y_center]

    def half_extents(self):
        c, s = math.cos(self.delta), math.sin(self.delta)
        return math.hypot(self.a * c, self.b * s), math.hypot(self.a * s, self.b * c)

    def shifted(self, dx, dy):
        return replace(self, x_center=self.x_center + dx, y_center=self.y_center + dy)


def canonical_geometry(xc, yc, a, b, delta, shape="circle"):
    """Normalize ``a >= b`` (swap with delta += pi/2) and wrap delta into [0, pi).

    A circular outline has no orientation, so its delta becomes 0; this keeps
    masks bit-identical under rotation, where sin/cos rounding would
    otherwise flip pixels lying exactly on the boundary.
    """
    if a == b and shape == "circle":
        return SignGeometry(float(xc), float(yc), float(a), float(b), 0.0, shape)
    if a < b:
        a, b = b, a
        delta = delta + math.pi / 2
    delta = math.fmod(delta, math.pi)
    if delta < 0:
        delta += math.pi
    if delta >= math.pi:
        delta = 0.0
    return SignGeometry(float(xc), float(yc), float(a), float(b), float(delta), shape)


def vehicle_corners(config, pose):
    length, width, height = config.vehicle_dims
    f, r = pose.forward, pose.right
    corners = []
    for sl in (-0.5, 0.5):
        for sw in (-0.5, 0.5):
            for h in (0.0, height):
                corners.append(pose.position + sl * length * f + sw * width * r + h * UP)
    return np.array(corners)


def project_vehicle_bbox(config, pose, camera=None):
    """Tight image-space box of the vehicle in the fixed attacker camera."""
    cam = camera or config.attacker_camera()
    px, depth = cam.project(vehicle_corners(config, pose))
    front = depth > 1e-6
    if not np.any(front):
        raise VisibilityError("vehicle is entirely behind the attacker camera")
    px = px[front]
    x0, y0 = px.min(axis=0)
    x1, y1 = px.max(axis=0)
    W, H = cam.width, cam.height
    cx0, cy0 = min(max(x0, 0.0), W), min(max(y0, 0.0), H)
    cx1, cy1 = min(max(x1, 0.0), W), min(max(y1, 0.0), H)
    clamped = (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1) or not np.all(front)
    if not (cx0 < cx1 and cy0 < cy1):
        raise VisibilityError("vehicle box falls outside the attacker image")
    return AttackerObservation(float(cx0), float(cy0), float(cx1), float(cy1), bool(clamped))


def victim_camera(config, pose):
    fwd = pose.forward
    pos = pose.position + config.mount_forward * fwd + config.mount_height * UP
    yaw = pose.heading - config.mount_yaw
    cp = math.cos(config.mount_pitch)
    direction = np.array([-math.sin(yaw) * cp, math.cos(yaw) * cp, math.sin(config.mount_pitch)])
    w, h = config.victim_size
    return Camera(pos, look_rotation(direction), float(config.victim_focal), int(w), int(h))


def sign_boundary_world(config, n=SIGN_BOUNDARY_POINTS, shape=None):
    """World points on the sign outline (circle, or circumscribed octagon vertices densified)."""
    right, up = config.sign_axes()
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    if (shape or "circle") == "octagon":
        # polygon with circumradius 1 and flat top: vertices at pi/8 + k pi/4
        k = np.floor((t - np.pi / 8) / (np.pi / 4))
        a0 = np.pi / 8 + k * np.pi / 4
        a1 = a0 + np.pi / 4
        w = (t - a0) / (np.pi / 4)
        q = (1 - w)[:, None] * np.stack([np.cos(a0), np.sin(a0)], -1) + w[:, None] * np.stack(
            [np.cos(a1), np.sin(a1)], -1
        )
    else:
        q = np.stack([np.cos(t), np.sin(t)], axis=-1)
    c = np.asarray(config.sign_center, dtype=np.float64)
    r = config.sign_radius
    return c + r * (q[:, :1] * right + q[:, 1:] * up), q


def _check_view(config, cam, max_angle_deg=85.0):
    n = np.asarray(config.sign_normal, dtype=np.float64)
    to_cam = cam.position - np.asarray(config.sign_center, dtype=np.float64)
    dist = np.linalg.norm(to_cam)
    cosang = float(np.dot(n, to_cam) / dist)
    if cosang <= math.cos(math.radians(max_angle_deg)):
        raise DegeneracyError(f"grazing view of the sign ({math.degrees(math.acos(max(-1, min(1, cosang)))):.1f} deg)")


def project_sign_geometry(config, pose, n=SIGN_BOUNDARY_POINTS, camera=None):
    """Victim-view ellipse of the sign disk (circumcircle for octagons)."""
    cam = camera or victim_camera(config, pose)
    _check_view(config, cam)
    pts, _ = sign_boundary_world(config, n)
    px, depth = cam.project(pts)
    if np.any(depth <= 1e-6):
        raise VisibilityError("sign is not in front of the victim camera")
    geom = fit_ellipse(px)
    return replace(geom, shape=config.shape)


def sign_plane_affine(config, pose, camera=None):
    """Least-squares affine map (sign-plane unit-disk coords -> pixels), as (A, c)."""
    cam = camera or victim_camera(config, pose)
    pts, q = sign_boundary_world(config, SIGN_BOUNDARY_POINTS)
    px, _ = cam.project(pts)
    X = np.column_stack([q, np.ones(len(q))])
    sol, *_ = np.linalg.lstsq(X, px, rcond=None)
    return sol[:2].T, sol[2]


# ---------------------------------------------------------------------------
# ellipse fitting


def fit_ellipse(points):
    """Direct least-squares ellipse fit (constrained 4AC - B^2 = 1).

    Uses the numerically stable block formulation on isotropically
    normalized points, then converts the conic to centre, semi-axes
    (``a >= b``) and rotation in the module's pixel convention.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 6:
        raise FitError("need at least 6 two-dimensional points")
    mean = pts.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum((pts - mean) ** 2, axis=1)))
    if not scale > 0:
        raise FitError("points are coincident")
    x = (pts[:, 0] - mean[0]) / scale
    y = (pts[:, 1] - mean[1]) / scale
    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones_like(x)])
    S1, S2, S3 = D1.T @ D1, D1.T @ D2, D2.T @ D2
    if np.linalg.cond(S3) > 1e12:
        raise FitError("points are collinear")
    T = -np.linalg.solve(S3, S2.T)
    M = S1 + S2 @ T
    M = np.array([M[2] / 2.0, -M[1], M[0] / 2.0])
    evals, evecs = np.linalg.eig(M)
    evecs = np.real(evecs)
    cond = 4 * evecs[0] * evecs[2] - evecs[1] ** 2
    ok = np.where(cond > 0)[0]
    if len(ok) == 0:
        raise FitError("no elliptical solution (degenerate point set)")
    a1 = evecs[:, ok[np.argmax(cond[ok])]]
    A, B, C = a1
    Dc, Ec, Fc = T @ a1
    return _conic_to_geometry(A, B, C, Dc, Ec, Fc, mean, scale)


def _conic_to_geometry(A, B, C, D, E, F, mean, scale):
    Q = np.array([[A, B / 2.0], [B / 2.0, C]])
    try:
        centre = np.linalg.solve(2 * Q, [-D, -E])
    except np.linalg.LinAlgError as exc:
        raise FitError("conic has no centre") from exc
    Fc = F + 0.5 * (D * centre[0] + E * centre[1])
    lam, vec = np.linalg.eigh(Q)
    if not (lam[0] * lam[1] > 0 and -Fc / lam[0] > 0):
        raise FitError("fitted conic is not a real ellipse")
    axes = np.sqrt(-Fc / lam)  # lam ascending -> axes descending
    a, b = float(axes[0]) * scale, float(axes[1]) * scale
    ex, ey = vec[:, 0]
    delta = math.atan2(-ey, ex)
    xc, yc = centre * scale + mean
    return canonical_geometry(xc, yc, a, b, delta)


# ---------------------------------------------------------------------------
# rendering


@dataclass
class FrameRecord:
    t: int
    image: np.ndarray  # (H, W, 3) float32, values k / 255
    geometry: SignGeometry
    observation: AttackerObservation
    label: str
    mask: np.ndarray  # (H, W) bool
    route: int = 0
    pose: Pose = None

    @property
    def frame_id(self):
        return f"r{self.route:02d}_t{self.t:03d}"


def quantize(img):
    """Sensor capture: round to 8-bit levels, returned as float32 in [0, 1]."""
    return to_float(to_uint8(img))


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def to_float(img_u8):
    return img_u8.astype(np.float32) / np.float32(255.0)


def background(width, height, horizon=None):
    horizon = height * 0.45 if horizon is None else horizon
    j = np.arange(height, dtype=np.float64)[:, None, None]
    sky_top = np.array([0.42, 0.58, 0.82])
    sky_bot = np.array([0.70, 0.78, 0.88])
    road_top = np.array([0.46, 0.47, 0.45])
    road_bot = np.array([0.30, 0.30, 0.31])
    w_sky = np.clip(j / max(horizon, 1.0), 0, 1)
    sky = sky_top + (sky_bot - sky_top) * w_sky
    w_road = np.clip((j - horizon) / max(height - horizon, 1.0), 0, 1)
    road = road_top + (road_bot - road_top) * w_road
    img = np.where(j < horizon, sky, road)
    return np.broadcast_to(img, (height, width, 3)).copy()


def bilinear_sample(tex, tx, ty):
    """Sample an (H, W, C) texture at float texel coords with edge clamping."""
    h, w = tex.shape[:2]
    tx = np.clip(tx, 0.0, w - 1.0)
    ty = np.clip(ty, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(tx).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(ty).astype(np.int64), h - 2)
    fx = (tx - x0)[..., None]
    fy = (ty - y0)[..., None]
    top = tex[y0, x0] * (1 - fx) + tex[y0, x0 + 1] * fx
    bot = tex[y0 + 1, x0] * (1 - fx) + tex[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def texture_rotation(geom, true_affine=None):
    """Orthogonal 2x2 R with geom.affine() @ R closest to the true sign affine.

    For octagons the rotation angle snaps to the polygon's symmetry group so
    the drawn outline coincides with the octagon mask.
    """
    if true_affine is None:
        return np.array([[1.0, 0.0], [0.0, -1.0]])
    M = np.linalg.solve(geom.affine(), true_affine)
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if geom.shape == "octagon":
        refl = np.diag([1.0, np.sign(np.linalg.det(R))])
        rot = R @ refl
        ang = math.atan2(rot[1, 0], rot[0, 0])
        ang = round(ang / (math.pi / 4)) * (math.pi / 4)
        c, s = math.cos(ang), math.sin(ang)
        R = np.array([[c, -s], [s, c]]) @ refl
    return R


def draw_sign(img, geom, texture, rotation, mask, supersample=4):
    """Paint the texture onto ``img`` inside ``mask`` via the ellipse's affine map.

    Each pixel averages ``supersample**2`` bilinear lookups so that far,
    minified signs do not alias.
    """
    jj, ii = np.nonzero(mask)
    if len(ii) == 0:
        return img
    A = geom.affine() @ rotation
    Ainv = np.linalg.inv(A)
    size = texture.shape[0]
    half = size / 2.0
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    acc = np.zeros((len(ii), texture.shape[2]))
    for oy in offs:
        for ox in offs:
            q = Ainv @ np.stack([ii + ox - geom.x_center, jj + oy - geom.y_center])
            tx = (size - 1) / 2.0 + half * q[0]
            ty = (size - 1) / 2.0 - half * q[1]
            acc += bilinear_sample(texture, tx, ty)
    img[jj, ii] = acc / supersample**2
    return img


@dataclass(frozen=True)
class RenderStyle:
    illumination: float = 1.0
    noise_sigma: float = 0.0


def render_frame(config, pose, texture=None, style=RenderStyle(), rng=None, route=0):
    """Render the victim-view frame with its ground-truth geometry and mask."""
    from . import percept  # mask rasterization lives with perception

    cam = victim_camera(config, pose)
    geom = project_sign_geometry(config, pose, camera=cam)
    obs = project_vehicle_bbox(config, pose)
    W, H = config.victim_size
    # horizon: row where a level ray from the camera lands
    horizon = cam.cy - cam.focal * math.tan(config.mount_pitch)
    img = background(W, H, horizon)
    if texture is None:
        texture = textures.make_texture(config.label)
    mask = percept.shape_mask(geom, H, W)
    if not mask.any():
        raise VisibilityError("sign does not cover any pixel")
    A_true, _ = sign_plane_affine(config, pose, camera=cam)
    draw_sign(img, geom, texture, texture_rotation(geom, A_true), mask)
    img *= style.illumination
    if style.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        img += rng.normal(0.0, style.noise_sigma, size=img.shape)
    return FrameRecord(pose.t, quantize(np.clip(img, 0, 1)), geom, obs, config.label, mask, route, pose)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetConfig:
    routes: int = 9
    held_out: int = 1
    frames: int = 100
    noise_sigma: float = 0.012
    illumination: tuple = (0.85, 1.05)
    route_kinds: tuple = ("straight",)


@dataclass
class Dataset:
    label: str
    world: WorldConfig
    trajectories: list
    frames: list  # list of FrameRecord
    train_routes: list
    test_routes: list

    def split(self, which):
        routes = set(self.train_routes if which == "train" else self.test_routes)
        return [f for f in self.frames if f.route in routes]

    @property
    def train(self):
        return self.split("train")

    @property
    def test(self):
        return self.split("test")


ROUTE_RANGES = {"start": (14.0, 16.0), "end": (6.5, 7.5), "lateral": (-0.5, 0.5)}


def default_routes(config, n_routes, frames, seed, kinds=("straight",), held_out=1):
    """Routes cycling through ``kinds``, each with its own seed.

    Training routes spread (start, end, lateral) over a Latin hypercube so
    they span the ranges; held-out routes draw from the inner 70% of each
    range, so testing interpolates between training routes.
    """
    if held_out >= n_routes:
        raise ValueError("held_out must leave at least one training route")
    n_train = n_routes - held_out
    rng = seeding.rng(seed, "route-layout")
    values = {}
    for key, (lo, hi) in ROUTE_RANGES.items():
        strata = (rng.permutation(n_train) + rng.uniform(0.0, 1.0, n_train)) / n_train
        inner = 0.15 + 0.7 * rng.uniform(0.0, 1.0, held_out)
        values[key] = lo + (hi - lo) * np.concatenate([strata, inner])
    out = []
    for r in range(n_routes):
        kind = kinds[r % len(kinds)]
        out.append(
            make_trajectory(
                config,
                kind,
                frames,
                seeding.child_seed(seed, "route", r),
                start=float(values["start"][r]),
                end=float(values["end"][r]),
                lateral=float(values["lateral"][r]),
            )
        )
    return out


def generate_dataset(config, trajectories, seed, held_out=1, style=None):
    """Render every trajectory; the last ``held_out`` routes form the test split."""
    if len(trajectories) < 2:
        raise ValueError("need at least two trajectories")
    if not 1 <= held_out < len(trajectories):
        raise ValueError("held_out must leave at least one training route")
    if any(len(tr) < SEGMENT_LENGTH for tr in trajectories):
        raise ValueError("every trajectory needs at least one segment of frames")
    style = style or DatasetConfig()
    texture = textures.make_texture(config.label)
    frames = []
    for r, traj in enumerate(trajectories):
        lo, hi = style.illumination
        illum = float(seeding.rng(seed, config.label, "illum", r).uniform(lo, hi))
        rs = RenderStyle(illum, style.noise_sigma)
        for pose in traj.poses:
            noise_rng = seeding.rng(seed, config.label, "noise", r, pose.t)
            frames.append(render_frame(config, pose, texture, rs, noise_rng, route=r))
    n = len(trajectories)
    return Dataset(
        config.label,
        config,
        list(trajectories),
        frames,
        list(range(n - held_out)),
        list(range(n - held_out, n)),
    )
