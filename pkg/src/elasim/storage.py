"""On-disk formats: PPM/PGM images, key=value sidecars, CSV tables and datasets.

Floats are written with ``repr`` so every value round-trips exactly.
"""
from __future__ import annotations

import csv
import io
import json
import os

import numpy as np

from . import scene
from .percept import shape_mask

# ---------------------------------------------------------------------------
# netpbm


def write_ppm(path, image):
    """Binary P6, 8 bits per channel. ``image`` is float in [0, 1] or uint8 (H, W, 3)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    u8 = img if img.dtype == np.uint8 else scene.to_uint8(img)
    h, w = u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(u8).tobytes())


def write_pgm(path, image):
    """Binary P5 greyscale; float input in [0, 1] is scaled to 8 bits."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs an (H, W) image, got {img.shape}")
    u8 = img if img.dtype == np.uint8 else scene.to_uint8(img)
    h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(u8).tobytes())


def _read_netpbm(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r}, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    return data[pos + 1 :], w, h


def read_ppm(path):
    """uint8 (H, W, 3)."""
    raw, w, h = _read_netpbm(path, b"P6")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


def read_pgm(path):
    raw, w, h = _read_netpbm(path, b"P5")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# key = value text


def fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list, np.ndarray)):
        return " ".join(fmt(x) for x in v)
    return str(v)


def write_kv(path, items):
    with open(path, "w") as fh:
        for k, v in items:
            fh.write(f"{k} = {fmt(v)}\n")


def read_kv(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def floats(text):
    return [float(x) for x in text.split()]


# ---------------------------------------------------------------------------
# tables


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_json(path, obj):
    """Sorted keys and fixed indentation so equal content gives equal bytes."""
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# datasets


def _route_dir(root, r):
    return os.path.join(root, f"route_{r:02d}")


def save_dataset(root, ds):
    """One directory per route holding ``tTTT.ppm`` frames and ``tTTT.txt`` sidecars.

    ``manifest.txt`` records the class label, the splits and each route's
    shape parameters.
    """
    os.makedirs(root, exist_ok=True)
    items = [
        ("label", ds.label),
        ("routes", len(ds.trajectories)),
        ("train", ds.train_routes),
        ("test", ds.test_routes),
    ]
    for r, tr in enumerate(ds.trajectories):
        items.append((f"route.{r}.kind", tr.kind))
        for k in sorted(tr.params):
            items.append((f"route.{r}.{k}", tr.params[k]))
    write_kv(os.path.join(root, "manifest.txt"), items)
    for f in ds.frames:
        d = _route_dir(root, f.route)
        os.makedirs(d, exist_ok=True)
        write_ppm(os.path.join(d, f"t{f.t:03d}.ppm"), f.image)
        g, o = f.geometry, f.observation
        write_kv(
            os.path.join(d, f"t{f.t:03d}.txt"),
            [
                ("t", f.t),
                ("route", f.route),
                ("label", f.label),
                ("bbox", o.as_array()),
                ("bbox_clamped", o.clamped),
                ("ellipse", g.as_array()),
                ("shape", g.shape),
                ("pose_position", f.pose.position),
                ("pose_heading", f.pose.heading),
            ],
        )


def load_dataset(root):
    man = read_kv(os.path.join(root, "manifest.txt"))
    label = man["label"]
    n = int(man["routes"])
    world = scene.WorldConfig(label=label)
    trajectories, frames = [], []
    for r in range(n):
        d = _route_dir(root, r)
        poses = []
        names = sorted(x for x in os.listdir(d) if x.endswith(".txt"))
        for name in names:
            kv = read_kv(os.path.join(d, name))
            t = int(kv["t"])
            xc, yc, a, b, delta = floats(kv["ellipse"])
            geom = scene.SignGeometry(xc, yc, a, b, delta, kv["shape"])
            obs = scene.AttackerObservation(*floats(kv["bbox"]), clamped=kv["bbox_clamped"] == "true")
            pose = scene.Pose(np.array(floats(kv["pose_position"])), float(kv["pose_heading"]), t)
            image = scene.to_float(read_ppm(os.path.join(d, name[:-4] + ".ppm")))
            H, W = image.shape[:2]
            frames.append(scene.FrameRecord(t, image, geom, obs, label, shape_mask(geom, H, W), r, pose))
            poses.append(pose)
        params = {}
        for k, v in man.items():
            prefix = f"route.{r}."
            if k.startswith(prefix) and k != prefix + "kind":
                params[k[len(prefix) :]] = float(v)
        dist = np.array([world.sign_y - p.position[1] for p in poses])
        trajectories.append(scene.Trajectory(man[f"route.{r}.kind"], poses, -np.diff(dist), params))
    train = [int(x) for x in man["train"].split()]
    test = [int(x) for x in man["test"].split()]
    return scene.Dataset(label, world, trajectories, frames, train, test)
