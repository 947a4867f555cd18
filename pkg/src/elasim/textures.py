"""Canonical 64x64 sign textures drawn from a tiny bitmap font."""
import numpy as np

SIZE = 64

SIGN_CLASSES = ("30", "60", "70", "80", "90", "100", "STOP")

# 5x7 glyphs, '#' = ink
_GLYPHS = {
    "0": [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    "1": ["..#..", ".##..", "#.#..", "..#..", "..#..", "..#..", "#####"],
    "3": ["####.", "....#", "....#", ".###.", "....#", "....#", "####."],
    "6": [".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."],
    "7": ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    "8": [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    "9": [".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."],
    "S": [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
    "T": ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
    "O": [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    "P": ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
}

WHITE = np.array([0.86, 0.86, 0.84])
RED = np.array([0.78, 0.08, 0.10])
INK = np.array([0.08, 0.08, 0.09])


def _glyph_mask(text, cell):
    cols = []
    for k, ch in enumerate(text):
        g = np.array([[c == "#" for c in row] for row in _GLYPHS[ch]])
        cols.append(g)
        if k + 1 < len(text):
            cols.append(np.zeros((7, 1), dtype=bool))
    bitmap = np.concatenate(cols, axis=1)
    return np.kron(bitmap, np.ones((cell, cell), dtype=bool))


def _stamp(tex, text, cell, color, centre=(SIZE / 2, SIZE / 2)):
    mask = _glyph_mask(text, cell)
    h, w = mask.shape
    y0 = int(round(centre[1] - h / 2))
    x0 = int(round(centre[0] - w / 2))
    tex[y0 : y0 + h, x0 : x0 + w][mask] = color


def _texel_radius():
    c = (SIZE - 1) / 2.0
    y, x = np.mgrid[0:SIZE, 0:SIZE]
    # texture spans the unit disk: q = (x - c) / (SIZE / 2)
    return np.hypot(x - c, y - c) / (SIZE / 2.0)


def speed_sign(text):
    r = _texel_radius()
    tex = np.empty((SIZE, SIZE, 3))
    tex[:] = WHITE
    tex[r > 0.80] = RED
    cell = 4 if len(text) == 2 else 3
    _stamp(tex, text, cell, INK)
    return tex


def stop_sign():
    c = (SIZE - 1) / 2.0
    y, x = np.mgrid[0:SIZE, 0:SIZE]
    qx = (x - c) / (SIZE / 2.0)
    qy = -(y - c) / (SIZE / 2.0)
    angles = np.arange(8) * np.pi / 4
    poly = np.max(qx[..., None] * np.cos(angles) + qy[..., None] * np.sin(angles), axis=-1)
    poly /= np.cos(np.pi / 8)
    tex = np.empty((SIZE, SIZE, 3))
    tex[:] = RED
    tex[(poly > 0.86) & (poly <= 0.93)] = WHITE
    _stamp(tex, "STOP", 2, WHITE)
    return tex


def make_texture(label):
    if label == "STOP":
        return stop_sign()
    if label not in SIGN_CLASSES:
        raise ValueError(f"unknown sign class {label!r}")
    return speed_sign(label)


def shape_of(label):
    return "octagon" if label == "STOP" else "circle"
