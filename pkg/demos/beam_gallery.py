"""Render one held-out style frame per sign class, then light a STOP sign with a few beams.

Writes PPM files to ``demos/out`` (or the directory given as the first argument).
"""
import math
import os
import sys

from elasim import laser, scene, seeding, storage
from elasim.textures import SIGN_CLASSES

out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out, exist_ok=True)

for label in SIGN_CLASSES:
    world = scene.WorldConfig(label=label)
    route = scene.make_trajectory(world, "straight", 40, seed=1)
    frame = scene.render_frame(world, route.poses[30], rng=seeding.rng(1, "demo", label))
    storage.write_ppm(os.path.join(out, f"clean_{label}.ppm"), scene.to_uint8(frame.image))

world = scene.WorldConfig(label="STOP")
frame = scene.render_frame(world, scene.make_trajectory(world, "straight", 40, seed=1).poses[30], rng=seeding.rng(1, "demo"))
anchor = (frame.geometry.x_center, frame.geometry.y_center)
beams = [
    laser.LaserParams(math.pi / 2, 4.0, 450.0),
    laser.LaserParams(math.pi / 4, 8.0, 520.0),
    laser.LaserParams(0.0, 6.0, 600.0),
    laser.LaserParams(3 * math.pi / 4, 12.0, 680.0),
]
for k, p in enumerate(beams):
    lit = laser.composite(frame.image, frame.mask, p, anchor)
    name = f"stop_beam{k}_phi{p.phi:.2f}_w{p.omega:g}_l{p.wavelength:g}.ppm"
    storage.write_ppm(os.path.join(out, name), scene.to_uint8(lit))
    print(name, "slope", p.slope_text())
print("wrote", out)
