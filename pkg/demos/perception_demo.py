"""Fit a small perspective network for one class and compare predicted and true sign masks.

Prints the held-out mIOU and writes side-by-side PGM masks for a far, middle and near frame.
"""
import os
import sys

import numpy as np

from elasim import percept, scene, storage

label = sys.argv[1] if len(sys.argv) > 1 else "90"
out = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out, exist_ok=True)

world = scene.WorldConfig(label=label)
ds = scene.generate_dataset(world, scene.default_routes(world, 6, 40, seed=4), seed=4)
res = percept.ptn_train(ds.train, percept.PTNConfig(), seed=4)
miou, scores, geoms = percept.evaluate_miou(res.model, ds.test)
print(f"class {label}: loss {res.initial_loss:.4f} -> {res.final_loss:.4f}, held-out mIOU {miou:.4f}")

for k in (0, len(ds.test) // 2, len(ds.test) - 1):
    f, g = ds.test[k], geoms[k]
    h, w = f.mask.shape
    pred = percept.shape_mask(g, h, w)
    pair = np.concatenate([f.mask, np.ones((h, 2), bool), pred], axis=1)
    path = os.path.join(out, f"ptn_{label}_{f.frame_id}.pgm")
    storage.write_pgm(path, (pair * 255).astype(np.uint8))
    print(f"{f.frame_id}: IOU {scores[k]:.3f} -> {path}")
