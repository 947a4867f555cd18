import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from elasim import classify, scene, seeding  # noqa: E402
from elasim.textures import SIGN_CLASSES  # noqa: E402


@pytest.fixture(scope="session")
def sign_data():
    """Small rendered datasets for every class plus packed ground-truth crops.

    Five 20-frame routes per class; the last route is held out and routes
    0 and 1 form a half-size training split.
    """
    datasets, train, test, half = {}, [], [], []
    for li, label in enumerate(SIGN_CLASSES):
        world = scene.WorldConfig(label=label)
        seed = seeding.child_seed(11, "cls", label)
        ds = scene.generate_dataset(world, scene.default_routes(world, 5, 20, seed), seed)
        datasets[label] = ds
        for f in ds.frames:
            item = (classify.crop_sign(f.image, f.geometry), li, f)
            if f.route in ds.test_routes:
                test.append(item)
            else:
                train.append(item)
                if f.route < 2:
                    half.append(item)

    def pack(items):
        return np.array([c for c, _, _ in items], np.float32), np.array([y for _, y, _ in items])

    return {
        "datasets": datasets,
        "train": pack(train),
        "test": pack(test),
        "half": pack(half),
        "frames": [f for _, _, f in test],
    }
