"""Deterministic small networks and images shared by the test modules."""

import numpy as np

from vfcert.imaging import Image
from vfcert.verifier import Network


def random_dense_net(seed, sizes=(36, 8, 8, 3), bias_scale=0.1):
    """Fully connected ReLU net with N(0, 1/fan_in) weights."""
    rng = np.random.default_rng(seed)
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append({"kind": "dense", "weights": (rng.normal(size=(b, a)) / np.sqrt(a)).tolist(),
                       "bias": (bias_scale * rng.normal(size=b)).tolist()})
        layers.append({"kind": "relu"})
    return Network(layers[:-1], [sizes[0]])


def random_image(seed, width=6, channels=1, smooth=True):
    """Random image in [0, 1]; ``smooth`` blurs it so deformations matter less abruptly."""
    rng = np.random.default_rng(10_000 + seed)
    px = rng.uniform(size=(width, width, channels))
    if smooth:
        pad = np.pad(px, ((1, 1), (1, 1), (0, 0)), mode="edge")
        px = sum(pad[1 + di:1 + di + width, 1 + dj:1 + dj + width] for di in (-1, 0, 1) for dj in (-1, 0, 1)) / 9.0
    return Image(px)
