"""Desk-scale datasets: the bundled 8x8 handwritten digits and synthetic
two-moons for the fastest checks."""

from __future__ import annotations

import numpy as np

from ..coopt import TestSplit, TrainSplit


def digits_split(seed=0, n_train=1300, binary=False):
    """8x8 digits, scaled to [0, 1] (or thresholded to {0, 1})."""
    from sklearn.datasets import load_digits
    d = load_digits()
    x = d.data / 16.0
    if binary:
        x = (d.data >= 8).astype(float)
    y = d.target
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(x))
    tr, te = idx[:n_train], idx[n_train:]
    return TrainSplit(x[tr], y[tr]), TestSplit(x[te], y[te])


def two_moons_split(seed=0, n=600, noise=0.15):
    from sklearn.datasets import make_moons
    x, y = make_moons(n_samples=n, noise=noise, random_state=seed)
    x = (x - x.min(axis=0)) / (x.max(axis=0) - x.min(axis=0))
    n_train = int(0.8 * n)
    return (TrainSplit(x[:n_train], y[:n_train]),
            TestSplit(x[n_train:], y[n_train:]))
