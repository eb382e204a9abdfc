"""Image-recovery workload: a restricted Boltzmann machine trained in
software (CD-1) and run bidirectionally on the simulated chip to repair
corrupted binary images via Gibbs sampling with pixel clamping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..chip import gibbs_step, program_rbm
from ..lfsr import LfsrPair


@dataclass
class RbmModel:
    """Weights couple visible units (pixels, plus optional one-hot labels)
    to hidden units; a and b are the visible and hidden biases."""

    w: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.w.shape != (self.a.size, self.b.size):
            raise ValueError("weight shape must be (visible, hidden)")

    @property
    def n_visible(self):
        return self.a.size

    @property
    def n_hidden(self):
        return self.b.size


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def cd1_train_rbm(data, n_hidden, epochs, lr, rng, batch_size=32):
    """Contrastive-divergence (one-step) training in exact software
    arithmetic.

    Visible biases start at the data log-odds. Returns the model and the
    per-epoch training reconstruction error; raises on divergence.
    """
    data = np.asarray(data, dtype=float)
    if not np.all((data == 0) | (data == 1)):
        raise ValueError("CD-1 expects binarized data")
    n_vis = data.shape[1]
    w = rng.normal(0.0, 0.1, (n_vis, n_hidden))
    p_on = data.mean(axis=0).clip(0.01, 0.99)
    a = np.log(p_on / (1 - p_on))
    b = np.zeros(n_hidden)
    errors = []
    for _ in range(max(epochs, 0)):
        order = rng.permutation(len(data))
        total = 0.0
        for lo in range(0, len(data), batch_size):
            v0 = data[order[lo:lo + batch_size]]
            ph0 = _sigmoid(v0 @ w + b)
            h0 = (ph0 > rng.random(ph0.shape)).astype(float)
            pv1 = _sigmoid(h0 @ w.T + a)
            v1 = (pv1 > rng.random(pv1.shape)).astype(float)
            ph1 = _sigmoid(v1 @ w + b)
            n = len(v0)
            w += lr * (v0.T @ ph0 - v1.T @ ph1) / n
            a += lr * (v0 - v1).mean(axis=0)
            b += lr * (ph0 - ph1).mean(axis=0)
            total += float(np.sum((v0 - pv1) ** 2))
        if np.any(np.isnan(w)):
            raise RuntimeError("CD-1 diverged")
        errors.append(total / len(data))
    return RbmModel(w, a, b), errors


def deploy_rbm(chip, model, core_ids, g_min=1.0, g_max=30.0, iterations=3,
               **kw):
    """Program the model across cores with the adjacent-pixel interleave."""
    return program_rbm(chip, model.w, model.a, model.b, core_ids,
                       g_min=g_min, g_max=g_max, iterations=iterations, **kw)


def corrupt_flip(image, fraction, rng):
    """Flip a random fraction of pixels; returns (corrupted, known_mask)."""
    image = np.asarray(image)
    flip = rng.random(image.size) < fraction
    out = image.copy()
    out[flip] = 1 - out[flip]
    return out, ~flip


def gibbs_recover(chip, rbm, corrupted, known_mask, cycles=10, pair=None,
                  clamp_labels=None, trace=None):
    """Repair a binary image: alternate hidden/visible sampling on the
    chip and reset the known pixels after every cycle.

    `known_mask` marks the uncorrupted pixels (clamped each cycle). When
    label units exist and `clamp_labels` is given, they are clamped too;
    otherwise label units run free. Returns the visible state after
    `cycles`.
    """
    corrupted = np.asarray(corrupted).astype(np.int64)
    known_mask = np.asarray(known_mask, dtype=bool)
    n_pix = known_mask.size
    if corrupted.size != rbm.n_visible:
        raise ValueError("image size does not match visible units")
    if n_pix > rbm.n_visible:
        raise ValueError("mask larger than visible layer")
    pair = pair or LfsrPair.from_seed(chip.seed)
    v = corrupted.copy()
    for _ in range(cycles):
        _, v = gibbs_step(chip, rbm, v, pair, trace=trace)
        v[:n_pix][known_mask] = corrupted[:n_pix][known_mask]
        if clamp_labels is not None:
            v[n_pix:] = clamp_labels
    return v


def l2_error(a, b):
    return float(np.linalg.norm(np.asarray(a, dtype=float) -
                                np.asarray(b, dtype=float)))


def recovery_experiment(chip, rbm, images, flip_fraction, cycles, seed,
                        trace=None):
    """Corrupt, recover, and score a batch of images.

    Returns (mean recovered L2 error, mean corruption L2 error).
    """
    rng = np.random.default_rng(seed)
    pair = LfsrPair.from_seed(seed)
    rec, cor = [], []
    for img in images:
        corrupted, known = corrupt_flip(img, flip_fraction, rng)
        out = gibbs_recover(chip, rbm, corrupted, known, cycles=cycles,
                            pair=pair, trace=trace)
        rec.append(l2_error(out, img))
        cor.append(l2_error(corrupted, img))
    return float(np.mean(rec)), float(np.mean(cor))
