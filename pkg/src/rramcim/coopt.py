"""Hardware-algorithm co-optimization against the simulated chip:
model-driven calibration, noise-resilient training of quantized MLPs, and
chip-in-the-loop progressive fine-tuning.

Training keeps high-precision float weights and injects fresh Gaussian
weight noise (a fraction of each layer's max |w|) into every forward pass;
activations are clipped and quantized with straight-through gradients so
the software model matches what the chip executes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import chip as chipmod
from . import mapper
from .chip import ExecParams, execute_layer, program_chip
from .core import round_half_away


@dataclass
class TrainSplit:
    """Training-set handle. Calibration and fine-tuning accept only this
    type, which keeps test data out of the loop by construction."""

    x: np.ndarray
    y: np.ndarray


@dataclass
class TestSplit:
    x: np.ndarray
    y: np.ndarray


@dataclass
class TrainConfig:
    noise_fraction: float = 0.0   # p: weight noise as fraction of max|w|
    lr: float = 0.05
    epochs: int = 40
    input_bits: int = 4
    act_bits: int = 4
    act_clip: float = 2.0         # fixed clipping level for hidden relus
    w_clip: float = 1.0           # hard weight range (conductance-mappable)
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0
    finetune_epochs: int = 12     # <= 30
    finetune_lr_div: float = 100.0

    def __post_init__(self):
        if self.noise_fraction < 0:
            raise ValueError("noise fraction must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


class TrainingDiverged(RuntimeError):
    pass


class QuantMLP:
    """Dense relu network with clipped, quantized activations.

    Inputs are expected in [0, 1]; every activation (input included) is
    quantized to `act_bits`-wide non-negative codes, mirroring the chip's
    requantization grid. Weights stay float.
    """

    def __init__(self, sizes, cfg, rng):
        self.sizes = list(sizes)
        self.cfg = cfg
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))
        self._vel_w = [np.zeros_like(w) for w in self.weights]
        self._vel_b = [np.zeros_like(b) for b in self.biases]

    @property
    def n_layers(self):
        return len(self.weights)

    def input_lsb(self, layer):
        cfg = self.cfg
        if layer == 0:
            return 1.0 / ((1 << (cfg.input_bits - 1)) - 1)
        return cfg.act_clip / ((1 << (cfg.act_bits - 1)) - 1)

    def copy(self):
        out = QuantMLP.__new__(QuantMLP)
        out.sizes = list(self.sizes)
        out.cfg = self.cfg
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        out._vel_w = [v.copy() for v in self._vel_w]
        out._vel_b = [v.copy() for v in self._vel_b]
        return out

    def _quant_act(self, z, layer):
        lsb = self.input_lsb(layer)
        hi = ((1 << (self.cfg.act_bits - 1)) - 1) if layer > 0 else \
            ((1 << (self.cfg.input_bits - 1)) - 1)
        clip = hi * lsb
        q = round_half_away(np.clip(z, 0.0, clip) / lsb) * lsb
        mask = (z > 0) & (z < clip)  # straight-through gradient support
        return q, mask

    def _noisy(self, w, p, rng):
        if p <= 0:
            return w
        return w + rng.normal(0.0, p * np.max(np.abs(w)), w.shape)

    def forward(self, x, start=0, p=0.0, rng=None, keep=False):
        """Forward from layer `start`; x is the (real) input of that layer.

        Returns logits, or (cache, logits) when keep is set.
        """
        a, mask = self._quant_act(np.asarray(x, dtype=float), start)
        acts, masks = [a], [mask]
        for l in range(start, self.n_layers):
            w = self._noisy(self.weights[l], p, rng)
            z = a @ w + self.biases[l]
            if l == self.n_layers - 1:
                if keep:
                    return (acts, masks, w if p > 0 else None), z
                return z
            a, mask = self._quant_act(z, l + 1)
            acts.append(a)
            masks.append(mask)
        raise AssertionError("empty network")

    def train_epochs(self, x, y, epochs, lr, p, rng, start=0):
        """Momentum SGD over mini-batches; layers before `start` frozen.

        Noise is redrawn for every forward pass. Weights clamp to the
        mappable range [-w_clip, w_clip] after every step, which keeps the
        noise reference max|w| from inflating and pushes the trained
        distribution flat. Raises TrainingDiverged on a NaN loss.
        """
        n = x.shape[0]
        n_cls = self.sizes[-1]
        onehot = np.eye(n_cls)[y]
        mu = self.cfg.momentum
        wc = self.cfg.w_clip
        for _ in range(epochs):
            order = rng.permutation(n)
            for lo in range(0, n, self.cfg.batch_size):
                idx = order[lo:lo + self.cfg.batch_size]
                xb, yb = x[idx], onehot[idx]
                acts, masks, grads_w, grads_b = self._backward(
                    xb, yb, p, rng, start)
                for l in range(start, self.n_layers):
                    gi = l - start
                    self._vel_w[l] = mu * self._vel_w[l] - lr * grads_w[gi]
                    self._vel_b[l] = mu * self._vel_b[l] - lr * grads_b[gi]
                    self.weights[l] += self._vel_w[l]
                    self.biases[l] += self._vel_b[l]
                    np.clip(self.weights[l], -wc, wc, out=self.weights[l])
        return self

    def _backward(self, xb, yb, p, rng, start):
        a, mask = self._quant_act(np.asarray(xb, dtype=float), start)
        acts, masks, noisy = [a], [mask], []
        for l in range(start, self.n_layers):
            w = self._noisy(self.weights[l], p, rng)
            noisy.append(w)
            z = a @ w + self.biases[l]
            if l < self.n_layers - 1:
                a, mask = self._quant_act(z, l + 1)
                acts.append(a)
                masks.append(mask)
        logits = z
        zmax = logits - logits.max(axis=1, keepdims=True)
        ez = np.exp(zmax)
        probs = ez / ez.sum(axis=1, keepdims=True)
        if np.any(np.isnan(probs)):
            raise TrainingDiverged("loss is NaN")
        bsz = xb.shape[0]
        dz = (probs - yb) / bsz
        grads_w, grads_b = [], []
        for l in range(self.n_layers - 1, start - 1, -1):
            gi = l - start
            grads_w.insert(0, acts[gi].T @ dz)
            grads_b.insert(0, dz.sum(axis=0))
            if l > start:
                da = dz @ noisy[gi].T
                dz = da * masks[gi]  # straight-through quantizer gradient
        return acts, masks, grads_w, grads_b

    def predict(self, x, start=0):
        return np.argmax(self.forward(x, start=start), axis=1)


def train_noise_mlp(dataset, architecture, cfg):
    """Train a quantized-activation MLP with per-forward weight noise.

    With cfg.noise_fraction == 0 no noise is ever drawn, so the run is
    bit-identical to a plain quantized trainer at the same seed.
    """
    if not isinstance(dataset, TrainSplit):
        raise TypeError("training requires a TrainSplit")
    rng = np.random.default_rng(cfg.seed)
    model = QuantMLP(architecture, cfg, rng)
    model.train_epochs(dataset.x, dataset.y, cfg.epochs, cfg.lr,
                       cfg.noise_fraction, rng)
    return model


def accuracy(model, x, y, start=0):
    return float(np.mean(model.predict(x, start=start) == y))


def noisy_accuracy(model, x, y, noise_p, rng, draws=10):
    """Mean accuracy over fresh weight-noise draws at test time."""
    accs = []
    for _ in range(draws):
        logits = model.forward(x, p=noise_p, rng=rng)
        accs.append(np.mean(np.argmax(logits, axis=1) == y))
    return float(np.mean(accs))


def excess_kurtosis(values):
    v = np.asarray(values, dtype=float).ravel()
    v = v - v.mean()
    m2 = np.mean(v ** 2)
    return float(np.mean(v ** 4) / (m2 ** 2) - 3.0)


# ---------------------------------------------------------------------------
# Deployment glue: put an MLP onto the chip layer by layer.

@dataclass
class MlpDeployment:
    layer_ids: list
    model: QuantMLP

    def layer_id(self, l):
        return self.layer_ids[l]


def _layer_matrix(model, l, g_min=1.0, g_max=40.0):
    lsb = model.input_lsb(l)
    spec = mapper.LayerSpec("dense", model.weights[l],
                            model.biases[l] / lsb, name=f"fc{l}")
    return mapper.conv_to_matrix(spec, g_min, g_max)


def _layer_exec(model, l):
    last = l == model.n_layers - 1
    return ExecParams(
        in_bits=model.cfg.input_bits if l == 0 else model.cfg.act_bits,
        activation="identity" if last else "relu",
        input_lsb=model.input_lsb(l),
        requant_lsb=None if last else model.input_lsb(l + 1),
        out_bits=model.cfg.act_bits, out_signed=False)


def deploy_layer(chip, model, l, core_id, layer_id=None, exact=False,
                 iterations=3, g_min=1.0, g_max=40.0):
    """Map and program one dense layer onto one core."""
    layer_id = layer_id or f"fc{l}"
    m = _layer_matrix(model, l, g_min, g_max)
    if m.rows > 256 or m.cols > 256:
        raise ValueError("desk-scale layers must fit a single core")
    segs = mapper.split_matrix(m, layer_id=layer_id)
    plan = chip.plan or mapper.PlacementPlan()
    plan.assignments = [a for a in plan.assignments
                        if a.layer_id != layer_id]
    plan.assignments.append(mapper.Assignment(
        layer_id, 0, 0, m.rows, 0, m.cols, core_id, 0, 0))
    sub = mapper.PlacementPlan([plan.assignments[-1]], plan.n_cores)
    chip.cores[core_id].g[:, :] = 0.0
    program_chip(chip, sub, {layer_id: m},
                 exec_params={layer_id: _layer_exec(model, l)},
                 exact=exact, iterations=iterations)
    chip.plan = plan
    return layer_id


def deploy_mlp(chip, model, first_core=0, exact=False, iterations=3,
               g_min=1.0, g_max=40.0):
    """Program every layer of the model, one core per layer."""
    ids = [deploy_layer(chip, model, l, first_core + l, exact=exact,
                        iterations=iterations, g_min=g_min, g_max=g_max)
           for l in range(model.n_layers)]
    return MlpDeployment(layer_ids=ids, model=model)


def quantize_input_codes(x, model):
    lsb = model.input_lsb(0)
    hi = (1 << (model.cfg.input_bits - 1)) - 1
    return np.clip(round_half_away(np.asarray(x, dtype=float) / lsb),
                   0, hi).astype(np.int64)


def chip_forward(chip, deploy, x, upto=None, trace=None):
    """Run inputs through the programmed layers; returns the last layer's
    real-valued outputs (logits) or, with `upto`, that layer's codes."""
    model = deploy.model
    codes = quantize_input_codes(x, model)
    last = model.n_layers - 1 if upto is None else upto
    for l in range(last + 1):
        codes = execute_layer(chip, deploy.layer_id(l), codes, trace=trace)
    return codes


def chip_accuracy(chip, deploy, x, y, trace=None):
    logits = chip_forward(chip, deploy, x, trace=trace)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def software_reference(chip, deploy, x):
    """Quantized inference in exact software arithmetic using the decoded
    effective weights and the same quantization steps as the executor.

    Independent of the settle/ADC path: computes plain dot products and
    requantizes at each layer's grids.
    """
    model = deploy.model
    a = quantize_input_codes(x, model).astype(float)
    for l in range(model.n_layers):
        ls = chip.layers[deploy.layer_id(l)]
        m = ls.matrix
        cap = (1 << (ls.partial_bits - 1)) - 1
        full = np.concatenate([a, np.ones((a.shape[0], m.bias_rows))], axis=1)
        real = np.zeros((a.shape[0], m.cols))
        for asg in ls.assignments:
            if asg.dup_group != 0:
                continue
            pair_lo = asg.row_start // 2
            pair_hi = (asg.row_start + asg.row_count) // 2
            t = m.targets[asg.row_start:asg.row_start + asg.row_count,
                          asg.col_start:asg.col_start + asg.col_count]
            d = t[0::2] - t[1::2]
            dot = full[:, pair_lo:pair_hi] @ d
            # the conversion grid per column is dot_step * S_j / S_ref
            grid = ls.exec.dot_step * ls.col_sums[asg.seg_id] / \
                ls.s_ref[asg.seg_id]
            code = np.sign(dot) * np.minimum(
                np.floor(np.abs(dot) / grid + 0.5), cap)
            real[:, asg.col_start:asg.col_start + asg.col_count] += \
                code * grid
        real = real * (m.w_max / m.g_max) * ls.exec.input_lsb
        if ls.exec.activation == "relu":
            real = np.maximum(real, 0.0)
        if ls.exec.requant_lsb is None:
            return real
        hi = (1 << (ls.exec.out_bits - 1)) - 1
        lo = -hi if ls.exec.out_signed else 0
        a = np.clip(round_half_away(real / ls.exec.requant_lsb),
                    lo, hi).astype(float)
    return a


# ---------------------------------------------------------------------------
# Model-driven calibration

@dataclass
class CalEntry:
    v_scale: float = 1.0
    dot_step: float = 1.0
    offsets: dict = field(default_factory=dict)  # seg_id -> volts
    requant_lsb: float | None = None


V_SCALE_GRID = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5)


def _measure_offsets(chip, ls, layer_id, passes=2):
    """Zero-input probe per segment (bias rows gated off): the mean output
    code, negated, cancels static ADC offsets. A second pass removes any
    residual whole-code error."""
    corr = {a.seg_id: np.zeros(a.col_count) for a in ls.assignments
            if a.dup_group == 0}
    for _ in range(passes):
        for a in ls.assignments:
            if a.dup_group != 0:
                continue
            cfg = chipmod._segment_cfg(ls, a.seg_id)
            zero = np.zeros((4, a.row_count // 2), dtype=np.int64)
            from .core import mvm
            codes = mvm(chip.cores[a.core_id], zero, ls.exec.direction, cfg,
                        chip.nonideal, chip.rng_for(a.core_id),
                        in_start=a.core_row, out_start=a.core_col,
                        n_out=a.col_count,
                        offset_correction=corr[a.seg_id])
            corr[a.seg_id] -= codes.mean(axis=0) * cfg.q_step
    return corr


def _probe_p99(chip, ls, layer_id, codes_in, dot_step, v_scale):
    """99th percentile of the |pre-ADC| magnitude, in dot units."""
    saved = (ls.exec.dot_step, ls.exec.v_scale)
    ls.exec.dot_step, ls.exec.v_scale = dot_step, v_scale
    mags = []
    try:
        for a in ls.assignments:
            if a.dup_group != 0:
                continue
            cfg = chipmod._segment_cfg(ls, a.seg_id)
            pair_lo = a.row_start // 2
            pair_hi = (a.row_start + a.row_count) // 2
            from .core import mvm
            codes = mvm(chip.cores[a.core_id], codes_in[:, pair_lo:pair_hi],
                        ls.exec.direction, cfg, chip.nonideal,
                        chip.rng_for(a.core_id), in_start=a.core_row,
                        out_start=a.core_col, n_out=a.col_count,
                        offset_correction=ls.offset_corr.get(a.seg_id))
            s = ls.col_sums[a.seg_id]
            mags.append(np.abs(codes * dot_step * s / ls.s_ref[a.seg_id]).ravel())
    finally:
        ls.exec.dot_step, ls.exec.v_scale = saved
    return float(np.percentile(np.concatenate(mags), 99))


def calibrate_layer(chip, layer_id, batch, n_dot=9):
    """Tune one programmed layer from training-set samples.

    Picks the read-voltage scale and the conversion step by grid search so
    the 99th percentile of the pre-ADC magnitude lands on the top code
    (full-swing utilization), then measures and cancels per-neuron
    offsets. `batch` must be a TrainSplit whose x holds the layer's input
    codes (bias rows appended internally).
    """
    if not isinstance(batch, TrainSplit):
        raise TypeError("calibration requires a TrainSplit (training data)")
    if batch.x.size == 0:
        raise ValueError("empty calibration batch")
    ls = chip.layers[layer_id]
    x = np.asarray(batch.x, dtype=np.int64)
    full = np.concatenate(
        [x, np.ones((x.shape[0], ls.matrix.bias_rows), dtype=np.int64)],
        axis=1)

    cap = (1 << (ls.partial_bits - 1)) - 1
    base = ls.exec.dot_step
    dot_grid = base * np.logspace(-1.0, 1.0, n_dot)
    probe_dot = float(dot_grid[-1])  # coarsest: immune to clipping

    best = None
    for v in V_SCALE_GRID:
        p99 = _probe_p99(chip, ls, layer_id, full, probe_dot, v)
        want = max(p99 / cap, 1e-12)
        snapped = float(dot_grid[np.argmin(np.abs(np.log(dot_grid / want)))])
        err = abs(math.log(want / snapped)) + 0.01 * abs(v - 1.0)
        if best is None or err < best[0]:
            best = (err, v, snapped)
    _, v_sel, dot_sel = best

    ls.exec.v_scale = v_sel
    ls.exec.dot_step = dot_sel
    ls.offset_corr = _measure_offsets(chip, ls, layer_id)
    return CalEntry(v_scale=v_sel, dot_step=dot_sel,
                    offsets=dict(ls.offset_corr),
                    requant_lsb=ls.exec.requant_lsb)


def apply_calibration(chip, layer_id, entry):
    ls = chip.layers[layer_id]
    ls.exec.v_scale = entry.v_scale
    ls.exec.dot_step = entry.dot_step
    ls.offset_corr = {k: np.asarray(v) for k, v in entry.offsets.items()}
    if entry.requant_lsb is not None:
        ls.exec.requant_lsb = entry.requant_lsb


# ---------------------------------------------------------------------------
# Chip-in-the-loop progressive fine-tuning

def finetune_chip_in_loop(model, chip, train, cfg, first_core=0,
                          iterations=3, calibrate=False, g_min=1.0,
                          g_max=40.0):
    """Program layers one at a time and retune the remaining ones.

    After programming layer l (non-idealities on), the whole training set
    is run through the chip up to l; the measured output codes become the
    fixed inputs on which layers l+1..N train in software (learning rate
    divided by cfg.finetune_lr_div, at most 30 epochs, same noise
    injection and activation quantization). Programmed layers live only on
    the chip. Returns the hybrid model and the per-layer training-set
    accuracy trace.
    """
    if not isinstance(train, TrainSplit):
        raise TypeError("fine-tuning requires a TrainSplit")
    model = model.copy()
    rng = np.random.default_rng((cfg.seed, 0xF1E7))
    lr = cfg.lr / cfg.finetune_lr_div
    epochs = min(cfg.finetune_epochs, 30)
    deploy = MlpDeployment(layer_ids=[], model=model)
    trace = []
    for l in range(model.n_layers):
        lid = deploy_layer(chip, model, l, first_core + l,
                           iterations=iterations, g_min=g_min, g_max=g_max)
        deploy.layer_ids.append(lid)
        if calibrate:
            feats_in = (quantize_input_codes(train.x, model) if l == 0 else
                        chip_forward(chip, deploy, train.x, upto=l - 1))
            calibrate_layer(chip, lid, TrainSplit(feats_in, train.y))
        feats = chip_forward(chip, deploy, train.x, upto=l)
        if l < model.n_layers - 1:
            feat_real = feats * model.input_lsb(l + 1)
            model.train_epochs(feat_real, train.y, epochs, lr,
                               cfg.noise_fraction, rng, start=l + 1)
            logits = model.forward(feat_real, start=l + 1)
            acc = float(np.mean(np.argmax(logits, axis=1) == train.y))
        else:
            acc = float(np.mean(np.argmax(feats, axis=1) == train.y))
        trace.append({"layer": l, "train_accuracy": acc})
    return model, trace
