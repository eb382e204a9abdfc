"""48-core chip orchestration: programming placement plans onto cores,
layer execution with digital partial-sum accumulation, whole-network
inference, bidirectional sampling for generative models, and energy and
latency estimation from operation traces.

Partial results from row-split segments come back conductance-normalized;
the executor denormalizes each band with the precomputed column sums of
its programming targets and accumulates digitally at elevated precision
before the activation and requantization to the next layer's input grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import device
from .core import (GRID, CoreState, NeuronConfig, NonIdealityConfig, OpTrace,
                   denormalize, mvm, round_half_away)
from .lfsr import LfsrPair, uniform01
from .mapper import (Assignment, ConductanceMatrix, PlacementPlan,
                     interleave_columns, validate_placement)

N_CORES = 48

# drift disabled: used whenever the relaxation non-ideality is off
ZERO_RELAXATION = device.RelaxationModel(sigma_table=((0.0, 0.0), (50.0, 0.0)))


@dataclass
class EnergyConfig:
    """Constants for the first-order energy estimator."""

    c_par: float = 1e-15        # F parasitic per cell
    c_wl: float = 60e-15        # F per word line
    v_wl: float = 5.0           # V, thick-oxide WL swing
    v_dd: float = 1.8
    e_adc_step: float = 1e-13   # J per charge-decrement step
    e_neuron_static: float = 5e-14  # J per conversion

    def __post_init__(self):
        for f in self.__dataclass_fields__:
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")


@dataclass
class ExecParams:
    """How a programmed layer is driven and how its outputs requantize."""

    in_bits: int = 4
    activation: str = "relu"      # identity | relu, applied digitally
    direction: str = "forward"    # row-driven directions only
    input_lsb: float = 1.0        # real value of one input code step
    requant_lsb: float | None = None  # output step; None -> raw reals
    out_bits: int = 4             # width of requantized output codes
    out_signed: bool = False
    dot_step: float | None = None  # uS per partial code step; None -> auto
    v_read: float = 0.3
    v_scale: float = 1.0


@dataclass
class LayerState:
    """Everything the executor needs about one programmed layer."""

    matrix: ConductanceMatrix
    assignments: list
    exec: ExecParams
    col_sums: dict = field(default_factory=dict)   # seg_id -> per-col sums
    s_ref: dict = field(default_factory=dict)      # seg_id -> max col sum
    offset_corr: dict = field(default_factory=dict)  # seg_id -> volts

    @property
    def partial_bits(self):
        return min(self.exec.in_bits + 2, 8)


@dataclass
class ProgramReport:
    segments: list = field(default_factory=list)

    def add(self, **kw):
        self.segments.append(kw)

    @property
    def total_cells(self):
        return sum(s["cells"] for s in self.segments)

    @property
    def initial_yield(self):
        cells = self.total_cells
        if cells == 0:
            return 1.0
        ok = sum(s["cells"] - s["write_failures"] for s in self.segments)
        return ok / cells


class ChipState:
    """48 cores plus global configuration and the per-core RNG streams.

    Every stochastic draw comes from a stream keyed by
    (seed, core id, per-core invocation counter), so concurrent core
    execution and serial replay produce identical results.
    """

    def __init__(self, seed=0, nonideal=None):
        self.seed = int(seed)
        self.nonideal = nonideal or NonIdealityConfig()
        self.cores = [CoreState.fresh(i) for i in range(N_CORES)]
        self.plan = None
        self.layers = {}
        self._counters = [0] * N_CORES
        if self.nonideal.adc_offset_sigma > 0:
            for c in self.cores:
                rng = np.random.default_rng((self.seed, c.core_id, 1 << 60))
                c.adc_offset_v = rng.normal(
                    0.0, self.nonideal.adc_offset_sigma, GRID)

    def rng_for(self, core_id):
        self._counters[core_id] += 1
        return np.random.default_rng(
            (self.seed, core_id, self._counters[core_id]))

    def power(self, core_id, on):
        self.cores[core_id].powered = bool(on)


def program_chip(chip, plan, matrices, params=None, rule=None, relax=None,
                 iterations=3, exec_params=None, exact=False):
    """Write every placed segment with iterative write-verify.

    `matrices` maps layer id -> ConductanceMatrix. Relaxation (when the
    chip's non-ideality toggle enables it) is interleaved with the
    reprogramming iterations and applied once more to the cells written in
    the final round, mimicking reading back the array only after the
    post-programming drift has settled. Returns a ProgramReport;
    per-segment failures are recorded, not fatal. `exact` skips the device
    loop and writes targets verbatim (ideal programming, for verification
    against analytic oracles).
    """
    violations = validate_placement(plan)
    if violations:
        raise ValueError("invalid placement: " + "; ".join(violations))
    params = params or device.ProgramParams()
    rule = rule or device.DeviceUpdateRule()
    if not chip.nonideal.relaxation:
        relax = ZERO_RELAXATION
    else:
        relax = relax or device.RelaxationModel()

    chip.plan = plan
    report = ProgramReport()
    exec_params = exec_params or {}
    for a in sorted(plan.assignments,
                    key=lambda a: (a.layer_id, a.dup_group, a.seg_id)):
        m = matrices[a.layer_id]
        targets = m.targets[a.row_start:a.row_start + a.row_count,
                            a.col_start:a.col_start + a.col_count]
        core = chip.cores[a.core_id]
        if exact:
            core.g[a.core_row:a.core_row + a.row_count,
                   a.core_col:a.core_col + a.col_count] = targets
            report.add(layer=a.layer_id, seg=a.seg_id, dup=a.dup_group,
                       core=a.core_id, cells=targets.size, write_failures=0,
                       mean_pulses=0.0, final_sigma=0.0, iteration_sigma=[])
            continue
        region = core.g[a.core_row:a.core_row + a.row_count,
                        a.core_col:a.core_col + a.col_count]
        region[region == 0.0] = params.g_min  # forming: fresh cells sit at the floor
        rng = chip.rng_for(a.core_id)
        g, stats, fresh = device.program_array_iterative(
            region, targets, iterations, params, rule, relax, rng)
        if np.any(fresh):
            sub = g[fresh]
            device.apply_relaxation(sub, relax, rng)
            g[fresh] = sub
        core.g[a.core_row:a.core_row + a.row_count,
               a.core_col:a.core_col + a.col_count] = g
        report.add(layer=a.layer_id, seg=a.seg_id, dup=a.dup_group,
                   core=a.core_id, cells=targets.size,
                   write_failures=int(round(
                       (1 - stats.converged_fraction) * targets.size)),
                   mean_pulses=stats.mean_pulses,
                   final_sigma=float(np.std(g - targets)),
                   iteration_sigma=stats.per_iteration_sigma)

    for layer_id, m in matrices.items():
        assigns = plan.for_layer(layer_id)
        if not assigns:
            continue
        ep = exec_params.get(layer_id, ExecParams())
        ls = LayerState(matrix=m, assignments=assigns, exec=ep)
        for a in assigns:
            if a.seg_id in ls.col_sums:
                continue
            s = m.column_sums(a.row_start, a.row_count)[
                a.col_start:a.col_start + a.col_count]
            ls.col_sums[a.seg_id] = s
            ls.s_ref[a.seg_id] = float(np.max(s))
        if ep.dot_step is None:
            ep.dot_step = _auto_dot_step(ls)
        chip.layers[layer_id] = ls
    return report


def _auto_dot_step(ls):
    """Worst-case dot range mapped onto the partial code cap (never clips)."""
    m = ls.matrix
    d_abs = np.abs(m.targets[0::2] - m.targets[1::2])
    x_max = (1 << (ls.exec.in_bits - 1)) - 1
    n_bias = m.bias_rows
    worst = 0.0
    for a in ls.assignments:
        pair_lo, pair_hi = a.row_start // 2, (a.row_start + a.row_count) // 2
        sub = d_abs[pair_lo:pair_hi,
                    a.col_start:a.col_start + a.col_count]
        scale = np.full(sub.shape[0], float(x_max))
        n_weight_pairs = m.logical_rows - n_bias
        for p in range(pair_lo, pair_hi):
            if p >= n_weight_pairs:
                scale[p - pair_lo] = 1.0  # bias rows are driven with +1
        worst = max(worst, float(np.max(scale @ sub)))
    cap = (1 << (min(ls.exec.in_bits + 2, 8) - 1)) - 1
    return max(worst / cap, 1e-12)


def _segment_cfg(ls, seg_id):
    ep = ls.exec
    v = ep.v_read * ep.v_scale
    q = ep.dot_step * v / ls.s_ref[seg_id]
    return NeuronConfig(v_read=v, q_step=q, out_bits=ls.partial_bits,
                        in_bits=ep.in_bits, activation="identity")


def execute_layer(chip, layer_id, inputs, trace=None, raw=False):
    """Run one programmed layer over a batch of input codes.

    Each row band yields partial codes at 2-bit elevated precision which
    are denormalized with the band's precomputed conductance sums and
    summed digitally; column bands concatenate. Duplicate copies serve
    batch items round-robin with output order preserved. The digital
    activation applies after the full accumulation, followed by
    requantization to the next layer's input grid (skipped when the layer
    has no requant_lsb or `raw` is set, returning reals).
    """
    if layer_id not in chip.layers:
        raise KeyError(f"layer {layer_id!r} is not programmed")
    ls = chip.layers[layer_id]
    ep = ls.exec
    x = np.asarray(inputs, dtype=np.int64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    lim = (1 << (ep.in_bits - 1)) - 1
    if np.any(np.abs(x) > lim):
        raise ValueError(f"inputs exceed {ep.in_bits}-bit range")
    n_weight_pairs = ls.matrix.logical_rows - ls.matrix.bias_rows
    if x.shape[1] != n_weight_pairs:
        raise ValueError(f"layer {layer_id!r} expects {n_weight_pairs} "
                         f"inputs, got {x.shape[1]}")
    batch = x.shape[0]
    full = np.concatenate(
        [x, np.ones((batch, ls.matrix.bias_rows), dtype=np.int64)], axis=1)

    groups = sorted({a.dup_group for a in ls.assignments})
    accum = np.zeros((batch, ls.matrix.cols))
    for gi, g in enumerate(groups):
        idx = np.arange(gi, batch, len(groups))
        if idx.size == 0:
            continue
        sub = full[idx]
        for a in sorted((a for a in ls.assignments if a.dup_group == g),
                        key=lambda a: a.seg_id):
            pair_lo = a.row_start // 2
            pair_hi = (a.row_start + a.row_count) // 2
            cfg = _segment_cfg(ls, a.seg_id)
            codes = mvm(chip.cores[a.core_id], sub[:, pair_lo:pair_hi],
                        ep.direction, cfg, chip.nonideal,
                        chip.rng_for(a.core_id),
                        in_start=a.core_row, out_start=a.core_col,
                        n_out=a.col_count, trace=trace,
                        offset_correction=ls.offset_corr.get(a.seg_id))
            part = denormalize(codes, ls.col_sums[a.seg_id], cfg)
            accum[np.ix_(idx, np.arange(a.col_start,
                                        a.col_start + a.col_count))] += part

    real = accum * (ls.matrix.w_max / ls.matrix.g_max) * ep.input_lsb
    if ep.activation == "relu":
        real = np.maximum(real, 0.0)
    elif ep.activation != "identity":
        raise ValueError(f"unsupported layer activation {ep.activation!r}")
    if raw or ep.requant_lsb is None:
        return real[0] if single else real
    out = round_half_away(real / ep.requant_lsb)
    lim = (1 << (ep.out_bits - 1)) - 1
    lo = -lim if ep.out_signed else 0
    out = np.clip(out, lo, lim).astype(np.int64)
    return out[0] if single else out


def run_network(chip, graph, inputs, trace=None, raw_last=False):
    """Execute a graph of chip layers and exact host-side ops.

    Node kinds: layer, conv (as-matrix over gathered patches), pool_max /
    pool_avg, flatten, relu (host), recurrent (stepwise layer reuse), and
    gibbs (bidirectional sampling; params carry the on-chip model). Host
    ops run in exact integer/real arithmetic.
    """
    x = np.asarray(inputs)
    for node in graph:
        op = node["op"]
        if op == "layer":
            last = node is graph[-1]
            x = execute_layer(chip, node["id"], x, trace=trace,
                              raw=raw_last and last)
        elif op == "conv":
            x = _conv_node(chip, node, x, trace)
        elif op == "pool_max":
            x = _pool(x, node.get("size", 2), "max")
        elif op == "pool_avg":
            x = _pool(x, node.get("size", 2), "avg")
        elif op == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif op == "relu":
            x = np.maximum(x, 0)
        elif op == "recurrent":
            x = _recurrent_node(chip, node, x, trace)
        elif op == "gibbs":
            pair = node.get("pair") or LfsrPair.from_seed(chip.seed)
            for _ in range(node.get("cycles", 10)):
                _, x = gibbs_step(chip, node["rbm"], x, pair, trace=trace)
        else:
            raise ValueError(f"unknown graph op {op!r}")
    return x


def _conv_node(chip, node, x, trace):
    """im2col gather (exact) + matrix layer on the chip."""
    h, w, c = node["in_shape"]
    kh, kw = node["kernel"]
    stride = node.get("stride", 1)
    batch = x.shape[0]
    fmap = x.reshape(batch, h, w, c)
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    patches = np.empty((batch, oh, ow, kh * kw * c), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            win = fmap[:, i * stride:i * stride + kh,
                       j * stride:j * stride + kw, :]
            patches[:, i, j, :] = win.reshape(batch, -1)
    flat = patches.reshape(batch * oh * ow, -1)
    out = execute_layer(chip, node["id"], flat, trace=trace)
    return out.reshape(batch, oh, ow, -1)


def _pool(x, size, mode):
    b, h, w, c = x.shape
    oh, ow = h // size, w // size
    win = x[:, :oh * size, :ow * size, :].reshape(b, oh, size, ow, size, c)
    if mode == "max":
        return win.max(axis=(2, 4))
    avg = win.astype(float).mean(axis=(2, 4))
    if np.issubdtype(x.dtype, np.integer):
        return round_half_away(avg).astype(np.int64)
    return avg


def _recurrent_node(chip, node, x, trace):
    """Step a layer over a (batch, steps, features) sequence, feeding the
    requantized state back beside each step's input."""
    layer_id = node["id"]
    ls = chip.layers[layer_id]
    batch, steps, feat = x.shape
    n_state = (ls.matrix.logical_rows - ls.matrix.bias_rows) - feat
    h = np.zeros((batch, n_state), dtype=np.int64)
    for t in range(steps):
        h = execute_layer(chip, layer_id,
                          np.concatenate([x[:, t, :], h], axis=1),
                          trace=trace)
    return h


def estimate_energy(trace, cfg):
    """First-order energy: E = MACs * C_par * var(V_in) + WL switching +
    per-step ADC decrement cost + static conversion cost.

    Returns (joules, per-category breakdown dict).
    """
    breakdown = {
        "mac": trace.macs * cfg.c_par * trace.var_v_in(),
        "wl": trace.wl_toggles * cfg.c_wl * cfg.v_wl ** 2,
        "adc": trace.adc_decrement_steps * cfg.e_adc_step,
        "neuron": trace.adc_conversions * cfg.e_neuron_static,
    }
    return sum(breakdown.values()), breakdown


def estimate_latency(trace, ns_per_event=10.0):
    """Serialized event count (settles + sample cycles + worst-neuron
    decrement steps) scaled by a configurable time constant."""
    return trace.latency_events * ns_per_event * 1e-9


# ---------------------------------------------------------------------------
# Bidirectional sampling support (generative models)

@dataclass
class RbmOnChip:
    """A visible/hidden weight matrix spread over cores column-interleaved.

    Layout per core: hidden differential row pairs first, then visible-bias
    row pairs; that core's interleaved visible columns first, then
    hidden-bias columns. The hidden pass drives visible columns
    single-ended (recoded to +/-1 with a precomputed digital correction)
    and senses rows; the visible pass drives hidden row pairs and senses
    columns.
    """

    core_ids: list
    visible_cols: list           # per core: visible indices, column order
    n_visible: int
    n_hidden: int
    bias_a_pairs: int
    bias_b_cols: int
    w_max: float
    g_max: float
    row_sums: list = field(default_factory=list)
    col_sums: list = field(default_factory=list)
    hidden_corr: np.ndarray | None = None  # uS, for the +/-1 input recode
    v_read: float = 0.3
    util: float = 1.0  # q_step tightening vs the no-clip worst case


def build_rbm_targets(w, a, b, core_cols, n_cores_used, g_min, g_max):
    """Per-core conductance targets for an interleaved visible/hidden map.

    Weight w[i, j] couples visible i (a column) and hidden j (a row pair).
    Visible biases ride on extra row pairs driven during the visible pass;
    hidden biases ride on extra columns driven during the hidden pass,
    split evenly across cores.
    """
    w = np.asarray(w, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n_vis, n_hid = w.shape
    w_abs = float(np.max(np.abs(w)))
    if w_abs == 0:
        raise ValueError("all-zero weights")
    b_a = max(1, math.ceil(float(np.max(np.abs(a))) / w_abs)) if a.any() else 1
    per_core_b = np.max(np.abs(b)) / n_cores_used if b.any() else 0.0
    b_b = max(1, math.ceil(per_core_b / w_abs)) if per_core_b > 0 else 1
    w_max = max(w_abs, float(np.max(np.abs(a))) / b_a if a.any() else 0.0,
                per_core_b / b_b)

    grids = []
    for cols in core_cols:
        rows = np.zeros((n_hid + b_a, cols.size + b_b))
        rows[:n_hid, :cols.size] = w[cols, :].T
        for t in range(b_b):
            rows[:n_hid, cols.size + t] = b / (b_b * n_cores_used)
        for t in range(b_a):
            rows[n_hid + t, :cols.size] = a[cols] / b_a
        g_plus, g_minus = device.encode_weight(rows, w_max, g_min, g_max)
        targets = np.empty((2 * rows.shape[0], rows.shape[1]))
        targets[0::2] = g_plus
        targets[1::2] = g_minus
        grids.append(targets)
    return grids, w_max, b_a, b_b


def program_rbm(chip, w, a, b, core_ids, g_min=1.0, g_max=30.0,
                params=None, rule=None, relax=None, iterations=3,
                v_read=0.3, util=1.0, exact=False):
    """Interleave an RBM across cores and program it; returns the mapping."""
    w = np.asarray(w, dtype=float)
    n_vis, n_hid = w.shape
    k = len(core_ids)
    core_cols = interleave_columns(n_vis, k)
    grids, w_max, b_a, b_b = build_rbm_targets(
        w, a, b, core_cols, k, g_min, g_max)
    if any(t.shape[0] > GRID or t.shape[1] > GRID for t in grids):
        raise ValueError("interleaved grid exceeds core size; use more cores")

    params = params or device.ProgramParams(g_min=g_min, g_max=g_max)
    rule = rule or device.DeviceUpdateRule()
    relax = (relax or device.RelaxationModel()) if chip.nonideal.relaxation \
        else ZERO_RELAXATION

    rbm = RbmOnChip(core_ids=list(core_ids), visible_cols=core_cols,
                    n_visible=n_vis, n_hidden=n_hid, bias_a_pairs=b_a,
                    bias_b_cols=b_b, w_max=w_max, g_max=g_max,
                    v_read=v_read, util=util)
    corr = np.zeros(n_hid)
    for cid, targets in zip(core_ids, grids):
        core = chip.cores[cid]
        if exact:
            core.g[:targets.shape[0], :targets.shape[1]] = targets
        else:
            region = core.g[:targets.shape[0], :targets.shape[1]]
            region[region == 0.0] = params.g_min  # forming
            rng = chip.rng_for(cid)
            g, _, fresh = device.program_array_iterative(
                region, targets, iterations, params, rule, relax, rng)
            if np.any(fresh):
                sub = g[fresh]
                device.apply_relaxation(sub, relax, rng)
                g[fresh] = sub
            core.g[:targets.shape[0], :targets.shape[1]] = g
        rbm.row_sums.append(np.sum(targets, axis=1))
        rbm.col_sums.append(np.sum(targets, axis=0))
        d = targets[0::2] - targets[1::2]
        n_vis_cols = rbm.visible_cols[rbm.core_ids.index(cid)].size
        # digital correction so +/-1 drive reproduces the {0,1} dot product:
        # sum_i v_i d_i = (sum_i x_i d_i + sum_i d_i) / 2 with x = 2v - 1,
        # and the bias columns (driven +1) must count fully, not halved.
        k_sum = np.sum(d[:n_hid, :n_vis_cols], axis=1)
        d_bias = np.sum(d[:n_hid, n_vis_cols:], axis=1)
        corr += 0.5 * (k_sum + d_bias)
    rbm.hidden_corr = corr
    return rbm


def _rbm_cfg(rbm, util):
    cap_q = rbm.v_read / (127.0 * util)
    return NeuronConfig(v_read=rbm.v_read, q_step=cap_q, out_bits=8,
                        in_bits=2, activation="identity")


def rbm_hidden_preactivation(chip, rbm, v, trace=None):
    """Pre-activation of every hidden unit, in RBM weight units.

    Drives each core's visible columns single-ended at +/-1 (plus the
    hidden-bias columns at +1), senses all hidden rows, denormalizes with
    the precomputed row sums, recombines differential pairs digitally and
    accumulates across cores.
    """
    v = np.asarray(v)
    cfg = _rbm_cfg(rbm, rbm.util)
    acc = np.zeros(rbm.n_hidden)
    for ci, cid in enumerate(rbm.core_ids):
        cols = rbm.visible_cols[ci]
        x = np.concatenate([2 * v[cols].astype(np.int64) - 1,
                            np.ones(rbm.bias_b_cols, dtype=np.int64)])
        codes = mvm(chip.cores[cid], x, "backward", cfg, chip.nonideal,
                    chip.rng_for(cid), in_start=0, out_start=0,
                    n_out=2 * rbm.n_hidden, drive="lines", trace=trace)
        den = denormalize(codes, rbm.row_sums[ci][:2 * rbm.n_hidden], cfg)
        acc += den[0::2] - den[1::2]
    pre = 0.5 * acc + rbm.hidden_corr
    return pre * (rbm.w_max / rbm.g_max)


def rbm_visible_preactivation(chip, rbm, h, trace=None):
    """Pre-activation of every visible unit, in RBM weight units.

    Drives hidden row pairs (and visible-bias pairs at +1), senses each
    core's visible columns, denormalizes with the precomputed column sums
    and scatters through the interleave map.
    """
    h = np.asarray(h)
    cfg = _rbm_cfg(rbm, rbm.util)
    drive = np.concatenate([h.astype(np.int64),
                            np.ones(rbm.bias_a_pairs, dtype=np.int64)])
    pre = np.zeros(rbm.n_visible)
    for ci, cid in enumerate(rbm.core_ids):
        cols = rbm.visible_cols[ci]
        codes = mvm(chip.cores[cid], drive, "forward", cfg, chip.nonideal,
                    chip.rng_for(cid), in_start=0, out_start=0,
                    n_out=cols.size, trace=trace)
        den = denormalize(codes, rbm.col_sums[ci][:cols.size], cfg)
        pre[cols] = den
    return pre * (rbm.w_max / rbm.g_max)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gibbs_step(chip, rbm, v, pair, trace=None):
    """One sampling cycle: hidden draw from v, then visible draw from h.

    Bernoulli bits compare the logistic of the measured pre-activation
    against pseudo-random uniforms from the LFSR pair.
    """
    pre_h = rbm_hidden_preactivation(chip, rbm, v, trace=trace)
    u = np.array([uniform01(pair) for _ in range(rbm.n_hidden)])
    h = (_sigmoid(pre_h) > u).astype(np.int64)
    pre_v = rbm_visible_preactivation(chip, rbm, h, trace=trace)
    u = np.array([uniform01(pair) for _ in range(rbm.n_visible)])
    v_new = (_sigmoid(pre_v) > u).astype(np.int64)
    return h, v_new
