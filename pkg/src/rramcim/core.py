"""Single compute-in-memory core: a 256x256 cell grid with interleaved
neurons, voltage-mode matrix-vector multiplication with bit-serial
multi-bit inputs, charge-decrement analog-to-digital conversion, neuron
activation functions, and stochastic sampling.

Sensing is voltage-mode: an output wire settles to the conductance-weighted
average of the driven input voltages, sum(dV_i * G_ij) / sum(G_ij), so the
raw result is normalized by the total column (or row) conductance and must
be denormalized digitally afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .lfsr import LfsrPair, lfsr_sample

GRID = 256
CORELET = 16

# Directions: which axis is driven and which is sensed. The recurrent
# variants differ from forward/backward only in where the digital result
# is routed, not in the arithmetic.
ROW_DRIVEN = ("forward", "recurrent_bl")
COL_DRIVEN = ("backward", "recurrent_sl")
DIRECTIONS = ROW_DRIVEN + COL_DRIVEN


def neuron_index(i, j):
    """Grid position (i, j) of a corelet -> (bl, sl) line indices.

    The neuron inside corelet (i, j) taps bit-line 16i+j and source-line
    16j+i, so each of the 256 lines on either axis connects to exactly one
    neuron.
    """
    if not (0 <= i < CORELET and 0 <= j < CORELET):
        raise ValueError("corelet indices must be in 0..15")
    return CORELET * i + j, CORELET * j + i


def _build_neuron_maps():
    of_bl = np.zeros(GRID, dtype=np.int64)
    of_sl = np.zeros(GRID, dtype=np.int64)
    for i in range(CORELET):
        for j in range(CORELET):
            bl, sl = neuron_index(i, j)
            nid = CORELET * i + j
            of_bl[bl] = nid
            of_sl[sl] = nid
    return of_bl, of_sl


# neuron id serving each physical line, per sensing axis
NEURON_OF_BL, NEURON_OF_SL = _build_neuron_maps()


@dataclass
class CoreState:
    """One core: cell conductances (uS) plus per-neuron static state."""

    g: np.ndarray
    adc_offset_v: np.ndarray
    core_id: int = 0
    powered: bool = True

    @classmethod
    def fresh(cls, core_id=0):
        return cls(g=np.zeros((GRID, GRID)), adc_offset_v=np.zeros(GRID),
                   core_id=core_id)


# Counter schedule used to bend the step count into a tanh/sigmoid shape:
# (counter value, steps per increment once the counter passes it).
DEFAULT_SIGMOID_BREAKPOINTS = ((35, 2), (40, 3), (43, 4), (45, 5))


@dataclass
class NeuronConfig:
    """Neuron operating point.

    q_step is the settled-voltage equivalent of one ADC step; the sampling
    to integration capacitor ratio is folded into `scale` (default 1.0).
    """

    v_read: float = 0.3
    q_step: float = 0.01
    n_max: int = 128
    out_bits: int = 8
    in_bits: int = 4
    activation: str = "identity"
    sigmoid_breakpoints: tuple = DEFAULT_SIGMOID_BREAKPOINTS
    scale: float = 1.0

    def __post_init__(self):
        if not 1 <= self.out_bits <= 8:
            raise ValueError("out_bits must be in 1..8")
        if not 1 <= self.in_bits <= 6:
            raise ValueError("in_bits must be in 1..6")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.activation not in ("identity", "relu", "sigmoid", "tanh",
                                   "stochastic"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.q_step <= 0 or self.v_read <= 0:
            raise ValueError("q_step and v_read must be > 0")

    @property
    def magnitude_cap(self):
        return min((1 << (self.out_bits - 1)) - 1, self.n_max - 1)


@dataclass
class DigitalVector:
    """Signed fixed-point vector with a declared bit width."""

    values: np.ndarray
    bits: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        lim = (1 << (self.bits - 1)) - 1
        if np.any(np.abs(self.values) > lim):
            raise ValueError(f"values exceed signed {self.bits}-bit range")

    @classmethod
    def from_real(cls, x, lsb, bits):
        """Quantize reals at step `lsb` (round half away), clip to range."""
        lim = (1 << (bits - 1)) - 1
        q = round_half_away(np.asarray(x, dtype=float) / lsb)
        return cls(np.clip(q, -lim, lim).astype(np.int64), bits)


@dataclass
class NonIdealityConfig:
    """Toggles for the modeled analog error sources.

    With everything off the core reproduces the ideal analytic model
    exactly. Quantization is inherent and always on.
    """

    relaxation: bool = False
    ir_drop_driver: bool = False
    r_drv: float = 25.0          # ohms, series resistance of a line driver
    ir_drop_wire: bool = False
    r_cell: float = 1.0          # ohms per cell pitch of input wire
    coupling_sigma: float = 0.0  # V per settle, stochastic proxy
    adc_offset: bool = False
    adc_offset_sigma: float = 0.0  # V, spread of static per-neuron offsets

    def __post_init__(self):
        if self.r_drv < 0 or self.r_cell < 0:
            raise ValueError("resistances must be >= 0")

    def all_off(self):
        return not (self.relaxation or self.ir_drop_driver or
                    self.ir_drop_wire or self.coupling_sigma > 0 or
                    self.adc_offset)


IDEAL = NonIdealityConfig()


@dataclass
class OpTrace:
    """Operation counts accumulated while running MVMs.

    Input voltage statistics cover every driven line on every pulse phase
    (including lines held at the reference), so var_v_in() reflects the
    actual driven distribution.
    """

    wl_toggles: int = 0
    input_pulses: int = 0
    sample_cycles: int = 0
    adc_decrement_steps: int = 0
    adc_conversions: int = 0
    macs: int = 0
    settle_events: int = 0
    latency_events: int = 0
    v_in_count: int = 0
    v_in_sum: float = 0.0
    v_in_sumsq: float = 0.0

    def add_inputs(self, v):
        self.v_in_count += v.size
        self.v_in_sum += float(np.sum(v))
        self.v_in_sumsq += float(np.sum(v * v))

    def var_v_in(self):
        if self.v_in_count == 0:
            return 0.0
        mean = self.v_in_sum / self.v_in_count
        return self.v_in_sumsq / self.v_in_count - mean * mean

    def __add__(self, other):
        out = OpTrace()
        for f in out.__dataclass_fields__:
            setattr(out, f, getattr(self, f) + getattr(other, f))
        return out


def round_half_away(x):
    """Round to nearest integer, halves away from zero."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def settle_voltage(delta_v_in, g_column):
    """Steady-state output voltage of one line: sum(dV*G) / sum(G).

    Inactive inputs contribute dV = 0 but their conductance still loads
    the denominator.
    """
    dv = np.asarray(delta_v_in, dtype=float)
    g = np.asarray(g_column, dtype=float)
    total = np.sum(g)
    if total <= 0:
        raise ZeroDivisionError("all-zero conductance column")
    return float(np.dot(dv, g) / total)


def _bit_planes(values, in_bits):
    """Decompose signed integers into per-bit ternary planes, MSB first."""
    v = np.asarray(values, dtype=np.int64)
    sign = np.sign(v)
    mag = np.abs(v)
    return [((mag >> k) & 1) * sign for k in range(in_bits - 2, -1, -1)]


def _solve_driver_ir(dv_drive, gsub, s_out, r_drv, tol=1e-9, max_iter=500):
    """Fixed-point solve for driven-line voltages sagging under load.

    Each driven line sources current I = sum_j G[l,j] (V_l - Vout_j)
    through a series resistance, so V_l = V_ideal - I * R. Iterates to
    `tol` volts.
    """
    v = dv_drive.copy()
    g_line = np.sum(gsub, axis=1)  # uS
    for _ in range(max_iter):
        vout = (v @ gsub) / s_out
        i_line = v * g_line - vout @ gsub.T  # uA (V times uS)
        v_new = dv_drive - i_line * 1e-6 * r_drv
        if np.max(np.abs(v_new - v)) < tol:
            return v_new
        v = v_new
    return v


def _wire_ir_output(dv_drive, gsub, s_out, r_cell, positions):
    """First-order input-wire IR drop: settled outputs from sagged
    per-cell drive voltages.

    The drive current for cells far from the driver flows through every
    wire segment before them, so the effective voltage seen by the cell at
    wire position p drops by r_cell * (cumulative current past p), with
    segment lengths taken from the physical cell positions. Uses ideal
    currents (first order); the driver sits before position 0.
    """
    vout0 = (dv_drive @ gsub) / s_out
    # per-cell current (B, lines, positions), uA
    i_cell = gsub[None, :, :] * (dv_drive[:, :, None] - vout0[:, None, :])
    flow = np.cumsum(i_cell[:, :, ::-1], axis=2)[:, :, ::-1]
    pitch = np.diff(np.concatenate(([-1], positions))).astype(float)
    drop = np.cumsum(flow * pitch, axis=2) * r_cell * 1e-6  # uA*ohm -> V
    v_eff = dv_drive[:, :, None] - drop
    return np.einsum("blc,lc->bc", v_eff, gsub) / s_out


def mvm_integrate(core, inputs, direction, cfg, nonideal, rng, *,
                  in_start=0, out_start=0, n_out=None, drive="pairs",
                  trace=None):
    """Run the input phase of an MVM and return integrated charge.

    For n-bit signed inputs the magnitude bits are applied MSB first as
    ternary voltage pulses; after each settle the output is sampled and
    integrated 2^k times, so a full conversion uses (n-1) pulses and
    2^(n-1) - 1 sampling cycles. With drive="pairs" each input value
    drives a differential pair of adjacent lines with opposite polarity;
    with drive="lines" each value drives a single line.

    Returns Q in settled-voltage units, shape (batch, n_out); 1-D inputs
    give a 1-D result. Q is proportional to
    sum_i x_i (g+ - g-)_i / sum_i (g+ + g-)_i when all non-idealities are
    off.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    x = np.asarray(inputs, dtype=np.int64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    lim = (1 << (cfg.in_bits - 1)) - 1
    if np.any(np.abs(x) > lim):
        raise ValueError(f"inputs exceed signed {cfg.in_bits}-bit range")
    batch, n_in = x.shape
    n_lines = 2 * n_in if drive == "pairs" else n_in

    row_driven = direction in ROW_DRIVEN
    grid = core.g if row_driven else core.g.T
    if in_start + n_lines > GRID:
        raise ValueError("input span exceeds grid")
    if n_out is None:
        n_out = GRID - out_start
    if out_start + n_out > GRID:
        raise ValueError("output span exceeds grid")

    # Word lines gate rows: in the row-driven direction only rows inside
    # the input span conduct, so a sensed column is loaded by the active
    # rows alone; in the column-driven direction all word lines are
    # activated and a sensed row sees its full row conductance.
    g_drive = grid[in_start:in_start + n_lines, :]
    s_all = np.sum(g_drive, axis=0) if row_driven else np.sum(grid, axis=0)
    ir_on = ((nonideal.ir_drop_driver and nonideal.r_drv > 0) or
             (nonideal.ir_drop_wire and nonideal.r_cell > 0))
    if ir_on:
        # shared drivers couple every settled line, so solve across all
        # lines that have cells and slice the sensed span afterwards
        positions = np.flatnonzero(s_all > 0)
    else:
        positions = np.arange(out_start, out_start + n_out)
    gsub = g_drive[:, positions]
    s_out = s_all[positions]
    if np.any(s_all[out_start:out_start + n_out] <= 0):
        raise ZeroDivisionError("sensed line with all-zero conductance")
    if ir_on:
        out_sel = np.searchsorted(positions,
                                  np.arange(out_start, out_start + n_out))
    else:
        out_sel = None

    planes = _bit_planes(x, cfg.in_bits)
    q = np.zeros((batch, positions.size))
    n_cycles = (1 << (cfg.in_bits - 1)) - 1

    for k, plane in zip(range(cfg.in_bits - 2, -1, -1), planes):
        if drive == "pairs":
            dv = np.zeros((batch, n_lines))
            dv[:, 0::2] = plane * cfg.v_read
            dv[:, 1::2] = -plane * cfg.v_read
        else:
            dv = plane.astype(float) * cfg.v_read

        if trace is not None:
            trace.add_inputs(dv)

        if nonideal.ir_drop_driver and nonideal.r_drv > 0:
            dv_eff = _solve_driver_ir(dv, gsub, s_out, nonideal.r_drv)
        else:
            dv_eff = dv

        if nonideal.ir_drop_wire and nonideal.r_cell > 0:
            vout = np.empty((batch, positions.size))
            for lo in range(0, batch, 32):  # bound the 3-D intermediate
                hi = min(lo + 32, batch)
                vout[lo:hi] = _wire_ir_output(dv_eff[lo:hi], gsub, s_out,
                                              nonideal.r_cell, positions)
        else:
            vout = (dv_eff @ gsub) / s_out

        if nonideal.coupling_sigma > 0:
            vout = vout + rng.normal(0.0, nonideal.coupling_sigma,
                                     size=vout.shape)
        q += (1 << k) * vout

    if out_sel is not None:
        q = q[:, out_sel]

    if trace is not None:
        pulses = cfg.in_bits - 1
        trace.input_pulses += pulses * batch
        trace.settle_events += pulses * batch
        trace.sample_cycles += n_cycles * batch
        wl_count = n_lines if row_driven else GRID
        trace.wl_toggles += wl_count * pulses * batch
        trace.macs += n_in * n_out * batch
        trace.latency_events += (pulses + n_cycles) * batch

    return q[0] if single else q


@lru_cache(maxsize=16)
def _counter_starts(breakpoints, n_max):
    """First decrement step at which each counter value appears.

    Below the first breakpoint the counter tracks steps 1:1; past a
    breakpoint (b, s) every increment costs s steps; past the table the
    cost keeps growing by one per increment.
    """
    bps = sorted(breakpoints)

    def span(c):
        if not bps or c <= bps[0][0]:
            return 1
        s = 1
        for b, sp in bps:
            if c > b:
                s = sp
        last_b, last_s = bps[-1]
        if c > last_b:
            s = last_s + (c - last_b - 1)
        return s

    starts = [0]
    while starts[-1] <= n_max:
        starts.append(starts[-1] + span(len(starts) - 1))
    return np.array(starts)


def _counter_of_steps(steps, cfg):
    starts = _counter_starts(tuple(cfg.sigmoid_breakpoints), cfg.n_max)
    return np.searchsorted(starts, np.asarray(steps), side="right") - 1


def activation_map(sign, raw_steps, cfg):
    """Fold the neuron activation into the step count -> code mapping.

    relu skips the decrement phase entirely for negative signs. tanh runs
    the counter through the breakpoint schedule and keeps the sign.
    sigmoid additionally shifts/rescales the tanh counter into the
    non-negative code range.
    """
    sign = np.asarray(sign)
    steps = np.asarray(raw_steps)
    if np.any(steps > cfg.n_max):
        raise ValueError("raw_steps exceeds n_max")
    if cfg.activation == "identity":
        return (sign * steps).astype(np.int64)
    if cfg.activation == "relu":
        return np.where(sign < 0, 0, steps).astype(np.int64)
    if cfg.activation in ("tanh", "sigmoid"):
        counter = _counter_of_steps(steps, cfg)
        signed = sign * counter
        if cfg.activation == "tanh":
            return signed.astype(np.int64)
        counter_max = int(_counter_of_steps(
            np.array(cfg.magnitude_cap), cfg))
        p = (signed + counter_max) / (2.0 * counter_max)
        return round_half_away(p * cfg.magnitude_cap).astype(np.int64)
    raise ValueError(f"activation_map does not handle {cfg.activation!r}")


def _adc_raw(q, cfg, offset=0.0):
    qe = np.asarray(q, dtype=float) + offset
    sign = np.where(qe >= 0, 1, -1)
    steps = round_half_away(np.abs(qe) / cfg.q_step)
    steps = np.minimum(steps, cfg.magnitude_cap).astype(np.int64)
    return sign, steps


def adc_convert(q, cfg, offset=0.0):
    """Charge -> signed code: comparator sign, then counted charge
    decrements (mid-tread, round half away from zero), clipped at
    min(2^(out_bits-1)-1, n_max-1), then the activation mapping."""
    sign, steps = _adc_raw(q, cfg, offset)
    codes = activation_map(sign, steps, cfg)
    scalar = np.ndim(q) == 0 and np.ndim(offset) == 0
    return int(codes) if scalar else codes


def stochastic_sample(q, cfg, pair, half_range=None):
    """Dithered sign bit: 1 iff q plus uniform noise is non-negative.

    Noise is a single pseudo-random draw from the LFSR pair, scaled to
    +/- half_range (default: the full ADC swing). Over many trials the
    hit rate follows a piecewise-linear sigmoid of q.
    """
    if half_range is None:
        half_range = cfg.q_step * (1 << (cfg.out_bits - 1))
    v, _ = lfsr_sample(pair)
    noise = ((v + 0.5) / 65536.0 - 0.5) * 2.0 * half_range
    return 1 if q + noise >= 0 else 0


def mvm(core, inputs, direction, cfg, nonideal, rng, *,
        in_start=0, out_start=0, n_out=None, drive="pairs", trace=None,
        pair=None, offset_correction=None):
    """Full MVM: integrate, then convert every sensed line to a code.

    Per-neuron static ADC offsets apply when enabled in `nonideal`;
    `offset_correction` (volts per sensed line) is added on top, which is
    how calibration cancels measured offsets. Returns an integer code
    array (out_bits wide); the caller denormalizes with the precomputed
    conductance sums.
    """
    if not core.powered:
        raise RuntimeError(f"core {core.core_id} is powered off")
    q = mvm_integrate(core, inputs, direction, cfg, nonideal, rng,
                      in_start=in_start, out_start=out_start, n_out=n_out,
                      drive=drive, trace=trace)
    single = q.ndim == 1
    qb = q[None, :] if single else q
    count = qb.shape[1]

    neuron_map = NEURON_OF_SL if direction in ROW_DRIVEN else NEURON_OF_BL
    lines = np.arange(out_start, out_start + count)
    offs = np.zeros(count)
    if nonideal.adc_offset:
        offs = offs + core.adc_offset_v[neuron_map[lines]]
    if offset_correction is not None:
        offs = offs + np.asarray(offset_correction, dtype=float)

    if cfg.activation == "stochastic":
        if pair is None:
            raise ValueError("stochastic activation needs an LFSR pair")
        codes = np.zeros(qb.shape, dtype=np.int64)
        for b in range(qb.shape[0]):
            for j in range(count):
                codes[b, j] = stochastic_sample(qb[b, j] + offs[j], cfg, pair)
        if trace is not None:
            trace.adc_conversions += codes.size
            trace.latency_events += qb.shape[0]
    else:
        sign, steps = _adc_raw(qb, cfg, offs[None, :])
        codes = activation_map(sign, steps, cfg)
        if trace is not None:
            energy_steps = steps.copy()
            if cfg.activation == "relu":
                energy_steps[sign < 0] = 0  # decrement skipped when negative
            trace.adc_decrement_steps += int(np.sum(energy_steps))
            trace.adc_conversions += codes.size
            trace.latency_events += int(np.sum(np.max(energy_steps, axis=1)))

    return codes[0] if single else codes


def denormalize(codes, column_conductance_sums, cfg):
    """Undo the voltage-mode conductance normalization digitally.

    output_j = code_j * q_step * S_j / (v_read * scale), with S_j the
    precomputed conductance sum of the sensed line.
    """
    s = np.asarray(column_conductance_sums, dtype=float)
    if np.any(s <= 0):
        raise ValueError("conductance sums must be > 0")
    return np.asarray(codes, dtype=float) * cfg.q_step * s / (
        cfg.v_read * cfg.scale)


def nodal_solve(g, dv_drive, r_drv, r_cell, max_dim=64):
    """Exact steady-state solve of the full resistive mesh (small arrays).

    Row wires carry the drive through a driver resistance and per-cell
    segments; each column wire is an open-ended ladder sensed at its far
    end. Returns the sensed column voltages. Used to validate the
    first-order IR-drop models.
    """
    from scipy.sparse import lil_matrix
    from scipy.sparse.linalg import spsolve

    g = np.asarray(g, dtype=float) * 1e-6  # S
    rows, cols = g.shape
    if rows > max_dim or cols > max_dim:
        raise ValueError("nodal solve limited to small arrays")
    g_seg = 1.0 / max(r_cell, 1e-9)
    g_drv = 1.0 / max(r_drv, 1e-9)

    n = rows * cols
    idx_r = lambda r, c: r * cols + c
    idx_c = lambda r, c: n + r * cols + c
    a = lil_matrix((2 * n, 2 * n))
    b = np.zeros(2 * n)

    for r in range(rows):
        for c in range(cols):
            i = idx_r(r, c)
            diag = g[r, c]
            a[i, idx_c(r, c)] = -g[r, c]
            if c == 0:
                diag += g_drv
                b[i] += g_drv * dv_drive[r]
            else:
                diag += g_seg
                a[i, idx_r(r, c - 1)] = -g_seg
            if c + 1 < cols:
                diag += g_seg
                a[i, idx_r(r, c + 1)] = -g_seg
            a[i, i] = diag

    for r in range(rows):
        for c in range(cols):
            i = idx_c(r, c)
            diag = g[r, c]
            a[i, idx_r(r, c)] = -g[r, c]
            if r > 0:
                diag += g_seg
                a[i, idx_c(r - 1, c)] = -g_seg
            if r + 1 < rows:
                diag += g_seg
                a[i, idx_c(r + 1, c)] = -g_seg
            a[i, i] = diag

    v = spsolve(a.tocsr(), b)
    return np.array([v[idx_c(rows - 1, c)] for c in range(cols)])
