"""RRAM cell model: weight encoding, write-verify programming, relaxation.

Conductances are in microsiemens (uS) throughout. Weights map to a
differential pair of cells on adjacent rows of the same column; each cell
is programmed by an incremental-pulse write-verify loop and afterwards
drifts once ("relaxation") by a conductance-dependent Gaussian amount.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Physical ceiling for any cell conductance (uS). Targets stay at or
# below g_max, which is always configured <= this.
G_MAX_HARD = 50.0


@dataclass
class CellState:
    """One cell: conductance plus programming history counters."""

    conductance: float = 0.0
    polarity_reversals: int = 0
    pulses_applied: int = 0


@dataclass
class ProgramParams:
    """Write-verify settings. Voltages in V, conductances in uS."""

    v_set_init: float = 1.2
    v_reset_init: float = 1.5
    v_increment: float = 0.1
    pulse_width: float = 1e-6  # metadata only, no behavioral effect
    acceptance: float = 1.0
    reversal_timeout: int = 30
    g_min: float = 1.0
    g_max: float = 40.0

    def __post_init__(self):
        if self.acceptance <= 0:
            raise ValueError("acceptance must be > 0")
        if self.reversal_timeout < 1:
            raise ValueError("reversal_timeout must be >= 1")
        if not self.g_min < self.g_max:
            raise ValueError("g_min must be < g_max")


@dataclass
class DeviceUpdateRule:
    """Synthetic pulse response: dg = gain * (V - threshold) + noise.

    The SET branch moves conductance up, RESET moves it down. Gains in
    uS/V, thresholds in V, cycle noise sigma in uS. Defaults are tuned so
    the default ProgramParams converge >=99% of random targets within the
    reversal timeout.
    """

    set_gain: float = 5.0
    set_threshold: float = 1.1
    reset_gain: float = 5.0
    reset_threshold: float = 1.4
    cycle_noise_sigma: float = 0.5

    def __post_init__(self):
        if self.set_gain <= 0 or self.reset_gain <= 0:
            raise ValueError("gains must be > 0")
        if self.set_threshold <= 0 or self.reset_threshold <= 0:
            raise ValueError("thresholds must be > 0")


# Default post-programming drift model: sigma anchors at 12 uS (peak) and
# mid-range, linear in between, smaller near the floor and ceiling.
DEFAULT_SIGMA_TABLE = ((1.0, 0.5), (12.0, 3.87), (26.0, 2.8), (40.0, 2.0))


@dataclass
class RelaxationModel:
    """Conductance-dependent Gaussian drift applied once after programming.

    sigma_table holds (conductance, sigma) sample points; sigma is
    piecewise-linear between points and clamps to the endpoint values
    outside the table. Cells sitting at the floor only drift upward.
    """

    sigma_table: tuple = DEFAULT_SIGMA_TABLE
    mean_bias: float = 0.0
    floor: float = 1.0

    def __post_init__(self):
        pts = sorted((float(g), float(s)) for g, s in self.sigma_table)
        if any(s < 0 for _, s in pts):
            raise ValueError("sigma must be >= 0 everywhere")
        self._g = np.array([g for g, _ in pts])
        self._s = np.array([s for _, s in pts])

    def sigma(self, g):
        """Interpolated sigma (uS) at conductance g (scalar or array)."""
        return np.interp(g, self._g, self._s)


@dataclass
class ProgramResult:
    converged: bool
    pulses: int
    final_g: float


@dataclass
class ArrayProgramStats:
    """Bookkeeping from programming a whole array (possibly iteratively)."""

    converged_fraction: float
    mean_pulses: float
    per_iteration_sigma: list = field(default_factory=list)
    reprogram_counts: list = field(default_factory=list)


def encode_weight(w, w_max, g_min, g_max):
    """Map weights to differential conductance pairs (g_plus, g_minus).

    g_plus = max(g_max * w / w_max, g_min) and g_minus is the mirror, so
    exactly one side rises above the floor for any |w| large enough to
    clear it. Accepts scalars or arrays.
    """
    w = np.asarray(w, dtype=float)
    if w_max <= 0:
        raise ValueError("w_max must be > 0")
    if np.any(np.abs(w) > w_max):
        raise ValueError("|w| exceeds w_max")
    # divide first: w/w_max <= 1 exactly, so the targets cannot round a
    # hair above g_max
    scaled = g_max * (w / w_max)
    g_plus = np.minimum(np.maximum(scaled, g_min), g_max)
    g_minus = np.minimum(np.maximum(-scaled, g_min), g_max)
    if g_plus.ndim == 0:
        return float(g_plus), float(g_minus)
    return g_plus, g_minus


def decode_weight(g_plus, g_minus, w_max, g_max):
    """Inverse of encode_weight for round-trip checks: (g+ - g-) * w_max / g_max."""
    g_plus = np.asarray(g_plus, dtype=float)
    g_minus = np.asarray(g_minus, dtype=float)
    if np.any(g_plus < 0) or np.any(g_minus < 0):
        raise ValueError("conductances must be >= 0")
    out = (g_plus - g_minus) * w_max / g_max
    return float(out) if out.ndim == 0 else out


def write_verify_array(g, targets, params, rule, rng, g_max_hard=G_MAX_HARD,
                       max_pulses=4096):
    """Vectorized incremental-pulse write-verify over an array of cells.

    Each cell runs the same loop: pulse, read, and either stop (inside the
    acceptance band), keep going with the amplitude stepped up, or reverse
    polarity after overshooting past the target. Amplitude restarts from
    the new polarity's initial voltage on every reversal. A cell gives up
    after `reversal_timeout` reversals.

    Mutates and returns g; also returns (pulses, reversals, converged)
    arrays of the same shape.
    """
    g = np.asarray(g, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.shape != g.shape:
        raise ValueError("targets shape must match cell array shape")
    if np.any(targets < params.g_min) or np.any(targets > params.g_max):
        raise ValueError("target outside [g_min, g_max]")

    shape = g.shape
    gf = g.reshape(-1)
    tf = targets.reshape(-1)
    n = gf.size

    pulses = np.zeros(n, dtype=np.int64)
    reversals = np.zeros(n, dtype=np.int64)
    converged = np.abs(gf - tf) <= params.acceptance
    active = ~converged
    # polarity +1 = SET (increase), -1 = RESET (decrease)
    polarity = np.where(gf < tf, 1, -1)
    voltage = np.where(polarity > 0, params.v_set_init, params.v_reset_init)

    total = 0
    while np.any(active) and total < max_pulses:
        total += 1
        idx = np.flatnonzero(active)
        pol = polarity[idx]
        v = voltage[idx]
        gain = np.where(pol > 0, rule.set_gain, rule.reset_gain)
        thr = np.where(pol > 0, rule.set_threshold, rule.reset_threshold)
        dg = gain * (v - thr)
        if rule.cycle_noise_sigma > 0:
            dg = dg + rng.normal(0.0, rule.cycle_noise_sigma, size=idx.size)
        gf[idx] = np.clip(gf[idx] + pol * dg, 0.0, g_max_hard)
        pulses[idx] += 1

        err = gf[idx] - tf[idx]
        done = np.abs(err) <= params.acceptance
        # overshoot: landed on the far side of the target for this polarity
        over = ~done & (np.sign(err) == pol)
        cont = ~done & ~over

        converged[idx[done]] = True
        active[idx[done]] = False

        oi = idx[over]
        reversals[oi] += 1
        timed_out = reversals[oi] >= params.reversal_timeout
        active[oi[timed_out]] = False
        keep = oi[~timed_out]
        polarity[keep] = -polarity[keep]
        voltage[keep] = np.where(polarity[keep] > 0,
                                 params.v_set_init, params.v_reset_init)
        voltage[idx[cont]] += params.v_increment

    g[...] = gf.reshape(shape)
    return g, pulses.reshape(shape), reversals.reshape(shape), converged.reshape(shape)


def write_verify_cell(cell, target, params, rule, rng, g_max_hard=G_MAX_HARD):
    """Program a single cell to `target`; returns a ProgramResult.

    Shares the array implementation so scalar and bulk programming behave
    identically. Updates the cell's history counters in place.
    """
    g = np.array([cell.conductance])
    t = np.array([float(target)])
    g, pulses, reversals, conv = write_verify_array(
        g, t, params, rule, rng, g_max_hard=g_max_hard)
    cell.conductance = float(g[0])
    cell.pulses_applied += int(pulses[0])
    cell.polarity_reversals += int(reversals[0])
    return ProgramResult(bool(conv[0]), int(pulses[0]), float(g[0]))


def apply_relaxation(g, model, rng, g_max_hard=G_MAX_HARD):
    """Perturb programmed conductances by one relaxation event, in place.

    Each cell gets an independent Gaussian draw with sigma interpolated
    from the model at its current conductance. Results clip to
    [0, g_max_hard]; cells at or below the model floor clip one-sidedly
    (they cannot drift below the floor).
    """
    g = np.asarray(g, dtype=float)
    sig = model.sigma(g)
    draw = rng.normal(model.mean_bias, 1.0, size=g.shape) * sig
    at_floor = g <= model.floor
    lo = np.where(at_floor, g, 0.0)
    g[...] = np.clip(g + draw, lo, g_max_hard)
    return g


def program_array_iterative(g, targets, iterations, params, rule, model, rng,
                            g_max_hard=G_MAX_HARD):
    """Write-verify an array, then iterate relax -> measure -> fix outliers.

    Relaxation strikes cells freshly written since the previous relaxation
    event; settled cells keep their values. Each iteration records the
    post-relaxation deviation sigma (g - target over the whole array) and
    reprograms only cells outside the acceptance band, which narrows the
    deviation tail over iterations. Cells reprogrammed in the final
    iteration are left unrelaxed for the caller to settle.
    """
    g = np.asarray(g, dtype=float)
    targets = np.asarray(targets, dtype=float)
    g, pulses, _, conv = write_verify_array(
        g, targets, params, rule, rng, g_max_hard=g_max_hard)
    stats = ArrayProgramStats(
        converged_fraction=float(np.mean(conv)),
        mean_pulses=float(np.mean(pulses)),
    )
    fresh = np.ones(g.shape, dtype=bool)
    for _ in range(iterations):
        if np.any(fresh):
            sub = g[fresh]
            apply_relaxation(sub, model, rng, g_max_hard=g_max_hard)
            g[fresh] = sub
        dev = g - targets
        stats.per_iteration_sigma.append(float(np.std(dev)))
        out = np.abs(dev) > params.acceptance
        stats.reprogram_counts.append(int(np.count_nonzero(out)))
        if np.any(out):
            sub = g[out]
            write_verify_array(sub, targets[out], params, rule, rng,
                               g_max_hard=g_max_hard)
            g[out] = sub
        fresh = out
    return g, stats, fresh
