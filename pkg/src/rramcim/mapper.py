"""Compile network layers into conductance target matrices and place them
across the 48-core grid.

Weight matrices become differential-row conductance targets with bias rows
appended; matrices larger than one 256x256 core split into row/column
bands, small ones merge diagonally (parallel access) or horizontally
(shared rows, sequential access), and hot layers can be duplicated across
spare cores for data parallelism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import device
from .core import GRID

N_CORES = 48


@dataclass
class LayerSpec:
    """One network layer before mapping.

    Conv weights have shape (H, W, I, O); dense weights (rows, cols).
    computational_intensity is an ops-per-weight hint used by placement.
    """

    kind: str  # conv | dense | rbm_weights
    weights: np.ndarray
    bias: np.ndarray | None = None
    batchnorm: tuple | None = None  # (gamma, beta, mu, var, eps)
    computational_intensity: float = 1.0
    name: str = "layer"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.kind == "conv" and self.weights.ndim != 4:
            raise ValueError("conv weights must be 4-D (H, W, I, O)")
        if self.kind in ("dense", "rbm_weights") and self.weights.ndim != 2:
            raise ValueError("dense weights must be 2-D")
        n_out = self.weights.shape[-1]
        if self.bias is None:
            self.bias = np.zeros(n_out)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.bias.shape != (n_out,):
            raise ValueError("bias length must match output count")


@dataclass
class ConductanceMatrix:
    """Programming targets for one layer: differential rows, bias rows last.

    targets has shape (2 * (logical_rows + bias_rows), n_out) with the
    (+, -) cells of each logical row on adjacent physical rows.
    """

    targets: np.ndarray
    w_max: float
    bias_rows: int
    g_min: float
    g_max: float

    @property
    def rows(self):
        return self.targets.shape[0]

    @property
    def cols(self):
        return self.targets.shape[1]

    @property
    def logical_rows(self):
        return self.rows // 2

    def column_sums(self, row_start=0, row_count=None):
        if row_count is None:
            row_count = self.rows - row_start
        return np.sum(self.targets[row_start:row_start + row_count], axis=0)


def merge_batchnorm(w, b, gamma, beta, mu, var, eps):
    """Fold batch-norm into the preceding layer's weights and bias.

    Per output channel: w' = w * gamma / sqrt(var + eps),
    b' = (b - mu) * gamma / sqrt(var + eps) + beta. The composed forward
    function is unchanged.
    """
    w = np.asarray(w, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.asarray(var, dtype=float) + eps
    if np.any(denom <= 0):
        raise ValueError("var + eps must be > 0")
    scale = np.asarray(gamma, dtype=float) / np.sqrt(denom)
    return w * scale, (b - mu) * scale + beta


def conv_to_matrix(layer, g_min=1.0, g_max=40.0):
    """Flatten a layer into differential conductance targets.

    Conv kernels flatten their (H, W, I) dims into one input vector in C
    order; dense layers map directly. The bias of each output is divided
    evenly over B rows, with B = max(1, ceil(max|b| / max|w|)) so bias
    entries stay inside the weight range. Batch-norm must already be
    merged.
    """
    if layer.batchnorm is not None:
        raise ValueError("merge batchnorm before mapping")
    w = layer.weights
    if layer.kind == "conv":
        h, ww, i, o = w.shape
        flat = w.reshape(h * ww * i, o)
    else:
        flat = w
    b = layer.bias
    w_abs = float(np.max(np.abs(flat)))
    if w_abs == 0:
        raise ValueError(f"all-zero layer {layer.name!r}: w_max undefined")
    b_abs = float(np.max(np.abs(b)))
    bias_rows = max(1, math.ceil(b_abs / w_abs)) if b_abs > 0 else 1
    w_max = max(w_abs, b_abs / bias_rows)

    rows = np.vstack([flat] + [b[None, :] / bias_rows] * bias_rows)
    g_plus, g_minus = device.encode_weight(rows, w_max, g_min, g_max)
    targets = np.empty((2 * rows.shape[0], rows.shape[1]))
    targets[0::2] = g_plus
    targets[1::2] = g_minus
    return ConductanceMatrix(targets=targets, w_max=w_max,
                             bias_rows=bias_rows, g_min=g_min, g_max=g_max)


@dataclass
class Segment:
    """One tile of a layer's conductance matrix."""

    layer_id: str
    seg_id: int
    row_start: int   # physical row offset within the layer matrix (even)
    row_count: int   # even: differential pairs never split
    col_start: int
    col_count: int
    row_band: int    # partial-sum group
    col_band: int
    intensity: float = 1.0


def split_matrix(m, max_rows=GRID, max_cols=GRID, layer_id="layer",
                 intensity=1.0):
    """Tile a conductance matrix into core-sized segments.

    Row bands keep an even height so differential pairs stay together;
    segments in the same column band across row bands form one
    partial-sum group.
    """
    row_step = max_rows - (max_rows % 2)
    segs = []
    seg_id = 0
    for rb, rs in enumerate(range(0, m.rows, row_step)):
        rc = min(row_step, m.rows - rs)
        for cb, csr in enumerate(range(0, m.cols, max_cols)):
            cc = min(max_cols, m.cols - csr)
            segs.append(Segment(layer_id, seg_id, rs, rc, csr, cc, rb, cb,
                                intensity))
            seg_id += 1
    return segs


@dataclass
class Assignment:
    layer_id: str
    seg_id: int
    row_start: int
    row_count: int
    col_start: int
    col_count: int
    core_id: int
    core_row: int
    core_col: int
    dup_group: int = 0
    merge_style: str = "none"  # none | diagonal | horizontal

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class PlacementPlan:
    assignments: list = field(default_factory=list)
    n_cores: int = N_CORES

    @property
    def cores_used(self):
        return len({a.core_id for a in self.assignments})

    def for_layer(self, layer_id):
        return [a for a in self.assignments if a.layer_id == layer_id]

    def to_dict(self):
        return {"n_cores": self.n_cores,
                "assignments": [a.to_dict() for a in self.assignments]}

    @classmethod
    def from_dict(cls, d):
        return cls(assignments=[Assignment(**a) for a in d["assignments"]],
                   n_cores=d.get("n_cores", N_CORES))


class CapacityError(ValueError):
    pass


class _Unit:
    """A group of segments destined for one core."""

    def __init__(self, seg):
        self.members = [(seg, 0, 0)]  # (segment, core_row, core_col)
        self.rows = seg.row_count
        self.cols = seg.col_count

    @property
    def area(self):
        return self.rows * self.cols

    def layer_ids(self):
        return {s.layer_id for s, _, _ in self.members}

    def merge_diagonal(self, other):
        ro, co = self.rows, self.cols
        for seg, r, c in other.members:
            self.members.append((seg, ro + r, co + c))
        self.rows += other.rows
        self.cols += other.cols

    def merge_horizontal(self, other):
        co = self.cols
        for seg, r, c in other.members:
            self.members.append((seg, r, co + c))
        self.rows = max(self.rows, other.rows)
        self.cols += other.cols


def place(segments, n_cores=N_CORES, duplicate_hints=None,
          auto_duplicate=False, protect_intensity=None):
    """Greedy placement of segments onto cores.

    With enough cores each segment gets its own core and any spare cores
    serve as duplicates (explicit `duplicate_hints` = {layer_id: copies},
    or `auto_duplicate` fills spares by descending intensity). When
    segments outnumber cores, the smallest eligible units merge diagonally
    while the combined footprint fits a core, then horizontally; segments
    with wide outputs (cols > 128) or intensity above `protect_intensity`
    are never merged.
    """
    units = [_Unit(s) for s in segments]

    def eligible(u):
        for seg, _, _ in u.members:
            if seg.col_count > 128:
                return False
            if (protect_intensity is not None
                    and seg.intensity > protect_intensity):
                return False
        return True

    while len(units) > n_cores:
        cand = sorted((u for u in units if eligible(u)),
                      key=lambda u: (u.area, u.rows))
        merged = False
        for i in range(len(cand)):
            for j in range(i + 1, len(cand)):
                a, b = cand[i], cand[j]
                if a.rows + b.rows <= GRID and a.cols + b.cols <= GRID:
                    a.merge_diagonal(b)
                    units.remove(b)
                    merged = True
                    break
            if merged:
                break
        if merged:
            continue
        for i in range(len(cand)):
            for j in range(i + 1, len(cand)):
                a, b = cand[i], cand[j]
                if max(a.rows, b.rows) <= GRID and a.cols + b.cols <= GRID:
                    a.merge_horizontal(b)
                    units.remove(b)
                    merged = True
                    break
            if merged:
                break
        if not merged:
            raise CapacityError(
                f"cannot fit {len(units)} units into {n_cores} cores "
                f"(over by {len(units) - n_cores})")

    # duplicates occupy spare cores
    copies = []  # (unit, dup_group)
    group_of_layer = {}
    spares = n_cores - len(units)
    if duplicate_hints:
        for layer_id, want in sorted(duplicate_hints.items()):
            own = [u for u in units if u.layer_ids() == {layer_id}]
            if not own:
                raise CapacityError(
                    f"cannot duplicate merged layer {layer_id!r}")
            extra = (want - 1) * len(own)
            if extra > spares:
                raise CapacityError(
                    f"duplicating {layer_id!r} x{want} needs {extra} spare "
                    f"cores, only {spares} available (over by "
                    f"{extra - spares})")
            for g in range(1, want):
                copies.extend((u, g) for u in own)
            spares -= extra
    elif auto_duplicate and spares > 0:
        order = {}
        for u in units:
            if len(u.layer_ids()) == 1:
                lid = next(iter(u.layer_ids()))
                order.setdefault(lid, []).append(u)
        ranked = sorted(order,
                        key=lambda lid: -max(s.intensity for u in order[lid]
                                             for s, _, _ in u.members))
        group = {lid: 1 for lid in ranked}
        progress = True
        while spares > 0 and progress:
            progress = False
            for lid in ranked:
                need = len(order[lid])
                if need <= spares:
                    copies.extend((u, group[lid]) for u in order[lid])
                    group[lid] += 1
                    spares -= need
                    progress = True
                if spares == 0:
                    break

    plan = PlacementPlan(n_cores=n_cores)
    core = 0
    for u in units:
        for seg, r, c in u.members:
            plan.assignments.append(Assignment(
                seg.layer_id, seg.seg_id, seg.row_start, seg.row_count,
                seg.col_start, seg.col_count, core, r, c, 0))
        core += 1
    for u, g in copies:
        for seg, r, c in u.members:
            plan.assignments.append(Assignment(
                seg.layer_id, seg.seg_id, seg.row_start, seg.row_count,
                seg.col_start, seg.col_count, core, r, c, g))
        core += 1

    _mark_merge_styles(plan)
    return plan


def _mark_merge_styles(plan):
    by_core = {}
    for a in plan.assignments:
        by_core.setdefault(a.core_id, []).append(a)
    for members in by_core.values():
        if len(members) == 1:
            members[0].merge_style = "none"
            continue
        for a in members:
            shared = any(_rows_overlap(a, b) for b in members if b is not a)
            a.merge_style = "horizontal" if shared else "diagonal"


def _rows_overlap(a, b):
    return (a.core_row < b.core_row + b.row_count and
            b.core_row < a.core_row + a.row_count)


def _rects_overlap(a, b):
    return (_rows_overlap(a, b) and
            a.core_col < b.core_col + b.col_count and
            b.core_col < a.core_col + a.col_count)


def validate_placement(plan):
    """Check all placement invariants; returns a list of violations."""
    out = []
    by_core = {}
    for a in plan.assignments:
        if not 0 <= a.core_id < plan.n_cores:
            out.append(f"core id {a.core_id} out of range 0..{plan.n_cores - 1}")
        if a.core_row % 2 != 0 or a.row_count % 2 != 0:
            out.append(f"{a.layer_id}/{a.seg_id}: differential pair split "
                       f"(odd row offset or count)")
        if a.core_row + a.row_count > GRID or a.core_col + a.col_count > GRID:
            out.append(f"{a.layer_id}/{a.seg_id} exceeds core bounds on "
                       f"core {a.core_id}")
        by_core.setdefault(a.core_id, []).append(a)

    for core_id, members in by_core.items():
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                a, b = members[i], members[j]
                if _rects_overlap(a, b):
                    out.append(f"overlap on core {core_id}: "
                               f"{a.layer_id}/{a.seg_id} and "
                               f"{b.layer_id}/{b.seg_id}")
                elif _rows_overlap(a, b):
                    for m in (a, b):
                        if m.merge_style != "horizontal":
                            out.append(
                                f"{m.layer_id}/{m.seg_id} on core {core_id} "
                                f"shares rows but is not marked horizontal")

    groups = {}
    for a in plan.assignments:
        groups.setdefault((a.layer_id, a.dup_group), []).append(a.seg_id)
    layer_segs = {}
    for (layer_id, _), segs in groups.items():
        layer_segs.setdefault(layer_id, set()).update(segs)
    for (layer_id, g), segs in sorted(groups.items()):
        if len(segs) != len(set(segs)):
            out.append(f"{layer_id} group {g}: segment placed twice")
        if set(segs) != layer_segs[layer_id]:
            out.append(f"{layer_id} group {g}: incomplete copy "
                       f"(has {sorted(set(segs))})")
    return out


def interleave_columns(n, k):
    """Round-robin column assignment: unit i goes to core i mod k.

    Spreads adjacent inputs across cores so every core sees a
    down-sampled version of the whole input vector.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    return [np.arange(c, n, k) for c in range(k)]
