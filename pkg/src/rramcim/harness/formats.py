"""File formats: tensors, tensor containers, plans, run configs,
calibration records, and the metrics CSV.

A tensor file is one UTF-8 JSON header line (shape, dtype tag, endianness)
followed by raw little-endian float32 data; a container generalizes this
to several named tensors after a single header line. Everything else is
plain JSON. Metrics are CSV with a fixed column order so identical runs
produce byte-identical files.
"""

from __future__ import annotations

import json
import os

import numpy as np

from ..core import NonIdealityConfig
from ..mapper import PlacementPlan


def save_tensor(path, array):
    a = np.ascontiguousarray(array, dtype="<f4")
    header = {"shape": list(a.shape), "dtype": "f4", "endian": "little"}
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        f.write(a.tobytes())


def load_tensor(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("dtype") != "f4" or header.get("endian") != "little":
            raise ValueError(f"unsupported tensor header in {path}")
        data = np.frombuffer(f.read(), dtype="<f4")
    return data.reshape(header["shape"]).astype(np.float64)


def save_tensors(path, tensors, meta=None):
    """Multi-tensor container: one JSON header line, then the raw blobs
    concatenated in header order."""
    entries = []
    blobs = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "dtype": "f4"})
        blobs.append(a.tobytes())
    header = {"format": "tensors-v1", "endian": "little",
              "entries": entries, "meta": meta or {}}
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for b in blobs:
            f.write(b)


def load_tensors(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != "tensors-v1":
            raise ValueError(f"{path} is not a tensor container")
        out = {}
        for e in header["entries"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            raw = f.read(4 * n)
            out[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(
                e["shape"]).astype(np.float64)
    return out, header.get("meta", {})


def save_plan(path, plan):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(plan.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


def load_plan(path):
    with open(path, encoding="utf-8") as f:
        return PlacementPlan.from_dict(json.load(f))


def save_calibration(path, entries):
    """entries: layer id -> CalEntry."""
    doc = {}
    for lid, e in entries.items():
        doc[lid] = {"v_scale": e.v_scale, "dot_step": e.dot_step,
                    "requant_lsb": e.requant_lsb,
                    "offsets": {str(k): list(map(float, v))
                                for k, v in e.offsets.items()}}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_calibration(path):
    from ..coopt import CalEntry
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    out = {}
    for lid, e in doc.items():
        out[lid] = CalEntry(v_scale=e["v_scale"], dot_step=e["dot_step"],
                            requant_lsb=e["requant_lsb"],
                            offsets={int(k): np.asarray(v)
                                     for k, v in e["offsets"].items()})
    return out


# Allowed RunConfig keys, by section. Unknown keys are rejected.
_SCHEMA = {
    "seed": None,
    "iterations": None,
    "datasets": {"digits_cache": None},
    "program": {"v_set_init": None, "v_reset_init": None,
                "v_increment": None, "pulse_width": None, "acceptance": None,
                "reversal_timeout": None, "g_min": None, "g_max": None},
    "rule": {"set_gain": None, "set_threshold": None, "reset_gain": None,
             "reset_threshold": None, "cycle_noise_sigma": None},
    "relaxation": {"sigma_table": None, "mean_bias": None, "floor": None},
    "nonideal": {"relaxation": None, "ir_drop_driver": None, "r_drv": None,
                 "ir_drop_wire": None, "r_cell": None, "coupling_sigma": None,
                 "adc_offset": None, "adc_offset_sigma": None},
    "neuron": {"v_read": None, "q_step": None, "n_max": None,
               "out_bits": None, "in_bits": None, "activation": None,
               "scale": None},
    "energy": {"c_par": None, "c_wl": None, "v_wl": None, "v_dd": None,
               "e_adc_step": None, "e_neuron_static": None},
}


class ConfigError(ValueError):
    pass


def validate_config(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key, val in doc.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        sub = _SCHEMA[key]
        if sub is not None:
            if not isinstance(val, dict):
                raise ConfigError(f"section {key!r} must be an object")
            for k in val:
                if k not in sub:
                    raise ConfigError(f"unknown key {key}.{k}")
    return doc


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return validate_config(json.load(f))


def nonideal_from_config(doc, override=None):
    """Build the non-ideality toggles from a config dict plus an optional
    CLI override string (comma list of names, or 'all'/'none')."""
    kw = dict(doc.get("nonideal", {}))
    if override is not None:
        names = {"relaxation", "ir_drop_driver", "ir_drop_wire",
                 "coupling", "adc_offset"}
        if override == "all":
            chosen = names
        elif override == "none":
            chosen = set()
        else:
            chosen = {s.strip() for s in override.split(",") if s.strip()}
            bad = chosen - names
            if bad:
                raise ConfigError(f"unknown non-idealities: {sorted(bad)}")
        kw["relaxation"] = "relaxation" in chosen
        kw["ir_drop_driver"] = "ir_drop_driver" in chosen
        kw["ir_drop_wire"] = "ir_drop_wire" in chosen
        kw["adc_offset"] = "adc_offset" in chosen
        if "coupling" in chosen and not kw.get("coupling_sigma"):
            kw["coupling_sigma"] = 0.001
        if "coupling" not in chosen:
            kw["coupling_sigma"] = 0.0
    return NonIdealityConfig(**kw)


METRIC_COLUMNS = ("run_id", "metric", "value", "unit", "seed")


def write_metrics(path, rows):
    """rows: iterable of dicts with the METRIC_COLUMNS keys.

    Values are rendered with repr so reruns are byte-identical.
    """
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join([
            str(r["run_id"]), str(r["metric"]),
            repr(r["value"]) if isinstance(r["value"], float)
            else str(r["value"]),
            str(r.get("unit", "")), str(r.get("seed", "")),
        ]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_metrics(path):
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        rows = []
        for line in f:
            parts = line.rstrip("\n").split(",")
            rows.append(dict(zip(header, parts)))
    return rows
