"""Deterministic invariant battery behind `rramcim selftest`.

Every check appends one metrics row; the run fails (nonzero exit) if any
check reports 0. Reruns with the same seed write byte-identical files.
"""

from __future__ import annotations

import numpy as np

from .. import chip as chipmod
from .. import coopt, device, mapper
from ..core import (CoreState, IDEAL, NeuronConfig, OpTrace, adc_convert,
                    mvm, neuron_index)
from ..lfsr import LfsrPair, lfsr_sample


def run_selftest(seed=0):
    rows = []
    run_id = f"selftest-{seed}"
    ok = True

    def add(metric, value, unit=""):
        rows.append({"run_id": run_id, "metric": metric, "value": value,
                     "unit": unit, "seed": seed})

    def check(metric, passed):
        nonlocal ok
        ok = ok and bool(passed)
        add(metric, int(bool(passed)), "bool")

    rng = np.random.default_rng(seed)

    # weight <-> conductance round trip
    w = rng.uniform(-1, 1, 500)
    gp, gm = device.encode_weight(w, 1.0, 1.0, 40.0)
    back = device.decode_weight(gp, gm, 1.0, 40.0)
    band = 1.0 / 40.0
    err = np.abs(back - w)
    check("encode_round_trip", np.all(err <= band + 1e-12))

    # write-verify yield on a reduced population
    g = np.zeros(2000)
    t = rng.uniform(1, 40, 2000)
    _, pulses, _, conv = device.write_verify_array(
        g, t, device.ProgramParams(), device.DeviceUpdateRule(), rng)
    add("write_verify_yield", float(np.mean(conv)), "fraction")
    add("write_verify_mean_pulses", float(np.mean(pulses)), "pulses")
    check("write_verify_yield_ok", np.mean(conv) >= 0.99)

    # neuron wiring is a bijection on both axes
    bls = {neuron_index(i, j)[0] for i in range(16) for j in range(16)}
    sls = {neuron_index(i, j)[1] for i in range(16) for j in range(16)}
    check("neuron_index_bijection", bls == set(range(256)) and
          sls == set(range(256)))

    # ideal-mode oracle equivalence on small random cases
    bad = 0
    for _ in range(20):
        r, c = 16, 12
        wm = rng.uniform(-1, 1, (r, c))
        gp, gm = device.encode_weight(wm, 1.0, 1.0, 40.0)
        cs = CoreState.fresh()
        cs.g[0:2 * r:2, :c] = gp
        cs.g[1:2 * r:2, :c] = gm
        cfg = NeuronConfig(in_bits=4, out_bits=8, q_step=0.002)
        x = rng.integers(-7, 8, r)
        codes = mvm(cs, x, "forward", cfg, IDEAL, rng, n_out=c)
        d = gp - gm
        s = np.sum(gp + gm, axis=0)
        q = cfg.v_read * (x @ d) / s
        expect = np.sign(q) * np.minimum(
            np.floor(np.abs(q) / cfg.q_step + 0.5), cfg.magnitude_cap)
        bad += int(not np.array_equal(codes, expect.astype(int)))
    add("mvm_oracle_mismatches", bad, "cases")
    check("mvm_oracle_ok", bad == 0)

    # bit-serial cycle counts
    cs = CoreState.fresh()
    cs.g[:32, :8] = 10.0
    counts_ok = True
    for in_bits in range(2, 7):
        tr = OpTrace()
        cfg = NeuronConfig(in_bits=in_bits, q_step=0.01)
        mvm(cs, np.zeros(16, dtype=int), "forward", cfg, IDEAL, rng,
            n_out=8, trace=tr)
        counts_ok &= tr.input_pulses == in_bits - 1
        counts_ok &= tr.sample_cycles == (1 << (in_bits - 1)) - 1
    check("bit_serial_counts", counts_ok)

    # ADC: zero code, monotonicity, saturation
    cfg = NeuronConfig(q_step=0.01, out_bits=8)
    qs = np.linspace(-2, 2, 2001)
    codes = adc_convert(qs, cfg)
    check("adc_monotone", np.all(np.diff(codes) >= 0))
    check("adc_zero", adc_convert(0.0, cfg) == 0)
    check("adc_saturation", adc_convert(10.0, cfg) == 127)

    # LFSR period
    pair = LfsrPair.from_seed(seed or 1)
    f0 = pair.forward_state
    seen = 0
    state = f0
    for _ in range(65535):
        state, _ = _step_once(state)
        seen += 1
        if state == f0:
            break
    check("lfsr_full_period", seen == 65535)

    # placement + merge of an over-capacity workload
    segs = []
    for i in range(12):
        segs.append(mapper.Segment(f"a{i}", 0, 0, 256, 0, 64, 0, 0, 10.0))
    for i in range(28):
        segs.append(mapper.Segment(f"b{i}", 0, 0, 256, 0, 200, 0, 0, 1.0))
    for i in range(21):
        segs.append(mapper.Segment(f"c{i}", 0, 0, 82, 0, 64, 0, 0, 1.0))
    plan = mapper.place(segs, protect_intensity=5.0)
    check("placement_valid", not mapper.validate_placement(plan))
    add("placement_cores_used", plan.cores_used, "cores")

    # energy estimator basics
    e0, _ = chipmod.estimate_energy(OpTrace(), chipmod.EnergyConfig())
    check("energy_zero_trace", e0 == 0.0)

    # chip layer vs software reference (ideal, exact programming)
    cfgt = coopt.TrainConfig(epochs=1, seed=seed)
    model = coopt.QuantMLP([16, 12, 10], cfgt, rng)
    ch = chipmod.ChipState(seed=seed)
    dep = coopt.deploy_mlp(ch, model, exact=True)
    xs = rng.random((20, 16))
    got = coopt.chip_forward(ch, dep, xs)
    ref = coopt.software_reference(ch, dep, xs)
    check("chip_matches_reference", np.max(np.abs(got - ref)) < 1e-9)

    add("selftest_pass", int(ok), "bool")
    return ok, rows


def _step_once(state):
    pair = LfsrPair(state, 0x1D2C)
    lfsr_sample(pair)
    return pair.forward_state, pair
