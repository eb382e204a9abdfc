import numpy as np
import pytest

from rramcim import chip as chipmod
from rramcim import coopt, device, mapper
from rramcim.chip import (ChipState, EnergyConfig, ExecParams, OpTrace,
                          estimate_energy, estimate_latency, execute_layer,
                          program_chip, run_network)
from rramcim.core import NeuronConfig, NonIdealityConfig
from rramcim.lfsr import LfsrPair


def sign_matrix_layer(rng, rows=144, cols=32, name="L"):
    """Sign-valued weights give balanced column sums per band, so partial
    codes are exact integers (dot_step = g_max - g_min)."""
    w = rng.choice([-1.0, 1.0], size=(rows, cols))
    b = rng.choice([-1.0, 1.0], size=cols)
    return mapper.conv_to_matrix(mapper.LayerSpec("dense", w, b, name=name))


def sparse_ternary(rng, n, active=6, hot=127):
    x = np.zeros(n, dtype=int)
    idx = rng.choice(hot, size=active, replace=False)
    x[idx] = rng.choice([-1, 1], size=active)
    return x


class TestProgramChip:
    def test_empty_plan(self):
        chip = ChipState(seed=0)
        report = program_chip(chip, mapper.PlacementPlan(), {})
        assert report.segments == []
        assert report.total_cells == 0

    def test_deterministic_rule_within_acceptance(self, rng):
        w = rng.uniform(-1, 1, (8, 8))
        m = mapper.conv_to_matrix(mapper.LayerSpec("dense", w, name="l"))
        plan = mapper.place(mapper.split_matrix(m, layer_id="l"))
        chip = ChipState(seed=1)
        params = device.ProgramParams(v_set_init=1.12, v_reset_init=1.42,
                                      v_increment=0.002, acceptance=0.2)
        rule = device.DeviceUpdateRule(set_gain=10.0, reset_gain=10.0,
                                       cycle_noise_sigma=0.0)
        report = program_chip(chip, plan, {"l": m}, params=params, rule=rule)
        assert report.initial_yield == 1.0
        core = chip.cores[plan.assignments[0].core_id]
        assert np.all(np.abs(core.g[:m.rows, :m.cols] - m.targets) <= 0.2)

    def test_invalid_placement_rejected(self, rng):
        plan = mapper.PlacementPlan(
            [mapper.Assignment("l", 0, 0, 300, 0, 10, 0, 0, 0)])
        with pytest.raises(ValueError, match="invalid placement"):
            program_chip(ChipState(), plan, {})

    def test_relaxation_toggle_controls_drift(self, rng):
        w = rng.uniform(-1, 1, (8, 8))
        m = mapper.conv_to_matrix(mapper.LayerSpec("dense", w, name="l"))
        plan = mapper.place(mapper.split_matrix(m, layer_id="l"))
        chip_off = ChipState(seed=2)
        r_off = program_chip(chip_off, plan, {"l": m})
        chip_on = ChipState(seed=2,
                            nonideal=NonIdealityConfig(relaxation=True))
        r_on = program_chip(chip_on, plan, {"l": m})
        assert r_on.segments[0]["final_sigma"] > \
            r_off.segments[0]["final_sigma"]


class TestExecuteLayer:
    def test_single_segment_matches_core_mvm(self, rng):
        m = sign_matrix_layer(rng, rows=40, cols=16)
        plan = mapper.place(mapper.split_matrix(m, layer_id="L"))
        chip = ChipState(seed=3)
        ep = ExecParams(in_bits=2, activation="identity", input_lsb=1.0,
                        requant_lsb=None, dot_step=39.0)
        program_chip(chip, plan, {"L": m}, exec_params={"L": ep}, exact=True)
        d = m.targets[0::2] - m.targets[1::2]
        for _ in range(20):
            x = sparse_ternary(rng, 40, active=5, hot=40)
            out = execute_layer(chip, "L", x)
            oracle = (np.concatenate([x, [1]]) @ d) * (m.w_max / m.g_max)
            assert np.max(np.abs(out - oracle)) < 1e-12

    def test_row_split_equals_unsplit_oracle(self, rng):
        # 290 physical rows split 256 + 34; sign weights and sparse
        # ternary inputs make every partial code exact
        m = sign_matrix_layer(rng, rows=144, cols=32)
        assert m.rows == 290
        plan = mapper.place(mapper.split_matrix(m, layer_id="L"))
        assert len(plan.assignments) == 2
        chip = ChipState(seed=4)
        ep = ExecParams(in_bits=2, activation="identity", input_lsb=1.0,
                        requant_lsb=None, dot_step=39.0)
        program_chip(chip, plan, {"L": m}, exec_params={"L": ep}, exact=True)
        d = m.targets[0::2] - m.targets[1::2]
        for _ in range(50):
            x = sparse_ternary(rng, 144, active=6)
            out = execute_layer(chip, "L", x)
            oracle = (np.concatenate([x, [1]]) @ d) * (m.w_max / m.g_max)
            assert np.max(np.abs(out - oracle)) < 1e-12

    def test_column_split_identical_outputs(self, rng):
        m = sign_matrix_layer(rng, rows=60, cols=32)
        x = np.stack([sparse_ternary(rng, 60, active=5, hot=60)
                      for _ in range(6)])
        outs = []
        for max_cols in (256, 16):
            plan = mapper.place(mapper.split_matrix(m, max_cols=max_cols,
                                                    layer_id="L"))
            chip = ChipState(seed=5)
            ep = ExecParams(in_bits=2, activation="identity", input_lsb=1.0,
                            requant_lsb=0.05, out_bits=8, out_signed=True,
                            dot_step=39.0)
            program_chip(chip, plan, {"L": m}, exec_params={"L": ep},
                         exact=True)
            outs.append(execute_layer(chip, "L", x))
        assert np.array_equal(outs[0], outs[1])

    def test_duplicate_round_robin(self, rng):
        m = sign_matrix_layer(rng, rows=40, cols=12)
        segs = mapper.split_matrix(m, layer_id="L")
        plan = mapper.place(segs, duplicate_hints={"L": 2})
        chip = ChipState(seed=6)
        ep = ExecParams(in_bits=2, activation="identity", input_lsb=1.0,
                        requant_lsb=None, dot_step=39.0)
        program_chip(chip, plan, {"L": m}, exec_params={"L": ep}, exact=True)
        xs = np.stack([sparse_ternary(rng, 40, active=4, hot=40)
                       for _ in range(4)])
        tr = OpTrace()
        out = execute_layer(chip, "L", xs, trace=tr)
        d = m.targets[0::2] - m.targets[1::2]
        full = np.concatenate([xs, np.ones((4, 1))], axis=1)
        oracle = (full @ d) * (m.w_max / m.g_max)
        assert np.allclose(out, oracle, atol=1e-12)  # order preserved

    def test_unprogrammed_layer_raises(self):
        with pytest.raises(KeyError):
            execute_layer(ChipState(), "ghost", np.zeros((1, 4), dtype=int))

    def test_input_width_checked(self, rng):
        m = sign_matrix_layer(rng, rows=10, cols=4)
        plan = mapper.place(mapper.split_matrix(m, layer_id="L"))
        chip = ChipState(seed=7)
        ep = ExecParams(in_bits=2, dot_step=39.0)
        program_chip(chip, plan, {"L": m}, exec_params={"L": ep}, exact=True)
        with pytest.raises(ValueError, match="range"):
            execute_layer(chip, "L", np.full((1, 10), 5))
        with pytest.raises(ValueError, match="expects"):
            execute_layer(chip, "L", np.zeros((1, 7), dtype=int))

    def test_power_gating_unrelated_cores(self, rng):
        m = sign_matrix_layer(rng, rows=40, cols=12)
        plan = mapper.place(mapper.split_matrix(m, layer_id="L"))
        chip = ChipState(seed=8)
        ep = ExecParams(in_bits=2, activation="identity", input_lsb=1.0,
                        requant_lsb=None, dot_step=39.0)
        program_chip(chip, plan, {"L": m}, exec_params={"L": ep}, exact=True)
        x = sparse_ternary(rng, 40, active=4, hot=40)
        a = execute_layer(chip, "L", x)
        for cid in range(1, 48):
            chip.power(cid, False)
        b = execute_layer(chip, "L", x)
        assert np.array_equal(a, b)
        chip.power(0, False)
        with pytest.raises(RuntimeError):
            execute_layer(chip, "L", x)


class TestRunNetwork:
    def test_single_layer_graph(self, rng):
        m = sign_matrix_layer(rng, rows=20, cols=8)
        plan = mapper.place(mapper.split_matrix(m, layer_id="L"))
        chip = ChipState(seed=9)
        ep = ExecParams(in_bits=2, activation="identity", input_lsb=1.0,
                        requant_lsb=None, dot_step=39.0)
        program_chip(chip, plan, {"L": m}, exec_params={"L": ep}, exact=True)
        x = np.stack([sparse_ternary(rng, 20, active=3, hot=20)])
        out1 = run_network(chip, [{"op": "layer", "id": "L"}], x)
        out2 = execute_layer(chip, "L", x)
        assert np.array_equal(out1, out2)

    def test_two_layer_mlp_bit_exact_vs_software(self, digits):
        train, test = digits
        cfg = coopt.TrainConfig(epochs=3, seed=0)
        model = coopt.train_noise_mlp(train, [64, 16, 10], cfg)
        chip = ChipState(seed=10)
        dep = coopt.deploy_mlp(chip, model, exact=True)
        x = test.x[:50]
        got = coopt.chip_forward(chip, dep, x)
        ref = coopt.software_reference(chip, dep, x)
        assert np.max(np.abs(got - ref)) < 1e-9
        # intermediate codes match exactly
        codes_chip = coopt.chip_forward(chip, dep, x, upto=0)
        a = coopt.quantize_input_codes(x, model).astype(float)
        ls = chip.layers["fc0"]
        m = ls.matrix
        d = m.targets[0::2] - m.targets[1::2]
        full = np.concatenate([a, np.ones((a.shape[0], m.bias_rows))],
                              axis=1)
        grid = ls.exec.dot_step * ls.col_sums[0] / ls.s_ref[0]
        code = np.sign(full @ d) * np.minimum(
            np.floor(np.abs(full @ d) / grid + 0.5), 31)
        real = code * grid * (m.w_max / m.g_max) * ls.exec.input_lsb
        want = np.clip(np.floor(np.maximum(real, 0) / ls.exec.requant_lsb
                                + 0.5), 0, 7)
        assert np.array_equal(codes_chip, want.astype(int))

    def test_conv_node_matches_dense_math(self, rng):
        # one 2x2 conv over a 3x3 single-channel image = 4 patch dots
        w = rng.choice([-1.0, 1.0], size=(2, 2, 1, 3))
        b = np.zeros(3)
        m = mapper.conv_to_matrix(
            mapper.LayerSpec("conv", w, b, name="c0"))
        plan = mapper.place(mapper.split_matrix(m, layer_id="c0"))
        chip = ChipState(seed=11)
        ep = ExecParams(in_bits=2, activation="identity", input_lsb=1.0,
                        requant_lsb=None, dot_step=39.0)
        program_chip(chip, plan, {"c0": m}, exec_params={"c0": ep},
                     exact=True)
        img = rng.choice([0, 1], size=(2, 3, 3, 1)).astype(int)
        out = run_network(chip, [{"op": "conv", "id": "c0",
                                  "in_shape": [3, 3, 1],
                                  "kernel": [2, 2]}], img)
        assert out.shape == (2, 2, 2, 3)
        d = m.targets[0::2] - m.targets[1::2]
        wk = w.reshape(4, 3)
        for bi in range(2):
            for i in range(2):
                for j in range(2):
                    patch = img[bi, i:i + 2, j:j + 2, 0].ravel()
                    oracle = (np.concatenate([patch, [1]]) @ d) * \
                        (m.w_max / m.g_max)
                    assert np.allclose(out[bi, i, j], oracle, atol=1e-12)

    def test_pooling_and_flatten(self):
        chip = ChipState(seed=12)
        x = np.arange(2 * 4 * 4 * 1).reshape(2, 4, 4, 1)
        out = run_network(chip, [{"op": "pool_max", "size": 2}], x)
        assert out.shape == (2, 2, 2, 1)
        assert out[0, 0, 0, 0] == 5
        flat = run_network(chip, [{"op": "flatten"}], out)
        assert flat.shape == (2, 4)
        avg = run_network(chip, [{"op": "pool_avg", "size": 2}], x)
        # host average pool rounds halves away from zero
        assert avg[0, 0, 0, 0] == 3  # mean([0,1,4,5]) = 2.5

    def test_recurrent_node_matches_manual_loop(self, rng):
        n_in, n_state = 6, 8
        w = rng.choice([-1.0, 1.0], size=(n_in + n_state, n_state))
        m = mapper.conv_to_matrix(
            mapper.LayerSpec("dense", w, np.zeros(n_state), name="r"))
        plan = mapper.place(mapper.split_matrix(m, layer_id="r"))
        chip = ChipState(seed=13)
        ep = ExecParams(in_bits=3, activation="relu", input_lsb=1.0,
                        requant_lsb=1.0, out_bits=3, dot_step=39.0,
                        direction="recurrent_bl")
        program_chip(chip, plan, {"r": m}, exec_params={"r": ep},
                     exact=True)
        seq = rng.integers(0, 2, size=(2, 3, n_in))
        out = run_network(chip, [{"op": "recurrent", "id": "r",
                                  "steps": 3}], seq)
        h = np.zeros((2, n_state), dtype=int)
        for t in range(3):
            h = execute_layer(chip, "r",
                              np.concatenate([seq[:, t, :], h], axis=1))
        assert np.array_equal(out, h)

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            run_network(ChipState(), [{"op": "shrug"}], np.zeros((1, 2)))

    def test_seeded_rerun_with_relaxation(self, digits):
        train, test = digits
        cfg = coopt.TrainConfig(epochs=2, seed=1)
        model = coopt.train_noise_mlp(train, [64, 12, 10], cfg)
        outs = []
        for _ in range(2):
            chip = ChipState(seed=77,
                             nonideal=NonIdealityConfig(relaxation=True))
            dep = coopt.deploy_mlp(chip, model)
            outs.append(coopt.chip_forward(chip, dep, test.x[:40]))
        assert np.array_equal(outs[0], outs[1])


class TestEnergy:
    def test_empty_trace_zero(self):
        total, breakdown = estimate_energy(OpTrace(), EnergyConfig())
        assert total == 0.0
        assert all(v == 0.0 for v in breakdown.values())

    def test_mac_term_direct_product(self):
        tr = OpTrace(macs=10 ** 6)
        # two-point voltage distribution with variance 0.01 V^2
        tr.add_inputs(np.array([0.1, -0.1] * 500))
        cfg = EnergyConfig(c_par=1e-15, c_wl=0, v_wl=0, e_adc_step=0,
                           e_neuron_static=0)
        total, _ = estimate_energy(tr, cfg)
        # 1e6 MACs x 1 fF x 0.01 V^2; per-MAC energy is 1e-17 J
        assert total == pytest.approx(1e-11)
        per_mac = total / tr.macs
        assert per_mac == pytest.approx(1e-17)

    def test_additivity(self, rng):
        a = OpTrace(macs=10, wl_toggles=5, adc_decrement_steps=7,
                    adc_conversions=2)
        a.add_inputs(rng.uniform(-0.3, 0.3, 50))
        b = OpTrace(macs=3, wl_toggles=1, adc_decrement_steps=9,
                    adc_conversions=4)
        b.add_inputs(rng.uniform(-0.3, 0.3, 30))
        cfg = EnergyConfig()
        ta, ba = estimate_energy(a, cfg)
        tb, bb = estimate_energy(b, cfg)
        tc, bc = estimate_energy(a + b, cfg)
        for k in ba:
            if k == "mac":
                continue  # var() of pooled voltages is not additive
            assert bc[k] == pytest.approx(ba[k] + bb[k])
        assert bc["wl"] + bc["adc"] + bc["neuron"] == pytest.approx(
            ba["wl"] + ba["adc"] + ba["neuron"] + bb["wl"] + bb["adc"]
            + bb["neuron"])

    def test_adc_energy_increases_with_out_bits(self, rng):
        # constant conversion range, finer steps: decrement counts grow
        from rramcim.core import IDEAL, CoreState, mvm
        w = rng.uniform(-1, 1, (16, 8))
        gp, gm = device.encode_weight(w, 1.0, 1.0, 40.0)
        core = CoreState.fresh()
        core.g[0:32:2, 0:8] = gp
        core.g[1:32:2, 0:8] = gm
        xs = rng.integers(-7, 8, (10, 16))
        full_range = 0.3
        steps = []
        for out_bits in range(4, 9):
            q_step = full_range / (1 << (out_bits - 1))
            cfg = NeuronConfig(in_bits=4, out_bits=out_bits, q_step=q_step)
            tr = OpTrace()
            mvm(core, xs, "forward", cfg, IDEAL, rng, n_out=8, trace=tr)
            steps.append(tr.adc_decrement_steps)
        assert all(a < b for a, b in zip(steps, steps[1:]))
        energies = [estimate_energy(OpTrace(adc_decrement_steps=s),
                                    EnergyConfig())[0] for s in steps]
        assert all(a < b for a, b in zip(energies, energies[1:]))

    def test_latency_scales_events(self):
        tr = OpTrace(latency_events=100)
        assert estimate_latency(tr, ns_per_event=10.0) == pytest.approx(1e-6)

    def test_trace_closed_form(self, rng):
        m = sign_matrix_layer(rng, rows=144, cols=32)
        plan = mapper.place(mapper.split_matrix(m, layer_id="L"))
        chip = ChipState(seed=14)
        ep = ExecParams(in_bits=4, activation="identity", input_lsb=1.0,
                        requant_lsb=None)
        program_chip(chip, plan, {"L": m}, exec_params={"L": ep},
                     exact=True)
        batch = 6
        xs = rng.integers(-7, 8, (batch, 144))
        tr = OpTrace()
        execute_layer(chip, "L", xs, trace=tr)
        pulses = ep.in_bits - 1
        segs = plan.assignments
        assert tr.input_pulses == pulses * batch * len(segs)
        assert tr.sample_cycles == (2 ** (ep.in_bits - 1) - 1) * batch * \
            len(segs)
        expected_wl = sum(a.row_count for a in segs) * pulses * batch
        assert tr.wl_toggles == expected_wl
        assert tr.macs == sum(a.row_count // 2 for a in segs) * 32 * batch

    def test_energy_config_validation(self):
        with pytest.raises(ValueError):
            EnergyConfig(c_par=-1)
