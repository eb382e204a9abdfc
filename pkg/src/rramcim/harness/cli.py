"""Command-line front end.

Subcommands: map, validate, program, infer, calibrate, train, finetune,
recover, energy, selftest. Failures print one machine-readable ERROR line
to stderr and exit nonzero; identical inputs and seeds produce
byte-identical output files.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .. import chip as chipmod
from .. import coopt, device, mapper
from . import datasets, formats
from . import rbm as rbmmod
from .selftest import run_selftest


def _save_model(path, model):
    tensors = {}
    for l in range(model.n_layers):
        tensors[f"w{l}"] = model.weights[l]
        tensors[f"b{l}"] = model.biases[l]
    c = model.cfg
    meta = {"kind": "mlp", "sizes": model.sizes,
            "cfg": {"noise_fraction": c.noise_fraction, "lr": c.lr,
                    "epochs": c.epochs, "input_bits": c.input_bits,
                    "act_bits": c.act_bits, "act_clip": c.act_clip,
                    "w_clip": c.w_clip, "batch_size": c.batch_size,
                    "momentum": c.momentum, "seed": c.seed,
                    "finetune_epochs": c.finetune_epochs,
                    "finetune_lr_div": c.finetune_lr_div}}
    formats.save_tensors(path, tensors, meta)


def _load_model(path):
    tensors, meta = formats.load_tensors(path)
    if meta.get("kind") != "mlp":
        raise ValueError(f"{path} does not hold an MLP model")
    cfg = coopt.TrainConfig(**meta["cfg"])
    model = coopt.QuantMLP(meta["sizes"], cfg, np.random.default_rng(0))
    for l in range(model.n_layers):
        model.weights[l] = tensors[f"w{l}"]
        model.biases[l] = tensors[f"b{l}"]
    return model


def _model_matrices(model, g_max=40.0):
    out = {}
    for l in range(model.n_layers):
        out[f"fc{l}"] = coopt._layer_matrix(model, l, 1.0, g_max)
    return out


def _save_chip(path, chip, model, g_max):
    tensors = {}
    used = sorted({a.core_id for a in chip.plan.assignments})
    for cid in used:
        tensors[f"core{cid:02d}"] = chip.cores[cid].g
    for l in range(model.n_layers):
        tensors[f"w{l}"] = model.weights[l]
        tensors[f"b{l}"] = model.biases[l]
    c = model.cfg
    meta = {"kind": "chip", "seed": chip.seed, "g_max": g_max,
            "plan": chip.plan.to_dict(), "cores": used,
            "model_sizes": model.sizes,
            "model_cfg": {"noise_fraction": c.noise_fraction, "lr": c.lr,
                          "epochs": c.epochs, "input_bits": c.input_bits,
                          "act_bits": c.act_bits, "act_clip": c.act_clip,
                          "w_clip": c.w_clip, "batch_size": c.batch_size,
                          "momentum": c.momentum, "seed": c.seed,
                          "finetune_epochs": c.finetune_epochs,
                          "finetune_lr_div": c.finetune_lr_div},
            "nonideal": chip.nonideal.__dict__}
    formats.save_tensors(path, tensors, meta)


def _load_chip(path):
    tensors, meta = formats.load_tensors(path)
    if meta.get("kind") != "chip":
        raise ValueError(f"{path} does not hold a chip state")
    ni = chipmod.NonIdealityConfig(**meta["nonideal"])
    chip = chipmod.ChipState(seed=meta["seed"], nonideal=ni)
    cfg = coopt.TrainConfig(**meta["model_cfg"])
    model = coopt.QuantMLP(meta["model_sizes"], cfg, np.random.default_rng(0))
    for l in range(model.n_layers):
        model.weights[l] = tensors[f"w{l}"]
        model.biases[l] = tensors[f"b{l}"]
    plan = mapper.PlacementPlan.from_dict(meta["plan"])
    matrices = _model_matrices(model, meta["g_max"])
    exec_params = {f"fc{l}": coopt._layer_exec(model, l)
                   for l in range(model.n_layers)}
    chipmod.program_chip(chip, plan, matrices, exec_params=exec_params,
                         exact=True)
    for cid in meta["cores"]:
        chip.cores[cid].g[:, :] = tensors[f"core{cid:02d}"]
    dep = coopt.MlpDeployment(
        [f"fc{l}" for l in range(model.n_layers)], model)
    return chip, dep, meta


def _plan_for_model(model, g_max):
    segs = []
    matrices = _model_matrices(model, g_max)
    for l in range(model.n_layers):
        lid = f"fc{l}"
        segs.extend(mapper.split_matrix(matrices[lid], layer_id=lid))
    return mapper.place(segs), matrices


def cmd_train(args):
    train, test = datasets.digits_split(seed=args.seed)
    arch = [int(s) for s in args.arch.split(",")]
    cfg = coopt.TrainConfig(noise_fraction=args.noise, epochs=args.epochs,
                            seed=args.seed)
    model = coopt.train_noise_mlp(train, arch, cfg)
    _save_model(args.out, model)
    acc = coopt.accuracy(model, test.x, test.y)
    formats.write_metrics(args.metrics or args.out + ".csv", [
        {"run_id": f"train-{args.seed}", "metric": "test_accuracy",
         "value": acc, "unit": "fraction", "seed": args.seed}])
    print(f"trained {arch} test_accuracy={acc:.4f} -> {args.out}")
    return 0


def cmd_map(args):
    model = _load_model(args.model)
    plan, _ = _plan_for_model(model, args.g_max)
    formats.save_plan(args.out, plan)
    print(f"plan: {len(plan.assignments)} segments on {plan.cores_used} "
          f"cores -> {args.out}")
    return 0


def cmd_validate(args):
    plan = formats.load_plan(args.plan)
    violations = mapper.validate_placement(plan)
    for v in violations:
        print(f"violation: {v}")
    print(f"{len(violations)} violations")
    return 0 if not violations else 2


def cmd_program(args):
    model = _load_model(args.model)
    ni = formats.nonideal_from_config(_config(args), args.nonideal)
    chip = chipmod.ChipState(seed=args.seed, nonideal=ni)
    if args.plan:
        plan = formats.load_plan(args.plan)
        matrices = _model_matrices(model, args.g_max)
    else:
        plan, matrices = _plan_for_model(model, args.g_max)
    exec_params = {f"fc{l}": coopt._layer_exec(model, l)
                   for l in range(model.n_layers)}
    report = chipmod.program_chip(chip, plan, matrices,
                                  exec_params=exec_params)
    _save_chip(args.out, chip, model, args.g_max)
    print(f"programmed {report.total_cells} cells, initial yield "
          f"{report.initial_yield:.4f} -> {args.out}")
    return 0


def cmd_infer(args):
    chip, dep, _ = _load_chip(args.chip)
    x = formats.load_tensor(args.inputs)
    logits = coopt.chip_forward(chip, dep, x)
    formats.save_tensor(args.out, logits)
    print(f"inferred {x.shape[0]} items -> {args.out}")
    return 0


def cmd_calibrate(args):
    chip, dep, meta = _load_chip(args.chip)
    train, _ = datasets.digits_split(seed=args.seed)
    model = dep.model
    entries = {}
    feats = coopt.quantize_input_codes(train.x[:args.samples], model)
    for l in range(model.n_layers):
        lid = dep.layer_id(l)
        entries[lid] = coopt.calibrate_layer(
            chip, lid, coopt.TrainSplit(feats, train.y[:args.samples]))
        if l < model.n_layers - 1:
            feats = chipmod.execute_layer(chip, lid, feats)
    formats.save_calibration(args.out, entries)
    print(f"calibrated {len(entries)} layers -> {args.out}")
    return 0


def cmd_finetune(args):
    model = _load_model(args.model)
    train, test = datasets.digits_split(seed=args.seed)
    ni = formats.nonideal_from_config(_config(args), args.nonideal)
    if args.nonideal is None:
        ni = chipmod.NonIdealityConfig(relaxation=True, ir_drop_driver=True,
                                       r_drv=100.0)
    chip = chipmod.ChipState(seed=args.seed, nonideal=ni)
    tuned, trace = coopt.finetune_chip_in_loop(model, chip, train,
                                               model.cfg, g_max=args.g_max)
    _save_model(args.out, tuned)
    dep = coopt.MlpDeployment(
        [f"fc{l}" for l in range(model.n_layers)], tuned)
    acc = coopt.chip_accuracy(chip, dep, test.x, test.y)
    rows = [{"run_id": f"finetune-{args.seed}",
             "metric": f"hybrid_train_accuracy_layer{t['layer']}",
             "value": t["train_accuracy"], "unit": "fraction",
             "seed": args.seed} for t in trace]
    rows.append({"run_id": f"finetune-{args.seed}",
                 "metric": "chip_test_accuracy", "value": acc,
                 "unit": "fraction", "seed": args.seed})
    formats.write_metrics(args.metrics or args.out + ".csv", rows)
    print(f"fine-tuned; chip test accuracy {acc:.4f} -> {args.out}")
    return 0


def cmd_recover(args):
    train, test = datasets.digits_split(seed=args.seed, binary=True)
    model, _ = rbmmod.cd1_train_rbm(train.x, args.hidden, args.epochs, 0.1,
                                    np.random.default_rng(args.seed))
    ni = formats.nonideal_from_config(_config(args), args.nonideal)
    chip = chipmod.ChipState(seed=args.seed, nonideal=ni)
    rbm = rbmmod.deploy_rbm(chip, model, core_ids=list(range(args.cores)))
    rec, cor = rbmmod.recovery_experiment(
        chip, rbm, test.x[:args.images], args.flip, args.cycles, args.seed)
    rows = [
        {"run_id": f"recover-{args.seed}", "metric": "recovered_l2",
         "value": rec, "unit": "l2", "seed": args.seed},
        {"run_id": f"recover-{args.seed}", "metric": "corrupted_l2",
         "value": cor, "unit": "l2", "seed": args.seed},
        {"run_id": f"recover-{args.seed}", "metric": "error_ratio",
         "value": rec / cor, "unit": "fraction", "seed": args.seed},
    ]
    formats.write_metrics(args.out, rows)
    print(f"recovery ratio {rec / cor:.3f} over {args.images} images "
          f"-> {args.out}")
    return 0


def cmd_energy(args):
    with open(args.trace, encoding="utf-8") as f:
        doc = json.load(f)
    trace = chipmod.OpTrace(**doc)
    cfg = chipmod.EnergyConfig(**_config(args).get("energy", {}))
    total, breakdown = chipmod.estimate_energy(trace, cfg)
    rows = [{"run_id": "energy", "metric": f"energy_{k}", "value": v,
             "unit": "J", "seed": args.seed} for k, v in breakdown.items()]
    rows.append({"run_id": "energy", "metric": "energy_total",
                 "value": total, "unit": "J", "seed": args.seed})
    rows.append({"run_id": "energy", "metric": "latency",
                 "value": chipmod.estimate_latency(trace), "unit": "s",
                 "seed": args.seed})
    formats.write_metrics(args.out, rows)
    print(f"total {total:.3e} J -> {args.out}")
    return 0


def cmd_selftest(args):
    ok, rows = run_selftest(seed=args.seed)
    if args.out:
        formats.write_metrics(args.out, rows)
    for r in rows:
        print(f"{r['metric']}={r['value']}")
    print("selftest:", "PASS" if ok else "FAIL")
    return 0 if ok else 2


def _config(args):
    if getattr(args, "config", None):
        return formats.load_config(args.config)
    return {}


def build_parser():
    p = argparse.ArgumentParser(prog="rramcim")
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nonideal",
                   help="comma list of non-idealities, or all|none")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("train", help="noise-resilient MLP training")
    s.add_argument("--arch", default="64,24,16,10")
    s.add_argument("--noise", type=float, default=0.15)
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("map", help="model -> placement plan")
    s.add_argument("--model", required=True)
    s.add_argument("--g-max", type=float, default=40.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_map)

    s = sub.add_parser("validate", help="check a placement plan")
    s.add_argument("plan")
    s.set_defaults(fn=cmd_validate)

    s = sub.add_parser("program", help="plan + weights -> chip state file")
    s.add_argument("--model", required=True)
    s.add_argument("--plan")
    s.add_argument("--g-max", type=float, default=40.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_program)

    s = sub.add_parser("infer", help="chip state + inputs -> outputs")
    s.add_argument("--chip", required=True)
    s.add_argument("--inputs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("calibrate", help="tune per-layer operating points")
    s.add_argument("--chip", required=True)
    s.add_argument("--samples", type=int, default=128)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("finetune", help="chip-in-the-loop fine-tuning")
    s.add_argument("--model", required=True)
    s.add_argument("--g-max", type=float, default=10.0)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("recover", help="RBM image recovery demo")
    s.add_argument("--hidden", type=int, default=16)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--cores", type=int, default=4)
    s.add_argument("--images", type=int, default=100)
    s.add_argument("--flip", type=float, default=0.2)
    s.add_argument("--cycles", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_recover)

    s = sub.add_parser("energy", help="trace JSON -> energy report")
    s.add_argument("--trace", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_energy)

    s = sub.add_parser("selftest", help="run the invariant battery")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_selftest)
    return p


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:  # one machine-readable line, nonzero exit
        print("ERROR " + json.dumps(
            {"type": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
