"""Command-line front end binding all modules into reproducible runs."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, dims
from .data import dataset_hash, load_dataset, save_dataset
from .model import DimINOModel, ModelConfig, load_model, save_model
from .solvers import DEFAULT_GRIDS, Grid, SolverConfig, generate_dataset
from .sti import solver_sti_oracle, sti_check
from .training import (
    TrainConfig,
    evaluate,
    format_metric_table,
    grad_check_model,
    history_json,
    train,
)
from .autodiff import standard_primitive_checks

SYSTEMS = ("advection1d", "burgers1d", "diffreact2d", "ns-vorticity2d")

# Long horizon for the 1D/2D benchmark family, unit
# horizon for the vorticity system.
DEFAULT_T = {
    "advection1d": 10.0,
    "burgers1d": 10.0,
    "diffreact2d": 10.0,
    "ns-vorticity2d": 1.0,
}


def _out_dir(args) -> Path:
    root = os.environ.get("DIMINO_OUT", "runs")
    out = Path(args.out) if args.out else Path(root) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _file_hash(path) -> str:
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=16).hexdigest()


def _write_run_record(out: Path, args, inputs: dict) -> None:
    record = {
        "command": args.command,
        "config": {k: v for k, v in vars(args).items() if k != "func"},
        "inputs": inputs,
        "package_version": __version__,
        "registry_version": dims.REGISTRY_VERSION,
    }
    with open(out / "run.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    grid = DEFAULT_GRIDS[args.system]
    if args.grid:
        pts = tuple(int(p) for p in args.grid.split(","))
        grid = Grid(pts, (1.0,) * len(pts))
    t_final = args.t if args.t is not None else DEFAULT_T[args.system]
    ranges = {}
    for spec in args.param or []:
        name, lo, hi = spec.split(",")
        ranges[name] = (float(lo), float(hi))
    cfg = SolverConfig(steps=args.solver_steps)
    dataset = generate_dataset(
        args.system, ranges, args.n, args.seed, grid, t_final, cfg
    )
    if args.n_test:
        test = generate_dataset(
            args.system, ranges, args.n_test, args.seed + 1, grid, t_final, cfg
        )
        dataset.splits["test"] = test.splits["train"]
    save_dataset(dataset, out, dtype=args.dtype)

    spec = dims.REGISTRY[args.system]
    cvals = np.stack(
        [
            dims.compute_dimensionless(spec, dims.characteristic_scales_from_sample(s))
            for split in dataset.splits.values()
            for s in split
        ]
    )
    audit = {
        name: {"min": float(cvals[:, i].min()), "max": float(cvals[:, i].max())}
        for i, name in enumerate(spec.names)
    }
    manifest_path = out / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["dimensionless_audit"] = audit
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write_run_record(out, args, {"dataset_hash": dataset_hash(out)})

    n_total = sum(len(s) for s in dataset.splits.values())
    print(f"wrote {n_total} samples ({args.system}, grid {grid.points}) to {out}")
    for name, rng in audit.items():
        print(f"  {name}: [{rng['min']:.4g}, {rng['max']:.4g}]")
    return 0


def _model_config_from_args(args, dataset, use_dimnorm=True) -> ModelConfig:
    field_names = [
        r["name"]
        for r in json.loads((Path(args.data) / "manifest.json").read_text())["records"]
        if r["kind"] == "field"
    ]
    target_names = [
        r["name"]
        for r in json.loads((Path(args.data) / "manifest.json").read_text())["records"]
        if r["kind"] == "target"
    ]
    return ModelConfig(
        system=dataset.system,
        in_fields=field_names,
        target_fields=target_names,
        rank=dataset.grid.rank,
        width=args.width,
        depth=args.depth,
        modes=args.modes,
        gamma=args.gamma,
        use_dimnorm=use_dimnorm,
        scale_mode=args.scale_mode,
        precision=args.precision,
        init_seed=args.seed,
    )


def cmd_train(args) -> int:
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    cfg = TrainConfig(
        loss=args.loss,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        precision=args.precision,
        scale_mode=args.scale_mode,
        patience=args.patience,
    )
    variants = [("dimino", True)]
    if args.ablate_gate:
        variants.append(("ablated", False))
    tables = {}
    for name, use_dimnorm in variants:
        model = DimINOModel(_model_config_from_args(args, dataset, use_dimnorm))
        try:
            model, history = train(model, dataset, cfg)
        except Exception as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        ckpt = out / (f"{name}-checkpoint.bin" if args.ablate_gate else "checkpoint.bin")
        save_model(model, ckpt)
        (out / f"{name}-history.jsonl").write_text(history_json(history))
        split = "test" if "test" in dataset.splits else "train"
        tables[name] = evaluate(model, dataset, split)
        print(f"{name}: best valid rel-L2 {min(h['valid_rel-l2'] for h in history):.4f} "
              f"({len(history)} epochs), {split} rel-L2 {tables[name]['rel-l2']:.4f}")
    if "ablated" in tables:
        for k in ("rel-l2", "rel-h1", "rel-l1"):
            tables["dimino"][f"{k}-gain"] = (
                tables["ablated"][k] - tables["dimino"][k]
            ) / tables["ablated"][k]
        print(format_metric_table(tables))
    (out / "metrics.json").write_text(json.dumps(tables, indent=2, sort_keys=True) + "\n")
    _write_run_record(out, args, {"dataset_hash": dataset_hash(args.data)})
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    model = load_model(args.ckpt)
    baseline = None
    if args.baseline_ckpt:
        baseline = evaluate(load_model(args.baseline_ckpt), dataset, args.split)
    table = evaluate(model, dataset, args.split, baseline)
    rows = {"model": table}
    if baseline:
        rows["baseline"] = baseline
    print(format_metric_table(rows))
    if args.out:
        out = _out_dir(args)
        (out / "metrics.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        _write_run_record(
            out, args,
            {"dataset_hash": dataset_hash(args.data), "ckpt_hash": _file_hash(args.ckpt)},
        )
    return 0


def cmd_sti_check(args) -> int:
    dataset = load_dataset(args.data)
    model = load_model(args.ckpt)
    baseline = load_model(args.baseline_ckpt) if args.baseline_ckpt else None
    split = args.split if args.split in dataset.splits else "train"
    samples = dataset.split(split)[: args.n]
    p_list = [float(p) for p in args.p.split(",")]
    cfg = SolverConfig(steps=args.solver_steps) if args.solver_steps else None
    report = sti_check(model, samples, p_list, baseline, cfg)
    print(report.format_table())
    if args.oracle:
        res = np.mean([solver_sti_oracle(s, max(p_list), cfg) for s in samples[:4]])
        print(f"solver oracle residual at p={max(p_list):g}: {res:.2e}")
    if args.out:
        out = _out_dir(args)
        (out / "sti-report.json").write_text(report.to_json() + "\n")
        _write_run_record(
            out, args,
            {"dataset_hash": dataset_hash(args.data), "ckpt_hash": _file_hash(args.ckpt)},
        )
    worst_latent = max(e.latent_residual for e in report.entries)
    if args.max_latent is not None and worst_latent > args.max_latent:
        print(f"error: latent residual {worst_latent:.3e} > {args.max_latent:.3e}",
              file=sys.stderr)
        return 1
    return 0


def cmd_grad_check(args) -> int:
    results = standard_primitive_checks(seed=args.seed)
    worst = 0.0
    for name, err in sorted(results.items()):
        print(f"{name:<24}{err:.3e}")
        worst = max(worst, err)

    from .solvers import generate_dataset as gen

    dataset = gen("advection1d", {}, 2, args.seed, Grid((16,), (1.0,)), 1.0)
    cfg = ModelConfig(
        system="advection1d", in_fields=["u"], target_fields=["u"], rank=1,
        width=6, depth=4, modes=4, precision=args.precision, init_seed=args.seed,
    )
    model = DimINOModel(cfg)
    err = grad_check_model(model, dataset.split("train"), seed=args.seed)
    print(f"{'full-model':<24}{err:.3e}")
    worst = max(worst, err)
    print(f"worst relative error: {worst:.3e}")
    if worst > args.threshold:
        print(f"error: gradient check failed ({worst:.3e} > {args.threshold:.1e})",
              file=sys.stderr)
        return 1
    return 0


def cmd_dump_registry(args) -> int:
    print(dims.registry_table(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dimino",
        description="dimension-informed neural operator laboratory",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads; 1 guarantees bit determinism")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a PDE dataset")
    p.add_argument("--system", choices=SYSTEMS, required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", help="points per axis, comma separated")
    p.add_argument("--t", type=float, help="prediction interval")
    p.add_argument("--param", action="append", metavar="NAME,LO,HI")
    p.add_argument("--solver-steps", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model (optionally with its ablated twin)")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--loss", choices=("h1", "l2"), default="h1")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--modes", type=int, default=12)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--scale-mode", choices=("per-sample", "per-dataset"),
                   default="per-sample")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")
    p.add_argument("--ablate-gate", action="store_true",
                   help="also train the gate-free twin for paired comparison")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--baseline-ckpt")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sti-check", help="similarity-transform invariance report")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--baseline-ckpt")
    p.add_argument("--p", default="1,2,4,8")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--split", default="test")
    p.add_argument("--solver-steps", type=int)
    p.add_argument("--max-latent", type=float,
                   help="exit 1 if the latent residual exceeds this")
    p.add_argument("--oracle", action="store_true",
                   help="also run the solver-only invariance oracle")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sti_check)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--precision", choices=("f64",), default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-6)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-registry", help="print the dimensionless-number registry")
    p.set_defaults(func=cmd_dump_registry)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
