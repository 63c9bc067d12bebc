"""Command line entry point: ``fedcil run | sweep-T | compare | export``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Sequence

from . import experiment as ex
from .errors import FedcilError
from .metrics import write_csv


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set consolidation.iterations=20")
    for f in dataclasses.fields(ex.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, action="store_true", default=None)
        elif isinstance(f.default, tuple):
            p.add_argument(flag, dest=f.name, nargs="+", default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None)


def config_from_args(args: argparse.Namespace) -> ex.ExperimentConfig:
    overrides = {}
    for f in dataclasses.fields(ex.ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = v
    for item in args.set:
        if "=" not in item:
            raise FedcilError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = ex._parse_value(v.strip())
    if args.config:
        return ex.ExperimentConfig.load(args.config, overrides)
    return ex.ExperimentConfig.from_mapping(overrides)


def _print_rows(rows: list[dict], keys: Sequence[str]) -> None:
    print("\t".join(keys))
    for r in rows:
        print("\t".join(f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k]) for k in keys))


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    art = ex.run(cfg)
    s = art.summary()
    print(f"{cfg.method}: final accuracy {s['mean']:.4f} +/- {s['std']:.4f} "
          f"over seeds {s['seeds']} -> {cfg.output_dir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = config_from_args(args)
    rows = ex.sweep_local_iterations(cfg, args.t_values, write=True)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep_T.csv", ["T", "R", "mean", "std", "delta_var"],
              [[r["T"], r["R"], repr(r["mean"]), repr(r["std"]), repr(r["delta_var"])]
               for r in rows])
    _print_rows(rows, ["T", "R", "mean", "std", "delta_var"])
    return 0


def cmd_compare(args) -> int:
    base = config_from_args(args)
    out = Path(base.output_dir)
    if args.ablations:
        configs = ex.ablation_configs(base)
    else:
        methods = args.methods or list(ex.METHODS)
        configs = {m: base.replace(method=m, output_dir=str(out / m)) for m in methods}
    rows = ex.compare_methods(configs, write=True)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "compare.csv", ["name", "method", "mean", "std"],
              [[r["name"], r["method"], repr(r["mean"]), repr(r["std"])] for r in rows])
    _print_rows(rows, ["name", "mean", "std"])
    return 0


def cmd_export(args) -> int:
    kinds = ex.PLOT_KINDS if args.kind == "all" else [args.kind]
    for kind in kinds:
        for path in ex.export_plot_data(args.run_dir, kind, args.out):
            print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcil",
                                     description="Class-incremental federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration over its seeds")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-T", help="accuracy against local iterations")
    _add_config_flags(p)
    p.add_argument("--t-values", type=int, nargs="+", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="rank methods or ablations on shared seeds")
    _add_config_flags(p)
    p.add_argument("--methods", nargs="+", choices=ex.METHODS)
    p.add_argument("--ablations", action="store_true",
                   help="compare full FedCIL against its three ablations")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export", help="write CSV plot data from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--kind", required=True, choices=list(ex.PLOT_KINDS) + ["all"])
    p.add_argument("--out", help="output directory (default: <run_dir>/plots)")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FedcilError as exc:
        print(f"fedcil: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
