"""Command line entry point.

    pam train  --config configs/desk_cifar10.yaml [--set train.epochs=5] [--seeds 0 1 2]
    pam eval   --run runs/desk_cifar10 --strategy distance-map
    pam ablate --config configs/desk_cifar10.yaml --axis magnitude [--values 0.95 0.98]
    pam report runs/desk_cifar10 runs/desk_cifar10_finetune --out runs/summary

``PAM_DATA_ROOT`` and ``PAM_OUTPUT_ROOT`` override the matching config keys.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from ..errors import PAMError
from ..router import STRATEGIES
from .config import RunConfig, apply_env, load_config, parse_override

log = logging.getLogger("pam")


def _resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config, env=False) if args.config else RunConfig()
    changes = dict(parse_override(s) for s in args.set or [])
    if changes:
        cfg = cfg.replace(**changes)
    return apply_env(cfg)


def cmd_train(args: argparse.Namespace) -> int:
    from .experiment import run_experiment, run_seeds

    cfg = _resolve(args)
    if args.seeds:
        summary = run_seeds(cfg, args.seeds)
        print(json.dumps(summary, indent=2))
        return 0
    r = run_experiment(cfg, resume=not args.fresh)
    print(f"{cfg.name}: stages {[round(a, 2) for a in r.per_stage_accuracy]}")
    print(f"average {r.average_accuracy:.2f}  final {r.final_accuracy:.2f}  "
          f"modules {r.module_count}  wall {r.wall_time:.0f}s")
    if r.diagonal_fraction is not None:
        print(f"module-selection diagonal {r.diagonal_fraction:.3f}")
    print(f"report written to {cfg.run_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .experiment import rescore_run
    from .metrics import average_accuracy

    results = rescore_run(Path(args.run), args.strategy, args.ensemble_w)
    accs = [r.accuracy for r in results]
    for b, r in enumerate(results, 1):
        print(f"stage {b}: {r.accuracy:.2f} ({r.correct}/{r.total})")
    print(f"average {average_accuracy(accs):.2f}  final {accs[-1]:.2f}")
    if args.out:
        Path(args.out).write_text(json.dumps({"strategy": args.strategy, "ensemble_w": args.ensemble_w,
                                              "per_stage_accuracy": accs}, indent=2) + "\n")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    from .ablation import run_ablation
    from .report import format_table

    cfg = _resolve(args)
    values = [yaml.safe_load(v) for v in args.values] if args.values else None
    rep = run_ablation(cfg, {args.axis: values})
    rows = [{k: v for k, v in r.items() if k != "per_stage_accuracy"} for r in rep.rows()]
    print(format_table(rows))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from .ablation import AblationReport
    from .experiment import RunReport
    from .report import format_table, plot_ablation, plot_stage_accuracy, render_run, summary_table

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs: dict[str, RunReport] = {}
    for d in map(Path, args.runs):
        if (d / "ablation.json").exists():
            rep = AblationReport.load(d)
            plot_ablation(rep, out / f"{d.name}.png")
            print(format_table([{k: v for k, v in r.items() if k != "per_stage_accuracy"}
                                for r in rep.rows()]))
            continue
        runs[d.name] = RunReport.load(d)
        render_run(d, out / d.name)
    if runs:
        rows = summary_table(runs, out / "summary.csv")
        plot_stage_accuracy(runs, out / "stages.png")
        print(format_table(rows))
    print(f"wrote tables and plots to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pam", description="Pruned adaptation modules for CIL.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML/JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. train.epochs=5 (repeatable)")

    p = sub.add_parser("train", help="train and evaluate one stream")
    with_config(p)
    p.add_argument("--seeds", type=int, nargs="+", help="repeat over seeds and aggregate")
    p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-score a persisted run with another routing strategy")
    p.add_argument("--run", required=True)
    p.add_argument("--strategy", default="confidence", choices=STRATEGIES)
    p.add_argument("--ensemble-w", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="one-axis sweep")
    with_config(p)
    p.add_argument("--axis", required=True,
                   choices=["prune_epoch", "magnitude", "strategy", "ensemble_w", "init", "beta"])
    p.add_argument("--values", nargs="+", help="defaults to the standard grid of the axis")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="tables and plots from persisted runs or sweeps")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PAMError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
