"""Offline stand-in for the desk-scale CIFAR-10 checks.

Runs PAM and the sequential fine-tuning baseline on a proxy stream (digits or
synthetic strokes) with the strokes-pretrained backbone, then the prune_epoch,
magnitude and routing ablations. Prints the same quantities the CIFAR-10
acceptance criteria look at. The numbers are evidence about the proxy only.

    python3 scripts/run_proxy.py --config configs/digits_proxy.yaml
"""

import argparse
import json
import logging
from pathlib import Path

from pam.harness.ablation import run_ablation
from pam.harness.config import load_config, parse_override


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/digits_proxy.yaml")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--no-ablations", action="store_true")
    ap.add_argument("--out", default=None, help="write a JSON summary here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    for item in args.set:
        key, value = parse_override(item)
        cfg = cfg.replace(**{key: value})
    cfg = cfg.replace(eval_strategies=["distance-pooled", "distance-map"])
    root = Path(cfg.output_root) / cfg.name

    from pam.harness.experiment import run_experiment

    pam = run_experiment(cfg.replace(name=f"{cfg.name}/pam"))
    ft = run_experiment(cfg.replace(name=f"{cfg.name}/finetune", method="finetune"))
    summary = {
        "pam_final": pam.final_accuracy,
        "finetune_final": ft.final_accuracy,
        "gap": pam.final_accuracy - ft.final_accuracy,
        "til_final": pam.til_per_stage[-1],
        "til_unchanged": all(v[0] == v[-1] for v in pam.per_task_til.values()),
        "diagonal_fraction": pam.diagonal_fraction,
        "strategy_final": {k: v[-1] for k, v in pam.strategy_accuracy.items()},
        "module_count": pam.module_count,
        "trainable_per_task": pam.param_report["trainable_per_task"],
    }
    if not args.no_ablations:
        for axis, values in (("prune_epoch", [1, 10]), ("magnitude", [0.96, 0.98])):
            rep = run_ablation(cfg, {axis: values}, out_dir=root / f"ablate_{axis}")
            summary[f"ablate_{axis}"] = {str(v): rep.final(v) for v in values}

    for k, v in summary.items():
        print(f"{k:>20}: {v}")
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
