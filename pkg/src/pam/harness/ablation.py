"""One-axis ablation sweeps.

A sweep varies exactly one axis of a base :class:`RunConfig`. Axes that only
change inference (routing strategy, ensemble weight) share one trained
stream: every arm is scored on the same sessions, so differences come from
routing alone.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from ..errors import ConfigurationError
from ..router import STRATEGIES, diagonal_fraction
from .config import RunConfig
from .data import LabeledImages
from .experiment import RunReport, _confusion, average_accuracy, prepare_stream, run_experiment
from .metrics import FeatureCache, evaluate_stage

log = logging.getLogger(__name__)

# axis name -> (config key, default grid)
AXES: dict[str, tuple[str, tuple]] = {
    "prune_epoch": ("train.prune_epoch", (1, 5, 10)),
    "magnitude": ("train.prune_magnitude", (0.95, 0.96, 0.97, 0.98)),
    "strategy": ("strategy", ("confidence", "distance-pooled", "distance-map")),
    "ensemble_w": ("ensemble_w", (1.0, 0.9, 0.8)),
    "init": ("train.init_strategy", ("pretrained", "relevant")),
    "beta": ("train.reuse_beta", (0.70, 0.73, 0.75, 0.77)),
}
EVAL_ONLY = ("strategy", "ensemble_w")


@dataclass
class Sweep:
    axis: str
    values: list[Any]

    @classmethod
    def parse(cls, spec: Mapping[str, Optional[Sequence[Any]]]) -> "Sweep":
        """``{axis: values}`` with exactly one axis; ``values=None`` takes the default grid."""
        if len(spec) != 1:
            raise ConfigurationError(f"a sweep varies exactly one axis, got {sorted(spec)}")
        (axis, values), = spec.items()
        if axis not in AXES:
            raise ConfigurationError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
        values = list(AXES[axis][1] if values is None else values)
        if not values:
            raise ConfigurationError(f"sweep over {axis} has no values")
        if len(set(map(repr, values))) != len(values):
            raise ConfigurationError(f"duplicate values in sweep over {axis}")
        if axis == "strategy":
            bad = [v for v in values if v not in STRATEGIES or v == "oracle"]
            if bad:
                raise ConfigurationError(f"strategy sweep accepts routing strategies only, got {bad}")
        return cls(axis, values)

    @property
    def key(self) -> str:
        return AXES[self.axis][0]

    def arm_name(self, value: Any) -> str:
        return f"{self.axis}={value}"


@dataclass
class AblationReport:
    axis: str
    values: list[Any]
    reports: dict[str, RunReport] = field(default_factory=dict)

    def rows(self) -> list[dict[str, Any]]:
        out = []
        for v in self.values:
            r = self.reports[f"{self.axis}={v}"]
            out.append({"axis": self.axis, "value": v, "average_accuracy": r.average_accuracy,
                        "final_accuracy": r.final_accuracy, "module_count": r.module_count,
                        "diagonal_fraction": r.diagonal_fraction,
                        "total_params": r.param_report.get("total_after_all_tasks"),
                        "per_stage_accuracy": r.per_stage_accuracy})
        return out

    def final(self, value: Any) -> float:
        return self.reports[f"{self.axis}={value}"].final_accuracy

    def save(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = self.rows()
        (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
        with open(out_dir / "ablation.csv", "w", newline="") as fh:
            cols = ["axis", "value", "average_accuracy", "final_accuracy", "module_count",
                    "diagonal_fraction", "total_params"]
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)

    @classmethod
    def load(cls, out_dir: Path) -> "AblationReport":
        out_dir = Path(out_dir)
        rows = json.loads((out_dir / "ablation.json").read_text())
        axis = rows[0]["axis"]
        rep = cls(axis, [r["value"] for r in rows])
        for r in rows:
            rep.reports[f"{axis}={r['value']}"] = RunReport.load(out_dir / f"{axis}={r['value']}")
        return rep


def _eval_only_arms(base: RunConfig, sweep: Sweep, dataset: Optional[LabeledImages],
                    out_dir: Path, save: bool) -> AblationReport:
    if sweep.axis == "strategy":
        cfg = base.replace(eval_strategies=[v for v in sweep.values if v != base.strategy],
                           ensemble_w=None)
    else:
        cfg = base.replace(eval_ensemble_w=[float(v) for v in sweep.values])
    cfg = cfg.replace(name=f"{base.name}_shared", output_root=str(out_dir))
    shared = run_experiment(cfg, dataset, save=save)
    state = shared._state
    stream = prepare_stream(cfg, dataset)
    cache = FeatureCache(cfg.cache_features)
    rep = AblationReport(sweep.axis, sweep.values)
    for v in sweep.values:
        if sweep.axis == "strategy":
            strategy, w = v, None
            per_stage = (shared.per_stage_accuracy if v == cfg.strategy
                         else shared.strategy_accuracy[v])
        else:
            strategy, w = "confidence", float(v)
            per_stage = shared.strategy_accuracy[f"ensemble_{float(v)}"]
        final = evaluate_stage(state, stream.tasks, strategy, cfg.test_batch_size, cache, w)
        confusion = _confusion(final.routing, [t.task_id for t in stream.tasks], len(state.modules))
        arm = RunReport(
            per_stage_accuracy=list(per_stage),
            average_accuracy=average_accuracy(per_stage),
            final_accuracy=per_stage[-1],
            param_report=shared.param_report,
            confusion=confusion,
            config_echo=base.replace(**{sweep.key: v}).to_dict(),
            wall_time=shared.wall_time,
            til_per_stage=shared.til_per_stage,
            per_task_til=shared.per_task_til,
            task_to_module=shared.task_to_module,
            module_count=shared.module_count,
            diagonal_fraction=diagonal_fraction(confusion, shared.task_to_module),
            train_curves=shared.train_curves,
        )
        rep.reports[sweep.arm_name(v)] = arm
        if save:
            arm.save(out_dir / sweep.arm_name(v))
    return rep


def run_ablation(base: RunConfig, sweep: Mapping[str, Optional[Sequence[Any]]] | Sweep,
                 dataset: Optional[LabeledImages] = None, save: bool = True,
                 out_dir: Optional[Path] = None) -> AblationReport:
    """Run every arm of a one-axis sweep; persist per-arm reports plus a comparative table."""
    sweep = sweep if isinstance(sweep, Sweep) else Sweep.parse(sweep)
    out_dir = Path(out_dir or Path(base.output_root) / f"{base.name}_ablate_{sweep.axis}")
    if sweep.axis in EVAL_ONLY:
        rep = _eval_only_arms(base, sweep, dataset, out_dir, save)
    else:
        rep = AblationReport(sweep.axis, sweep.values)
        for v in sweep.values:
            cfg = base.replace(**{sweep.key: v, "name": sweep.arm_name(v),
                                  "output_root": str(out_dir)})
            log.info("ablation arm %s", sweep.arm_name(v))
            r = run_experiment(cfg, dataset, save=save)
            rep.reports[sweep.arm_name(v)] = r
    if save:
        rep.save(out_dir)
        from .report import plot_ablation

        plot_ablation(rep, out_dir / "ablation.png")
    return rep
