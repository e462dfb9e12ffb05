"""End-to-end runs: train the stream, evaluate after every stage, persist everything."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigurationError
from ..model import count_parameters, split_backbone
from ..resnet import ResNet, get_variant
from ..router import diagonal_fraction
from ..trainer import SessionState, TrainLog, train_task
from . import checkpoint as ckpt
from .config import RunConfig, dump_config
from .data import LabeledImages, Preprocess, load_dataset
from .metrics import FeatureCache, StageResult, aggregate_seeds, average_accuracy, evaluate_stage
from .streams import SplitSpec, TaskStream, build_task_stream

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    per_stage_accuracy: list[float]
    average_accuracy: float
    final_accuracy: float
    param_report: dict[str, Any]
    confusion: list[list[int]]
    config_echo: dict[str, Any]
    wall_time: float
    method: str = "pam"
    til_per_stage: list[float] = field(default_factory=list)
    per_task_til: dict[str, list[float]] = field(default_factory=dict)
    strategy_accuracy: dict[str, list[float]] = field(default_factory=dict)
    task_to_module: list[int] = field(default_factory=list)
    module_count: int = 0
    diagonal_fraction: Optional[float] = None
    train_curves: dict[str, list[dict[str, float]]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunReport":
        return cls(**d)

    def save(self, run_dir: Path) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        with open(run_dir / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "accuracy", "til_accuracy", *self.strategy_accuracy])
            for b, acc in enumerate(self.per_stage_accuracy):
                til = self.til_per_stage[b] if b < len(self.til_per_stage) else ""
                extra = [v[b] for v in self.strategy_accuracy.values()]
                w.writerow([b + 1, acc, til, *extra])

    @classmethod
    def load(cls, run_dir: Path) -> "RunReport":
        return cls.from_dict(json.loads((Path(run_dir) / "report.json").read_text()))


def set_determinism(seed: int, on: bool) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(on, warn_only=True)


def prepare_stream(cfg: RunConfig, dataset: Optional[LabeledImages] = None) -> TaskStream:
    if dataset is None:
        dataset = load_dataset(cfg.dataset, cfg.data_root, cfg.download, **cfg.dataset_args)
    if cfg.per_class_train or cfg.per_class_test:
        dataset = dataset.subsample(cfg.per_class_train, cfg.per_class_test, seed=cfg.seed)
    var = get_variant(cfg.variant)
    size = cfg.image_size or (224 if var.stem == "imagenet" else 32)
    spec = SplitSpec(cfg.dataset, cfg.base_classes, cfg.increment, cfg.seed)
    return build_task_stream(spec, dataset, Preprocess(size))


def _stage_eval(state: SessionState, seen: list, cfg: RunConfig, cache: FeatureCache
                ) -> dict[str, Any]:
    main = evaluate_stage(state, seen, cfg.strategy, cfg.test_batch_size, cache, cfg.ensemble_w)
    til = evaluate_stage(state, seen, "oracle", cfg.test_batch_size, cache)
    til_task = evaluate_stage(state, seen, "oracle", cfg.test_batch_size, cache, restrict_to_task=True)
    extra: dict[str, float] = {}
    for s in cfg.eval_strategies:
        extra[s] = evaluate_stage(state, seen, s, cfg.test_batch_size, cache).accuracy
    for w in cfg.eval_ensemble_w:
        extra[f"ensemble_{w}"] = evaluate_stage(state, seen, "confidence", cfg.test_batch_size,
                                                cache, ensemble_w=w).accuracy
    return {"main": main, "til": til, "til_task": til_task, "extra": extra}


def _confusion(routing: list[dict[str, Any]], task_ids: list[int], n_modules: int) -> list[list[int]]:
    row = {t: i for i, t in enumerate(task_ids)}
    m = [[0] * n_modules for _ in task_ids]
    for r in routing:
        m[row[r["true_task"]]][r["selected_module"]] += 1
    return m


def run_experiment(cfg: RunConfig, dataset: Optional[LabeledImages] = None,
                   resume: bool = True, save: bool = True,
                   stop_after: Optional[int] = None) -> RunReport:
    """Train and evaluate one stream. ``stop_after`` ends early (to simulate a crash)."""
    if cfg.method == "finetune":
        return run_finetune(cfg, dataset, save=save)
    t0 = time.time()
    set_determinism(cfg.seed, cfg.deterministic)
    stream = prepare_stream(cfg, dataset)
    train_cfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    extractor, template = split_backbone(cfg.weights, cfg.variant, cfg.image_size, seed=cfg.seed)
    state = SessionState.new(extractor, template)
    run_dir = cfg.run_dir
    session = ckpt.read_session(run_dir) if (resume and save) else None
    if session is not None and session.get("config_hash") != cfg.config_hash():
        raise ConfigurationError(f"{run_dir} holds a run with a different config; "
                                 f"pick another name or delete it")
    if save:
        run_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, run_dir / "config.yaml")
    cache = FeatureCache(cfg.cache_features)
    done_tasks = {t["task_id"]: t for t in (session or {}).get("tasks", [])}

    stage_acc, til_acc = [], []
    per_task_til: dict[str, list[float]] = {}
    extra_acc: dict[str, list[float]] = {}
    curves: dict[str, list[dict[str, float]]] = {}
    last: Optional[StageResult] = None
    manifest_tasks: list[dict[str, Any]] = []
    for b, task in enumerate(stream):
        if stop_after is not None and b >= stop_after:
            break
        if resume and save and task.task_id in done_tasks and ckpt.stage_complete(run_dir, b):
            entry = done_tasks[task.task_id]
            ckpt.restore_stage(run_dir, b, state, task.task_id, entry["classes"], entry["module"])
            tlog = TrainLog.read_jsonl(ckpt.stage_dir(run_dir, b) / "log.jsonl")
            log.info("restored stage %d from %s", b + 1, run_dir)
        else:
            _, tlog = train_task(state, task, train_cfg)
            if save:
                ckpt.save_stage(run_dir, b, state, task.task_id, tlog)
        curves[str(task.task_id)] = [{"epoch": r["epoch"], "loss": r["loss"], "train_acc": r["train_acc"]}
                                     for r in tlog.epochs()]
        res = _stage_eval(state, stream.tasks[:b + 1], cfg, cache)
        last = res["main"]
        stage_acc.append(res["main"].accuracy)
        til_acc.append(res["til"].accuracy)
        for tid, acc in res["til_task"].per_task_accuracy.items():
            per_task_til.setdefault(str(tid), []).append(acc)
        for k, v in res["extra"].items():
            extra_acc.setdefault(k, []).append(v)
        manifest_tasks.append({"task_id": task.task_id, "classes": task.classes,
                               "module": state.module_for_task(task.task_id)})
        if save:
            d = ckpt.stage_dir(run_dir, b)
            with open(d / "predictions.jsonl", "w") as fh:
                for r in res["main"].predictions:
                    fh.write(json.dumps(r) + "\n")
            with open(d / "routing.jsonl", "w") as fh:
                for r in res["main"].routing:
                    fh.write(json.dumps(r) + "\n")
            (d / "eval.json").write_text(json.dumps({
                "stage": b + 1, "accuracy": res["main"].accuracy, "til_accuracy": res["til"].accuracy,
                "per_task_til": res["til_task"].per_task_accuracy, "extra": res["extra"],
            }, indent=2) + "\n")
            ckpt.write_session(run_dir, {"config_hash": cfg.config_hash(), "config": cfg.to_dict(),
                                         "tasks": manifest_tasks, "completed_stages": b + 1})
        log.info("stage %d/%d: CIL %.2f TIL %.2f modules %d", b + 1, len(stream),
                 res["main"].accuracy, res["til"].accuracy, len(state.modules))

    task_ids = [t["task_id"] for t in manifest_tasks]
    confusion = _confusion(last.routing, task_ids, len(state.modules)) if last else []
    t2m = [state.module_for_task(t) for t in task_ids]
    params = count_parameters(state, "compacted-physical").to_dict()
    params["masked_logical"] = count_parameters(state, "masked-logical").to_dict()
    report = RunReport(
        per_stage_accuracy=stage_acc,
        average_accuracy=average_accuracy(stage_acc),
        final_accuracy=stage_acc[-1],
        param_report=params,
        confusion=confusion,
        config_echo=cfg.to_dict(),
        wall_time=time.time() - t0,
        til_per_stage=til_acc,
        per_task_til=per_task_til,
        strategy_accuracy=extra_acc,
        task_to_module=t2m,
        module_count=len(state.modules),
        diagonal_fraction=diagonal_fraction(confusion, t2m) if confusion else None,
        train_curves=curves,
    )
    if save:
        report.save(run_dir)
    report._state = state  # in-memory handle for callers; not serialised
    return report


# --------------------------------------------------------------------------
# sequential fine-tuning baseline


def run_finetune(cfg: RunConfig, dataset: Optional[LabeledImages] = None,
                 save: bool = True) -> RunReport:
    """Whole backbone trainable, one growing linear head, no modules and no routing."""
    t0 = time.time()
    set_determinism(cfg.seed, cfg.deterministic)
    stream = prepare_stream(cfg, dataset)
    var = get_variant(cfg.variant)
    torch.manual_seed(cfg.seed)
    net = ResNet(var)
    if cfg.weights is not None:
        from ..model import _check_shapes, load_pretrained

        weights = load_pretrained(cfg.weights, cfg.variant)
        _check_shapes(weights, var)
        net.load_state_dict({k: v for k, v in weights.items() if not k.startswith("fc.")}, strict=False)
    net.fc = None
    label_order: list[int] = []
    stage_acc = []
    tc = cfg.train
    for b, task in enumerate(stream):
        torch.manual_seed(cfg.seed * 1_000_003 + task.task_id)
        gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + task.task_id)
        label_order.extend(task.classes)
        old = net.fc
        net.fc = nn.Linear(var.feature_dim, len(label_order))
        n_old = 0 if old is None else old.out_features
        with torch.no_grad():
            if old is not None:
                net.fc.weight[:n_old] = old.weight
                net.fc.bias[:n_old] = old.bias
            nn.init.zeros_(net.fc.bias[n_old:])
        col = {c: i for i, c in enumerate(label_order)}
        targets = torch.tensor([col[int(c)] for c in task.train_y])
        opt = torch.optim.Adam(net.parameters(), lr=tc.lr)
        for _ in range(tc.epochs):
            net.train()
            perm = torch.randperm(len(task), generator=gen)
            for i in range(0, len(task), tc.batch_size):
                idx = perm[i:i + tc.batch_size]
                loss = F.cross_entropy(net(task.train_images(idx)), targets[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        net.eval()
        correct = total = 0
        labels = torch.tensor(label_order)
        with torch.no_grad():
            for t in stream.tasks[:b + 1]:
                for s in range(0, t.n_test, cfg.test_batch_size):
                    p = labels[net(t.test_images(slice(s, s + cfg.test_batch_size))).argmax(1)]
                    correct += int((p == t.test_y[s:s + cfg.test_batch_size]).sum())
                    total += len(p)
        stage_acc.append(100.0 * correct / total)
        log.info("finetune stage %d/%d: %.2f", b + 1, len(stream), stage_acc[-1])
    n_params = sum(p.numel() for p in net.parameters())
    report = RunReport(
        per_stage_accuracy=stage_acc,
        average_accuracy=average_accuracy(stage_acc),
        final_accuracy=stage_acc[-1],
        param_report={"trainable_per_task": n_params, "total_after_all_tasks": n_params,
                      "per_component_breakdown": {"backbone": n_params}, "counting_mode": "physical"},
        confusion=[],
        config_echo=cfg.to_dict(),
        wall_time=time.time() - t0,
        method="finetune",
    )
    if save:
        report.save(cfg.run_dir)
    return report


def run_seeds(cfg: RunConfig, seeds: list[int], dataset: Optional[LabeledImages] = None
              ) -> dict[str, Any]:
    """Repeat a run over seeds (each seed also permutes the class order)."""
    reports = [run_experiment(cfg.replace(seed=s, name=f"{cfg.name}_seed{s}"), dataset)
               for s in seeds]
    avg = aggregate_seeds([r.average_accuracy for r in reports])
    fin = aggregate_seeds([r.final_accuracy for r in reports])
    summary = {"seeds": seeds, "average_accuracy_mean": avg[0], "average_accuracy_std": avg[1],
               "final_accuracy_mean": fin[0], "final_accuracy_std": fin[1],
               "final_accuracies": [r.final_accuracy for r in reports],
               "average_accuracies": [r.average_accuracy for r in reports]}
    out = Path(cfg.output_root) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "seeds_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def rescore_run(run_dir: Path, strategy: str = "confidence", ensemble_w: Optional[float] = None,
                dataset: Optional[LabeledImages] = None, restrict_to_task: bool = False
                ) -> list[StageResult]:
    """Re-evaluate every completed stage of a persisted run from its checkpoints."""
    session = ckpt.read_session(run_dir)
    if session is None:
        raise ConfigurationError(f"{run_dir} has no session.json")
    cfg = RunConfig.from_dict(session["config"])
    stream = prepare_stream(cfg, dataset)
    extractor, template = split_backbone(cfg.weights, cfg.variant, cfg.image_size, seed=cfg.seed)
    state = SessionState.new(extractor, template)
    cache = FeatureCache(cfg.cache_features)
    by_id = {t.task_id: t for t in stream.tasks}
    results = []
    for b, entry in enumerate(session["tasks"]):
        ckpt.restore_stage(run_dir, b, state, entry["task_id"], entry["classes"], entry["module"])
        seen = [by_id[e["task_id"]] for e in session["tasks"][:b + 1]]
        results.append(evaluate_stage(state, seen, strategy, cfg.test_batch_size, cache, ensemble_w,
                                      restrict_to_task=restrict_to_task))
    return results
