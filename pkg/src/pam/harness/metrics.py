"""Stage evaluation and the accuracy metrics of the benchmark protocol."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import torch

from ..errors import InputError, ProtocolError
from ..model import extract_features
from ..router import EnsembleWeights, ensemble_predict, predict
from ..tasks import TaskDataset
from ..trainer import SessionState


def average_accuracy(stages: Sequence[float]) -> float:
    if len(stages) == 0:
        raise InputError("average_accuracy needs at least one stage")
    return float(sum(stages)) / len(stages)


def aggregate_seeds(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single seed)."""
    if not values:
        raise InputError("no values to aggregate")
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


class FeatureCache:
    """Extractor output for test batches; valid for the whole stream since the extractor is frozen."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._store: dict[tuple[int, int, int], torch.Tensor] = {}

    def get(self, state: SessionState, task: TaskDataset, start: int, stop: int) -> torch.Tensor:
        key = (task.task_id, start, stop)
        if key in self._store:
            return self._store[key]
        feats = extract_features(state.extractor, task.test_images(slice(start, stop)))
        if self.enabled:
            self._store[key] = feats
        return feats


@dataclass
class StageResult:
    accuracy: float
    correct: int
    total: int
    per_task_accuracy: dict[int, float] = field(default_factory=dict)
    predictions: list[dict[str, Any]] = field(default_factory=list)
    routing: list[dict[str, Any]] = field(default_factory=list)


def evaluate_stage(state: SessionState, tasks: Sequence[TaskDataset], strategy: str = "confidence",
                   batch_size: int = 48, cache: Optional[FeatureCache] = None,
                   ensemble_w: Optional[float] = None, restrict_to_task: bool = False) -> StageResult:
    """Accuracy (in %) over the test samples of ``tasks`` using task-pure batches."""
    seen = state.seen_classes
    cache = cache or FeatureCache(enabled=False)
    weights = EnsembleWeights(ensemble_w) if ensemble_w is not None else None
    correct = total = 0
    per_task: dict[int, float] = {}
    preds_log: list[dict[str, Any]] = []
    routing: list[dict[str, Any]] = []
    for task in tasks:
        if task.test_y is None or task.n_test == 0:
            continue
        unseen = set(task.test_y.unique().tolist()) - seen
        if unseen:
            raise ProtocolError(f"test set of task {task.task_id} has unseen classes {sorted(unseen)}")
        t_correct = 0
        for start in range(0, task.n_test, batch_size):
            stop = min(start + batch_size, task.n_test)
            feats = cache.get(state, task, start, stop)
            y = task.test_y[start:stop]
            if weights is not None:
                p, cv = ensemble_predict(state, feats, weights, features=feats)
            else:
                p, cv = predict(state, feats, strategy,
                                oracle_task=task.task_id if strategy == "oracle" else None,
                                features=feats, restrict_to_task=restrict_to_task)
            hits = (p == y)
            t_correct += int(hits.sum())
            routing.append(cv.record(task.task_id))
            for i in range(len(y)):
                preds_log.append({"task": task.task_id, "index": start + i, "label": int(y[i]),
                                  "pred": int(p[i]), "module": cv.selected})
        per_task[task.task_id] = 100.0 * t_correct / task.n_test
        correct += t_correct
        total += task.n_test
    if total == 0:
        raise InputError("no test samples to evaluate")
    return StageResult(100.0 * correct / total, correct, total, per_task, preds_log, routing)


def recount_accuracy(prediction_log: Sequence[dict[str, Any]]) -> float:
    """Accuracy recomputed from a per-sample prediction log."""
    if not prediction_log:
        raise InputError("empty prediction log")
    hits = sum(1 for r in prediction_log if r["label"] == r["pred"])
    return 100.0 * hits / len(prediction_log)
