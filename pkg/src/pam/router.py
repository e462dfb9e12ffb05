"""Task-free module selection and prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Optional, Sequence

import torch

from .errors import ConfigurationError, InputError, StateError
from .model import extract_features
from .trainer import SessionState

STRATEGIES = ("confidence", "distance-pooled", "distance-map", "oracle")


@dataclass
class ConfidenceVector:
    """Routing outcome for one batch.

    ``per_module_confidence`` holds averaged max-softmax scores for the
    confidence strategy and per-task centroid distances for the distance ones.
    """

    per_module_confidence: list[float]
    selected: int
    strategy: str
    selected_task: Optional[int] = None

    def record(self, true_task: Optional[int] = None) -> dict[str, Any]:
        return {"true_task": true_task, "selected_module": self.selected,
                "selected_task": self.selected_task, "strategy": self.strategy,
                "scores": self.per_module_confidence}


@dataclass
class EnsembleWeights:
    top_weight: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.top_weight <= 1.0:
            raise ConfigurationError("ensemble top weight must lie in [0, 1]")

    @property
    def rest_weight(self) -> float:
        return 1.0 - self.top_weight

    def weights(self, n_modules: int, top: int) -> list[float]:
        if n_modules == 1:
            return [1.0]
        rest = self.rest_weight / (n_modules - 1)
        return [self.top_weight if b == top else rest for b in range(n_modules)]


def _features(state: SessionState, batch: torch.Tensor,
              features: Optional[torch.Tensor]) -> torch.Tensor:
    if features is not None:
        return features
    if len(batch) == 0:
        raise InputError("empty batch")
    return extract_features(state.extractor, batch)


@torch.no_grad()
def module_probabilities(state: SessionState, batch: torch.Tensor,
                         features: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Softmax over the full cumulative label space for every module: (modules, N, classes)."""
    if not state.modules:
        raise StateError("no trained modules")
    feats = _features(state, batch, features)
    return torch.stack([torch.softmax(state.classifier(m(feats)), dim=-1)
                        for m in state.modules])


def select_confident(probabilities: torch.Tensor,
                     label_spaces: Sequence[torch.Tensor]) -> ConfidenceVector:
    if probabilities.shape[1] == 0:
        raise InputError("empty batch")
    n = probabilities.shape[1]
    # exact rational sums so the argmax cannot depend on summation order
    sums = [sum(map(Fraction, probabilities[b][:, cols].max(dim=1).values.tolist()))
            for b, cols in enumerate(label_spaces)]
    best = max(range(len(sums)), key=lambda b: (sums[b], -b))
    return ConfidenceVector([float(s / n) for s in sums], best, "confidence")


def _centroid_distances(centroids: Sequence[torch.Tensor], c: torch.Tensor, metric: str) -> list[float]:
    c = c.double()
    if metric == "l1":
        return [math.fsum((c - ci.double()).abs().tolist()) for ci in centroids]
    if metric == "l2":
        return [math.sqrt(math.fsum((c - ci.double()).pow(2).tolist())) for ci in centroids]
    raise ConfigurationError(f"unknown distance metric {metric!r}")


@torch.no_grad()
def select_by_distance(centroids: Sequence[torch.Tensor], batch: torch.Tensor, extractor,
                       metric: str = "l1", features: Optional[torch.Tensor] = None,
                       task_to_module: Optional[Sequence[int]] = None) -> ConfidenceVector:
    """Route to the stored task centroid nearest to the batch centroid.

    ``metric`` is ``"l1"`` (distance-pooled) or ``"l2"`` (distance-map).
    """
    if not centroids:
        raise StateError("no stored centroids")
    if features is None:
        if len(batch) == 0:
            raise InputError("empty batch")
        features = extract_features(extractor, batch)
    c_batch = features.mean(dim=(2, 3)).double().mean(0)
    d = _centroid_distances(centroids, c_batch, metric)
    task_idx = min(range(len(d)), key=lambda i: (d[i], i))
    module = task_to_module[task_idx] if task_to_module is not None else task_idx
    name = "distance-pooled" if metric == "l1" else "distance-map"
    return ConfidenceVector(d, module, name, selected_task=task_idx)


@torch.no_grad()
def route(state: SessionState, batch: torch.Tensor, strategy: str = "confidence",
          oracle_task: Optional[int] = None, features: Optional[torch.Tensor] = None
          ) -> tuple[ConfidenceVector, torch.Tensor]:
    """Pick a module for the batch; returns the decision and all module probabilities."""
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown routing strategy {strategy!r}")
    if strategy == "oracle" and oracle_task is None:
        raise ConfigurationError("oracle routing needs the true task id")
    feats = _features(state, batch, features)
    probs = module_probabilities(state, batch, feats)
    if strategy == "confidence":
        cv = select_confident(probs, state.module_label_spaces())
    elif strategy == "oracle":
        m = state.module_for_task(oracle_task)
        cv = ConfidenceVector([float(b == m) for b in range(len(state.modules))], m, "oracle",
                              selected_task=state.task_ids.index(oracle_task))
    else:
        t2m = [state.module_for_task(t) for t in state.task_ids]
        cv = select_by_distance(state.centroids, batch, state.extractor,
                                "l1" if strategy == "distance-pooled" else "l2", feats, t2m)
    return cv, probs


@torch.no_grad()
def predict(state: SessionState, batch: torch.Tensor, strategy: str = "confidence",
            oracle_task: Optional[int] = None, features: Optional[torch.Tensor] = None,
            restrict_to_task: bool = False) -> tuple[torch.Tensor, ConfidenceVector]:
    """Class-id predictions for a batch plus the routing decision.

    The argmax runs over the whole cumulative label space of the selected
    module's row; ``restrict_to_task`` (oracle only) limits it to the oracle
    task's own classes, which is the task-incremental protocol.
    """
    cv, probs = route(state, batch, strategy, oracle_task, features)
    p = probs[cv.selected]
    if restrict_to_task:
        if strategy != "oracle":
            raise ConfigurationError("restrict_to_task needs the oracle strategy")
        cols = state.task_columns(oracle_task)
        col = cols[p[:, cols].argmax(1)]
    else:
        col = p.argmax(1)
    labels = torch.tensor(state.label_order, dtype=torch.long)
    return labels[col], cv


@torch.no_grad()
def ensemble_predict(state: SessionState, batch: torch.Tensor, weights: EnsembleWeights,
                     features: Optional[torch.Tensor] = None
                     ) -> tuple[torch.Tensor, ConfidenceVector]:
    cv, probs = route(state, batch, "confidence", features=features)
    w = torch.tensor(weights.weights(len(state.modules), cv.selected), dtype=probs.dtype)
    mixture = (w.view(-1, 1, 1) * probs).sum(0)
    labels = torch.tensor(state.label_order, dtype=torch.long)
    return labels[mixture.argmax(1)], cv


def selection_confusion(state: SessionState, per_task_testsets: dict[int, torch.Tensor],
                        strategy: str = "confidence", batch_size: int = 48) -> list[list[int]]:
    """matrix[t][m]: number of task-t test batches routed to module m."""
    n_mod = len(state.modules)
    order = list(per_task_testsets)
    matrix = [[0] * n_mod for _ in order]
    for row, tid in enumerate(order):
        x = per_task_testsets[tid]
        for i in range(0, len(x), batch_size):
            cv, _ = route(state, x[i:i + batch_size], strategy,
                          oracle_task=tid if strategy == "oracle" else None)
            matrix[row][cv.selected] += 1
    return matrix


def diagonal_fraction(matrix: list[list[int]], task_to_module: Sequence[int]) -> float:
    total = sum(sum(r) for r in matrix)
    hits = sum(matrix[t][task_to_module[t]] for t in range(len(matrix)))
    return hits / total if total else 0.0
