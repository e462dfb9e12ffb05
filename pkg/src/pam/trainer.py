"""Per-task training sessions: train, prune once, continue, freeze."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputError, ProtocolError
from .model import (
    INIT_STRATEGIES,
    AdaptationModule,
    SharedExtractor,
    UnifiedClassifier,
    expand_classifier,
    extract_features,
    instantiate_module,
)
from .pruning import apply_plan, build_pruning_plan, compact, masked_parameters
from .tasks import TaskDataset

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 25
    lr: float = 1e-3
    batch_size: int = 48
    prune_epoch: int = 1  # > epochs disables pruning
    prune_magnitude: float = 0.96
    init_strategy: str = "pretrained"
    reuse_beta: Optional[float] = None
    distill_temperature: float = 2.0
    distill_weight: float = 1.0
    augment: bool = False
    feature_batch_size: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.prune_epoch < 1:
            raise ConfigurationError("prune_epoch must be >= 1")
        if not 0 <= self.prune_magnitude < 1:
            raise ConfigurationError("prune_magnitude must lie in [0, 1)")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ConfigurationError(f"init_strategy must be one of {INIT_STRATEGIES}")
        if self.reuse_beta is not None and self.reuse_beta < 0:
            raise ConfigurationError("reuse_beta must be >= 0")
        if self.distill_temperature <= 0:
            raise ConfigurationError("distill_temperature must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


@dataclass
class ReuseDecision:
    reused: bool
    target_module: Optional[int]  # index of the most similar prior *task*
    d_min: float
    threshold: float
    mean_distance: float = 0.0


@dataclass
class SessionState:
    extractor: SharedExtractor
    template: AdaptationModule
    classifier: UnifiedClassifier
    modules: list[AdaptationModule] = field(default_factory=list)
    active_module: Optional[AdaptationModule] = None
    centroids: list[torch.Tensor] = field(default_factory=list)
    task_registry: dict[int, dict[str, Any]] = field(default_factory=dict)
    label_order: list[int] = field(default_factory=list)

    @classmethod
    def new(cls, extractor: SharedExtractor, template: AdaptationModule) -> "SessionState":
        return cls(extractor, template, UnifiedClassifier(template.out_dim))

    @property
    def seen_classes(self) -> set[int]:
        return set(self.label_order)

    @property
    def task_ids(self) -> list[int]:
        return list(self.task_registry)

    def columns(self, classes) -> torch.Tensor:
        index = {c: i for i, c in enumerate(self.label_order)}
        return torch.tensor([index[int(c)] for c in classes], dtype=torch.long)

    def task_columns(self, task_id: int) -> torch.Tensor:
        return self.columns(self.task_registry[task_id]["classes"])

    def module_for_task(self, task_id: int) -> int:
        return self.task_registry[task_id]["module"]

    def module_label_spaces(self) -> list[torch.Tensor]:
        """Column indices owned by each module (union over the tasks routed to it)."""
        spaces: list[list[int]] = [[] for _ in self.modules]
        for tid, entry in self.task_registry.items():
            spaces[entry["module"]].extend(self.task_columns(tid).tolist())
        return [torch.tensor(sorted(s), dtype=torch.long) for s in spaces]


@dataclass
class TrainLog:
    task_id: int
    records: list[dict[str, Any]] = field(default_factory=list)

    def add(self, **rec: Any) -> None:
        self.records.append({"task": self.task_id, **rec})

    def epochs(self) -> list[dict[str, Any]]:
        return [r for r in self.records if r.get("type") == "epoch"]

    def write_jsonl(self, path: Union[str, Path]) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def read_jsonl(cls, path: Union[str, Path]) -> "TrainLog":
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        return cls(recs[0]["task"] if recs else -1, recs)


# --------------------------------------------------------------------------


def pooled_features(extractor: SharedExtractor, x: torch.Tensor,
                    batch_size: int = 256) -> torch.Tensor:
    return torch.cat([extract_features(extractor, x[i:i + batch_size]).mean(dim=(2, 3))
                      for i in range(0, len(x), batch_size)])


def compute_task_centroid(extractor: SharedExtractor, task: Union[TaskDataset, torch.Tensor],
                          batch_size: int = 256) -> torch.Tensor:
    """Mean of globally pooled extractor features over the task's training images."""
    if isinstance(task, TaskDataset):
        n, get = len(task), task.train_images
    else:
        n, get = len(task), task.__getitem__
    if n == 0:
        raise InputError("cannot compute the centroid of an empty task")
    total = None
    for i in range(0, n, batch_size):
        s = extract_features(extractor, get(slice(i, i + batch_size))).mean(dim=(2, 3)).double().sum(0)
        total = s if total is None else total + s
    return (total / n).float()


def decide_reuse(centroids: list[torch.Tensor], c_new: torch.Tensor, beta: float) -> ReuseDecision:
    if beta < 0:
        raise ConfigurationError("beta must be >= 0")
    if not centroids:
        return ReuseDecision(False, None, 0.0, 0.0)
    d = torch.stack([(c_new.double() - c.double()).abs().sum() for c in centroids])
    mean_d = float(d.mean())
    tau = beta * mean_d
    target = int(torch.argmin(d))  # first minimum on ties
    d_min = float(d[target])
    reused = d_min < tau
    return ReuseDecision(reused, target if reused else None, d_min, tau, mean_d)


def distillation_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                      temperature: float = 2.0) -> torch.Tensor:
    """KL(teacher || student) between temperature-softened distributions, batch mean."""
    if student_logits.shape != teacher_logits.shape:
        raise InputError(f"shape mismatch: {tuple(student_logits.shape)} vs "
                         f"{tuple(teacher_logits.shape)}")
    if temperature <= 0:
        raise ConfigurationError("temperature must be > 0")
    log_p_s = F.log_softmax(student_logits / temperature, dim=-1)
    log_p_t = F.log_softmax(teacher_logits / temperature, dim=-1)
    return (log_p_t.exp() * (log_p_t - log_p_s)).sum(-1).mean()


def _task_seed(seed: int, task_id: int) -> int:
    return seed * 1_000_003 + task_id


def _augment(x: torch.Tensor, gen: torch.Generator, pad: int = 4) -> torch.Tensor:
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=gen) < 0.5
    x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
    return torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def _mask_optimizer_state(opt: torch.optim.Optimizer, module: AdaptationModule) -> None:
    for p, keep in masked_parameters(module):
        st = opt.state.get(p)
        if not st:
            continue
        for key in ("exp_avg", "exp_avg_sq"):
            if key in st:
                st[key].mul_(keep)


def _check_task(state: SessionState, task: TaskDataset) -> None:
    if len(task) == 0:
        raise InputError(f"task {task.task_id} has no training samples")
    overlap = state.seen_classes & {int(c) for c in task.classes}
    if overlap:
        raise ProtocolError(f"task {task.task_id} repeats classes {sorted(overlap)}")
    if task.task_id in state.task_registry:
        raise ProtocolError(f"task id {task.task_id} already trained")
    stray = set(task.train_y.unique().tolist()) - {int(c) for c in task.classes}
    if stray:
        raise InputError(f"task {task.task_id} has labels outside its class list: {sorted(stray)}")


def train_task(state: SessionState, task: TaskDataset, config: TrainConfig,
               features: Optional[torch.Tensor] = None) -> tuple[SessionState, TrainLog]:
    """Run one learning session on ``task`` and freeze the result into ``state``.

    ``features`` may hold precomputed extractor output for ``task.train_x``
    (ignored when augmentation is on).
    """
    _check_task(state, task)
    seed = _task_seed(config.seed, task.task_id)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    tlog = TrainLog(task.task_id)

    if config.augment:
        features = None
    elif features is None:
        features = torch.cat([extract_features(state.extractor, task.train_images(slice(i, i + config.feature_batch_size)))
                              for i in range(0, len(task), config.feature_batch_size)])
    if features is not None:
        centroid = features.mean(dim=(2, 3)).double().mean(0).float()
    else:
        centroid = compute_task_centroid(state.extractor, task, config.feature_batch_size)

    # module selection: reuse, relevant init, or fresh from the pre-trained template
    decision = ReuseDecision(False, None, 0.0, 0.0)
    if config.reuse_beta is not None:
        decision = decide_reuse(state.centroids, centroid, config.reuse_beta)
    teacher = None
    teacher_cols = None
    if decision.reused:
        midx = state.module_for_task(state.task_ids[decision.target_module])
        module = state.modules[midx]
        teacher = copy.deepcopy(module).freeze()
        owned = [tid for tid, e in state.task_registry.items() if e["module"] == midx]
        teacher_cols = torch.cat([state.task_columns(t) for t in owned])
        module.unfreeze()
        module.task_id = task.task_id
    else:
        midx = len(state.modules)
        donor = None
        strategy = config.init_strategy
        if strategy == "relevant":
            if state.centroids:
                d = torch.stack([(centroid - c).abs().sum() for c in state.centroids])
                donor = state.modules[state.module_for_task(state.task_ids[int(torch.argmin(d))])]
            else:
                strategy = "pretrained"
        module = instantiate_module(state.template, strategy, donor, task_id=task.task_id)
    tlog.add(type="reuse", reused=decision.reused, module=midx, d_min=decision.d_min,
             threshold=decision.threshold, mean_distance=decision.mean_distance)

    expand_classifier(state.classifier, len(task.classes), task.task_id)
    state.label_order.extend(int(c) for c in task.classes)
    new_block = state.classifier.blocks[-1]
    targets = state.columns(task.train_y.tolist())
    state.active_module = module

    params = [p for p in module.parameters() if p.requires_grad] + list(new_block.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    n = len(task)
    step = 0
    for epoch in range(1, config.epochs + 1):
        module.train()
        perm = torch.randperm(n, generator=gen)
        losses, correct = [], 0
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            if features is not None:
                fb = features[idx]
            else:
                xb = task.train_images(idx)
                if config.augment:
                    xb = _augment(xb, gen)
                fb = extract_features(state.extractor, xb)
            logits = state.classifier(module(fb))
            loss = F.cross_entropy(logits, targets[idx])
            if teacher is not None:
                with torch.no_grad():
                    t_logits = state.classifier(teacher(fb))[:, teacher_cols]
                kd = distillation_loss(logits[:, teacher_cols], t_logits, config.distill_temperature)
                loss = loss + config.distill_weight * kd
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            lv = float(loss.detach())
            if not math.isfinite(lv):
                raise FloatingPointError(f"non-finite loss at task {task.task_id} step {step}")
            losses.append(lv)
            correct += int((logits.detach().argmax(1) == targets[idx]).sum())
            tlog.add(type="step", epoch=epoch, step=step, loss=lv)
            step += 1
        pruned_now = False
        if epoch == config.prune_epoch and module.plan is None:
            plan = build_pruning_plan(module, config.prune_magnitude, epoch=epoch)
            apply_plan(module, plan)
            _mask_optimizer_state(opt, module)
            pruned_now = True
        tlog.add(type="epoch", epoch=epoch, loss=sum(losses) / len(losses),
                 train_acc=100.0 * correct / n, pruned=pruned_now)
        log.debug("task %d epoch %d loss %.4f", task.task_id, epoch, sum(losses) / len(losses))

    module.freeze()
    if module.plan is not None and any(b.mask1 is not None for b in module.stage):
        module = compact(module)
    state.classifier.freeze_task(task.task_id)
    if decision.reused:
        state.modules[midx] = module
    else:
        state.modules.append(module)
    state.active_module = None
    state.centroids.append(centroid)
    state.task_registry[task.task_id] = {"classes": [int(c) for c in task.classes], "module": midx}
    return state, tlog


def config_dict(config: TrainConfig) -> dict[str, Any]:
    return asdict(config)
