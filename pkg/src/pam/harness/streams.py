"""B-m Inc-n task streams."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch

from ..errors import ConfigurationError, IngestionError
from ..tasks import TaskDataset
from .data import LabeledImages


@dataclass(frozen=True)
class SplitSpec:
    dataset_id: str
    base_classes: int  # m; 0 means every stage has `increment` classes
    increment: int  # n
    seed: int = 0

    def stage_sizes(self, total: int) -> list[int]:
        if self.increment <= 0:
            raise ConfigurationError("increment must be >= 1")
        if self.base_classes < 0 or self.base_classes > total:
            raise ConfigurationError(f"base_classes must lie in [0, {total}]")
        if self.base_classes == 0:
            sizes = [self.increment] * (total // self.increment)
            if total % self.increment:
                sizes.append(total % self.increment)
            return sizes
        rest = total - self.base_classes
        sizes = [self.base_classes] + [self.increment] * (rest // self.increment)
        if rest % self.increment:
            sizes.append(rest % self.increment)
        return sizes

    def stages(self, total: int) -> int:
        return len(self.stage_sizes(total))


@dataclass
class TaskStream:
    spec: SplitSpec
    class_order: list[int]
    tasks: list[TaskDataset]

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> TaskDataset:
        return self.tasks[i]

    def class_sets(self) -> list[list[int]]:
        return [t.classes for t in self.tasks]


def build_task_stream(spec: SplitSpec, dataset: LabeledImages,
                      preprocess: Optional[Callable] = None) -> TaskStream:
    if spec.increment <= 0:
        raise ConfigurationError("increment must be >= 1")
    if dataset.train_y is None or len(dataset.train_y) == 0:
        raise IngestionError(f"dataset {dataset.name} has no labels")
    classes = sorted(torch.cat([dataset.train_y, dataset.test_y]).unique().tolist())
    total = len(classes)
    if total < spec.increment or (spec.base_classes > 0 and total < spec.base_classes):
        raise ConfigurationError(f"{dataset.name} has {total} classes, too few for "
                                 f"B{spec.base_classes} Inc{spec.increment}")
    gen = torch.Generator().manual_seed(spec.seed)
    order = [classes[i] for i in torch.randperm(total, generator=gen).tolist()]
    tasks, start = [], 0
    for b, size in enumerate(spec.stage_sizes(total)):
        cls = order[start:start + size]
        start += size
        cset = torch.tensor(cls)
        tr = torch.isin(dataset.train_y, cset).nonzero().flatten()
        te = torch.isin(dataset.test_y, cset).nonzero().flatten()
        tasks.append(TaskDataset(b, cls, dataset.train_x[tr], dataset.train_y[tr],
                                 dataset.test_x[te], dataset.test_y[te], preprocess))
    return TaskStream(spec, order, tasks)


def expected_stage_count(total: int, base: int, inc: int) -> int:
    if base == 0:
        return math.ceil(total / inc)
    return 1 + math.ceil((total - base) / inc)
