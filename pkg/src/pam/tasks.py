from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch

Index = Union[slice, torch.Tensor]


@dataclass
class TaskDataset:
    """One incremental stage: a disjoint set of classes with train and test splits.

    ``train_x``/``test_x`` hold images (N, C, H, W), either ready for the
    backbone or raw; ``preprocess`` (if set) maps a raw batch to backbone input
    lazily, so large-resolution tasks never materialise in full.
    Labels are global class ids.
    """

    task_id: int
    classes: list[int]
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: Optional[torch.Tensor] = None
    test_y: Optional[torch.Tensor] = None
    preprocess: Optional[Callable[[torch.Tensor], torch.Tensor]] = None

    def __len__(self) -> int:
        return len(self.train_y)

    @property
    def n_test(self) -> int:
        return 0 if self.test_y is None else len(self.test_y)

    def _prep(self, x: torch.Tensor) -> torch.Tensor:
        return self.preprocess(x) if self.preprocess is not None else x

    def train_images(self, idx: Index = slice(None)) -> torch.Tensor:
        return self._prep(self.train_x[idx])

    def test_images(self, idx: Index = slice(None)) -> torch.Tensor:
        if self.test_x is None:
            raise ValueError(f"task {self.task_id} has no test split")
        return self._prep(self.test_x[idx])
