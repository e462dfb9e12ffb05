from __future__ import annotations

import copy
import warnings

import pytest
import torch

from pam.harness.data import Preprocess, make_synthetic
from pam.harness.streams import SplitSpec, build_task_stream
from pam.model import split_backbone
from pam.resnet import VARIANTS, Bottleneck, Variant
from pam.tasks import TaskDataset
from pam.trainer import SessionState, TrainConfig

# tiny bottleneck variant for the two-layer pruning scope
VARIANTS.setdefault("bn-tiny", Variant("bn-tiny", Bottleneck, (1, 1, 1, 2), width=4, stem="cifar"))

warnings.filterwarnings("ignore", message=".*zero-element tensors.*")


def tiny_session(variant: str = "rn10-c8", seed: int = 0, size: int = 16) -> SessionState:
    extractor, template = split_backbone(None, variant, image_size=size, seed=seed)
    return SessionState.new(extractor, template)


def toy_task(task_id: int, classes: list[int], n_per_class: int = 6, size: int = 16,
             seed: int = 0, n_test: int = 4) -> TaskDataset:
    g = torch.Generator().manual_seed(seed * 101 + task_id)
    ys = torch.tensor([c for c in classes for _ in range(n_per_class)])
    xs = torch.randn(len(ys), 3, size, size, generator=g) + ys.view(-1, 1, 1, 1) * 0.3
    yt = torch.tensor([c for c in classes for _ in range(n_test)])
    xt = torch.randn(len(yt), 3, size, size, generator=g) + yt.view(-1, 1, 1, 1) * 0.3
    return TaskDataset(task_id, list(classes), xs, ys, xt, yt)


FAST = TrainConfig(epochs=2, batch_size=8, prune_epoch=1, prune_magnitude=0.5)


@pytest.fixture
def session() -> SessionState:
    return tiny_session()


@pytest.fixture
def fast_cfg() -> TrainConfig:
    return copy.deepcopy(FAST)


@pytest.fixture(scope="session")
def synthetic_images():
    return make_synthetic(num_classes=6, train_per_class=8, test_per_class=4, size=16, seed=3)


@pytest.fixture(scope="session")
def synthetic_stream(synthetic_images):
    return build_task_stream(SplitSpec("synthetic", 0, 2, 0), synthetic_images, Preprocess(16))
