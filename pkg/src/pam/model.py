"""Backbone split, per-task adaptation modules and the unified classifier."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Optional, Union

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, IngestionError, InputError, StructuralError
from .resnet import ResNet, Variant, expected_shapes, get_variant

if TYPE_CHECKING:
    from .pruning import PruningPlan

INIT_STRATEGIES = ("pretrained", "relevant")
COUNTING_MODES = ("masked-logical", "compacted-physical")
DEFAULT_IMAGE_SIZE = {"imagenet": 224, "cifar": 32}


def _freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


class SharedExtractor(nn.Module):
    """Frozen stem + residual stages 1-3.

    Normalization layers always run on their stored statistics; calling
    ``train()`` has no effect.
    """

    def __init__(self, backbone: ResNet, image_size: int):
        super().__init__()
        self.variant: Variant = backbone.variant
        self.conv1 = backbone.conv1
        self.bn1 = backbone.bn1
        self.relu = backbone.relu
        self.maxpool = backbone.maxpool
        self.layer1 = backbone.layer1
        self.layer2 = backbone.layer2
        self.layer3 = backbone.layer3
        _freeze(self)
        super().train(False)
        self.input_shape = (3, image_size, image_size)
        with torch.no_grad():
            out = self.forward(torch.zeros(1, *self.input_shape))
        self.output_shape = tuple(out.shape[1:])

    def train(self, mode: bool = True) -> "SharedExtractor":
        return super().train(False)

    @property
    def normalization_stats(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items()
                if k.endswith(("running_mean", "running_var"))}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer3(self.layer2(self.layer1(x)))


class AdaptationModule(nn.Module):
    """One copy of the final residual stage, followed by global average pooling."""

    def __init__(self, stage: nn.Sequential, variant: Variant, task_id: int = -1):
        super().__init__()
        self.stage = stage
        self.pool = nn.AdaptiveAvgPool2d((1, 1))
        self.variant = variant
        self.task_id = task_id
        self.plan: Optional[PruningPlan] = None
        self.frozen = False

    @property
    def in_channels(self) -> int:
        return self.stage[0].conv1.in_channels

    @property
    def out_dim(self) -> int:
        last = self.stage[-1]
        return last.bn3.num_features if hasattr(last, "bn3") else last.bn2.num_features

    @property
    def masked(self) -> bool:
        return self.plan is not None

    def freeze(self) -> "AdaptationModule":
        _freeze(self)
        self.frozen = True
        super().train(False)
        return self

    def unfreeze(self) -> "AdaptationModule":
        self.frozen = False
        for p in self.parameters():
            p.requires_grad_(True)
        return self

    def train(self, mode: bool = True) -> "AdaptationModule":
        return super().train(mode and not self.frozen)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.stage(feats)), 1)


class UnifiedClassifier(nn.Module):
    """Linear head over the cumulative label space, stored as one block per task."""

    def __init__(self, embedding_dim: int):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.blocks = nn.ModuleList()
        self.task_ids: list[int] = []

    @property
    def num_classes(self) -> int:
        return sum(b.out_features for b in self.blocks)

    @property
    def row_freeze_map(self) -> list[bool]:
        """True for each row that is still trainable."""
        flags: list[bool] = []
        for b in self.blocks:
            flags.extend([b.weight.requires_grad] * b.out_features)
        return flags

    def task_rows(self, task_id: int) -> range:
        start = 0
        for tid, b in zip(self.task_ids, self.blocks):
            if tid == task_id:
                return range(start, start + b.out_features)
            start += b.out_features
        raise KeyError(task_id)

    def freeze_task(self, task_id: int) -> None:
        _freeze(self.blocks[self.task_ids.index(task_id)])

    @property
    def weight(self) -> torch.Tensor:
        return torch.cat([b.weight for b in self.blocks], 0)

    @property
    def bias(self) -> torch.Tensor:
        return torch.cat([b.bias for b in self.blocks], 0)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if not self.blocks:
            return z.new_zeros(z.shape[0], 0)
        return torch.cat([b(z) for b in self.blocks], 1)


@dataclass
class ParamReport:
    trainable_per_task: int
    total_after_all_tasks: int
    per_component_breakdown: dict[str, int]
    counting_mode: str
    per_task_trainable: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "trainable_per_task": self.trainable_per_task,
            "total_after_all_tasks": self.total_after_all_tasks,
            "per_component_breakdown": dict(self.per_component_breakdown),
            "counting_mode": self.counting_mode,
            "per_task_trainable": list(self.per_task_trainable),
        }


# --------------------------------------------------------------------------
# weight ingestion


def file_sha256(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(weights_path: Union[str, Path], variant: str, source: str,
                   manifest_path: Optional[Union[str, Path]] = None) -> Path:
    weights_path = Path(weights_path)
    manifest_path = Path(manifest_path or weights_path.with_suffix(".manifest.json"))
    manifest = {"variant": variant, "source": source, "sha256": file_sha256(weights_path),
                "file": weights_path.name}
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_pretrained(path: Union[str, Path], variant: Optional[str] = None,
                    manifest_path: Optional[Union[str, Path]] = None) -> dict[str, torch.Tensor]:
    """Read a serialized backbone state dict, checking its manifest if one exists."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"weights file not found: {path}")
    manifest_path = Path(manifest_path) if manifest_path else path.with_suffix(".manifest.json")
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if variant is not None and manifest.get("variant") != variant:
            raise ConfigurationError(
                f"manifest declares variant {manifest.get('variant')!r}, expected {variant!r}")
        digest = file_sha256(path)
        if manifest.get("sha256") != digest:
            raise IngestionError(f"content hash mismatch for {path}: manifest "
                                 f"{manifest.get('sha256')}, file {digest}")
    obj = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(obj, Mapping) and "state_dict" in obj:
        obj = obj["state_dict"]
    return {k.removeprefix("module."): v for k, v in obj.items()}


def _check_shapes(weights: Mapping[str, torch.Tensor], variant: Variant) -> None:
    for name, shape in expected_shapes(variant).items():
        if name.startswith("fc.") or name.endswith("num_batches_tracked"):
            continue
        if name not in weights:
            raise StructuralError(f"{variant.name}: layer {name!r} missing from weights")
        if tuple(weights[name].shape) != shape:
            raise StructuralError(f"{variant.name}: layer {name!r} has shape "
                                  f"{tuple(weights[name].shape)}, expected {shape}")


def split_backbone(pretrained_weights: Optional[Union[Mapping[str, torch.Tensor], str, Path]],
                   variant: str, image_size: Optional[int] = None,
                   seed: Optional[int] = None) -> tuple[SharedExtractor, AdaptationModule]:
    """Build the frozen extractor and the stage-4 template from backbone weights.

    ``pretrained_weights=None`` gives a randomly initialised backbone (seeded), which is
    only meaningful for tests and offline proxies.
    """
    var = get_variant(variant)
    if isinstance(pretrained_weights, (str, Path)):
        pretrained_weights = load_pretrained(pretrained_weights, variant)
    if seed is not None:
        torch.manual_seed(seed)
    backbone = ResNet(var)
    if pretrained_weights is not None:
        _check_shapes(pretrained_weights, var)
        state = {k: v for k, v in pretrained_weights.items() if not k.startswith("fc.")}
        backbone.load_state_dict(state, strict=False)
    image_size = image_size or DEFAULT_IMAGE_SIZE[var.stem]
    extractor = SharedExtractor(backbone, image_size)
    template = AdaptationModule(backbone.layer4, var)
    return extractor, template


def extract_features(extractor: SharedExtractor, batch: torch.Tensor) -> torch.Tensor:
    if batch.dim() != 4 or tuple(batch.shape[1:]) != extractor.input_shape:
        raise InputError(f"expected batch of shape (N, {', '.join(map(str, extractor.input_shape))}), "
                         f"got {tuple(batch.shape)}")
    extractor.eval()
    with torch.no_grad():
        return extractor(batch)


def instantiate_module(template: AdaptationModule, strategy: str = "pretrained",
                       donor: Optional[AdaptationModule] = None,
                       task_id: int = 0) -> AdaptationModule:
    if strategy not in INIT_STRATEGIES:
        raise ConfigurationError(f"unknown init strategy {strategy!r}")
    if strategy == "relevant":
        if donor is None:
            raise ConfigurationError("init strategy 'relevant' needs a donor module")
        if not donor.frozen:
            raise ConfigurationError("donor module must be frozen")
        src = donor
    else:
        src = template
    module = copy.deepcopy(src)
    if strategy == "pretrained":
        module.plan = None
    module.task_id = task_id
    module.unfreeze()
    module.train()
    return module


def forward_task(extractor: SharedExtractor, module: AdaptationModule,
                 classifier: UnifiedClassifier, batch: torch.Tensor,
                 features: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Logits over the cumulative label space for one module.

    ``features`` may carry precomputed extractor output for ``batch``.
    """
    if module.in_channels != extractor.output_shape[0]:
        raise StructuralError(f"module expects {module.in_channels} input channels, "
                              f"extractor gives {extractor.output_shape[0]}")
    if classifier.embedding_dim != module.out_dim:
        raise StructuralError(f"classifier dim {classifier.embedding_dim} != module "
                              f"output dim {module.out_dim}")
    feats = extract_features(extractor, batch) if features is None else features
    return classifier(module(feats))


def expand_classifier(classifier: UnifiedClassifier, new_classes: int,
                      task_id: int) -> UnifiedClassifier:
    if new_classes < 1:
        raise ConfigurationError("new_classes must be >= 1")
    block = nn.Linear(classifier.embedding_dim, new_classes)
    bound = 1.0 / math.sqrt(classifier.embedding_dim)
    nn.init.uniform_(block.weight, -bound, bound)
    nn.init.zeros_(block.bias)
    classifier.blocks.append(block)
    classifier.task_ids.append(task_id)
    return classifier


def softmax(logits: torch.Tensor) -> torch.Tensor:
    return F.softmax(logits, dim=-1)


# --------------------------------------------------------------------------
# parameter accounting


def _numel(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def module_param_count(module: AdaptationModule, mode: str) -> int:
    if mode not in COUNTING_MODES:
        raise ConfigurationError(f"unknown counting mode {mode!r}")
    if mode == "masked-logical":
        return getattr(module, "dense_param_count", None) or _numel(module)
    if module.plan is None:
        return _numel(module)
    from .pruning import kept_param_count

    return kept_param_count(module)


def count_parameters(state: Any, mode: str = "compacted-physical") -> ParamReport:
    """Parameter accounting over an extractor, its modules and the classifier."""
    modules = list(state.modules)
    if not modules:
        raise ConfigurationError("count_parameters needs at least one module")
    extractor_n = _numel(state.extractor)
    module_counts = [module_param_count(m, mode) for m in modules]
    classifier: UnifiedClassifier = state.classifier
    row_counts = [b.weight.numel() + b.bias.numel() for b in classifier.blocks]
    registry = getattr(state, "task_registry", None)
    per_task = []
    for i, rows in enumerate(row_counts):
        if registry:
            midx = registry[classifier.task_ids[i]]["module"]
        else:
            midx = min(i, len(module_counts) - 1)
        per_task.append(module_counts[midx] + rows)
    if not per_task:
        per_task = list(module_counts)
    breakdown = {"extractor": extractor_n, "modules": sum(module_counts),
                 "classifier": sum(row_counts)}
    return ParamReport(
        trainable_per_task=round(sum(per_task) / len(per_task)),
        total_after_all_tasks=sum(breakdown.values()),
        per_component_breakdown=breakdown,
        counting_mode=mode,
        per_task_trainable=per_task,
    )
