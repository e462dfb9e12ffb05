"""L1 channel saliency, pruning plans, masking and compaction of adaptation modules."""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Union

import torch
from torch import nn

from .errors import ConfigurationError, InputError, StateError, StructuralError
from .model import AdaptationModule
from .resnet import DOWNSTREAM

STAGE_NAME = "layer4"


@dataclass
class SaliencyScores:
    layer_id: str
    scores: torch.Tensor  # float64, one entry per output channel

    def ranking(self) -> list[int]:
        """Channel indices from least to most salient; ties put the higher index first."""
        s = self.scores.tolist()
        return sorted(range(len(s)), key=lambda c: (s[c], -c))


@dataclass
class PruningPlan:
    per_layer_masks: dict[str, list[bool]]
    magnitude: float
    scope: list[str]
    created_at_epoch: int = 0
    warnings: list[str] = field(default_factory=list)

    def kept(self, layer_id: str) -> list[int]:
        return [i for i, k in enumerate(self.per_layer_masks[layer_id]) if k]

    def dropped(self, layer_id: str) -> list[int]:
        return [i for i, k in enumerate(self.per_layer_masks[layer_id]) if not k]

    def num_kept(self) -> int:
        return sum(sum(m) for m in self.per_layer_masks.values())

    def to_text(self) -> str:
        lines = ["# pam pruning plan v1",
                 f"magnitude {self.magnitude!r}",
                 f"created_at_epoch {self.created_at_epoch}"]
        for w in self.warnings:
            lines.append(f"warning {w}")
        for layer in self.scope:
            mask = self.per_layer_masks[layer]
            kept = ",".join(str(i) for i, k in enumerate(mask) if k)
            lines.append(f"layer {layer} {len(mask)} {kept}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PruningPlan":
        magnitude, epoch = None, 0
        masks: dict[str, list[bool]] = {}
        scope: list[str] = []
        warns: list[str] = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key == "magnitude":
                magnitude = float(rest)
            elif key == "created_at_epoch":
                epoch = int(rest)
            elif key == "warning":
                warns.append(rest)
            elif key == "layer":
                parts = rest.split(" ")
                layer, n = parts[0], int(parts[1])
                keep = {int(i) for i in parts[2].split(",")} if len(parts) > 2 and parts[2] else set()
                masks[layer] = [i in keep for i in range(n)]
                scope.append(layer)
            else:
                raise InputError(f"unrecognised plan record {line!r}")
        if magnitude is None:
            raise InputError("plan record has no magnitude line")
        return cls(masks, magnitude, scope, epoch, warns)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PruningPlan":
        return cls.from_text(Path(path).read_text())


def prunable_layers(module: AdaptationModule) -> Iterator[tuple[str, nn.Module, str, str, str]]:
    """Yield (layer_id, block, conv_name, bn_name, mask_name) for every in-scope conv.

    Block outputs feeding the skip addition and downsample projections are never listed.
    """
    for i, block in enumerate(module.stage):
        for conv, bn, mask in block.prunable:
            yield f"{STAGE_NAME}.{i}.{conv}", block, conv, bn, mask


def channel_saliency(weights: torch.Tensor, layer_id: str = "") -> SaliencyScores:
    if weights.numel() == 0:
        raise InputError("empty weight block")
    if weights.dim() != 4:
        raise InputError(f"expected out x in x k x k weights, got shape {tuple(weights.shape)}")
    # correctly rounded per-channel sums, independent of reduction order
    rows = weights.detach().to(torch.float64).abs().flatten(1).tolist()
    scores = torch.tensor([math.fsum(r) for r in rows], dtype=torch.float64)
    return SaliencyScores(layer_id, scores)


def num_to_drop(magnitude: float, channels: int) -> int:
    # Fraction(str(.)) keeps e.g. 0.29 * 100 from flooring to 28
    return math.floor(Fraction(str(magnitude)) * channels)


def build_pruning_plan(module: AdaptationModule, magnitude: float, epoch: int = 0) -> PruningPlan:
    if not 0 <= magnitude < 1:
        raise ConfigurationError(f"pruning magnitude must lie in [0, 1), got {magnitude}")
    if module.plan is not None:
        raise StateError("module already carries a pruning plan")
    masks: dict[str, list[bool]] = {}
    scope: list[str] = []
    notes: list[str] = []
    for layer_id, block, conv, _, _ in prunable_layers(module):
        sal = channel_saliency(getattr(block, conv).weight, layer_id)
        n = len(sal.scores)
        k = num_to_drop(magnitude, n)
        if k >= n:
            msg = f"{layer_id}: magnitude {magnitude} would remove all {n} channels; keeping 1"
            warnings.warn(msg)
            notes.append(msg)
            k = n - 1
        drop = set(sal.ranking()[:k])
        masks[layer_id] = [c not in drop for c in range(n)]
        scope.append(layer_id)
    return PruningPlan(masks, float(magnitude), scope, epoch, notes)


def _check_scope(module: AdaptationModule, plan: PruningPlan) -> None:
    layers = {lid: getattr(block, conv).out_channels
              for lid, block, conv, _, _ in prunable_layers(module)}
    if set(plan.scope) != set(layers) or set(plan.per_layer_masks) != set(layers):
        raise StructuralError(f"plan scope {sorted(plan.scope)} does not match module "
                              f"layers {sorted(layers)}")
    for lid, n in layers.items():
        if len(plan.per_layer_masks[lid]) != n:
            raise StructuralError(f"{lid}: plan has {len(plan.per_layer_masks[lid])} "
                                  f"channels, module has {n}")


@torch.no_grad()
def apply_plan(module: AdaptationModule, plan: PruningPlan) -> AdaptationModule:
    """Mask the dropped channels of ``module`` in place.

    Dropped output channels are multiplied by zero after their activation, so
    their weights neither influence the output nor receive gradient.
    """
    _check_scope(module, plan)
    for lid, block, conv_name, bn_name, mask_name in prunable_layers(module):
        keep = torch.tensor(plan.per_layer_masks[lid], dtype=torch.bool)
        drop = ~keep
        conv = getattr(block, conv_name)
        bn = getattr(block, bn_name)
        conv.weight[drop] = 0
        bn.weight[drop] = 0
        bn.bias[drop] = 0
        bn.running_mean[drop] = 0
        bn.running_var[drop] = 1
        nxt = getattr(block, DOWNSTREAM[type(block)][conv_name])
        nxt.weight[:, drop] = 0
        setattr(block, mask_name, keep.to(conv.weight.dtype))
    module.plan = plan
    return module


@torch.no_grad()
def enforce_mask(module: AdaptationModule) -> None:
    """Re-zero every masked weight (guards against optimizer drift)."""
    for _, block, conv_name, bn_name, mask_name in prunable_layers(module):
        mask = getattr(block, mask_name)
        if mask is None:
            continue
        drop = mask == 0
        getattr(block, conv_name).weight[drop] = 0
        bn = getattr(block, bn_name)
        bn.weight[drop] = 0
        bn.bias[drop] = 0
        getattr(block, DOWNSTREAM[type(block)][conv_name]).weight[:, drop] = 0


def masked_parameters(module: AdaptationModule) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """(parameter, boolean keep-pattern of the same shape) for every parameter touched by a mask."""
    for _, block, conv_name, bn_name, mask_name in prunable_layers(module):
        mask = getattr(block, mask_name)
        if mask is None:
            continue
        keep = mask.bool()
        conv = getattr(block, conv_name)
        bn = getattr(block, bn_name)
        nxt = getattr(block, DOWNSTREAM[type(block)][conv_name])
        yield conv.weight, keep.view(-1, 1, 1, 1).expand_as(conv.weight)
        yield bn.weight, keep
        yield bn.bias, keep
        yield nxt.weight, keep.view(1, -1, 1, 1).expand_as(nxt.weight)


def _block_keep(block: nn.Module) -> dict[str, torch.Tensor]:
    keep = {}
    for conv, _, mask in block.prunable:
        m = getattr(block, mask)
        n = getattr(block, conv).out_channels
        keep[conv] = (m.bool() if m is not None else torch.ones(n, dtype=torch.bool)).nonzero().flatten()
    return keep


def kept_param_count(module: AdaptationModule) -> int:
    """Parameter count of ``module`` with masked channels removed, computed from the masks alone."""
    total = 0
    for block in module.stage:
        out_keep: dict[str, int] = {}
        in_keep: dict[str, int] = {}
        for conv, bn, _ in block.prunable:
            n = len(_block_keep(block)[conv])
            out_keep[conv] = out_keep[bn] = n
            in_keep[DOWNSTREAM[type(block)][conv]] = n
        for name, mod in block.named_modules():
            if isinstance(mod, nn.Conv2d):
                o = out_keep.get(name, mod.out_channels)
                i = in_keep.get(name, mod.in_channels)
                total += o * i * mod.kernel_size[0] * mod.kernel_size[1]
                total += o if mod.bias is not None else 0
            elif isinstance(mod, nn.BatchNorm2d):
                total += 2 * out_keep.get(name, mod.num_features)
    return total


def _compact_block(block: nn.Module) -> nn.Module:
    keep = _block_keep(block)
    upstream = {v: k for k, v in DOWNSTREAM[type(block)].items()}
    mids = [len(keep[conv]) for conv, _, _ in block.prunable]
    planes = block.bn2.num_features if type(block).expansion == 1 else block.bn3.num_features // 4
    new = type(block)(block.conv1.in_channels, planes, block.stride,
                      copy.deepcopy(block.downsample),
                      mid=mids[0] if len(mids) == 1 else mids)
    bn_of = {conv: bn for conv, bn, _ in block.prunable}
    with torch.no_grad():
        for name, mod in block.named_children():
            if not isinstance(mod, nn.Conv2d):
                continue
            w = mod.weight
            if name in keep:
                w = w[keep[name]]
            if name in upstream:
                w = w[:, keep[upstream[name]]]
            getattr(new, name).weight.copy_(w)
            if name in bn_of:
                src, dst = getattr(block, bn_of[name]), getattr(new, bn_of[name])
                idx = keep[name]
                dst.weight.copy_(src.weight[idx])
                dst.bias.copy_(src.bias[idx])
                dst.running_mean.copy_(src.running_mean[idx])
                dst.running_var.copy_(src.running_var[idx])
                dst.num_batches_tracked.copy_(src.num_batches_tracked)
        for bn_name in ("bn2", "bn3"):
            if hasattr(block, bn_name) and bn_name not in bn_of.values():
                getattr(new, bn_name).load_state_dict(getattr(block, bn_name).state_dict())
    return new


def compact(module: AdaptationModule) -> AdaptationModule:
    """Physically remove masked channels; returns a new module."""
    if module.plan is None:
        raise StateError("compact() needs a masked module")
    stage = nn.Sequential(*[_compact_block(b) for b in module.stage])
    out = AdaptationModule(stage, module.variant, module.task_id)
    out.plan = module.plan
    out.dense_param_count = getattr(module, "dense_param_count",
                                    sum(p.numel() for p in module.parameters()))
    out.train(module.training)
    if module.frozen:
        out.freeze()
    else:
        out.unfreeze()
    return out
