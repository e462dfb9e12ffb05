"""Per-stage checkpoint directories and the session manifest.

Layout::

    <run>/session.json
    <run>/stage_<b>/module.bin      compacted module weights + block widths
    <run>/stage_<b>/plan.txt        pruning plan record
    <run>/stage_<b>/classifier.bin  classifier snapshot after stage b
    <run>/stage_<b>/centroid.bin    task centroid
    <run>/stage_<b>/log.jsonl       training log
    <run>/stage_<b>/eval.json       stage metrics (written last; marks the stage complete)
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

import torch
from torch import nn

from ..errors import IngestionError
from ..model import AdaptationModule, UnifiedClassifier
from ..pruning import PruningPlan
from ..resnet import make_stage
from ..trainer import SessionState, TrainLog


def stage_dir(run_dir: Path, b: int) -> Path:
    return Path(run_dir) / f"stage_{b}"


def stage_complete(run_dir: Path, b: int) -> bool:
    return (stage_dir(run_dir, b) / "eval.json").exists()


def save_module(module: AdaptationModule, path: Path) -> None:
    torch.save({
        "task_id": module.task_id,
        "variant": module.variant.name,
        "mids": [blk.widths() for blk in module.stage],
        "dense_param_count": getattr(module, "dense_param_count", None),
        "state_dict": module.state_dict(),
    }, path)


def load_module(path: Path, template: AdaptationModule) -> AdaptationModule:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    var = template.variant
    mids = [m[0] if len(m) == 1 else m for m in blob["mids"]]
    stage = make_stage(var.block, template.in_channels, var.stage_planes[3], var.layers[3], 2, mids)
    module = AdaptationModule(stage, var, blob["task_id"])
    module.load_state_dict(blob["state_dict"])
    if blob.get("dense_param_count"):
        module.dense_param_count = blob["dense_param_count"]
    return module.freeze()


def save_classifier(clf: UnifiedClassifier, path: Path) -> None:
    torch.save({"embedding_dim": clf.embedding_dim, "task_ids": list(clf.task_ids),
                "state_dict": clf.state_dict()}, path)


def load_classifier(path: Path) -> UnifiedClassifier:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    clf = UnifiedClassifier(blob["embedding_dim"])
    sd = blob["state_dict"]
    for i, tid in enumerate(blob["task_ids"]):
        rows = sd[f"blocks.{i}.weight"].shape[0]
        clf.blocks.append(nn.Linear(clf.embedding_dim, rows))
        clf.task_ids.append(tid)
    clf.load_state_dict(sd)
    for tid in clf.task_ids:
        clf.freeze_task(tid)
    return clf


def save_stage(run_dir: Path, b: int, state: SessionState, task_id: int, tlog: TrainLog) -> Path:
    d = stage_dir(run_dir, b)
    d.mkdir(parents=True, exist_ok=True)
    midx = state.module_for_task(task_id)
    module = state.modules[midx]
    save_module(module, d / "module.bin")
    if module.plan is not None:
        module.plan.save(d / "plan.txt")
    else:
        (d / "plan.txt").write_text("# no pruning plan\n")
    save_classifier(state.classifier, d / "classifier.bin")
    torch.save(state.centroids[-1], d / "centroid.bin")
    tlog.write_jsonl(d / "log.jsonl")
    return d


def restore_stage(run_dir: Path, b: int, state: SessionState, task_id: int,
                  classes: list[int], module_index: int) -> None:
    """Load stage ``b`` into ``state`` as if the session had just finished."""
    d = stage_dir(run_dir, b)
    for name in ("module.bin", "plan.txt", "classifier.bin", "centroid.bin"):
        if not (d / name).exists():
            raise IngestionError(f"checkpoint {d} lacks {name}")
    module = load_module(d / "module.bin", state.template)
    text = (d / "plan.txt").read_text()
    if "layer " in text or "magnitude" in text:
        module.plan = PruningPlan.from_text(text)
    if module_index == len(state.modules):
        state.modules.append(module)
    else:
        state.modules[module_index] = module
    state.classifier = load_classifier(d / "classifier.bin")
    state.centroids.append(torch.load(d / "centroid.bin", weights_only=True))
    state.task_registry[task_id] = {"classes": list(classes), "module": module_index}
    state.label_order.extend(classes)


def write_session(run_dir: Path, payload: dict[str, Any]) -> None:
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    (Path(run_dir) / "session.json").write_text(json.dumps(payload, indent=2) + "\n")


def read_session(run_dir: Path) -> Optional[dict[str, Any]]:
    p = Path(run_dir) / "session.json"
    return json.loads(p.read_text()) if p.exists() else None
