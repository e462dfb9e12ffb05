"""Dataset ingestion.

All loaders return :class:`LabeledImages` with uint8 images in (N, C, H, W)
layout. CIFAR archives are read from the standard python pickle release;
anything else (CUB-200, Cars-196, ImageNet-R after offline resizing) goes
through the ``npz`` loader.
"""

from __future__ import annotations

import logging
import pickle
import tarfile
import time
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigurationError, IngestionError

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

CIFAR_SOURCES = {
    "cifar10": ("https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz", "cifar-10-batches-py"),
    "cifar100": ("https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz", "cifar-100-python"),
}


@dataclass
class LabeledImages:
    name: str
    train_x: torch.Tensor  # uint8 (N, C, H, W)
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor

    @property
    def num_classes(self) -> int:
        return int(torch.cat([self.train_y, self.test_y]).unique().numel())

    def subsample(self, per_class_train: Optional[int] = None,
                  per_class_test: Optional[int] = None, seed: int = 0) -> "LabeledImages":
        gen = torch.Generator().manual_seed(seed)

        def pick(y: torch.Tensor, k: Optional[int]) -> torch.Tensor:
            if k is None:
                return torch.arange(len(y))
            keep = []
            for c in y.unique().tolist():
                idx = (y == c).nonzero().flatten()
                keep.append(idx[torch.randperm(len(idx), generator=gen)[:k]])
            return torch.cat(keep).sort().values

        tr, te = pick(self.train_y, per_class_train), pick(self.test_y, per_class_test)
        return LabeledImages(self.name, self.train_x[tr], self.train_y[tr],
                             self.test_x[te], self.test_y[te])


class Preprocess:
    """uint8 batch -> float batch resized to the backbone resolution and normalised."""

    def __init__(self, image_size: int, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        self.image_size = image_size
        self.mean = torch.tensor(mean).view(1, -1, 1, 1)
        self.std = torch.tensor(std).view(1, -1, 1, 1)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        x = x.float() / 255.0
        if x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            x = F.interpolate(x, size=(self.image_size, self.image_size), mode="bilinear",
                              align_corners=False)
        return (x - self.mean) / self.std


def _unpickle(path: Path) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="bytes")


def _cifar_arrays(batches: list[dict], label_key: bytes) -> tuple[torch.Tensor, torch.Tensor]:
    data = np.concatenate([b[b"data"] for b in batches]).reshape(-1, 3, 32, 32)
    labels = np.concatenate([np.asarray(b[label_key]) for b in batches])
    return torch.from_numpy(data.astype(np.uint8)), torch.from_numpy(labels.astype(np.int64))


def fetch_cifar(name: str, root: Union[str, Path], retries: int = 3) -> Path:
    url, folder = CIFAR_SOURCES[name]
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    archive = root / url.rsplit("/", 1)[1]
    last: Optional[Exception] = None
    for attempt in range(1, retries + 1):
        try:
            urllib.request.urlretrieve(url, archive)
            with tarfile.open(archive) as tf:
                tf.extractall(root)
            return root / folder
        except Exception as exc:  # network and archive errors alike
            last = exc
            log.warning("download of %s failed (attempt %d/%d): %s", url, attempt, retries, exc)
            time.sleep(min(2 ** attempt, 10))
    raise IngestionError(
        f"could not fetch {name} from {url} ({last}). Retry later, or download the archive "
        f"by hand and extract it so that {root / folder} exists, then point PAM_DATA_ROOT at {root}.")


def load_cifar(name: str, root: Union[str, Path], download: bool = False) -> LabeledImages:
    if name not in CIFAR_SOURCES:
        raise ConfigurationError(f"unknown CIFAR variant {name!r}")
    folder = Path(root) / CIFAR_SOURCES[name][1]
    if not folder.exists():
        if not download:
            raise IngestionError(
                f"{name} not found under {folder}. Extract the python release of the dataset "
                f"there (or enable download) and set PAM_DATA_ROOT to its parent directory.")
        folder = fetch_cifar(name, root)
    try:
        if name == "cifar10":
            train = [_unpickle(folder / f"data_batch_{i}") for i in range(1, 6)]
            test = [_unpickle(folder / "test_batch")]
            key = b"labels"
        else:
            train, test = [_unpickle(folder / "train")], [_unpickle(folder / "test")]
            key = b"fine_labels"
        trx, try_ = _cifar_arrays(train, key)
        tex, tey = _cifar_arrays(test, key)
    except (OSError, KeyError, pickle.UnpicklingError) as exc:
        raise IngestionError(f"malformed {name} archive under {folder}: {exc}") from exc
    return LabeledImages(name, trx, try_, tex, tey)


def load_digits(test_fraction: float = 0.2, split_seed: int = 0) -> LabeledImages:
    """scikit-learn's bundled 8x8 handwritten digits, as 3-channel uint8 images."""
    from sklearn.datasets import load_digits as _load
    from sklearn.model_selection import train_test_split

    ds = _load()
    imgs = np.clip(np.round(ds.images * (255.0 / 16.0)), 0, 255).astype(np.uint8)
    imgs = np.repeat(imgs[:, None], 3, axis=1)
    xtr, xte, ytr, yte = train_test_split(imgs, ds.target, test_size=test_fraction,
                                          random_state=split_seed, stratify=ds.target)
    return LabeledImages("digits", torch.from_numpy(xtr), torch.from_numpy(ytr).long(),
                         torch.from_numpy(xte), torch.from_numpy(yte).long())


def make_synthetic(num_classes: int = 10, train_per_class: int = 40, test_per_class: int = 20,
                   size: int = 32, seed: int = 0, noise: float = 0.15) -> LabeledImages:
    """Procedural gratings: each class has its own orientation, frequency and colour."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    protos = []
    for c in range(num_classes):
        theta = np.pi * c / num_classes
        freq = 2 + (c % 3) * 2
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
        colour = rng.uniform(0.2, 1.0, size=3)
        protos.append(0.5 + 0.5 * wave[None] * colour[:, None, None])

    def sample(k: int) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for c, p in enumerate(protos):
            shift = rng.integers(0, size, size=k)
            for s in shift:
                img = np.roll(p, s, axis=2) + rng.normal(0, noise, p.shape)
                xs.append(img)
                ys.append(c)
        x = np.clip(np.stack(xs) * 255, 0, 255).astype(np.uint8)
        return x, np.asarray(ys)

    xtr, ytr = sample(train_per_class)
    xte, yte = sample(test_per_class)
    return LabeledImages("synthetic", torch.from_numpy(xtr), torch.from_numpy(ytr).long(),
                         torch.from_numpy(xte), torch.from_numpy(yte).long())


def load_npz(path: Union[str, Path]) -> LabeledImages:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")
    with np.load(path) as z:
        missing = {"train_x", "train_y", "test_x", "test_y"} - set(z.files)
        if missing:
            raise IngestionError(f"{path} lacks arrays {sorted(missing)}")
        arrs = {k: z[k] for k in ("train_x", "train_y", "test_x", "test_y")}
    for k in ("train_x", "test_x"):
        if arrs[k].ndim != 4:
            raise IngestionError(f"{path}:{k} must be (N, C, H, W) uint8")
    return LabeledImages(path.stem, torch.from_numpy(arrs["train_x"].astype(np.uint8)),
                         torch.from_numpy(arrs["train_y"].astype(np.int64)),
                         torch.from_numpy(arrs["test_x"].astype(np.uint8)),
                         torch.from_numpy(arrs["test_y"].astype(np.int64)))


def load_dataset(name: str, data_root: Optional[Union[str, Path]] = None,
                 download: bool = False, **kwargs) -> LabeledImages:
    if name in CIFAR_SOURCES:
        if data_root is None:
            raise ConfigurationError(f"{name} needs a data root (config data_root or PAM_DATA_ROOT)")
        return load_cifar(name, data_root, download)
    if name == "digits":
        return load_digits(**kwargs)
    if name == "synthetic":
        return make_synthetic(**kwargs)
    if name == "strokes":
        return make_strokes(**kwargs)
    if name.endswith(".npz"):
        p = Path(name)
        return load_npz(p if p.is_absolute() or data_root is None else Path(data_root) / p)
    raise ConfigurationError(f"unknown dataset {name!r}")


def _bezier(p0, p1, p2, n: int = 48) -> np.ndarray:
    t = np.linspace(0, 1, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def make_strokes(num_classes: int = 100, train_per_class: int = 100, test_per_class: int = 20,
                 size: int = 32, seed: int = 0) -> LabeledImages:
    """Synthetic 'characters': each class is a fixed set of 2-4 curved strokes.

    Samples jitter the control points and apply a random similarity transform
    and stroke width. Used as a source domain for pre-training desk-scale
    backbones when no natural-image corpus is available offline.
    """
    rng = np.random.default_rng(seed)
    protos = []
    for _ in range(num_classes):
        k = rng.integers(2, 5)
        protos.append(rng.uniform(0.15, 0.85, size=(k, 3, 2)))
    grid = (np.stack(np.mgrid[0:size, 0:size][::-1], -1).reshape(-1, 2) + 0.5) / size

    def render(strokes: np.ndarray) -> np.ndarray:
        ang = rng.uniform(-0.3, 0.3)
        scale = rng.uniform(0.85, 1.1)
        shift = rng.uniform(-0.08, 0.08, size=2)
        rot = scale * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        pts = []
        for s in strokes + rng.normal(0, 0.035, strokes.shape):
            pts.append(_bezier(*s))
        pts = (np.concatenate(pts) - 0.5) @ rot.T + 0.5 + shift
        d = np.sqrt(((grid[:, None, :] - pts[None]) ** 2).sum(-1)).min(1) * size
        width = rng.uniform(0.8, 1.6)
        img = np.clip(1.5 - d / width, 0, 1).reshape(size, size)
        return np.repeat((img * 255).astype(np.uint8)[None], 3, 0)

    def sample(k: int) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for c, p in enumerate(protos):
            for _ in range(k):
                xs.append(render(p))
                ys.append(c)
        return np.stack(xs), np.asarray(ys)

    xtr, ytr = sample(train_per_class)
    xte, yte = sample(test_per_class)
    return LabeledImages("strokes", torch.from_numpy(xtr), torch.from_numpy(ytr).long(),
                         torch.from_numpy(xte), torch.from_numpy(yte).long())
