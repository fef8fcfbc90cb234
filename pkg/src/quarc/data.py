"""Datasets: synthetic generators, IDX and CSV loaders, stratified splits, batching."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray  # [N, D] or [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    num_classes: int
    split: str = "train"
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None  # original row ids

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise FormatError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError("label out of range")
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx], ids=self.ids[idx])


@dataclass(frozen=True)
class SyntheticSpec:
    generator: str = "gaussian-blobs"  # | "two-spirals"
    num_classes: int = 4
    per_class: int = 1000
    noise: float = 1.1
    seed: int = 0


def generate_synthetic(spec: SyntheticSpec, dtype=np.float32) -> Dataset:
    if spec.num_classes < 2:
        raise ConfigError("synthetic data needs at least 2 classes")
    if spec.noise < 0:
        raise ConfigError("noise must be non-negative")
    if spec.per_class < 1:
        raise ConfigError("per_class must be positive")
    rng = np.random.default_rng(spec.seed)
    M, n = spec.num_classes, spec.per_class
    labels = np.repeat(np.arange(M), n)
    if spec.generator == "gaussian-blobs":
        ang = 2 * np.pi * np.arange(M) / M
        means = 3.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        x = means[labels] + spec.noise * rng.standard_normal((M * n, 2))
    elif spec.generator == "two-spirals":
        # M interleaved arms; r grows linearly with the angle
        t = np.sqrt(rng.uniform(0, 1, M * n)) * 3 * np.pi
        phase = 2 * np.pi * labels / M
        r = t / np.pi
        x = np.stack([r * np.cos(t + phase), r * np.sin(t + phase)], axis=1)
        x = x + spec.noise * rng.standard_normal(x.shape)
    else:
        raise ConfigError(f"unknown generator {spec.generator!r}")
    return Dataset(x.astype(dtype), labels, M)


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, expect_magic: int, what: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{what}: file too short for magic number ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise FormatError(f"{what}: magic {magic:#010x}, expected {expect_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header != count:
        raise FormatError(f"{what}: payload has {len(raw) - header} bytes, dimensions {dims} need {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None, dtype=np.float32) -> Dataset:
    """Load MNIST-style big-endian IDX files; pixels are scaled to [0, 1]."""
    for p in (images_path, labels_path):
        if not Path(p).exists():
            raise FormatError(f"missing IDX file: {p}")
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels").astype(np.int64)
    if imgs.shape[0] != labels.shape[0]:
        raise FormatError(f"count: {imgs.shape[0]} images vs {labels.shape[0]} labels")
    x = (imgs.astype(dtype) / 255.0)[:, None, :, :]
    M = num_classes or (int(labels.max()) + 1 if labels.size else 1)
    return Dataset(x.astype(dtype), labels, max(M, 2))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", labels.shape[0]) + labels.tobytes()
    )


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, num_classes: Optional[int] = None, dtype=np.float32) -> Dataset:
    """CSV with header ``label,f0,f1,...``."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing CSV file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise FormatError(f"{path}: first column must be 'label'")
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    labels = np.asarray(labels)
    M = num_classes or int(labels.max()) + 1
    return Dataset(np.asarray(rows, dtype=dtype), labels, max(M, 2))


# ---------------------------------------------------------------------------
# splits, normalisation, batching


def stratified_split(ds: Dataset, eval_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < eval_fraction < 1:
        raise ConfigError("eval_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    ev = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        rng.shuffle(idx)
        ev.extend(idx[: int(round(eval_fraction * len(idx)))].tolist())
    ev = np.sort(np.asarray(ev, dtype=np.int64))
    tr = np.setdiff1d(np.arange(len(ds)), ev)
    train = replace(ds.subset(tr), split="train", ids=np.arange(len(tr)))
    evl = replace(ds.subset(ev), split="eval", ids=np.arange(len(ev)))
    return train, evl


def fit_normalization(train: Dataset) -> tuple[np.ndarray, np.ndarray]:
    axes = (0,) if train.features.ndim == 2 else (0, 2, 3)
    mean = train.features.mean(axis=axes, dtype=np.float64)
    std = train.features.std(axis=axes, dtype=np.float64)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v if ndim == 2 else v.reshape(1, -1, 1, 1)


def normalize(ds: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    nd = ds.features.ndim
    x = (ds.features - _bcast(mean, nd)) / _bcast(std, nd)
    return replace(ds, features=x.astype(ds.features.dtype), mean=mean, std=std)


def denormalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    nd = x.ndim
    return (x * _bcast(std, nd) + _bcast(mean, nd)).astype(x.dtype)


def hflip(ds: Dataset) -> Dataset:
    """Append horizontally mirrored copies of every image."""
    if ds.features.ndim != 4:
        raise ConfigError("horizontal flip applies to image datasets only")
    x = np.concatenate([ds.features, ds.features[..., ::-1]])
    y = np.concatenate([ds.labels, ds.labels])
    return replace(ds, features=x, labels=y, ids=np.arange(len(y)))


def epoch_order(ids, seed: int, epoch: int) -> np.ndarray:
    """Per-epoch permutation of ``ids`` driven by ``(seed, epoch)``."""
    ids = np.asarray(ids, dtype=np.int64)
    return ids[np.random.default_rng([seed, epoch]).permutation(len(ids))]


def iter_batches(ids, batch_size: int) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    ids = np.asarray(ids)
    for start in range(0, len(ids), batch_size):
        yield ids[start:start + batch_size]


def split_and_batch(ds: Dataset, eval_fraction: float, batch_size: int, seed: int = 0):
    """Stratified split plus an epoch -> batch-iterator factory over the train split."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    train, evl = stratified_split(ds, eval_fraction, seed)

    def batches(epoch: int) -> Iterator[np.ndarray]:
        return iter_batches(epoch_order(np.arange(len(train)), seed, epoch), batch_size)

    return train, evl, batches


@dataclass
class DataConfig:
    source: str = "synthetic"  # | "idx" | "csv"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    images: Optional[str] = None
    labels: Optional[str] = None
    csv: Optional[str] = None
    eval_fraction: float = 0.2
    split_seed: int = 0
    normalize: bool = True
    hflip: bool = False


def load_data(cfg: DataConfig) -> tuple[Dataset, Dataset]:
    """Load, split, and normalise according to ``cfg``; stats come from train only."""
    if cfg.source == "synthetic":
        ds = generate_synthetic(cfg.synthetic)
    elif cfg.source == "idx":
        if not cfg.images or not cfg.labels:
            raise ConfigError("idx source needs 'images' and 'labels' paths")
        ds = load_idx(cfg.images, cfg.labels)
    elif cfg.source == "csv":
        if not cfg.csv:
            raise ConfigError("csv source needs a 'csv' path")
        ds = load_csv(cfg.csv)
    else:
        raise ConfigError(f"unknown data source {cfg.source!r}")
    train, evl = stratified_split(ds, cfg.eval_fraction, cfg.split_seed)
    if cfg.hflip:
        train = hflip(train)
    if cfg.normalize:
        mean, std = fit_normalization(train)
        train, evl = normalize(train, mean, std), normalize(evl, mean, std)
    return train, evl
