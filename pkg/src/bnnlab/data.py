"""Dataset loading and synthesis.

Two sources: the CIFAR-10 binary batch format for optional real-data runs,
and a deterministic synthetic generator whose classes are built from
distinct spatial motifs (oriented bar, blob, checkerboard) plus Gaussian
pixel noise.  Every loader emits float64 pixels in [0, 1].
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RandomStream, derive_seed

_REC = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
_TEST_FILES = ("test_batch.bin",)

_DS_MAGIC = b"BNDS"
_DS_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    """Immutable image-classification dataset: x [N,C,H,W] in [0,1]."""

    x: np.ndarray
    y: np.ndarray
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        if self.x.ndim != 4:
            raise ValueError(f"x must be [N,C,H,W], got shape {self.x.shape}")
        if self.y.ndim != 1 or len(self.y) != len(self.x):
            raise ValueError(f"{len(self.x)} images vs {self.y.shape} labels")
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ValueError(
                f"labels must lie in [0, {self.class_count}), got range "
                f"[{self.y.min()}, {self.y.max()}]"
            )
        if len(self.y) and (self.x.min() < 0.0 or self.x.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 3
    image_size: int = 8
    per_class: int = 100
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.image_size < 4:
            raise ValueError(f"image_size must be >= 4, got {self.image_size}")
        if self.per_class < 5:
            raise ValueError(f"per_class must be >= 5 for an 80/20 split, got {self.per_class}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


def class_motif(c: int, size: int) -> np.ndarray:
    """Template image for class c: bar, blob, or checker, cycled with a
    per-class variant so any class count stays pairwise distinct."""
    kind, variant = c % 3, c // 3
    r, col = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    mid = (size - 1) / 2.0
    if kind == 0:
        theta = np.deg2rad(25.0 + 40.0 * variant)
        dist = np.abs(np.cos(theta) * (r - mid) + np.sin(theta) * (col - mid))
        img = np.where(dist <= size / 6.0, 0.9, 0.1)
    elif kind == 1:
        cy = mid + (variant % 3 - 1) * size / 5.0
        cx = mid + ((variant + 1) % 3 - 1) * size / 5.0
        d2 = (r - cy) ** 2 + (col - cx) ** 2
        img = 0.1 + 0.8 * np.exp(-d2 / (2.0 * (size / 5.0) ** 2))
    else:
        cell = max(1, size // (2 + variant))
        img = np.where(((r // cell + col // cell) % 2) == (variant % 2), 0.8, 0.2)
    return img


def synth_dataset(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    """Deterministic class-conditioned images with an exactly stratified
    80/20 train/test split (balanced within one example per class)."""
    s = spec.image_size
    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    n_test = spec.per_class // 5
    for c in range(spec.class_count):
        motif = class_motif(c, s)[None, None]
        noise = RandomStream(derive_seed(spec.seed, "noise", c)).normal(
            (spec.per_class, 1, s, s), std=1.0
        )
        imgs = np.clip(motif + spec.noise * noise, 0.0, 1.0)
        perm = RandomStream(derive_seed(spec.seed, "split", c)).permutation(spec.per_class)
        xs_te.append(imgs[perm[:n_test]])
        xs_tr.append(imgs[perm[n_test:]])
        ys_te.append(np.full(n_test, c, dtype=np.int64))
        ys_tr.append(np.full(spec.per_class - n_test, c, dtype=np.int64))

    def pack(xs, ys, tag):
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = RandomStream(derive_seed(spec.seed, "order", tag)).permutation(len(y))
        return Dataset(x[order], y[order], spec.class_count)

    return pack(xs_tr, ys_tr, "train"), pack(xs_te, ys_te, "test")


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches


def _parse_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % _REC != 0:
        raise ValueError(
            f"{path.name}: size {len(raw)} is not a positive multiple of {_REC} "
            f"(truncated at offset {len(raw) - len(raw) % _REC})"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _REC)
    labels = arr[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"{path.name}: label byte {labels[i]} at record {i} "
            f"(offset {i * _REC}) outside 0-9"
        )
    pixels = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return pixels, labels


def load_cifar10(dir_path) -> tuple[Dataset, Dataset]:
    """Parse the standard binary batches under dir_path (or its
    cifar-10-batches-bin subdirectory) into train/test datasets."""
    root = Path(dir_path)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"

    def load(names):
        xs, ys = [], []
        for name in names:
            p = root / name
            if not p.is_file():
                raise FileNotFoundError(f"missing CIFAR-10 batch file: {p}")
            x, y = _parse_batch(p)
            xs.append(x)
            ys.append(y)
        return Dataset(np.concatenate(xs), np.concatenate(ys), 10)

    return load(_TRAIN_FILES), load(_TEST_FILES)


# ---------------------------------------------------------------------------
# container round trip (same framing as model checkpoints)


def save_dataset(ds: Dataset, path) -> None:
    header = json.dumps(
        {
            "class_count": ds.class_count,
            "x_shape": list(ds.x.shape),
            "y_shape": list(ds.y.shape),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(_DS_MAGIC)
        f.write(struct.pack("<II", _DS_VERSION, len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(ds.x, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ds.y, dtype="<i8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _DS_MAGIC:
        raise ValueError(f"not a dataset file (magic {blob[:4]!r})")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != _DS_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    header = json.loads(blob[12 : 12 + hlen])
    off = 12 + hlen
    x_shape = tuple(header["x_shape"])
    y_shape = tuple(header["y_shape"])
    nx = int(np.prod(x_shape)) * 8
    ny = int(np.prod(y_shape)) * 8
    if len(blob) != off + nx + ny:
        raise ValueError(f"dataset payload is {len(blob) - off} bytes, expected {nx + ny}")
    x = np.frombuffer(blob[off : off + nx], dtype="<f8").reshape(x_shape)
    y = np.frombuffer(blob[off + nx :], dtype="<i8").reshape(y_shape)
    return Dataset(x.copy(), y.copy(), int(header["class_count"]))
