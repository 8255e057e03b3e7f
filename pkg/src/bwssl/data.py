"""Dataset ingestion: CIFAR-10 binary batches, a raw tensor interchange
format, and a synthetic class-structured generator.

All sources return channel-major float32 images in [0,1] with integer labels
in deterministic order. The synthetic classes are pairs of two-stroke motifs
tiled across the image in a jittered checkerboard with nuisance color tint,
blob clutter, and pixel noise, so class identity survives crops/flips/jitter
while raw pixel statistics do not, which is what self-supervised pretraining
needs to show learning on.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataFormatError

_CIFAR_RECORD = 3073  # 1 label byte + 3072 pixel bytes
_RAW_MAGIC = b"BWSSLDATA"
_RAW_VERSION = 1


@dataclass
class DatasetDescriptor:
    source: str = "synthetic"
    path: str | None = None
    train_size: int = 10000
    val_size: int = 2000
    num_classes: int = 10
    image_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("cifar10-binary", "raw-tensor-file", "synthetic"):
            raise ConfigurationError(f"unknown dataset source {self.source!r}")
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.train_size < 1 or self.val_size < 1:
            raise ConfigurationError("split sizes must be positive")


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    num_classes: int

    @property
    def image_size(self) -> int:
        return self.train_images.shape[2]


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches (1 label byte + 3x1024 channel-planar pixel bytes)

def parse_cifar10_batch(path) -> tuple:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) == 0 or len(blob) % _CIFAR_RECORD:
        offset = (len(blob) // _CIFAR_RECORD) * _CIFAR_RECORD
        raise DataFormatError(
            f"{path}: truncated record at byte {offset} "
            f"(file length {len(blob)} not a multiple of {_CIFAR_RECORD})")
    n = len(blob) // _CIFAR_RECORD
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, _CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataFormatError(
            f"{path}: label byte {labels[bad[0]]} out of range at byte "
            f"{int(bad[0]) * _CIFAR_RECORD}")
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_binary(root, train_size: int, val_size: int) -> Dataset:
    train_files = [os.path.join(root, f"data_batch_{i}.bin") for i in range(1, 6)]
    test_file = os.path.join(root, "test_batch.bin")
    for p in train_files + [test_file]:
        if not os.path.exists(p):
            raise DataFormatError(f"missing dataset file {p}")
    images, labels = [], []
    total = 0
    for p in train_files:
        im, lb = parse_cifar10_batch(p)
        images.append(im)
        labels.append(lb)
        total += len(lb)
        if total >= train_size:
            break
    train_images = np.concatenate(images)[:train_size]
    train_labels = np.concatenate(labels)[:train_size]
    val_images, val_labels = parse_cifar10_batch(test_file)
    if len(train_images) < train_size or len(val_images) < val_size:
        raise DataFormatError(
            f"dataset too small for splits {train_size}/{val_size}")
    return Dataset(train_images, train_labels,
                   val_images[:val_size], val_labels[:val_size], 10)


# ---------------------------------------------------------------------------
# raw tensor interchange file

def save_raw_tensor_file(path, images: np.ndarray, labels: np.ndarray,
                         num_classes: int):
    images = np.ascontiguousarray(images, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<u2")
    n, c, h, w = images.shape
    with open(path, "wb") as f:
        f.write(_RAW_MAGIC)
        f.write(struct.pack("<IIIIII", _RAW_VERSION, n, c, h, w, num_classes))
        f.write(labels.tobytes())
        f.write(images.tobytes())


def parse_raw_tensor_file(path) -> tuple:
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(blob):
            raise DataFormatError(
                f"{path}: truncated at byte {pos} reading {what}")
        chunk = blob[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if take(len(_RAW_MAGIC), "magic") != _RAW_MAGIC:
        raise DataFormatError(f"{path}: not a raw tensor file (bad magic at byte 0)")
    version, n, c, h, w, k = struct.unpack("<IIIIII", take(24, "header"))
    if version != _RAW_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    labels = np.frombuffer(take(2 * n, "labels"), dtype="<u2").astype(np.int64)
    if labels.size and labels.max() >= k:
        raise DataFormatError(f"{path}: label {labels.max()} >= class count {k}")
    images = np.frombuffer(take(4 * n * c * h * w, "pixels"), dtype="<f4")
    images = images.reshape(n, c, h, w).copy()
    if pos != len(blob):
        raise DataFormatError(f"{path}: trailing bytes at {pos}")
    return images, labels, k


def load_raw_tensor_file(path, train_size: int, val_size: int) -> Dataset:
    images, labels, k = parse_raw_tensor_file(path)
    if len(images) < train_size + val_size:
        raise DataFormatError(
            f"{path}: {len(images)} examples < {train_size}+{val_size}")
    return Dataset(images[:train_size], labels[:train_size],
                   images[train_size:train_size + val_size],
                   labels[train_size:train_size + val_size], k)


# ---------------------------------------------------------------------------
# synthetic motif-pair classes

def _motif_templates(span: int) -> np.ndarray:
    """Four two-stroke conjunction motifs on a span x span patch: cross,
    top-tee, bottom-tee, and a cross with the junction removed.

    Every motif is one horizontal plus one vertical stroke, so first-order
    orientation statistics match across motifs; only the stroke arrangement
    separates them. All are symmetric under horizontal flips, and each is
    scaled to unit energy so total contrast carries no class signal."""
    t = max(1, span // 3)
    if t % 2 == 0:
        t -= 1
    c0 = (span - t) // 2
    motifs = np.zeros((4, span, span), dtype=np.float32)
    for m, r0 in enumerate((c0, 0, span - t)):       # centered, top, bottom
        motifs[m, r0:r0 + t, :] = 1.0
        motifs[m, :, c0:c0 + t] = 1.0
    motifs[3] = motifs[0]
    g0 = max(0, c0 - 1)
    motifs[3, g0:span - g0, g0:span - g0] = 0.0      # knock out the junction
    norms = np.sqrt((motifs ** 2).sum(axis=(1, 2), keepdims=True))
    return motifs / norms


def _class_pairs(k: int) -> list:
    """Class c -> unordered motif pair; distinct classes get distinct pairs."""
    if k > 10:
        raise ConfigurationError(
            f"synthetic source supports at most 10 classes, got {k}")
    m = 2
    while m * (m + 1) // 2 < k:
        m += 1
    pairs = [(i, j) for i in range(m) for j in range(i, m)]
    return pairs[:k]


def _grid_cells(size: int, span: int, rng: np.random.Generator) -> list:
    """Checkerboard cell centers with a global offset plus per-cell jitter.

    Adjacent cells hold the two motifs of a pair, so any crop covering a
    2x2 cell neighborhood sees both; the cell pitch keeps neighbors from
    overlapping by more than a pixel."""
    g = 3 if size >= 20 else 2
    lo, hi = span // 2, size - span // 2 - 1
    mag = max(1, size // 16)
    oy, ox = (int(v) for v in rng.integers(-mag, mag + 1, size=2))
    cells = []
    for r in range(g):
        for c in range(g):
            cy = int(round((r + 0.5) * size / g)) + oy + int(rng.integers(-1, 2))
            cx = int(round((c + 0.5) * size / g)) + ox + int(rng.integers(-1, 2))
            cells.append((min(max(cy, lo), hi), min(max(cx, lo), hi),
                          (r + c) % 2))
    return cells


def generate_synthetic(n: int, num_classes: int, size: int,
                       rng: np.random.Generator) -> tuple:
    """Images whose class is the pair of stroke motifs tiling them.

    Decoding a class needs motif identity (a stroke conjunction, not a raw
    orientation) plus presence pooling, so linear probes reward feature
    hierarchy depth. The checkerboard tiling makes class evidence survive
    any moderate crop. Per-channel tint, smooth blob clutter and pixel
    noise are class-independent nuisances."""
    pairs = _class_pairs(num_classes)
    span = 9 if size >= 20 else 5
    templates = _motif_templates(span) * 2.2
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)

    canvas = np.zeros((n, size, size), dtype=np.float32)
    half = span // 2
    for idx in range(n):
        i, j = pairs[labels[idx]]
        for cy, cx, parity in _grid_cells(size, span, rng):
            motif = templates[i if parity == 0 else j]
            canvas[idx, cy - half:cy + half + 1,
                   cx - half:cx + half + 1] += motif

    # smooth blobs: orientation-free clutter shared across channels
    coords = np.arange(size, dtype=np.float32)
    yy = coords[None, :, None]
    xx = coords[None, None, :]
    blobs = np.zeros((n, size, size), dtype=np.float32)
    for _ in range(2):
        cy = rng.uniform(0, size, size=n).astype(np.float32)[:, None, None]
        cx = rng.uniform(0, size, size=n).astype(np.float32)[:, None, None]
        sg = rng.uniform(size / 10, size / 5, size=n).astype(np.float32)[:, None, None]
        amp = (rng.uniform(0, 0.03, size=n) * rng.choice((-1.0, 1.0), size=n))
        blobs += amp.astype(np.float32)[:, None, None] * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sg * sg))

    tint = rng.uniform(0.8, 1.0, size=(n, 3, 1, 1)).astype(np.float32)
    noise = rng.normal(0, 0.02, size=(n, 3, size, size)).astype(np.float32)
    images = 0.5 + tint * canvas[:, None] + blobs[:, None] + noise
    np.clip(images, 0.0, 1.0, out=images)
    return images.astype(np.float32), labels


def load_synthetic(desc: DatasetDescriptor) -> Dataset:
    rng_train = np.random.default_rng([desc.seed & 0xFFFFFFFF, 0x5D1, 0])
    rng_val = np.random.default_rng([desc.seed & 0xFFFFFFFF, 0x5D1, 1])
    ti, tl = generate_synthetic(desc.train_size, desc.num_classes,
                                desc.image_size, rng_train)
    vi, vl = generate_synthetic(desc.val_size, desc.num_classes,
                                desc.image_size, rng_val)
    return Dataset(ti, tl, vi, vl, desc.num_classes)


def load_dataset(desc: DatasetDescriptor) -> Dataset:
    if desc.source == "synthetic":
        return load_synthetic(desc)
    if desc.path is None:
        raise ConfigurationError(f"source {desc.source!r} needs a path")
    if desc.source == "cifar10-binary":
        return load_cifar10_binary(desc.path, desc.train_size, desc.val_size)
    return load_raw_tensor_file(desc.path, desc.train_size, desc.val_size)
