"""Frozen-model evaluation: per-block linear probes, two-view correlation
diagnostics on pooled backbone features, and corruption robustness.

Everything here is read-only over the encoder; the probe asserts that via a
state checksum before and after.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .augment import ViewPipeline, _blur_group, generate_view_batch, stream
from .data import Dataset
from .errors import ConfigurationError, ShapeError
from .layers import Encoder, Linear
from .losses import cross_correlation, supervised_ce_loss
from .optim import SGD, CosineSchedule
from .pooling import gsp
from .tensor import DEFAULT_DTYPE, Tensor, no_grad


def top1_accuracy(predictions: np.ndarray, labels) -> float:
    """Fraction of argmax matches; argmax takes the lowest index on ties."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.ndim != 2 or len(predictions) != len(labels):
        raise ShapeError(
            f"need (N,K) scores and N labels, got {predictions.shape} "
            f"and {labels.shape}")
    return float((predictions.argmax(axis=1) == labels).mean())


def encoder_checksum(encoder: Encoder) -> str:
    h = hashlib.sha256()
    for name, arr in encoder.checkpoint_entries():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def block_features(encoder: Encoder, images: np.ndarray, block: int,
                   batch: int = 256) -> np.ndarray:
    """Globally pooled activations of physical blocks 0..block, eval mode,
    no projector. ``block`` is 0-indexed."""
    if not 0 <= block < len(encoder.blocks):
        raise ConfigurationError(
            f"block {block + 1} outside 1..{len(encoder.blocks)}")
    encoder.set_training(False)
    prefix = [list(range(block + 1))]
    feats = []
    with no_grad():
        for i in range(0, len(images), batch):
            x = Tensor(np.ascontiguousarray(images[i:i + batch]))
            acts = encoder.forward_blocks(x, boundaries=prefix)
            feats.append(gsp(acts[block]).data)
    return np.concatenate(feats)


# ---------------------------------------------------------------------------
# linear probe

@dataclass
class ProbeEntry:
    block: int                 # 1-indexed block prefix
    top1: float
    best_lr: float
    epochs: int
    per_class: list
    weight: np.ndarray = field(repr=False, default=None)
    bias: np.ndarray = field(repr=False, default=None)


@dataclass
class ProbeReport:
    entries: list

    def accuracy(self, block: int) -> float:
        return self.entries[block - 1].top1


def _fit_classifier(train_x, train_y, num_classes: int, lr: float,
                    epochs: int, batch: int, seed: int):
    n, d = train_x.shape
    clf = Linear(d, num_classes, rng=np.random.default_rng(0))
    clf.weight.data = np.zeros((d, num_classes), dtype=DEFAULT_DTYPE)
    opt = SGD(clf.named_parameters("probe"), momentum=0.9)
    steps_per_epoch = max(1, n // batch)
    schedule = CosineSchedule(lr, epochs * steps_per_epoch)
    t = 0
    for epoch in range(epochs):
        perm = stream(seed, 7, epoch).permutation(n)
        for s in range(steps_per_epoch):
            idx = perm[s * batch:(s + 1) * batch]
            if len(idx) < 1:
                continue
            opt.zero_grad()
            logits = clf.forward(Tensor(train_x[idx]))
            loss = supervised_ce_loss(logits, train_y[idx])
            loss.backward()
            opt.step(schedule.lr(t))
            t += 1
    return clf


def _classifier_scores(clf, x: np.ndarray) -> np.ndarray:
    return x @ clf.weight.data + clf.bias.data


def linear_probe(encoder: Encoder, block: int, dataset: Dataset,
                 lr_grid=(0.1, 0.3, 1.0), epochs: int = 30, batch: int = 256,
                 seed: int = 0, features=None) -> ProbeEntry:
    """Affine classifier on pooled block-prefix features; best lr on the
    held-out split wins. ``block`` is 1-indexed. ``features`` optionally
    carries precomputed (train_x, val_x)."""
    before = encoder_checksum(encoder)
    if features is None:
        train_x = block_features(encoder, dataset.train_images, block - 1, batch)
        val_x = block_features(encoder, dataset.val_images, block - 1, batch)
    else:
        train_x, val_x = features
    train_y, val_y = dataset.train_labels, dataset.val_labels
    k = dataset.num_classes

    best = None
    for lr in lr_grid:
        clf = _fit_classifier(train_x, train_y, k, lr, epochs, batch, seed)
        acc = top1_accuracy(_classifier_scores(clf, val_x), val_y)
        if best is None or acc > best[0]:
            best = (acc, lr, clf)
    acc, lr, clf = best

    pred = _classifier_scores(clf, val_x).argmax(axis=1)
    per_class = []
    for c in range(k):
        mask = val_y == c
        per_class.append(float((pred[mask] == c).mean()) if mask.any() else 0.0)

    after = encoder_checksum(encoder)
    if before != after:
        raise RuntimeError("probe mutated encoder state")
    return ProbeEntry(block, acc, float(lr), epochs, per_class,
                      clf.weight.data.copy(), clf.bias.data.copy())


def probe_report(encoder: Encoder, dataset: Dataset, lr_grid=(0.1, 0.3, 1.0),
                 epochs: int = 30, batch: int = 256, seed: int = 0) -> ProbeReport:
    entries = [linear_probe(encoder, b, dataset, lr_grid, epochs, batch, seed)
               for b in range(1, len(encoder.blocks) + 1)]
    return ProbeReport(entries)


# ---------------------------------------------------------------------------
# correlation diagnostics

@dataclass
class CorrelationEntry:
    block: int
    on_diagonal: np.ndarray
    off_diagonal: np.ndarray

    def summary(self) -> dict:
        def stats(v):
            q = np.quantile(v, [0.1, 0.5, 0.9])
            return {"mean": float(v.mean()), "p10": float(q[0]),
                    "p50": float(q[1]), "p90": float(q[2])}
        return {"on": stats(self.on_diagonal), "off": stats(self.off_diagonal)}


@dataclass
class CorrelationStats:
    entries: list

    def mean_on_diagonal(self, block: int) -> float:
        return float(self.entries[block - 1].on_diagonal.mean())


def correlation_diagnostics(encoder: Encoder, images: np.ndarray,
                            pipeline: ViewPipeline | None = None,
                            seed: int = 0, batch: int = 256) -> CorrelationStats:
    """Normalized cross-correlation of two augmented views of pooled backbone
    features (no projector) at every block boundary."""
    if len(images) < 2:
        raise ShapeError("need at least 2 samples for correlation diagnostics")
    pipeline = pipeline if pipeline is not None else ViewPipeline()
    va, vb = generate_view_batch(images, pipeline,
                                 stream(seed, 8, 0), stream(seed, 8, 1))
    entries = []
    for b in range(len(encoder.blocks)):
        za = block_features(encoder, va, b, batch)
        zb = block_features(encoder, vb, b, batch)
        c = cross_correlation(Tensor(za), Tensor(zb), center=True).data
        c = np.asarray(c, dtype=np.float64)
        if np.abs(c).max() > 1.0 + 1e-9:
            raise RuntimeError(f"correlation entry outside [-1,1]: {np.abs(c).max()}")
        c = np.clip(c, -1.0, 1.0)
        d = c.shape[0]
        eye = np.eye(d, dtype=bool)
        entries.append(CorrelationEntry(b + 1, c[eye].copy(), c[~eye].copy()))
    return CorrelationStats(entries)


# ---------------------------------------------------------------------------
# corruption robustness

CORRUPTION_KINDS = ("gaussian-noise", "blur", "contrast", "pixelate")

_NOISE_SIGMA = (0.02, 0.06, 0.12, 0.2, 0.3)
_BLUR_SIGMA = (0.4, 0.7, 1.1, 1.6, 2.2)
_CONTRAST_FACTOR = (0.75, 0.55, 0.4, 0.28, 0.18)
_PIXELATE_FRACTION = (0.75, 0.5, 0.375, 0.25, 0.125)


def corrupt_images(images: np.ndarray, kind: str, severity: int,
                   seed: int = 0) -> np.ndarray:
    """Severity 0 is the identity for every kind; severities 1..5 escalate."""
    if kind not in CORRUPTION_KINDS:
        raise ConfigurationError(f"unknown corruption kind {kind!r}")
    if not 0 <= severity <= 5:
        raise ConfigurationError(f"severity {severity} outside 0..5")
    if severity == 0:
        return images
    out = images.astype(DEFAULT_DTYPE, copy=True)
    if kind == "gaussian-noise":
        rng = stream(seed, 9, severity)
        out += rng.normal(0, _NOISE_SIGMA[severity - 1],
                          size=out.shape).astype(DEFAULT_DTYPE)
    elif kind == "blur":
        out = _blur_group(out, _BLUR_SIGMA[severity - 1])
    elif kind == "contrast":
        f = _CONTRAST_FACTOR[severity - 1]
        mean = out.mean(axis=(2, 3), keepdims=True)
        out = mean + f * (out - mean)
    else:  # pixelate
        n, c, h, w = images.shape
        frac = _PIXELATE_FRACTION[severity - 1]
        side_h = max(1, int(round(h * frac)))
        side_w = max(1, int(round(w * frac)))
        ridx = (np.arange(h) * side_h // h).clip(max=side_h - 1)
        cidx = (np.arange(w) * side_w // w).clip(max=side_w - 1)
        rows = np.zeros((side_h, h))
        rows[ridx, np.arange(h)] = 1.0
        rows /= rows.sum(axis=1, keepdims=True)
        cols = np.zeros((side_w, w))
        cols[cidx, np.arange(w)] = 1.0
        cols /= cols.sum(axis=1, keepdims=True)
        # mean-pool onto the coarse grid, nearest-neighbor back up
        coarse = np.einsum("ph,nchw,qw->ncpq", rows,
                           images.astype(np.float64), cols)
        out = coarse[:, :, ridx[:, None], cidx[None, :]].astype(DEFAULT_DTYPE)
    return np.clip(out, 0.0, 1.0, out=out)


@dataclass
class CorruptionReport:
    clean_error: float
    table: dict  # kind -> {"severities": [...], "errors": [...], "mean", "std"}


def corruption_eval(encoder: Encoder, probe: ProbeEntry, dataset: Dataset,
                    kinds=CORRUPTION_KINDS, seed: int = 0,
                    batch: int = 256) -> CorruptionReport:
    """Top-1 error of the probed block under each corruption kind/severity."""
    def error_for(images):
        feats = block_features(encoder, images, probe.block - 1, batch)
        scores = feats @ probe.weight + probe.bias
        return 1.0 - top1_accuracy(scores, dataset.val_labels)

    clean = error_for(dataset.val_images)
    table = {}
    for kind in kinds:
        errors = []
        for severity in range(1, 6):
            corrupted = corrupt_images(dataset.val_images, kind, severity, seed)
            errors.append(error_for(corrupted))
        arr = np.asarray(errors)
        table[kind] = {"severities": list(range(1, 6)), "errors": errors,
                       "mean": float(arr.mean()), "std": float(arr.std())}
    return CorruptionReport(clean, table)


# ---------------------------------------------------------------------------
# report writers

def write_probe_csv(report: ProbeReport, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["block", "top1", "best_lr", "epochs"])
        for e in report.entries:
            w.writerow([e.block, f"{e.top1:.6f}", e.best_lr, e.epochs])


def write_corruption_csv(report: CorruptionReport, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["kind", "severity", "error"])
        w.writerow(["clean", 0, f"{report.clean_error:.6f}"])
        for kind, row in report.table.items():
            for sev, err in zip(row["severities"], row["errors"]):
                w.writerow([kind, sev, f"{err:.6f}"])
            w.writerow([kind, "mean", f"{row['mean']:.6f}"])
            w.writerow([kind, "std", f"{row['std']:.6f}"])


def write_correlation_json(stats: CorrelationStats, path):
    payload = []
    for e in stats.entries:
        payload.append({"block": e.block,
                        "on_diagonal": [float(v) for v in e.on_diagonal],
                        "off_diagonal": [float(v) for v in e.off_diagonal],
                        "summary": e.summary()})
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
