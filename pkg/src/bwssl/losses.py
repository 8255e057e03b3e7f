"""Per-block objectives: redundancy-reduction (cross-correlation) loss,
NT-Xent contrastive loss, variance/invariance/covariance loss, and the
supervised cross-entropy head.

Every loss supports optional per-example weights through one shared code
path; passing unit weights is bitwise identical to passing none, which is
what makes weighted routing with w=1 provably equal to no routing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ShapeError
from .tensor import Tensor, clamp_warnings, concat, stop_gradient

_EPS = 1e-12


@dataclass
class LossParts:
    """Scalar loss tensor plus the logged term split (floats, not tensors)."""
    total: Tensor
    invariance: float
    redundancy: float


def _weight_column(weights, n, dtype) -> Tensor:
    if weights is None:
        w = np.ones(n, dtype=dtype)
    else:
        w = np.asarray(weights, dtype=dtype)
        if w.shape != (n,):
            raise ShapeError(f"weights shape {w.shape} != ({n},)")
    return Tensor(w.reshape(n, 1))


def _check_views(za: Tensor, zb: Tensor):
    if za.shape != zb.shape:
        raise ShapeError(f"view shapes differ: {za.shape} vs {zb.shape}")
    if za.data.ndim != 2 or za.shape[0] < 2:
        raise ShapeError(f"expected (N>=2, D) embeddings, got {za.shape}")


# ---------------------------------------------------------------------------
# cross-correlation / redundancy reduction

def cross_correlation(za: Tensor, zb: Tensor, center: bool = True,
                      weights=None) -> Tensor:
    """Column-normalized cross-correlation matrix C[D,D] between two views.

    C_ij = sum_b w_b zA_bi zB_bj / (||zA_:,i|| ||zB_:,j||), with weighted
    column norms. ``center`` subtracts the (weighted) column means first.
    Zero-norm columns are epsilon-guarded and counted in clamp_warnings.
    """
    _check_views(za, zb)
    n = za.shape[0]
    w = _weight_column(weights, n, za.data.dtype)
    wsum = float(w.data.sum())
    if center:
        za = za - (za * w).sum(axis=0, keepdims=True) / wsum
        zb = zb - (zb * w).sum(axis=0, keepdims=True) / wsum
    sq_a = (za.square() * w).sum(axis=0)
    sq_b = (zb.square() * w).sum(axis=0)
    degenerate = int((sq_a.data < _EPS).sum() + (sq_b.data < _EPS).sum())
    if degenerate:
        clamp_warnings["corr_norm"] += degenerate
    norm_a = (sq_a + _EPS).sqrt()
    norm_b = (sq_b + _EPS).sqrt()
    d = za.shape[1]
    raw = (za * w).T @ zb
    return raw / (norm_a.reshape(d, 1) * norm_b.reshape(1, d))


def barlow_twins_loss(c: Tensor, lam: float, tau=1.0) -> Tensor:
    """sum_i (tau_i - C_ii)^2 + lam * sum_{i != j} C_ij^2; tau=1 is the
    plain redundancy-reduction objective, a vector tau sets per-dimension
    invariance targets."""
    if c.data.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"correlation matrix must be square, got {c.shape}")
    d = c.shape[0]
    eye = np.eye(d, dtype=c.data.dtype)
    tau_vec = np.full(d, tau, dtype=c.data.dtype) if np.isscalar(tau) \
        else np.asarray(tau, dtype=c.data.dtype)
    diag = (c * Tensor(eye)).sum(axis=1)
    invariance = (Tensor(tau_vec) - diag).square().sum()
    redundancy = (c.square() * Tensor(1.0 - eye)).sum()
    return invariance + redundancy * lam


def barlow_twins(za: Tensor, zb: Tensor, lam: float = 0.0051, tau=1.0,
                 center: bool = True, weights=None) -> LossParts:
    c = cross_correlation(za, zb, center=center, weights=weights)
    d = c.shape[0]
    eye = np.eye(d, dtype=c.data.dtype)
    tau_vec = np.full(d, tau, dtype=c.data.dtype) if np.isscalar(tau) \
        else np.asarray(tau, dtype=c.data.dtype)
    diag = (c * Tensor(eye)).sum(axis=1)
    invariance = (Tensor(tau_vec) - diag).square().sum()
    redundancy = (c.square() * Tensor(1.0 - eye)).sum() * lam
    return LossParts(invariance + redundancy,
                     float(invariance.data), float(redundancy.data))


# ---------------------------------------------------------------------------
# NT-Xent

def simclr_loss(za: Tensor, zb: Tensor, temperature: float = 0.5,
                weights=None) -> Tensor:
    """Symmetric NT-Xent over the 2N cosine-similarity graph, self-pairs
    excluded, averaged over all 2N anchors."""
    _check_views(za, zb)
    if temperature <= 0:
        raise ShapeError("temperature must be positive")
    n = za.shape[0]
    z = concat([za, zb], axis=0)
    rn = (z.square().sum(axis=1, keepdims=True) + _EPS).sqrt()
    zn = z / rn
    logits = (zn @ zn.T) / temperature
    m = stop_gradient(logits.max(axis=1, keepdims=True))
    shifted = logits - m
    eye = np.eye(2 * n, dtype=z.data.dtype)
    masked_exp = shifted.exp() * Tensor(1.0 - eye)
    log_denom = masked_exp.sum(axis=1).log()
    pos = np.roll(eye, n, axis=1)
    pos_logit = (shifted * Tensor(pos)).sum(axis=1)
    per_anchor = log_denom - pos_logit
    wcol = _weight_column(weights, n, z.data.dtype)
    w2 = concat([wcol, wcol], axis=0).reshape(2 * n)
    return (per_anchor * w2).sum() / float(w2.data.sum())


# ---------------------------------------------------------------------------
# variance / invariance / covariance

def vicreg_loss(za: Tensor, zb: Tensor, coeffs=(25.0, 25.0, 1.0),
                weights=None) -> Tensor:
    return vicreg(za, zb, coeffs=coeffs, weights=weights).total


def vicreg(za: Tensor, zb: Tensor, coeffs=(25.0, 25.0, 1.0),
           weights=None) -> LossParts:
    """inv*(weighted MSE) + var*(mean hinge on unbiased std per view)
    + cov*(off-diagonal covariance energy / D per view)."""
    _check_views(za, zb)
    n, d = za.shape
    ci, cv, cc = (float(c) for c in coeffs)
    w = _weight_column(weights, n, za.data.dtype)
    wsum = float(w.data.sum())
    mse = ((za - zb).square() * w).sum() / (wsum * d)

    var_term = None
    cov_term = None
    eye = np.eye(d, dtype=za.data.dtype)
    for z in (za, zb):
        mu = (z * w).sum(axis=0, keepdims=True) / wsum
        zc = z - mu
        var_d = (zc.square() * w).sum(axis=0) / (wsum - 1.0)
        std = (var_d + _EPS).sqrt()
        hinge = (1.0 - std).relu().mean()
        cov = ((zc * w).T @ zc) / (wsum - 1.0)
        off = (cov.square() * Tensor(1.0 - eye)).sum() / d
        var_term = hinge if var_term is None else var_term + hinge
        cov_term = off if cov_term is None else cov_term + off
    invariance = mse * ci
    rest = var_term * cv + cov_term * cc
    return LossParts(invariance + rest, float(invariance.data), float(rest.data))


# ---------------------------------------------------------------------------
# supervised cross-entropy

def _check_labels(labels, n, k) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise DataFormatError(f"labels must lie in [0, {k}), got range "
                              f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def supervised_ce_loss(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean negative log-softmax of the true class, max-shifted for stability."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    m = stop_gradient(logits.max(axis=1, keepdims=True))
    shifted = logits - m
    lse = shifted.exp().sum(axis=1, keepdims=True).log()
    logp = shifted - lse
    onehot = np.eye(k, dtype=logits.data.dtype)[labels]
    nll = -((logp * Tensor(onehot)).sum(axis=1))
    w = _weight_column(weights, n, logits.data.dtype).reshape(n)
    return (nll * w).sum() / float(w.data.sum())


# ---------------------------------------------------------------------------
# unified head dispatch + per-example difficulty

def block_loss(kind: str, za: Tensor, zb: Tensor, labels=None, *,
               lam: float = 0.0051, tau=1.0, temperature: float = 0.5,
               vicreg_coeffs=(25.0, 25.0, 1.0), center: bool = True,
               weights=None) -> LossParts:
    """One block head's loss on the two view embeddings (logits when
    supervised). Returns the scalar plus logged term split."""
    if kind == "barlow-twins":
        return barlow_twins(za, zb, lam=lam, tau=tau, center=center, weights=weights)
    if kind == "simclr":
        total = simclr_loss(za, zb, temperature=temperature, weights=weights)
        return LossParts(total, float(total.data), 0.0)
    if kind == "vicreg":
        return vicreg(za, zb, coeffs=vicreg_coeffs, weights=weights)
    if kind == "supervised-ce":
        if labels is None:
            raise DataFormatError("supervised-ce loss needs labels")
        half = Tensor(np.asarray(0.5, dtype=za.data.dtype))
        total = (supervised_ce_loss(za, labels, weights=weights)
                 + supervised_ce_loss(zb, labels, weights=weights)) * half
        return LossParts(total, float(total.data), 0.0)
    raise DataFormatError(f"unknown loss kind {kind!r}")


def per_example_difficulty(kind: str, za: np.ndarray, zb: np.ndarray,
                           labels=None, temperature: float = 0.5) -> np.ndarray:
    """Per-example loss statistic used by difficulty routing (plain numpy,
    never differentiated).

    Correlation-style losses have no exact per-example split, so their
    statistic is the squared distance between column-standardized views.
    """
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if kind == "supervised-ce":
        labels = _check_labels(labels, za.shape[0], za.shape[1])
        out = np.zeros(za.shape[0])
        for logits in (za, zb):
            m = logits.max(axis=1, keepdims=True)
            lse = np.log(np.exp(logits - m).sum(axis=1, keepdims=True)) + m
            out += 0.5 * (lse[:, 0] - logits[np.arange(len(labels)), labels])
        return out
    if kind == "simclr":
        z = np.concatenate([za, zb])
        z = z / np.sqrt((z ** 2).sum(axis=1, keepdims=True) + _EPS)
        logits = (z @ z.T) / temperature
        m2 = z.shape[0]
        np.fill_diagonal(logits, -np.inf)
        row_max = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - row_max).sum(axis=1)) + row_max[:, 0]
        pos = logits[np.arange(m2), (np.arange(m2) + m2 // 2) % m2]
        per_anchor = lse - pos
        return 0.5 * (per_anchor[:m2 // 2] + per_anchor[m2 // 2:])
    # correlation-family statistic
    out = np.zeros(za.shape[0])
    cols = []
    for z in (za, zb):
        mu = z.mean(axis=0)
        sd = np.sqrt(((z - mu) ** 2).mean(axis=0) + _EPS)
        cols.append((z - mu) / sd)
    return ((cols[0] - cols[1]) ** 2).mean(axis=1)
