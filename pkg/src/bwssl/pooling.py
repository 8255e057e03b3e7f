"""Pooling strategies that turn a block's activation volume into the vector
fed to its projector: global spatial pooling, local (binned) spatial pooling,
and conv-based expansion followed by a reduction (mean, RMS, or signed sqrt).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .layers import Conv2d
from .tensor import Tensor

POOL_KINDS = ("gsp", "lsp", "cbe-gsp", "cbe-l2", "cbe-sqrt")

# keeps the RMS reduction differentiable when a channel is exactly zero
_RMS_EPSILON = 1e-12


def gsp(x: Tensor) -> Tensor:
    """Per-channel mean over all spatial positions: (N,C,H,W) -> (N,C)."""
    return x.mean(axis=(2, 3))


def lsp(x: Tensor, bins: int) -> Tensor:
    """Per-bin channel means on a bins x bins grid: (N,C,H,W) -> (N, C*bins^2).

    Bins are ordered row-major; within each bin the C channel means appear in
    channel order.
    """
    n, c, h, w = x.shape
    if bins < 1 or h % bins or w % bins:
        raise ConfigurationError(f"bin grid {bins}x{bins} does not divide {h}x{w}")
    bh, bw = h // bins, w // bins
    r = x.reshape(n, c, bins, bh, bins, bw).mean(axis=(3, 5))  # (N,C,g,g)
    return r.transpose((0, 2, 3, 1)).reshape(n, bins * bins * c)


@dataclass
class PoolingConfig:
    kind: str = "cbe-gsp"
    bins: int = 2
    expansion_width: int = 128
    filter_size: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.kind not in POOL_KINDS:
            raise ConfigurationError(f"pooling kind {self.kind!r} not one of {POOL_KINDS}")


class GspPool:
    out_width: int

    def __init__(self, in_channels: int):
        self.out_width = in_channels

    def forward(self, x: Tensor) -> Tensor:
        return gsp(x)

    def named_parameters(self, prefix: str):
        return []


class LspPool:
    def __init__(self, in_channels: int, bins: int):
        self.bins = bins
        self.out_width = in_channels * bins * bins

    def forward(self, x: Tensor) -> Tensor:
        return lsp(x, self.bins)

    def named_parameters(self, prefix: str):
        return []


class CbEPool:
    """Trainable expansion conv then a spatial reduction.

    The expansion conv belongs to the owning block's local parameter set; its
    gradients flow only from that block's loss.
    """

    def __init__(self, in_channels: int, cfg: PoolingConfig,
                 rng: np.random.Generator | None = None, method: str = "im2col"):
        if cfg.expansion_width < in_channels:
            raise ConfigurationError(
                f"expansion width {cfg.expansion_width} < channel count {in_channels}")
        self.reduction = cfg.kind.split("-", 1)[1]
        self.conv = Conv2d(in_channels, cfg.expansion_width, cfg.filter_size,
                           stride=1, padding=cfg.filter_size // 2, groups=cfg.groups,
                           rng=rng, method=method)
        self.in_channels = in_channels
        self.out_width = cfg.expansion_width

    def set_identity(self):
        """1x1, groups=1, square case only: expansion becomes the identity map."""
        w = self.conv.weight.data
        if w.shape[0] != w.shape[1] or w.shape[2] != 1 or self.conv.groups != 1:
            raise ConfigurationError("identity init needs a square 1x1 ungrouped expansion")
        eye = np.zeros_like(w)
        for c in range(w.shape[0]):
            eye[c, c, 0, 0] = 1.0
        self.conv.weight.data = eye

    def forward(self, x: Tensor) -> Tensor:
        e = self.conv.forward(x)
        if self.reduction == "gsp":
            return gsp(e)
        if self.reduction == "l2":
            return (e.square().mean(axis=(2, 3)) + _RMS_EPSILON).sqrt()
        return e.signed_sqrt().mean(axis=(2, 3))

    def named_parameters(self, prefix: str):
        return self.conv.named_parameters(f"{prefix}/expand")


def build_pooling(in_channels: int, cfg: PoolingConfig,
                  rng: np.random.Generator | None = None, method: str = "im2col"):
    if cfg.kind == "gsp":
        return GspPool(in_channels)
    if cfg.kind == "lsp":
        return LspPool(in_channels, cfg.bins)
    return CbEPool(in_channels, cfg, rng=rng, method=method)
