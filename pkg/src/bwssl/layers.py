"""Network building blocks: conv/BN/linear modules, residual units, the
block-partitioned encoder, the projector MLP, and checkpoint IO.

Modules hold Tensor parameters and expose ``named_parameters`` /
``named_state`` for optimizers and checkpoints. BatchNorm carries the only
mutable forward-pass state (running statistics); everything else is pure.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataFormatError, ShapeError
from .tensor import (DEFAULT_DTYPE, Tensor, batchnorm_train, conv2d,
                     stop_gradient)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


class Conv2d:
    """Convolution without bias (a BatchNorm always follows in this stack)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, groups: int = 1,
                 rng: np.random.Generator | None = None, method: str = "im2col"):
        if in_channels % groups or out_channels % groups:
            raise ConfigurationError(
                f"groups={groups} must divide channels {in_channels}->{out_channels}")
        rng = rng or np.random.default_rng(0)
        cg = in_channels // groups
        fan_in = cg * kernel_size * kernel_size
        self.weight = Tensor(
            _uniform_init(rng, (out_channels, cg, kernel_size, kernel_size), fan_in),
            requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.method = method

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, padding=self.padding,
                      groups=self.groups, method=self.method)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}/weight", self.weight)]

    def named_state(self, prefix: str):
        return []


class BatchNorm:
    """Batch normalization over (N,H,W) for 4-D inputs or (N,) for 2-D.

    Train mode normalizes by batch statistics (biased variance) and folds an
    unbiased variance estimate into the running stats; eval mode normalizes by
    running stats only. ``stats_frozen`` keeps train-mode normalization but
    leaves the running statistics bitwise untouched.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=DEFAULT_DTYPE)
        self.running_var = np.ones(channels, dtype=DEFAULT_DTYPE)
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self.stats_frozen = False

    def _param_shape(self, ndim: int):
        return (1, -1, 1, 1) if ndim == 4 else (1, -1)

    def forward(self, x: Tensor) -> Tensor:
        ndim = x.data.ndim
        if ndim not in (2, 4):
            raise ShapeError(f"batchnorm expects 2-D or 4-D input, got ndim {ndim}")
        axes = (0, 2, 3) if ndim == 4 else (0,)
        pshape = self._param_shape(ndim)
        if self.training:
            count = 1
            for a in axes:
                count *= x.data.shape[a]
            if count < 2:
                raise ShapeError("batchnorm train mode needs at least 2 values per channel")
            out, bmean, bvar = batchnorm_train(x, self.gamma, self.beta,
                                               axes, self.eps, pshape)
            if not self.stats_frozen:
                m = self.momentum
                unbiased = bvar.reshape(-1) * (count / (count - 1))
                self.running_mean = ((1 - m) * self.running_mean
                                     + m * bmean.reshape(-1)).astype(self.running_mean.dtype)
                self.running_var = ((1 - m) * self.running_var
                                    + m * unbiased).astype(self.running_var.dtype)
            return out
        rm = Tensor(self.running_mean.reshape(pshape))
        scale = Tensor(np.sqrt(self.running_var + self.eps).reshape(pshape))
        xn = (x - rm) / scale
        return xn * self.gamma.reshape(pshape) + self.beta.reshape(pshape)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}/gamma", self.gamma), (f"{prefix}/beta", self.beta)]

    def named_state(self, prefix: str):
        return [(f"{prefix}/running_mean", self.running_mean),
                (f"{prefix}/running_var", self.running_var)]

    def load_state(self, prefix: str, entries: dict):
        self.running_mean = entries[f"{prefix}/running_mean"].astype(DEFAULT_DTYPE)
        self.running_var = entries[f"{prefix}/running_var"].astype(DEFAULT_DTYPE)


class Linear:
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, bias: bool = True):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(_uniform_init(rng, (in_features, out_features), in_features),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=DEFAULT_DTYPE),
                           requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out

    def named_parameters(self, prefix: str):
        out = [(f"{prefix}/weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}/bias", self.bias))
        return out

    def named_state(self, prefix: str):
        return []


class ResidualUnit:
    """Two 3x3 conv+BN stages with a skip connection.

    The shortcut is the identity when shapes match, otherwise a 1x1
    projection conv (with BN) carrying the stride/channel change.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 rng: np.random.Generator, method: str = "im2col"):
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1,
                            rng=rng, method=method)
        self.bn1 = BatchNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, stride=1, padding=1,
                            rng=rng, method=method)
        self.bn2 = BatchNorm(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.down_conv = Conv2d(in_channels, out_channels, 1, stride=stride,
                                    rng=rng, method=method)
            self.down_bn = BatchNorm(out_channels)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = self.bn1.forward(self.conv1.forward(x)).relu()
        h = self.bn2.forward(self.conv2.forward(h))
        if self.down_conv is not None:
            skip = self.down_bn.forward(self.down_conv.forward(x))
        else:
            skip = x
        return (h + skip).relu()

    def _layers(self):
        layers = [("conv1", self.conv1), ("bn1", self.bn1),
                  ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.down_conv is not None:
            layers += [("down_conv", self.down_conv), ("down_bn", self.down_bn)]
        return layers

    def named_parameters(self, prefix: str):
        out = []
        for name, layer in self._layers():
            out.extend(layer.named_parameters(f"{prefix}/{name}"))
        return out

    def named_state(self, prefix: str):
        out = []
        for name, layer in self._layers():
            out.extend(layer.named_state(f"{prefix}/{name}"))
        return out

    def batchnorms(self):
        bns = [self.bn1, self.bn2]
        if self.down_bn is not None:
            bns.append(self.down_bn)
        return bns


@dataclass
class BlockSpec:
    width: int
    units: int = 1
    stride: int = 2
    merge_with_next: bool = False


@dataclass
class EncoderSpec:
    blocks: list = field(default_factory=lambda: [
        BlockSpec(16, 1, 2), BlockSpec(32, 1, 2),
        BlockSpec(64, 1, 2), BlockSpec(128, 1, 1)])
    in_channels: int = 3

    def __post_init__(self):
        if not 1 <= len(self.blocks) <= 6:
            raise ConfigurationError(f"encoder needs 1..6 blocks, got {len(self.blocks)}")
        if self.blocks and self.blocks[-1].merge_with_next:
            raise ConfigurationError("last block cannot merge with a following block")

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)


def training_groups(spec: EncoderSpec) -> list:
    """Partition physical block indices into training blocks via merge flags."""
    groups = []
    current = []
    for i, b in enumerate(spec.blocks):
        current.append(i)
        if not b.merge_with_next:
            groups.append(current)
            current = []
    if current:
        groups.append(current)
    return groups


class Encoder:
    """Stack of residual blocks with per-block activation taps.

    ``forward_blocks`` returns the activation at every physical block
    boundary. Stop-gradient isolation between training blocks and noise
    injection are controlled by the caller through ``boundaries`` (a list of
    physical block groups) and ``input_hook`` (applied to each training
    block's input, e.g. for noise).
    """

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator | None = None,
                 method: str = "im2col"):
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        self.blocks = []
        in_ch = spec.in_channels
        for bs in spec.blocks:
            units = []
            for u in range(bs.units):
                stride = bs.stride if u == 0 else 1
                units.append(ResidualUnit(in_ch, bs.width, stride, rng, method))
                in_ch = bs.width
            self.blocks.append(units)
        self.out_width = in_ch

    # -- mode control -----------------------------------------------------

    def batchnorms(self, block: int | None = None):
        blocks = self.blocks if block is None else [self.blocks[block]]
        for units in blocks:
            for unit in units:
                yield from unit.batchnorms()

    def set_training(self, flag: bool, block: int | None = None):
        for bn in self.batchnorms(block):
            bn.training = flag

    def set_stats_frozen(self, flag: bool, block: int | None = None):
        for bn in self.batchnorms(block):
            bn.stats_frozen = flag

    # -- forward ----------------------------------------------------------

    def forward_blocks(self, x: Tensor, boundaries: list | None = None,
                       input_hook=None) -> list:
        """Run all blocks; returns per-physical-block activations.

        ``boundaries`` lists groups of physical block indices forming
        training blocks; each group's input (after the first) is wrapped in
        stop_gradient. ``None`` means no interior boundaries (plain forward).
        ``input_hook(block_index, tensor) -> tensor`` transforms every
        physical block's input (noise injection during training).
        """
        if boundaries is None:
            boundaries = [list(range(len(self.blocks)))]
        acts = [None] * len(self.blocks)
        h = x
        for gi, group in enumerate(boundaries):
            if gi > 0:
                h = stop_gradient(h)
            for bi in group:
                if input_hook is not None:
                    h = input_hook(bi, h)
                for unit in self.blocks[bi]:
                    h = unit.forward(h)
                acts[bi] = h
        return acts

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_blocks(x)[-1]

    # -- parameter access ---------------------------------------------------

    def block_parameters(self, block: int):
        return [t for _, t in self.named_block_parameters(block)]

    def named_block_parameters(self, block: int):
        out = []
        for u, unit in enumerate(self.blocks[block]):
            out.extend(unit.named_parameters(f"block{block + 1}/unit{u + 1}"))
        return out

    def named_parameters(self):
        out = []
        for b in range(len(self.blocks)):
            out.extend(self.named_block_parameters(b))
        return out

    def named_state(self):
        out = []
        for b, units in enumerate(self.blocks):
            for u, unit in enumerate(units):
                out.extend(unit.named_state(f"block{b + 1}/unit{u + 1}"))
        return out

    def checkpoint_entries(self):
        entries = [(name, t.data) for name, t in self.named_parameters()]
        entries.extend(self.named_state())
        return entries

    def load_checkpoint_entries(self, entries: dict):
        for name, t in self.named_parameters():
            if name not in entries:
                raise DataFormatError(f"checkpoint missing parameter {name}")
            arr = entries[name]
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {t.data.shape}")
            t.data = arr.astype(DEFAULT_DTYPE)
        for b in range(len(self.blocks)):
            self._load_block_state(b, entries)

    def load_block_checkpoint(self, block: int, entries: dict):
        """Restore a single physical block (weights and BN stats) from a
        full-encoder checkpoint entry dict."""
        for name, t in self.named_block_parameters(block):
            if name not in entries:
                raise DataFormatError(f"checkpoint missing parameter {name}")
            arr = entries[name]
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {t.data.shape}")
            t.data = arr.astype(DEFAULT_DTYPE)
        self._load_block_state(block, entries)

    def _load_block_state(self, block: int, entries: dict):
        for u, unit in enumerate(self.blocks[block]):
            prefix = f"block{block + 1}/unit{u + 1}"
            for lname, layer in unit._layers():
                if isinstance(layer, BatchNorm):
                    layer.load_state(f"{prefix}/{lname}", entries)


class Projector:
    """MLP head: affine layers with BN+relu between them (none after the last)."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, depth: int = 3,
                 rng: np.random.Generator | None = None):
        if depth < 1:
            raise ConfigurationError("projector depth must be >= 1")
        rng = rng or np.random.default_rng(0)
        dims = [in_dim] + [hidden_dim] * (depth - 1) + [out_dim]
        self.linears = [Linear(dims[i], dims[i + 1], rng=rng) for i in range(depth)]
        self.bns = [BatchNorm(dims[i + 1]) for i in range(depth - 1)]
        self.out_dim = out_dim

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.linears[0].weight.data.shape[0]:
            raise ShapeError(
                f"projector expects width {self.linears[0].weight.data.shape[0]}, "
                f"got {x.data.shape[1]}")
        h = x
        for i, lin in enumerate(self.linears):
            h = lin.forward(h)
            if i < len(self.bns):
                h = self.bns[i].forward(h).relu()
        return h

    def set_training(self, flag: bool):
        for bn in self.bns:
            bn.training = flag

    def named_parameters(self, prefix: str = "proj"):
        out = []
        for i, lin in enumerate(self.linears):
            out.extend(lin.named_parameters(f"{prefix}/fc{i + 1}"))
        for i, bn in enumerate(self.bns):
            out.extend(bn.named_parameters(f"{prefix}/bn{i + 1}"))
        return out

    def named_state(self, prefix: str = "proj"):
        out = []
        for i, bn in enumerate(self.bns):
            out.extend(bn.named_state(f"{prefix}/bn{i + 1}"))
        return out


# ---------------------------------------------------------------------------
# checkpoint format: flat ordered list of named f32 tensors, little-endian

_CKPT_MAGIC = b"BWSSLCKPT"
_CKPT_VERSION = 1


def save_checkpoint(path, entries):
    """entries: ordered iterable of (name, ndarray). Stored as f32 LE."""
    entries = list(entries)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4", order="C")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Returns an ordered dict name -> float32 ndarray."""
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise DataFormatError(
                f"checkpoint truncated at byte {pos} reading {what} ({n} bytes needed)")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(len(_CKPT_MAGIC), "magic") != _CKPT_MAGIC:
        raise DataFormatError("not a checkpoint file (bad magic at byte 0)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != _CKPT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * size, f"data for {name}"), dtype="<f4")
        out[name] = data.reshape(shape).copy()
    if pos != len(blob):
        raise DataFormatError(f"trailing bytes after entry {count} at byte {pos}")
    return out
