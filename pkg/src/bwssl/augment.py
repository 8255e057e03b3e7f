"""Two-view augmentation pipelines and per-block schedules.

Images are channel-major float arrays in [0,1]. A pipeline applies, in fixed
order: random resized crop, horizontal flip, color jitter (brightness,
contrast, saturation, hue), grayscale, gaussian blur, solarization, then a
final clamp to [0,1]. Blur and solarization probabilities are per-view
(asymmetric between the two views, as in the reference recipe).

All randomness comes from the caller's Generator; parameters for a whole
batch are drawn up front in a fixed order, so identical streams give
bitwise-identical views. Vectorized application keeps the per-batch cost far
below the conv forward/backward it feeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ShapeError

# RGB <-> YIQ transform used for hue rotation (luma axis stays fixed)
_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.5959, -0.2746, -0.3213],
                     [0.2115, -0.5227, 0.3112]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)

_LUMA = np.array([0.299, 0.587, 0.114])

# blur strengths are snapped to this grid so a batch groups into at most
# eight kernel applications instead of one per image
BLUR_SIGMAS = np.geomspace(0.1, 2.0, 8)


@dataclass
class ViewPipeline:
    crop: bool = True
    crop_scale: tuple = (0.08, 1.0)
    crop_ratio: tuple = (0.75, 4.0 / 3.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strengths: tuple = (0.4, 0.4, 0.2, 0.1)  # brightness/contrast/saturation/hue
    grayscale_prob: float = 0.2
    blur_probs: tuple = (1.0, 0.1)       # per view
    blur_sigma: tuple = (0.1, 2.0)
    solarize_probs: tuple = (0.0, 0.2)   # per view
    solarize_threshold: float = 0.5

    def transforms_active(self) -> bool:
        return (self.crop or self.flip_prob > 0 or self.jitter_prob > 0
                or self.grayscale_prob > 0 or max(self.blur_probs) > 0
                or max(self.solarize_probs) > 0)


def identity_pipeline() -> ViewPipeline:
    return ViewPipeline(crop=False, flip_prob=0.0, jitter_prob=0.0,
                        grayscale_prob=0.0, blur_probs=(0.0, 0.0),
                        solarize_probs=(0.0, 0.0))


def jitter_only_pipeline() -> ViewPipeline:
    return replace(identity_pipeline(), jitter_prob=0.8)


def small_crop_pipeline() -> ViewPipeline:
    # "small" random crops keep most of the image area
    return replace(jitter_only_pipeline(), crop=True, crop_scale=(0.6, 1.0))


@dataclass
class AugmentationSchedule:
    """Maps 1-indexed training-block numbers to pipelines."""
    pipelines: dict = field(default_factory=dict)

    def for_block(self, b: int) -> ViewPipeline:
        if b not in self.pipelines:
            raise ConfigurationError(f"no augmentation pipeline for block {b}")
        return self.pipelines[b]


def uniform_schedule(num_blocks: int, pipeline: ViewPipeline | None = None) -> AugmentationSchedule:
    pipeline = pipeline if pipeline is not None else ViewPipeline()
    return AugmentationSchedule({b: pipeline for b in range(1, num_blocks + 1)})


def adaptive_schedule(num_blocks: int) -> AugmentationSchedule:
    """Easier augmentations at early blocks: jitter only at block 1, small
    crops added at block 2, the full recipe from block 3 on."""
    pipelines = {}
    for b in range(1, num_blocks + 1):
        if b == 1:
            pipelines[b] = jitter_only_pipeline()
        elif b == 2:
            pipelines[b] = small_crop_pipeline()
        else:
            pipelines[b] = ViewPipeline()
    return AugmentationSchedule(pipelines)


def schedule_for_block(b: int, schedule: AugmentationSchedule) -> ViewPipeline:
    return schedule.for_block(b)


def stream(seed: int, *path: int) -> np.random.Generator:
    """Named seed-derived stream; identical (seed, path) -> identical draws."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF] + [int(p) for p in path])


# ---------------------------------------------------------------------------
# vectorized transforms

def _bilinear_crop_resize(images: np.ndarray, top, left, ch, cw) -> np.ndarray:
    """Resize per-image crop boxes back to the input size (half-pixel centers)."""
    n, c, h, w = images.shape
    out_h, out_w = h, w
    ys = (top[:, None] + (np.arange(out_h)[None, :] + 0.5) * ch[:, None] / out_h - 0.5)
    xs = (left[:, None] + (np.arange(out_w)[None, :] + 0.5) * cw[:, None] / out_w - 0.5)
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(images.dtype)
    wx = (xs - x0).astype(images.dtype)

    flat = images.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi[:, :, None] * w + xi[:, None, :]).reshape(n, 1, out_h * out_w)
        return np.take_along_axis(flat, idx, axis=2).reshape(n, c, out_h, out_w)

    wy4 = wy[:, None, :, None]
    wx4 = wx[:, None, None, :]
    out = (gather(y0, x0) * (1 - wy4) * (1 - wx4)
           + gather(y0, x1) * (1 - wy4) * wx4
           + gather(y1, x0) * wy4 * (1 - wx4)
           + gather(y1, x1) * wy4 * wx4)
    return out


def _apply_crop(images, pipeline, rng):
    n, _, h, w = images.shape
    lo, hi = pipeline.crop_scale
    s = rng.uniform(lo, hi, size=n)
    logr = rng.uniform(np.log(pipeline.crop_ratio[0]), np.log(pipeline.crop_ratio[1]), size=n)
    r = np.exp(logr)
    area = s * h * w
    ch = np.clip(np.round(np.sqrt(area / r)), 1, h).astype(np.int64)
    cw = np.clip(np.round(np.sqrt(area * r)), 1, w).astype(np.int64)
    top = np.floor(rng.uniform(0, 1, size=n) * (h - ch + 1)).astype(np.int64)
    left = np.floor(rng.uniform(0, 1, size=n) * (w - cw + 1)).astype(np.int64)
    return _bilinear_crop_resize(images, top, left, ch, cw).astype(images.dtype)


def _apply_jitter(images, pipeline, rng):
    n = images.shape[0]
    bs, cs, ss, hs = pipeline.jitter_strengths
    gate = rng.uniform(0, 1, size=n) < pipeline.jitter_prob
    fb = rng.uniform(max(0.0, 1 - bs), 1 + bs, size=n)
    fc = rng.uniform(max(0.0, 1 - cs), 1 + cs, size=n)
    fs = rng.uniform(max(0.0, 1 - ss), 1 + ss, size=n)
    delta = rng.uniform(-hs, hs, size=n)
    if not gate.any():
        return images
    fb = np.where(gate, fb, 1.0)[:, None, None, None].astype(images.dtype)
    fc = np.where(gate, fc, 1.0)[:, None, None, None].astype(images.dtype)
    fs = np.where(gate, fs, 1.0)[:, None, None, None].astype(images.dtype)
    delta = np.where(gate, delta, 0.0)

    x = images * fb
    gray = np.tensordot(_LUMA.astype(images.dtype), x, axes=([0], [1]))  # (N,H,W)
    mean = gray.mean(axis=(1, 2))[:, None, None, None].astype(images.dtype)
    x = fc * x + (1 - fc) * mean
    x = fs * x + (1 - fs) * np.tensordot(
        _LUMA.astype(images.dtype), x, axes=([0], [1]))[:, None]
    # hue: rotate the chroma plane in YIQ space
    theta = (delta * 2 * np.pi)
    cos, sin = np.cos(theta), np.sin(theta)
    rot = np.zeros((n, 3, 3))
    rot[:, 0, 0] = 1.0
    rot[:, 1, 1] = cos
    rot[:, 1, 2] = -sin
    rot[:, 2, 1] = sin
    rot[:, 2, 2] = cos
    m = np.einsum("ij,njk,kl->nil", _YIQ2RGB, rot, _RGB2YIQ).astype(images.dtype)
    hue_idx = np.nonzero(delta != 0.0)[0]
    if hue_idx.size:
        x[hue_idx] = np.einsum("nij,njhw->nihw", m[hue_idx], x[hue_idx])
    return x


def _gaussian_kernel(sigma: float, dtype):
    radius = int(min(4, max(1, np.ceil(2 * sigma))))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-(xs ** 2) / (2 * sigma * sigma))
    return (k / k.sum()).astype(dtype)


def _blur_group(images, sigma):
    k = _gaussian_kernel(sigma, images.dtype)
    radius = len(k) // 2
    pad = np.pad(images, ((0, 0), (0, 0), (radius, radius), (0, 0)), mode="reflect")
    out = np.zeros_like(images)
    for i, kv in enumerate(k):
        out += kv * pad[:, :, i:i + images.shape[2], :]
    pad = np.pad(out, ((0, 0), (0, 0), (0, 0), (radius, radius)), mode="reflect")
    out = np.zeros_like(images)
    for i, kv in enumerate(k):
        out += kv * pad[:, :, :, i:i + images.shape[3]]
    return out


def _apply_blur(images, pipeline, view: int, rng):
    n = images.shape[0]
    gate = rng.uniform(0, 1, size=n) < pipeline.blur_probs[view]
    sigmas = rng.uniform(pipeline.blur_sigma[0], pipeline.blur_sigma[1], size=n)
    if not gate.any():
        return images
    levels = np.abs(np.log(sigmas[:, None]) - np.log(BLUR_SIGMAS[None, :])).argmin(axis=1)
    out = images.copy()
    for lvl in np.unique(levels[gate]):
        sel = gate & (levels == lvl)
        out[sel] = _blur_group(images[sel], float(BLUR_SIGMAS[lvl]))
    return out


def apply_pipeline_batch(images: np.ndarray, pipeline: ViewPipeline, view: int,
                         rng: np.random.Generator) -> np.ndarray:
    """One augmented view per input image; fixed draw order, then clamp."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected (N,3,H,W) images, got {images.shape}")
    if min(images.shape[2], images.shape[3]) < 2:
        raise ShapeError("images too small to augment")
    if view not in (0, 1):
        raise ConfigurationError("view index must be 0 or 1")
    x = images
    n = x.shape[0]
    if pipeline.crop:
        x = _apply_crop(x, pipeline, rng)
    if pipeline.flip_prob > 0:
        flips = rng.uniform(0, 1, size=n) < pipeline.flip_prob
        if flips.any():
            x = x.copy() if x is images else x
            x[flips] = x[flips][:, :, :, ::-1]
    if pipeline.jitter_prob > 0:
        x = _apply_jitter(x, pipeline, rng)
    if pipeline.grayscale_prob > 0:
        sel = rng.uniform(0, 1, size=n) < pipeline.grayscale_prob
        if sel.any():
            gray = np.tensordot(_LUMA.astype(x.dtype), x, axes=([0], [1]))[:, None]
            x = np.where(sel[:, None, None, None], gray, x)
    if pipeline.blur_probs[view] > 0:
        x = _apply_blur(x, pipeline, view, rng)
    if pipeline.solarize_probs[view] > 0:
        sel = rng.uniform(0, 1, size=n) < pipeline.solarize_probs[view]
        if sel.any():
            x = np.where(sel[:, None, None, None] & (x > pipeline.solarize_threshold),
                         1.0 - x, x)
    if x is images:
        return images.copy()
    return np.clip(x, 0.0, 1.0, out=x)


def generate_views(image: np.ndarray, pipeline: ViewPipeline,
                   rng: np.random.Generator):
    """Two independently augmented views of one image."""
    batch = image[None]
    child_a, child_b = rng.spawn(2)
    a = apply_pipeline_batch(batch, pipeline, 0, child_a)[0]
    b = apply_pipeline_batch(batch, pipeline, 1, child_b)[0]
    return a, b


def generate_view_batch(images: np.ndarray, pipeline: ViewPipeline,
                        rng_a: np.random.Generator, rng_b: np.random.Generator):
    """Two augmented views of a whole batch, one stream per view."""
    a = apply_pipeline_batch(images, pipeline, 0, rng_a)
    b = apply_pipeline_batch(images, pipeline, 1, rng_b)
    return a, b
