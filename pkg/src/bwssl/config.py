"""Experiment configuration: serializable dataclasses with strict JSON
parsing (unknown keys fail fast), plus named presets for the main-results,
pooling, first-block, and ablation experiment families.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, field, fields, replace, asdict

from .augment import (AugmentationSchedule, ViewPipeline, adaptive_schedule,
                      identity_pipeline, uniform_schedule)
from .data import DatasetDescriptor
from .errors import ConfigurationError, DataFormatError
from .layers import BlockSpec, EncoderSpec, training_groups
from .pooling import PoolingConfig

REGIMES = ("end-to-end", "simultaneous", "sequential", "supervised-blockwise",
           "random-frozen", "merged-first", "first-block-pretrained")
LOSS_KINDS = ("barlow-twins", "simclr", "vicreg", "supervised-ce")
NOISE_MODES = ("independent", "shared-spatial")
ROUTING_SCHEMES = ("train-all-below", "weighted-others")
AUG_SCHEDULES = ("uniform", "adaptive", "identity")


@dataclass
class HeadConfig:
    """Per-block pooling + projector + loss settings."""
    loss_kind: str = "barlow-twins"
    lam: float = 0.0051
    tau: object = 1.0  # scalar or per-dimension list
    temperature: float = 0.5
    vicreg_coeffs: tuple = (25.0, 25.0, 1.0)
    center: bool = True
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    projector_hidden: int = 256
    projector_out: int = 256
    projector_depth: int = 3

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss kind {self.loss_kind!r}")
        if not self.lam > 0:
            raise ConfigurationError("lambda must be positive")
        taus = [self.tau] if isinstance(self.tau, (int, float)) else list(self.tau)
        if not all(0 < t <= 1 for t in taus):
            raise ConfigurationError("invariance targets must lie in (0, 1]")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        if self.projector_depth < 1:
            raise ConfigurationError("projector needs at least one layer")


@dataclass
class OptimizerConfig:
    kind: str = "lars"
    base_lr: float = 0.4
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust_coefficient: float = 0.001
    epsilon: float = 1e-9
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("lars", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")
        if not self.base_lr > 0:
            raise ConfigurationError("base learning rate must be positive")
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup steps must be nonnegative")


@dataclass
class NoiseConfig:
    sigma: float = 0.0
    mode: str = "independent"

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError("noise sigma must be nonnegative")
        if self.mode not in NOISE_MODES:
            raise ConfigurationError(f"unknown noise mode {self.mode!r}")


@dataclass
class RoutingConfig:
    enabled: bool = False
    scheme: str = "train-all-below"
    secondary_weight: float = 0.0

    def __post_init__(self):
        if self.scheme not in ROUTING_SCHEMES:
            raise ConfigurationError(f"unknown routing scheme {self.scheme!r}")
        if not 0.0 <= self.secondary_weight <= 1.0:
            raise ConfigurationError("secondary weight must lie in [0, 1]")


@dataclass
class RegimeConfig:
    kind: str = "simultaneous"
    bn_stats_live: bool = False        # sequential: keep frozen-block BN stats updating
    merge_count: int = 2               # merged-first: blocks fused into the first group
    train_block: int = 0               # random-frozen: 1-indexed block that trains (0 = top)
    pretrained_checkpoint: str | None = None  # first-block-pretrained

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.kind!r}")
        if self.merge_count < 2:
            raise ConfigurationError("merged-first needs at least 2 blocks fused")


@dataclass
class AugmentationConfig:
    schedule: str = "uniform"
    pipeline: ViewPipeline = field(default_factory=ViewPipeline)

    def __post_init__(self):
        if self.schedule not in AUG_SCHEDULES:
            raise ConfigurationError(f"unknown augmentation schedule {self.schedule!r}")

    def build(self, num_blocks: int) -> AugmentationSchedule:
        if self.schedule == "adaptive":
            return adaptive_schedule(num_blocks)
        if self.schedule == "identity":
            return uniform_schedule(num_blocks, identity_pipeline())
        return uniform_schedule(num_blocks, self.pipeline)


@dataclass
class ExperimentConfig:
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    heads: list = field(default_factory=lambda: [HeadConfig()])
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    dataset: DatasetDescriptor = field(default_factory=DatasetDescriptor)
    seed: int = 0
    epochs: int = 30
    batch_size: int = 256
    checkpoint_every: int = 0          # epochs between checkpoints; 0 = final only
    probe_lr_grid: tuple = (0.1, 0.3, 1.0)
    probe_epochs: int = 30
    out_dir: str = "runs/run"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigurationError("need epochs >= 1 and batch size >= 2")
        if not self.heads:
            raise ConfigurationError("need at least one head config")
        n_groups = len(training_groups(self.effective_encoder()))
        if len(self.heads) not in (1, n_groups):
            raise ConfigurationError(
                f"{len(self.heads)} head configs for {n_groups} training blocks")
        if self.regime.kind == "supervised-blockwise":
            if any(h.loss_kind != "supervised-ce" for h in self.heads):
                raise ConfigurationError(
                    "supervised-blockwise regime requires supervised-ce heads")
        elif any(h.loss_kind == "supervised-ce" for h in self.heads):
            raise ConfigurationError(
                "supervised-ce heads require the supervised-blockwise regime")
        if self.regime.kind == "first-block-pretrained" \
                and self.regime.pretrained_checkpoint is None:
            raise ConfigurationError("first-block-pretrained needs a checkpoint path")
        nb = len(self.encoder.blocks)
        if self.regime.kind == "merged-first" and self.regime.merge_count > nb:
            raise ConfigurationError("merge count exceeds block count")
        if self.regime.kind == "random-frozen" \
                and not 0 <= self.regime.train_block <= nb:
            raise ConfigurationError(f"train block must lie in 1..{nb} (or 0 for top)")
        total_stride = 1
        for b in self.encoder.blocks:
            total_stride *= b.stride
        if self.dataset.image_size % total_stride:
            raise ConfigurationError(
                f"image size {self.dataset.image_size} not divisible by "
                f"total encoder stride {total_stride}")
        if not self.probe_lr_grid:
            raise ConfigurationError("probe lr grid must be non-empty")

    def effective_encoder(self) -> EncoderSpec:
        """Encoder spec after regime-level partition rewrites (merged-first)."""
        blocks = [replace(b) for b in self.encoder.blocks]
        if self.regime.kind == "end-to-end":
            for b in blocks[:-1]:
                b.merge_with_next = True
        elif self.regime.kind == "merged-first":
            for b in blocks[:self.regime.merge_count - 1]:
                b.merge_with_next = True
        return EncoderSpec(blocks, self.encoder.in_channels)

    def head_for_group(self, gi: int) -> HeadConfig:
        return self.heads[0] if len(self.heads) == 1 else self.heads[gi]


# ---------------------------------------------------------------------------
# strict JSON (de)serialization

_TOP_SECTIONS = {
    "regime": RegimeConfig,
    "optimizer": OptimizerConfig,
    "noise": NoiseConfig,
    "routing": RoutingConfig,
    "dataset": DatasetDescriptor,
}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected an object")
    allowed = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigurationError(f"unknown field {unknown[0]!r} in {where}")
    kwargs = {}
    for name, value in d.items():
        f = allowed[name]
        default = f.default if f.default is not MISSING else (
            f.default_factory() if f.default_factory is not MISSING else None)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def _head_from_dict(d, where: str) -> HeadConfig:
    d = dict(d) if isinstance(d, dict) else d
    if isinstance(d, dict) and isinstance(d.get("pooling"), dict):
        d["pooling"] = _build(PoolingConfig, d["pooling"], where + ".pooling")
    return _build(HeadConfig, d, where)


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigurationError("config root: expected an object")
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown field {unknown[0]!r} in config root")
    kwargs = {}
    for name, value in d.items():
        if name in _TOP_SECTIONS:
            kwargs[name] = _build(_TOP_SECTIONS[name], value, name)
        elif name == "encoder":
            enc = dict(value) if isinstance(value, dict) else value
            if isinstance(enc, dict) and isinstance(enc.get("blocks"), list):
                enc["blocks"] = [_build(BlockSpec, b, f"encoder.blocks[{i}]")
                                 for i, b in enumerate(enc["blocks"])]
            kwargs[name] = _build(EncoderSpec, enc, "encoder")
        elif name == "heads":
            if not isinstance(value, list):
                raise ConfigurationError("heads: expected a list")
            kwargs[name] = [_head_from_dict(h, f"heads[{i}]")
                            for i, h in enumerate(value)]
        elif name == "augmentation":
            aug = dict(value) if isinstance(value, dict) else value
            if isinstance(aug, dict) and isinstance(aug.get("pipeline"), dict):
                aug["pipeline"] = _build(ViewPipeline, aug["pipeline"],
                                         "augmentation.pipeline")
            kwargs[name] = _build(AugmentationConfig, aug, "augmentation")
        elif name == "probe_lr_grid":
            kwargs[name] = tuple(value) if isinstance(value, list) else value
        else:
            kwargs[name] = value
    return ExperimentConfig(**kwargs)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def config_from_json(text: str) -> ExperimentConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"config parse error at byte {e.pos}: {e.msg}") from e
    return config_from_dict(d)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        return config_from_json(text)
    except DataFormatError as e:
        raise DataFormatError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# presets: one named experiment family per headline figure / ablation

@dataclass
class Preset:
    name: str
    description: str
    variants: list  # (variant name, ExperimentConfig)


def desk_config(regime="simultaneous", **overrides) -> ExperimentConfig:
    """Desk-scale default: 4-block encoder, Barlow Twins heads with CbE-GSP
    pooling, LARS, synthetic 10k/2k dataset, 30 epochs at batch 256.

    The view recipe is rescaled for 32x32 inputs: the crop floor rises to 0.4
    of the image area (the default 0.08 floor yields 9px crops, below the
    granularity at which the synthetic classes are even defined), and blur and
    solarization are disabled (a sigma-2 blur at this resolution erases the
    few-pixel strokes the classes are built from, so demanding invariance to
    it strips exactly the class-bearing detail)."""
    if not isinstance(regime, RegimeConfig):
        regime = RegimeConfig(kind=regime)
    kwargs = dict(
        regime=regime,
        dataset=DatasetDescriptor(train_size=10000, val_size=2000),
        augmentation=AugmentationConfig(
            pipeline=ViewPipeline(crop_scale=(0.4, 1.0),
                                  blur_probs=(0.0, 0.0),
                                  solarize_probs=(0.0, 0.0))),
        epochs=30, batch_size=256)
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


def _heads(**overrides) -> list:
    return [HeadConfig(**overrides)]


def _preset_fig4_main() -> Preset:
    return Preset(
        "fig4-main",
        "End-to-end vs simultaneous/sequential blockwise vs random-frozen, "
        "per-block probe accuracies",
        [("end-to-end", desk_config("end-to-end")),
         ("simultaneous", desk_config(
             "simultaneous", noise=NoiseConfig(sigma=0.25, mode="independent"))),
         ("sequential", desk_config("sequential")),
         ("random-frozen", desk_config("random-frozen"))])


def _preset_fig6_firstblock() -> Preset:
    return Preset(
        "fig6-firstblock",
        "First-block sensitivity: pretrained first block and merged first blocks "
        "against the sequential baseline",
        [("end-to-end", desk_config("end-to-end")),
         ("sequential", desk_config("sequential")),
         ("first-block-pretrained", desk_config(
             regime=RegimeConfig(kind="first-block-pretrained",
                                 pretrained_checkpoint="end-to-end/encoder.ckpt"))),
         ("merged-first-2", desk_config(
             regime=RegimeConfig(kind="merged-first", merge_count=2)))])


def _preset_fig7_pooling() -> Preset:
    variants = []
    for kind in ("gsp", "lsp", "cbe-gsp", "cbe-l2", "cbe-sqrt"):
        variants.append((kind, desk_config(
            heads=_heads(pooling=PoolingConfig(kind=kind)))))
    return Preset("fig7-pooling",
                  "Pooling strategy comparison under simultaneous training",
                  variants)


def _preset_appendixA_invariance_targets() -> Preset:
    per_block = [HeadConfig(tau=t) for t in (0.6, 0.75, 0.9, 1.0)]
    return Preset(
        "appendixA-invariance-targets",
        "Fixed invariance target 1.0 vs per-block targets 0.6/0.75/0.9/1.0",
        [("fixed-target", desk_config()),
         ("adjusted-target", desk_config(heads=per_block))])


def _preset_appendixA_lambda() -> Preset:
    def with_first_lam(lam):
        heads = [HeadConfig(lam=lam)] + [HeadConfig() for _ in range(3)]
        return desk_config(heads=heads)
    return Preset(
        "appendixA-lambda",
        "Redundancy weight sweep on the first block",
        [("lam-0.0051", with_first_lam(0.0051)),
         ("lam-0.051", with_first_lam(0.051)),
         ("lam-0.51", with_first_lam(0.51))])


def _preset_appendixA_adaptive_aug() -> Preset:
    return Preset(
        "appendixA-adaptive-aug",
        "Uniform vs per-block adaptive augmentation difficulty (sequential)",
        [("uniform", desk_config("sequential")),
         ("adaptive", desk_config(
             "sequential", augmentation=AugmentationConfig(schedule="adaptive")))])


def _preset_appendixA_routing() -> Preset:
    return Preset(
        "appendixA-routing",
        "Difficulty-based example routing schemes",
        [("no-routing", desk_config()),
         ("train-all-below", desk_config(
             routing=RoutingConfig(enabled=True, scheme="train-all-below"))),
         ("weighted-others", desk_config(
             routing=RoutingConfig(enabled=True, scheme="weighted-others",
                                   secondary_weight=0.5)))])


def _preset_appendixB_projector() -> Preset:
    return Preset(
        "appendixB-projector",
        "Projector depth/width variants",
        [("depth3-w256", desk_config()),
         ("depth2-w256", desk_config(heads=_heads(projector_depth=2))),
         ("depth3-w128", desk_config(
             heads=_heads(projector_hidden=128, projector_out=128)))])


def _preset_appendixB_probe_lr() -> Preset:
    return Preset(
        "appendixB-probe-lr",
        "Linear probe learning-rate grid",
        [("grid-search", desk_config(probe_lr_grid=(0.1, 0.3, 1.0)))])


def _preset_appendixB_groupconv() -> Preset:
    variants = []
    for g in (1, 2, 4):
        variants.append((f"groups-{g}", desk_config(
            heads=_heads(pooling=PoolingConfig(kind="cbe-gsp", groups=g)))))
    return Preset("appendixB-groupconv",
                  "Grouped expansion convolutions in CbE pooling", variants)


def _preset_appendixB_filter_size() -> Preset:
    variants = []
    for f in (1, 3):
        variants.append((f"filter-{f}x{f}", desk_config(
            heads=_heads(pooling=PoolingConfig(kind="cbe-gsp", filter_size=f)))))
    return Preset("appendixB-filter-size",
                  "Expansion filter size in CbE pooling", variants)


def _preset_appendixC_corruption() -> Preset:
    return Preset(
        "appendixC-corruption",
        "Corruption robustness of blockwise vs end-to-end models",
        [("simultaneous", desk_config(
             noise=NoiseConfig(sigma=0.25, mode="independent"))),
         ("end-to-end", desk_config("end-to-end"))])


PRESETS = {
    "fig4-main": _preset_fig4_main,
    "fig6-firstblock": _preset_fig6_firstblock,
    "fig7-pooling": _preset_fig7_pooling,
    "appendixA-invariance-targets": _preset_appendixA_invariance_targets,
    "appendixA-lambda": _preset_appendixA_lambda,
    "appendixA-adaptive-aug": _preset_appendixA_adaptive_aug,
    "appendixA-routing": _preset_appendixA_routing,
    "appendixB-projector": _preset_appendixB_projector,
    "appendixB-probe-lr": _preset_appendixB_probe_lr,
    "appendixB-groupconv": _preset_appendixB_groupconv,
    "appendixB-filter-size": _preset_appendixB_filter_size,
    "appendixC-corruption": _preset_appendixC_corruption,
}


def get_preset(name: str) -> Preset:
    if name not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise ConfigurationError(f"unknown preset {name!r}; available: {known}")
    return PRESETS[name]()
