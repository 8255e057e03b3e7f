"""Training regimes over a block-partitioned encoder.

One step machinery serves every regime: generate two views, forward through
the physical blocks with stop-gradient at training-block boundaries, compute
each active block head's loss, backward per head, step per-block optimizers.
Regimes differ only in the partition (merge flags), which groups are active
in which epochs, and what is frozen:

  end-to-end            all blocks fused into one training group
  simultaneous          every group trains every step
  sequential            one group per phase, earlier groups frozen
  supervised-blockwise  simultaneous topology with cross-entropy heads
  random-frozen         only one group trains; the rest stay at init
  merged-first          first m blocks fused, then simultaneous
  first-block-pretrained  block 1 loaded from a checkpoint and frozen
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .augment import generate_view_batch, stream
from .config import ExperimentConfig, HeadConfig, NoiseConfig
from .data import Dataset, load_dataset
from .errors import ConfigurationError, DataFormatError, NonFiniteError
from .layers import Encoder, Projector, load_checkpoint, training_groups
from .losses import LossParts, block_loss, per_example_difficulty
from .optim import LARS, SGD, CosineSchedule
from .pooling import build_pooling
from .tensor import DEFAULT_DTYPE, Tensor


class BlockHead:
    """Pooling + projector for one training block; owns its loss settings."""

    def __init__(self, index: int, in_channels: int, cfg: HeadConfig,
                 num_classes: int, rng: np.random.Generator,
                 method: str = "im2col"):
        self.index = index
        self.cfg = cfg
        self.prefix = f"head{index + 1}"
        self.pooling = build_pooling(in_channels, cfg.pooling, rng, method)
        out_dim = num_classes if cfg.loss_kind == "supervised-ce" \
            else cfg.projector_out
        self.projector = Projector(self.pooling.out_width, cfg.projector_hidden,
                                   out_dim, cfg.projector_depth, rng=rng)

    def forward(self, h: Tensor) -> Tensor:
        return self.projector.forward(self.pooling.forward(h))

    def set_training(self, flag: bool):
        self.projector.set_training(flag)

    def named_parameters(self):
        out = list(self.pooling.named_parameters(f"{self.prefix}/pool"))
        out.extend(self.projector.named_parameters(f"{self.prefix}/proj"))
        return out

    def named_state(self):
        return self.projector.named_state(f"{self.prefix}/proj")

    def loss(self, za: Tensor, zb: Tensor, labels=None, weights=None) -> LossParts:
        c = self.cfg
        return block_loss(c.loss_kind, za, zb, labels, lam=c.lam, tau=c.tau,
                          temperature=c.temperature,
                          vicreg_coeffs=c.vicreg_coeffs, center=c.center,
                          weights=weights)


def inject_noise(x: Tensor, cfg: NoiseConfig, rng: np.random.Generator) -> Tensor:
    """Zero-mean Gaussian added to a block input; shared-spatial draws one
    value per (n, h, w) position and broadcasts it over channels."""
    if cfg.sigma == 0.0:
        return x
    n, c, h, w = x.shape
    shape = (n, 1, h, w) if cfg.mode == "shared-spatial" else x.shape
    noise = rng.normal(0.0, cfg.sigma, size=shape).astype(DEFAULT_DTYPE)
    return x + Tensor(noise)


def assignment_weights(assignment: np.ndarray, num_blocks: int, scheme: str,
                       secondary_weight: float) -> np.ndarray:
    """Per-example training weight for every block, from 1-indexed block
    assignments."""
    assignment = np.asarray(assignment)
    if scheme == "train-all-below":
        cols = np.arange(1, num_blocks + 1)
        return (cols[None, :] <= assignment[:, None]).astype(DEFAULT_DTYPE)
    w = np.full((len(assignment), num_blocks), secondary_weight,
                dtype=DEFAULT_DTYPE)
    w[np.arange(len(assignment)), assignment - 1] = 1.0
    return w


def route_examples(difficulties, num_blocks: int,
                   scheme: str = "train-all-below",
                   secondary_weight: float = 0.0):
    """Quantile-split examples by difficulty: ascending loss -> ascending
    block. Returns (1-indexed assignment, per-block weight matrix)."""
    d = np.asarray(difficulties, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise NonFiniteError("routing difficulties contain non-finite values")
    n = len(d)
    order = np.argsort(d, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    assignment = ranks * num_blocks // n + 1
    return assignment, assignment_weights(assignment, num_blocks, scheme,
                                          secondary_weight)


@dataclass
class TrainResult:
    encoder: Encoder
    heads: list
    groups: list            # physical block indices per training group
    steps: int
    metrics_path: str | None
    audit_failures: list


class Trainer:
    """Builds the model for a config and runs its regime."""

    def __init__(self, cfg: ExperimentConfig, dataset: Dataset | None = None,
                 method: str = "im2col"):
        self.cfg = cfg
        self.method = method
        self.dataset = dataset if dataset is not None else load_dataset(cfg.dataset)
        self.spec = cfg.effective_encoder()
        self.groups = training_groups(self.spec)
        self.encoder = Encoder(self.spec, rng=stream(cfg.seed, 1, 0), method=method)

        kind = cfg.regime.kind
        if cfg.augmentation.schedule == "adaptive" and kind != "sequential":
            raise ConfigurationError(
                "adaptive augmentation changes the data per block and "
                "requires the sequential regime")
        if cfg.routing.enabled and kind not in (
                "end-to-end", "simultaneous", "supervised-blockwise",
                "merged-first"):
            raise ConfigurationError(
                "routing needs every training block active each epoch")

        self.heads = []
        for gi, group in enumerate(self.groups):
            hcfg = cfg.head_for_group(gi)
            in_ch = self.spec.blocks[group[-1]].width
            self.heads.append(BlockHead(gi, in_ch, hcfg,
                                        self.dataset.num_classes,
                                        stream(cfg.seed, 1, gi + 1), method))

        self.trainable = self._trainable_groups()
        if kind == "first-block-pretrained":
            entries = load_checkpoint(cfg.regime.pretrained_checkpoint)
            for bi in self.groups[0]:
                self.encoder.load_block_checkpoint(bi, entries)

        self.optimizers = {}
        for gi in self.trainable:
            params = []
            for bi in self.groups[gi]:
                params.extend(self.encoder.named_block_parameters(bi))
            params.extend(self.heads[gi].named_parameters())
            oc = cfg.optimizer
            if oc.kind == "lars":
                self.optimizers[gi] = LARS(
                    params, trust=oc.trust_coefficient, momentum=oc.momentum,
                    weight_decay=oc.weight_decay, eps=oc.epsilon)
            else:
                self.optimizers[gi] = SGD(params, momentum=oc.momentum,
                                          weight_decay=oc.weight_decay)

        n = len(self.dataset.train_images)
        self.batch = min(cfg.batch_size, n)
        self.steps_per_epoch = max(1, n // self.batch)
        self.phases = self._phases()
        self.schedules = self._schedules()
        self.audit_failures = []

    # -- regime structure ---------------------------------------------------

    def _trainable_groups(self) -> list:
        kind = self.cfg.regime.kind
        if kind == "random-frozen":
            tb = self.cfg.regime.train_block
            target = len(self.groups) - 1 if tb == 0 else self._group_of(tb - 1)
            return [target]
        if kind == "first-block-pretrained":
            return list(range(1, len(self.groups)))
        return list(range(len(self.groups)))

    def _group_of(self, physical_block: int) -> int:
        for gi, group in enumerate(self.groups):
            if physical_block in group:
                return gi
        raise ConfigurationError(f"block {physical_block + 1} not in any group")

    def _phases(self) -> list:
        """(active groups, forward groups, epoch count) per phase."""
        cfg = self.cfg
        if cfg.regime.kind == "sequential":
            g = len(self.groups)
            base, extra = divmod(cfg.epochs, g)
            epochs = [base + (1 if i < extra else 0) for i in range(g)]
            if any(e == 0 for e in epochs):
                raise ConfigurationError(
                    f"{cfg.epochs} epochs cannot cover {g} sequential phases")
            return [([gi], list(range(gi + 1)), epochs[gi]) for gi in range(g)]
        if cfg.regime.kind in ("random-frozen", "first-block-pretrained"):
            active = self.trainable
            forward = list(range(max(active) + 1))
            return [(active, forward, cfg.epochs)]
        return [(self.trainable, self.trainable, cfg.epochs)]

    def _schedules(self) -> dict:
        per_group_steps = {gi: 0 for gi in self.trainable}
        for active, _, epochs in self.phases:
            for gi in active:
                per_group_steps[gi] += epochs * self.steps_per_epoch
        oc = self.cfg.optimizer
        return {gi: CosineSchedule(oc.base_lr, max(1, steps), oc.warmup_steps)
                for gi, steps in per_group_steps.items()}

    # -- modes ---------------------------------------------------------------

    def _set_modes(self, active: list, forward: list):
        """Active groups run BN in training mode; frozen-but-forwarded groups
        use running stats, unless the sequential live-stats flag keeps them
        in training mode."""
        live = self.cfg.regime.kind == "sequential" and self.cfg.regime.bn_stats_live
        for gi in range(len(self.groups)):
            flag = gi in active or (live and gi in forward)
            for bi in self.groups[gi]:
                self.encoder.set_training(flag, block=bi)
            self.heads[gi].set_training(gi in active)

    # -- one step -------------------------------------------------------------

    def _forward_heads(self, views: np.ndarray, forward: list, active: list,
                       noise_rng) -> dict:
        """Forward one view batch; returns group index -> embeddings."""
        boundaries = [self.groups[gi] for gi in forward]
        hook = None
        if noise_rng is not None and self.cfg.noise.sigma > 0:
            def hook(bi, h):
                return inject_noise(h, self.cfg.noise, noise_rng)
        acts = self.encoder.forward_blocks(Tensor(views), boundaries, hook)
        out = {}
        for gi in active:
            out[gi] = self.heads[gi].forward(acts[self.groups[gi][-1]])
        return out

    def _step(self, images: np.ndarray, labels: np.ndarray, epoch: int,
              step_in_epoch: int, global_step: int, active: list,
              forward: list, weights: np.ndarray | None, pipeline,
              metrics, routing_stats: np.ndarray | None,
              batch_idx: np.ndarray | None, audit: bool) -> None:
        cfg = self.cfg
        va, vb = generate_view_batch(images, pipeline,
                                     stream(cfg.seed, 3, epoch, step_in_epoch, 0),
                                     stream(cfg.seed, 3, epoch, step_in_epoch, 1))
        noise_rng = stream(cfg.seed, 4, epoch, step_in_epoch) \
            if cfg.noise.sigma > 0 else None

        if audit:
            self._audit_isolation(va, vb, labels, active, forward, global_step)

        for opt in self.optimizers.values():
            opt.zero_grad()
        za = self._forward_heads(va, forward, active, noise_rng)
        zb = self._forward_heads(vb, forward, active, noise_rng)

        losses = {}
        for gi in active:
            w = None
            if weights is not None:
                w = weights[batch_idx, gi]
                if float(w.sum()) == 0.0:
                    continue  # quantile split starved this block in this batch
            losses[gi] = self.heads[gi].loss(za[gi], zb[gi], labels, w)

        for gi, parts in losses.items():
            if not np.isfinite(parts.total.data):
                raise NonFiniteError(
                    f"non-finite loss {float(parts.total.data)!r} at step "
                    f"{global_step} block {gi + 1}")
            parts.total.backward()
        for gi, parts in losses.items():
            lr = self.schedules[gi].lr(
                min(self._group_step[gi], self.schedules[gi].total_steps - 1))
            self.optimizers[gi].step(lr)
            self._group_step[gi] += 1
            if metrics is not None:
                metrics.write(json.dumps({
                    "step": global_step, "block": gi + 1,
                    "loss": float(parts.total.data),
                    "invariance_term": float(parts.invariance),
                    "redundancy_term": float(parts.redundancy),
                    "lr": float(lr)}) + "\n")

        if routing_stats is not None:
            top = len(self.groups) - 1
            if top in losses:
                stat = per_example_difficulty(
                    self.heads[top].cfg.loss_kind, za[top].data, zb[top].data,
                    labels, self.heads[top].cfg.temperature)
                routing_stats[batch_idx] = stat

    # -- gradient isolation audit ---------------------------------------------

    def _audit_isolation(self, va, vb, labels, active, forward, global_step):
        """Backward each block loss alone and record any parameter outside the
        block+head whose gradient is not identically zero. Runs with BN stats
        frozen so audit forwards never perturb the training trajectory."""
        param_sets = {}
        all_params = []
        for gi in range(len(self.groups)):
            named = []
            for bi in self.groups[gi]:
                named.extend(self.encoder.named_block_parameters(bi))
            named.extend(self.heads[gi].named_parameters())
            param_sets[gi] = {id(t) for _, t in named}
            all_params.extend(named)

        head_bns = [bn for head in self.heads for bn in head.projector.bns]
        self.encoder.set_stats_frozen(True)
        for bn in head_bns:
            bn.stats_frozen = True
        try:
            for gi in active:
                for _, t in all_params:
                    t.grad = None
                za = self._forward_heads(va, forward, [gi], None)
                zb = self._forward_heads(vb, forward, [gi], None)
                parts = self.heads[gi].loss(za[gi], zb[gi], labels)
                parts.total.backward()
                for name, t in all_params:
                    if id(t) in param_sets[gi]:
                        continue
                    if t.grad is not None and np.any(t.grad != 0.0):
                        self.audit_failures.append(
                            (global_step, gi + 1, name, float(np.abs(t.grad).max())))
                for _, t in all_params:
                    t.grad = None
        finally:
            self.encoder.set_stats_frozen(False)
            for bn in head_bns:
                bn.stats_frozen = False

    # -- main loop --------------------------------------------------------------

    def run(self, metrics_path=None, audit_every: int = 0,
            max_steps: int | None = None) -> TrainResult:
        cfg = self.cfg
        n = len(self.dataset.train_images)
        g = len(self.groups)
        self._group_step = {gi: 0 for gi in self.trainable}
        routing_stats = np.zeros(n, dtype=np.float64) if cfg.routing.enabled else None

        metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
        global_step = 0
        epoch = 0
        try:
            for active, forward, phase_epochs in self.phases:
                self._set_modes(active, forward)
                pipelines = cfg.augmentation.build(g)
                for _ in range(phase_epochs):
                    if cfg.routing.enabled:
                        if epoch == 0:
                            assign = stream(cfg.seed, 5).integers(1, g + 1, size=n)
                            weights = assignment_weights(
                                assign, g, cfg.routing.scheme,
                                cfg.routing.secondary_weight)
                        else:
                            _, weights = route_examples(
                                routing_stats, g, cfg.routing.scheme,
                                cfg.routing.secondary_weight)
                    else:
                        weights = None
                    # adaptive schedules train one group per phase; uniform
                    # schedules give every block the same pipeline
                    pipeline = pipelines.for_block(active[-1] + 1)
                    perm = stream(cfg.seed, 2, epoch).permutation(n)
                    for s in range(self.steps_per_epoch):
                        idx = perm[s * self.batch:(s + 1) * self.batch]
                        if len(idx) < 2:
                            continue
                        self._step(self.dataset.train_images[idx],
                                   self.dataset.train_labels[idx],
                                   epoch, s, global_step, active, forward,
                                   weights, pipeline, metrics,
                                   routing_stats, idx,
                                   audit=bool(audit_every)
                                   and global_step % audit_every == 0)
                        global_step += 1
                        if max_steps is not None and global_step >= max_steps:
                            raise _StopTraining
                    epoch += 1
        except _StopTraining:
            pass
        finally:
            if metrics is not None:
                metrics.close()
        self.encoder.set_training(False)
        for head in self.heads:
            head.set_training(False)
        return TrainResult(self.encoder, self.heads, self.groups, global_step,
                           metrics_path, self.audit_failures)

    # -- persistence --------------------------------------------------------------

    def checkpoint_entries(self):
        entries = list(self.encoder.checkpoint_entries())
        for head in self.heads:
            entries.extend((name, t.data) for name, t in head.named_parameters())
            entries.extend(head.named_state())
        return entries

    def load_checkpoint_entries(self, entries: dict):
        self.encoder.load_checkpoint_entries(entries)
        for head in self.heads:
            for name, t in head.named_parameters():
                if name not in entries:
                    raise DataFormatError(f"checkpoint missing parameter {name}")
                t.data = entries[name].astype(DEFAULT_DTYPE)
            for i, bn in enumerate(head.projector.bns):
                bn.load_state(f"{head.prefix}/proj/bn{i + 1}", entries)


class _StopTraining(Exception):
    pass


def train(cfg: ExperimentConfig, dataset: Dataset | None = None,
          metrics_path=None, method: str = "im2col",
          audit_every: int = 0) -> TrainResult:
    return Trainer(cfg, dataset, method).run(metrics_path, audit_every)
