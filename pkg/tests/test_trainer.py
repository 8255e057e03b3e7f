import json

import numpy as np
import pytest

from bwssl.config import (AugmentationConfig, ExperimentConfig, HeadConfig,
                          NoiseConfig, RegimeConfig, RoutingConfig)
from bwssl.data import DatasetDescriptor
from bwssl.errors import ConfigurationError, NonFiniteError
from bwssl.layers import BlockSpec, EncoderSpec, Encoder, save_checkpoint, \
    load_checkpoint
from bwssl.optim import SGD
from bwssl.pooling import PoolingConfig
from bwssl.tensor import Tensor, stop_gradient
from bwssl.trainer import (Trainer, assignment_weights, inject_noise,
                           route_examples, train)
from bwssl.augment import stream


def tiny_head(**over):
    kwargs = dict(pooling=PoolingConfig(kind="cbe-gsp", expansion_width=16),
                  projector_hidden=16, projector_out=16)
    kwargs.update(over)
    return HeadConfig(**kwargs)


def tiny_cfg(regime="simultaneous", blocks=None, **over):
    if blocks is None:
        blocks = [BlockSpec(4, 1, 2), BlockSpec(8, 1, 2)]
    if not isinstance(regime, RegimeConfig):
        regime = RegimeConfig(kind=regime)
    kwargs = dict(
        regime=regime,
        encoder=EncoderSpec(blocks=list(blocks)),
        heads=[tiny_head()],
        dataset=DatasetDescriptor(train_size=32, val_size=16, num_classes=4,
                                  image_size=8, seed=1),
        augmentation=AugmentationConfig(schedule="identity"),
        epochs=2, batch_size=8, seed=9)
    kwargs.update(over)
    return ExperimentConfig(**kwargs)


# ---------------------------------------------------------------------------
# noise injection

class TestInjectNoise:
    def test_sigma_zero_is_identity(self):
        x = Tensor(np.ones((2, 3, 4, 4), dtype=np.float32))
        assert inject_noise(x, NoiseConfig(sigma=0.0), np.random.default_rng(0)) is x

    def test_independent_statistics_for_million_draws(self):
        x = Tensor(np.zeros((4, 4, 250, 250), dtype=np.float32))
        out = inject_noise(x, NoiseConfig(sigma=0.25, mode="independent"),
                           np.random.default_rng(123))
        noise = out.data
        assert abs(noise.mean()) < 0.002
        assert abs(noise.std() - 0.25) < 0.002

    def test_shared_spatial_zero_channel_variance(self):
        x = Tensor(np.zeros((2, 8, 5, 5), dtype=np.float32))
        out = inject_noise(x, NoiseConfig(sigma=0.5, mode="shared-spatial"),
                           np.random.default_rng(7))
        added = out.data - x.data
        assert np.all(added == added[:, :1])  # every channel the same draw
        assert np.all(added.var(axis=1, dtype=np.float64) == 0.0)
        assert added.std() > 0.1  # but it is noise, not zeros

    def test_gradient_passes_through(self):
        x = Tensor(np.zeros((1, 2, 2, 2), dtype=np.float32), requires_grad=True)
        out = inject_noise(x, NoiseConfig(sigma=0.1), np.random.default_rng(3))
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


# ---------------------------------------------------------------------------
# routing

class TestRouting:
    def test_rank_order_example(self):
        assign, _ = route_examples([0.1, 0.9, 0.5, 0.3], 4)
        assert assign.tolist() == [1, 4, 3, 2]

    def test_train_all_below_weights(self):
        w = assignment_weights(np.array([3]), 4, "train-all-below", 0.0)
        assert w.tolist() == [[1.0, 1.0, 1.0, 0.0]]

    def test_weighted_others_unit_weight_is_uniform(self):
        _, w = route_examples([0.2, 0.8, 0.5], 3, "weighted-others", 1.0)
        np.testing.assert_array_equal(w, np.ones((3, 3), dtype=np.float32))

    def test_weighted_others_structure(self):
        w = assignment_weights(np.array([2, 1]), 3, "weighted-others", 0.5)
        assert w.tolist() == [[0.5, 1.0, 0.5], [1.0, 0.5, 0.5]]

    def test_quantile_split_is_balanced(self):
        rng = np.random.default_rng(0)
        assign, _ = route_examples(rng.uniform(size=100), 4)
        assert np.bincount(assign, minlength=5)[1:].tolist() == [25] * 4

    def test_non_finite_difficulty_rejected(self):
        with pytest.raises(NonFiniteError):
            route_examples([0.1, np.nan], 2)


# ---------------------------------------------------------------------------
# hand-traced two-block step: the update algebra the trainer runs

def test_two_block_linear_toy_hand_traced():
    w1 = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    w2 = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
    x = Tensor(np.array([1.0], dtype=np.float32))

    h1 = w1 * x
    loss1 = (h1 - Tensor(np.array([1.0], dtype=np.float32))).square().sum()
    h1_in = stop_gradient(h1)
    loss2 = (w2 * h1_in - Tensor(np.array([1.0], dtype=np.float32))).square().sum()

    opt1 = SGD([("w1", w1)])
    opt2 = SGD([("w2", w2)])
    loss1.backward()
    loss2.backward()
    # dloss1/dw1 = 2*(2-1)*1 = 2; dloss2/dw2 = 2*(6-1)*2 = 20; w1 gets no
    # gradient from loss2 through the stopped boundary
    assert w1.grad.tolist() == [2.0]
    assert w2.grad.tolist() == [20.0]
    opt1.step(0.1)
    opt2.step(0.1)
    assert w1.data.tolist() == [np.float32(2.0) - np.float32(0.1) * 2]
    assert w2.data.tolist() == [1.0]


# ---------------------------------------------------------------------------
# trainer regimes

def run_tiny(cfg, tmp_path, name, **kw):
    path = tmp_path / f"{name}.jsonl"
    result = train(cfg, metrics_path=str(path), **kw)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    return result, lines, path


class TestSimultaneous:
    def test_runs_and_logs_schema(self, tmp_path):
        result, lines, _ = run_tiny(tiny_cfg(), tmp_path, "sim")
        assert result.steps == 8  # 2 epochs x 4 steps
        assert len(lines) == 16   # two blocks per step
        for rec in lines:
            assert list(rec) == ["step", "block", "loss", "invariance_term",
                                 "redundancy_term", "lr"]
            assert rec["block"] in (1, 2)
            assert np.isfinite(rec["loss"])
        assert {rec["block"] for rec in lines} == {1, 2}

    def test_gradient_isolation_audit_clean(self, tmp_path):
        result, _, _ = run_tiny(tiny_cfg(epochs=1), tmp_path, "audit",
                                audit_every=1)
        assert result.audit_failures == []

    def test_bitwise_reproducible(self, tmp_path):
        _, _, p1 = run_tiny(tiny_cfg(), tmp_path, "rep1")
        _, _, p2 = run_tiny(tiny_cfg(), tmp_path, "rep2")
        assert p1.read_bytes() == p2.read_bytes()

    def test_seed_changes_trajectory(self, tmp_path):
        _, _, p1 = run_tiny(tiny_cfg(), tmp_path, "seed9")
        _, _, p2 = run_tiny(tiny_cfg(seed=10), tmp_path, "seed10")
        assert p1.read_bytes() != p2.read_bytes()

    def test_one_backward_per_block_matches_combined_backward(self):
        cfg = tiny_cfg()
        ta = Trainer(cfg)
        tb = Trainer(cfg)
        images = ta.dataset.train_images[:8]
        va = images.copy()
        vb = images[:, :, :, ::-1].copy()

        def embeddings(tr):
            tr._set_modes([0, 1], [0, 1])
            za = tr._forward_heads(va, [0, 1], [0, 1], None)
            zb = tr._forward_heads(vb, [0, 1], [0, 1], None)
            return ({gi: tr.heads[gi].loss(za[gi], zb[gi]) for gi in (0, 1)})

        la = embeddings(ta)
        la[0].total.backward()
        la[1].total.backward()
        lb = embeddings(tb)
        (lb[0].total + lb[1].total).backward()
        for (na, pa), (nb, pb) in zip(
                ta.optimizers[0].named_params + ta.optimizers[1].named_params,
                tb.optimizers[0].named_params + tb.optimizers[1].named_params):
            assert na == nb
            ga = np.zeros_like(pa.data) if pa.grad is None else pa.grad
            gb = np.zeros_like(pb.data) if pb.grad is None else pb.grad
            np.testing.assert_array_equal(ga, gb, err_msg=na)

    def test_noise_draw_consumed_per_view(self, tmp_path):
        cfg = tiny_cfg(noise=NoiseConfig(sigma=0.25))
        result, lines, _ = run_tiny(cfg, tmp_path, "noise")
        assert result.steps == 8
        assert all(np.isfinite(rec["loss"]) for rec in lines)


class TestEndToEnd:
    def test_single_training_group(self, tmp_path):
        result, lines, _ = run_tiny(tiny_cfg("end-to-end"), tmp_path, "e2e")
        assert result.groups == [[0, 1]]
        assert all(rec["block"] == 1 for rec in lines)


class TestSequential:
    def test_phase_split_and_freezing(self, tmp_path):
        cfg = tiny_cfg("sequential")
        t1 = Trainer(cfg)
        t1.run(max_steps=4)  # exactly phase 1 (block 1's epoch)
        frozen = {n: p.data.copy()
                  for n, p in t1.encoder.named_block_parameters(0)}

        t2 = Trainer(cfg)
        t2.run(str(tmp_path / "seq.jsonl"))
        after = dict(t2.encoder.named_block_parameters(0))
        for name in frozen:
            np.testing.assert_array_equal(frozen[name], after[name].data,
                                          err_msg=name)
        lines = [json.loads(line)
                 for line in (tmp_path / "seq.jsonl").read_text().splitlines()]
        assert [rec["block"] for rec in lines] == [1] * 4 + [2] * 4

    def test_bn_stats_frozen_by_default(self):
        cfg = tiny_cfg("sequential")
        t1 = Trainer(cfg)
        t1.run(max_steps=4)
        stats = [bn.running_mean.copy() for bn in t1.encoder.batchnorms(0)]

        t2 = Trainer(cfg)
        t2.run()
        for before, bn in zip(stats, t2.encoder.batchnorms(0)):
            np.testing.assert_array_equal(before, bn.running_mean)

    def test_bn_stats_live_flag_updates_frozen_blocks(self):
        cfg = tiny_cfg(RegimeConfig(kind="sequential", bn_stats_live=True))
        t1 = Trainer(cfg)
        t1.run(max_steps=4)
        stats = [bn.running_mean.copy() for bn in t1.encoder.batchnorms(0)]
        weights = {n: p.data.copy()
                   for n, p in t1.encoder.named_block_parameters(0)}

        t2 = Trainer(cfg)
        t2.run()
        changed = any(not np.array_equal(before, bn.running_mean)
                      for before, bn in zip(stats, t2.encoder.batchnorms(0)))
        assert changed
        for n, p in t2.encoder.named_block_parameters(0):
            np.testing.assert_array_equal(weights[n], p.data, err_msg=n)

    def test_epoch_budget_must_cover_phases(self):
        with pytest.raises(ConfigurationError, match="sequential"):
            Trainer(tiny_cfg("sequential", epochs=1))


class TestBaselines:
    def test_random_frozen_trains_only_top(self, tmp_path):
        cfg = tiny_cfg("random-frozen")
        result, lines, _ = run_tiny(cfg, tmp_path, "rf")
        init = Encoder(cfg.effective_encoder(), rng=stream(cfg.seed, 1, 0))
        for (name, got), (_, want) in zip(
                result.encoder.named_block_parameters(0),
                init.named_block_parameters(0)):
            np.testing.assert_array_equal(got.data, want.data, err_msg=name)
        trained = result.encoder.named_block_parameters(1)
        assert any(not np.array_equal(p.data, w.data)
                   for (_, p), (_, w) in zip(trained,
                                             init.named_block_parameters(1)))
        assert all(rec["block"] == 2 for rec in lines)

    def test_random_frozen_specific_block(self, tmp_path):
        cfg = tiny_cfg(RegimeConfig(kind="random-frozen", train_block=1))
        result, lines, _ = run_tiny(cfg, tmp_path, "rf1")
        assert all(rec["block"] == 1 for rec in lines)
        init = Encoder(cfg.effective_encoder(), rng=stream(cfg.seed, 1, 0))
        for (name, got), (_, want) in zip(
                result.encoder.named_block_parameters(1),
                init.named_block_parameters(1)):
            np.testing.assert_array_equal(got.data, want.data, err_msg=name)

    def test_merged_first_partition(self, tmp_path):
        blocks = [BlockSpec(4, 1, 2), BlockSpec(8, 1, 2), BlockSpec(8, 1, 1)]
        cfg = tiny_cfg(RegimeConfig(kind="merged-first", merge_count=2),
                       blocks=blocks)
        result, lines, _ = run_tiny(cfg, tmp_path, "merged")
        assert result.groups == [[0, 1], [2]]
        assert {rec["block"] for rec in lines} == {1, 2}

    def test_first_block_pretrained_loads_and_freezes(self, tmp_path):
        base = tiny_cfg("end-to-end", epochs=1)
        trained = train(base)
        ckpt = tmp_path / "enc.ckpt"
        save_checkpoint(ckpt, trained.encoder.checkpoint_entries())
        block1 = {n: e.data.copy()
                  for n, e in trained.encoder.named_block_parameters(0)}

        cfg = tiny_cfg(RegimeConfig(kind="first-block-pretrained",
                                    pretrained_checkpoint=str(ckpt)))
        result, lines, _ = run_tiny(cfg, tmp_path, "fbp")
        for name, p in result.encoder.named_block_parameters(0):
            np.testing.assert_array_equal(p.data, block1[name], err_msg=name)
        assert all(rec["block"] == 2 for rec in lines)

    def test_missing_checkpoint_errors(self, tmp_path):
        cfg = tiny_cfg(RegimeConfig(kind="first-block-pretrained",
                                    pretrained_checkpoint=str(tmp_path / "nope")))
        with pytest.raises(OSError):
            Trainer(cfg)


class TestSupervised:
    def test_head_width_is_class_count_and_runs(self, tmp_path):
        cfg = tiny_cfg("supervised-blockwise",
                       heads=[tiny_head(loss_kind="supervised-ce")])
        result, lines, _ = run_tiny(cfg, tmp_path, "sup")
        for head in result.heads:
            assert head.projector.out_dim == 4
        assert all(np.isfinite(rec["loss"]) for rec in lines)
        assert all(rec["redundancy_term"] == 0.0 for rec in lines)


class TestDegeneratePartition:
    def test_b1_regimes_bitwise_identical(self, tmp_path):
        blocks = [BlockSpec(6, 1, 2)]
        outs = {}
        params = {}
        for regime in ("end-to-end", "simultaneous", "sequential"):
            cfg = tiny_cfg(regime, blocks=blocks, epochs=2)
            result, _, path = run_tiny(cfg, tmp_path, f"b1-{regime}")
            outs[regime] = path.read_bytes()
            params[regime] = {n: p.data.copy()
                              for n, p in result.encoder.named_parameters()}
            for head in result.heads:
                params[regime].update(
                    {n: p.data.copy() for n, p in head.named_parameters()})
        assert outs["end-to-end"] == outs["simultaneous"] == outs["sequential"]
        for name in params["end-to-end"]:
            a = params["end-to-end"][name]
            np.testing.assert_array_equal(a, params["simultaneous"][name],
                                          err_msg=name)
            np.testing.assert_array_equal(a, params["sequential"][name],
                                          err_msg=name)


class TestRoutingIntegration:
    def test_unit_weighted_others_matches_no_routing(self, tmp_path):
        base = tiny_cfg()
        routed = tiny_cfg(routing=RoutingConfig(enabled=True,
                                                scheme="weighted-others",
                                                secondary_weight=1.0))
        _, _, p1 = run_tiny(base, tmp_path, "noroute")
        _, _, p2 = run_tiny(routed, tmp_path, "route1")
        assert p1.read_bytes() == p2.read_bytes()

    def test_train_all_below_runs(self, tmp_path):
        cfg = tiny_cfg(routing=RoutingConfig(enabled=True,
                                             scheme="train-all-below"))
        result, lines, _ = run_tiny(cfg, tmp_path, "tab")
        assert result.steps == 8
        blocks = {rec["block"] for rec in lines}
        assert 1 in blocks  # every example trains block 1 under this scheme

    def test_routing_rejected_for_sequential(self):
        with pytest.raises(ConfigurationError, match="routing"):
            Trainer(tiny_cfg("sequential",
                             routing=RoutingConfig(enabled=True)))


class TestValidationAndAborts:
    def test_adaptive_augmentation_needs_sequential(self):
        with pytest.raises(ConfigurationError, match="adaptive"):
            Trainer(tiny_cfg(augmentation=AugmentationConfig(schedule="adaptive")))

    def test_adaptive_with_sequential_runs(self, tmp_path):
        cfg = tiny_cfg("sequential",
                       augmentation=AugmentationConfig(schedule="adaptive"),
                       dataset=DatasetDescriptor(train_size=32, val_size=16,
                                                 num_classes=4, image_size=16,
                                                 seed=1))
        result, _, _ = run_tiny(cfg, tmp_path, "adaptive")
        assert result.steps == 8

    def test_non_finite_loss_aborts_with_block(self):
        trainer = Trainer(tiny_cfg())
        bad = trainer.heads[1].projector.linears[0].weight
        bad.data = np.full_like(bad.data, np.inf)
        with pytest.raises(NonFiniteError, match="block 2"):
            trainer.run(max_steps=1)


class TestCheckpointRoundtrip:
    def test_trainer_state_roundtrip(self, tmp_path):
        result = train(tiny_cfg(epochs=1))
        trainer = Trainer(tiny_cfg(epochs=1))
        path = tmp_path / "full.ckpt"

        src = Trainer(tiny_cfg(epochs=1))
        src_result = src.run()
        save_checkpoint(path, src.checkpoint_entries())
        trainer.load_checkpoint_entries(load_checkpoint(path))
        for (name, a), (_, b) in zip(
                trainer.encoder.named_parameters(),
                src_result.encoder.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)
        for ha, hb in zip(trainer.heads, src.heads):
            for (name, a), (_, b) in zip(ha.named_parameters(),
                                         hb.named_parameters()):
                np.testing.assert_array_equal(a.data, b.data, err_msg=name)
        assert result.steps == src_result.steps
