import json

import pytest

from bwssl.config import (AugmentationConfig, ExperimentConfig, HeadConfig,
                          NoiseConfig, OptimizerConfig, PRESETS, RegimeConfig,
                          RoutingConfig, config_from_dict, config_from_json,
                          config_to_dict, config_to_json, desk_config,
                          get_preset, load_config)
from bwssl.data import DatasetDescriptor
from bwssl.errors import ConfigurationError, DataFormatError
from bwssl.layers import training_groups
from bwssl.pooling import PoolingConfig


class TestValidation:
    def test_defaults_valid(self):
        cfg = ExperimentConfig()
        assert cfg.regime.kind == "simultaneous"
        assert len(cfg.encoder.blocks) == 4

    def test_unknown_regime(self):
        with pytest.raises(ConfigurationError, match="regime"):
            RegimeConfig(kind="layerwise")

    def test_unknown_loss_kind(self):
        with pytest.raises(ConfigurationError, match="loss kind"):
            HeadConfig(loss_kind="byol")

    def test_invariance_target_range(self):
        with pytest.raises(ConfigurationError, match="target"):
            HeadConfig(tau=1.5)
        with pytest.raises(ConfigurationError, match="target"):
            HeadConfig(tau=[0.5, 0.0])
        HeadConfig(tau=[0.6, 1.0])

    def test_lambda_positive(self):
        with pytest.raises(ConfigurationError, match="lambda"):
            HeadConfig(lam=0.0)

    def test_head_count_must_match_training_groups(self):
        with pytest.raises(ConfigurationError, match="head configs"):
            ExperimentConfig(heads=[HeadConfig(), HeadConfig()])
        ExperimentConfig(heads=[HeadConfig() for _ in range(4)])

    def test_end_to_end_single_group(self):
        cfg = ExperimentConfig(regime=RegimeConfig(kind="end-to-end"))
        assert len(training_groups(cfg.effective_encoder())) == 1

    def test_merged_first_reduces_groups(self):
        cfg = ExperimentConfig(
            regime=RegimeConfig(kind="merged-first", merge_count=2))
        assert len(training_groups(cfg.effective_encoder())) == 3

    def test_supervised_regime_requires_ce_heads(self):
        with pytest.raises(ConfigurationError, match="supervised"):
            ExperimentConfig(regime=RegimeConfig(kind="supervised-blockwise"))
        ExperimentConfig(regime=RegimeConfig(kind="supervised-blockwise"),
                         heads=[HeadConfig(loss_kind="supervised-ce")])

    def test_ce_heads_require_supervised_regime(self):
        with pytest.raises(ConfigurationError, match="supervised"):
            ExperimentConfig(heads=[HeadConfig(loss_kind="supervised-ce")])

    def test_pretrained_needs_checkpoint(self):
        with pytest.raises(ConfigurationError, match="checkpoint"):
            ExperimentConfig(regime=RegimeConfig(kind="first-block-pretrained"))

    def test_image_size_stride_divisibility(self):
        with pytest.raises(ConfigurationError, match="divisible"):
            ExperimentConfig(dataset=DatasetDescriptor(image_size=30))

    def test_noise_and_routing_ranges(self):
        with pytest.raises(ConfigurationError):
            NoiseConfig(sigma=-0.1)
        with pytest.raises(ConfigurationError):
            NoiseConfig(mode="per-channel")
        with pytest.raises(ConfigurationError):
            RoutingConfig(secondary_weight=1.5)
        with pytest.raises(ConfigurationError):
            OptimizerConfig(kind="adam")


class TestSerialization:
    def test_json_roundtrip_is_identity(self):
        cfg = desk_config("sequential",
                          heads=[HeadConfig(loss_kind="vicreg",
                                            pooling=PoolingConfig(kind="lsp"))],
                          noise=NoiseConfig(sigma=0.25),
                          routing=RoutingConfig(enabled=True,
                                                scheme="weighted-others",
                                                secondary_weight=0.3),
                          seed=7)
        text = config_to_json(cfg)
        back = config_from_json(text)
        assert config_to_json(back) == text
        assert back.heads[0].pooling.kind == "lsp"
        assert back.routing.secondary_weight == 0.3

    def test_roundtrip_preserves_tuple_fields(self):
        cfg = ExperimentConfig(probe_lr_grid=(0.05, 0.5))
        back = config_from_json(config_to_json(cfg))
        assert back.probe_lr_grid == (0.05, 0.5)
        assert back.heads[0].vicreg_coeffs == (25.0, 25.0, 1.0)

    def test_unknown_root_key_rejected(self):
        d = config_to_dict(ExperimentConfig())
        d["epochz"] = 3
        with pytest.raises(ConfigurationError, match="epochz"):
            config_from_dict(d)

    def test_unknown_nested_key_rejected(self):
        d = config_to_dict(ExperimentConfig())
        d["optimizer"]["nesterov"] = True
        with pytest.raises(ConfigurationError, match="nesterov.*optimizer"):
            config_from_dict(d)

    def test_unknown_head_key_rejected(self):
        d = config_to_dict(ExperimentConfig())
        d["heads"][0]["lamda"] = 0.1
        with pytest.raises(ConfigurationError, match=r"lamda.*heads\[0\]"):
            config_from_dict(d)

    def test_malformed_json_names_byte_offset(self):
        with pytest.raises(DataFormatError, match="byte"):
            config_from_json('{"seed": }')

    def test_load_config_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(config_to_json(desk_config(seed=3)))
        cfg = load_config(p)
        assert cfg.seed == 3
        p.write_text("{broken")
        with pytest.raises(DataFormatError, match="cfg.json"):
            load_config(p)

    def test_per_block_heads_roundtrip(self):
        cfg = ExperimentConfig(heads=[HeadConfig(tau=t)
                                      for t in (0.6, 0.75, 0.9, 1.0)])
        back = config_from_json(config_to_json(cfg))
        assert [h.tau for h in back.heads] == [0.6, 0.75, 0.9, 1.0]


class TestPresets:
    def test_all_presets_build_and_validate(self):
        assert len(PRESETS) == 12
        for name in PRESETS:
            preset = get_preset(name)
            assert preset.name == name
            assert preset.variants
            for vname, cfg in preset.variants:
                assert isinstance(cfg, ExperimentConfig)
                assert config_from_json(config_to_json(cfg)) is not None, vname

    def test_unknown_preset_lists_names(self):
        with pytest.raises(ConfigurationError, match="fig4-main"):
            get_preset("fig5-main")

    def test_fig4_variant_regimes(self):
        preset = get_preset("fig4-main")
        kinds = [cfg.regime.kind for _, cfg in preset.variants]
        assert kinds == ["end-to-end", "simultaneous", "sequential",
                         "random-frozen"]

    def test_pooling_preset_covers_all_kinds(self):
        preset = get_preset("fig7-pooling")
        kinds = {cfg.heads[0].pooling.kind for _, cfg in preset.variants}
        assert kinds == {"gsp", "lsp", "cbe-gsp", "cbe-l2", "cbe-sqrt"}

    def test_invariance_target_preset_per_block(self):
        preset = get_preset("appendixA-invariance-targets")
        adjusted = dict(preset.variants)["adjusted-target"]
        assert [h.tau for h in adjusted.heads] == [0.6, 0.75, 0.9, 1.0]

    def test_adaptive_schedule_builds(self):
        cfg = dict(get_preset("appendixA-adaptive-aug").variants)["adaptive"]
        sched = cfg.augmentation.build(4)
        assert not sched.for_block(1).crop
        assert sched.for_block(3) == sched.for_block(4)

    def test_desk_config_is_json_stable(self):
        a = config_to_json(desk_config())
        b = config_to_json(desk_config())
        assert a == b
        assert json.loads(a)["batch_size"] == 256
