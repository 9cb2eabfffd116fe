import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgenext import checks
from edgenext.model import (
    ABLATIONS,
    ConfigError,
    ablation,
    build_model,
    check_weights,
    is_buffer,
    model_forward,
    pe_block,
    preset,
    stage_shapes,
    tiny,
    weight_shapes,
)
from edgenext.tensor import DimensionError, softmax

NAME = re.compile(
    r"^(stem\.(conv|norm)"
    r"|stage[2-4]\.downsample\.(conv|norm)"
    r"|stage[1-4]\.block\d+\.[a-z_0-9]+"
    r"|head\.(norm|fc))"
    r"\.(weight|bias|gamma|beta|running_mean|running_var)$"
)


class TestPresets:
    def test_s_widths_and_depths(self):
        s = preset("S")
        assert s.widths == (48, 96, 160, 304)
        assert s.conv_depths == (3, 2, 8, 2)
        assert s.sdta_depths == (0, 1, 1, 1)

    def test_kernels(self):
        for name in ("XXS", "XS", "S", "B"):
            assert preset(name).kernels == (3, 5, 7, 9)

    def test_widths_table(self):
        assert preset("XXS").widths == (24, 48, 88, 168)
        assert preset("XS").widths == (32, 64, 100, 192)
        assert preset("XS").conv_depths == (3, 2, 8, 2)

    def test_xxs_uses_reduced_depth(self):
        # see decisions ledger: literal depths overshoot the XXS budgets by ~38%
        assert preset("XXS").conv_depths == (2, 1, 5, 1)
        assert preset("XXS").sdta_depths == (0, 1, 1, 1)

    def test_split_schedule(self):
        assert preset("S").splits[1:] == (2, 3, 4)

    def test_case_insensitive_and_unknown(self):
        assert preset("xs") == preset("XS")
        with pytest.raises(ConfigError, match="XXS, XS, S, B"):
            preset("M")


class TestConfigValidation:
    def test_heads_must_divide_sdta_width(self):
        with pytest.raises(ConfigError):
            tiny(heads=3)

    def test_pe_stage_needs_sdta(self):
        with pytest.raises(ConfigError):
            tiny(pe_stage=1)

    def test_resolution_multiple_of_32(self):
        with pytest.raises(ConfigError):
            tiny(resolution=48)

    def test_layout_moves_pe_stage(self):
        cfg = preset("S").with_layout(conv=(3, 3, 8, 2), sdta=(0, 0, 1, 1))
        assert cfg.pe_stage == 3
        assert preset("S").with_layout(sdta=(0, 0, 0, 0), conv=(3, 3, 9, 3)).pe_stage is None

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            preset("S").with_layout(kernels=(3, 5, 7, 8)).validate()


class TestWeights:
    def test_deterministic(self):
        a, b = build_model(preset("S"), 3), build_model(preset("S"), 3)
        assert list(a) == list(b)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = build_model(preset("S"), 4)
        assert not np.array_equal(a["stem.conv.weight"], c["stem.conv.weight"])

    def test_init_bounds(self):
        w = build_model(preset("XXS"))
        for name, v in w.items():
            leaf = name.rsplit(".", 1)[1]
            if leaf in ("gamma", "running_var"):
                assert np.all(v == 1)
            elif leaf in ("bias", "beta", "running_mean"):
                assert not v.any()
            else:
                assert np.all(np.abs(v) < 0.04), name
                assert 0.015 < v.std() < 0.025 or v.size < 100

    def test_name_grammar_and_stability(self):
        for cfg in (preset("S"), tiny(norm="batch"), tiny(temperature=True)):
            names = list(weight_shapes(cfg))
            assert names == list(weight_shapes(cfg))
            for n in names:
                assert NAME.match(n) or n.endswith(".temperature"), n

    def test_pe_lives_on_first_sdta_block_of_stage2(self):
        cfg = preset("S")
        assert pe_block(cfg) == "stage2.block2."
        assert "stage2.block2.pe.weight" in weight_shapes(cfg)
        assert sum(".pe." in n for n in weight_shapes(cfg)) == 2

    def test_batch_norm_buffers(self):
        shapes = weight_shapes(tiny(norm="batch"))
        buffers = [n for n in shapes if is_buffer(n)]
        assert buffers and all(n.endswith(("running_mean", "running_var")) for n in buffers)

    def test_check_weights(self):
        cfg = tiny()
        w = build_model(cfg)
        check_weights(cfg, w)
        with pytest.raises(KeyError):
            check_weights(cfg, {k: v for k, v in w.items() if k != "head.fc.bias"})
        w["head.fc.bias"] = np.zeros(3)
        with pytest.raises(DimensionError):
            check_weights(cfg, w)

    def test_dtype(self):
        assert all(v.dtype == np.float64 for v in build_model(tiny(), dtype=np.float64).values())


class TestForward:
    def test_s_shape_trace_at_256(self):
        cfg = preset("S")
        feats = []
        x = np.random.default_rng(0).standard_normal((1, 256, 256, 3)).astype(np.float32)
        logits = model_forward(cfg, build_model(cfg), x, features=feats)
        assert [f.shape[1:] for f in feats] == [(64, 64, 48), (32, 32, 96), (16, 16, 160), (8, 8, 304)]
        assert logits.shape == (1, 1000)
        assert abs(softmax(logits.astype(np.float64)).sum() - 1) < 1e-6

    def test_xxs_at_224(self):
        cfg = preset("XXS")
        feats = []
        x = np.random.default_rng(1).standard_normal((1, 224, 224, 3)).astype(np.float32)
        logits = model_forward(cfg, build_model(cfg), x, features=feats)
        assert [f.shape[1] for f in feats] == [56, 28, 14, 7]
        assert logits.shape == (1, 1000)

    @settings(max_examples=12, deadline=None)
    @given(
        res=st.sampled_from([32, 64, 96]),
        name=st.sampled_from(sorted(ABLATIONS)),
        batch=st.integers(1, 2),
    )
    def test_stage_shapes_follow_schedule(self, res, name, batch):
        cfg = ablation(name, tiny())
        feats = []
        x = np.random.default_rng(res).standard_normal((batch, res, res, 3)).astype(np.float32)
        logits = model_forward(cfg, build_model(cfg), x, features=feats)
        assert [f.shape for f in feats] == [(batch, *s) for s in stage_shapes(cfg, res)]
        assert logits.shape == (batch, cfg.num_classes)

    def test_deterministic(self):
        cfg = tiny()
        w = build_model(cfg)
        x = np.random.default_rng(2).standard_normal((2, 64, 64, 3)).astype(np.float32)
        assert np.array_equal(model_forward(cfg, w, x), model_forward(cfg, w, x))

    def test_rejects_bad_input(self):
        cfg = tiny()
        w = build_model(cfg)
        with pytest.raises(DimensionError):
            model_forward(cfg, w, np.zeros((1, 48, 48, 3), np.float32))
        with pytest.raises(DimensionError):
            model_forward(cfg, w, np.zeros((1, 64, 64, 1), np.float32))

    def test_batch_norm_training_mode_collects_stats(self):
        cfg = tiny(norm="batch", activation="hard_swish")
        stats = {}
        model_forward(cfg, build_model(cfg), np.random.default_rng(0).standard_normal((4, 64, 64, 3)), stats=stats)
        assert "stem.norm" in stats and "head.norm" in stats


class TestAblations:
    def test_all_build_forward(self):
        x = np.random.default_rng(0).standard_normal((1, 64, 64, 3)).astype(np.float32)
        for name in ABLATIONS:
            cfg = ablation(name)
            logits = model_forward(cfg, build_model(cfg), x)
            assert logits.shape == (1, 1000) and np.all(np.isfinite(logits)), name

    def test_layouts(self):
        assert ablation("sdta_last_stage_only").conv_depths == (3, 3, 9, 0)
        assert ablation("sdta_last_stage_only").sdta_depths == (0, 0, 0, 3)
        assert ablation("no_sdta").sdta_depths == (0, 0, 0, 0)
        assert ablation("no_adaptive_branching").splits == (2, 2, 2, 2)
        assert ablation("no_adaptive_branching_no_pe").pe_stage is None
        assert ablation("no_sdta_fixed_kernels").kernels == (7, 7, 7, 7)

    def test_start_vs_end_placement_is_live(self):
        start, end = ablation("sdta_at_start", tiny()), ablation("sdta_at_end", tiny())
        ws, we = build_model(start, 0), build_model(end, 0)
        x = np.random.default_rng(1).standard_normal((2, 64, 64, 3)).astype(np.float32)
        assert not np.array_equal(model_forward(start, ws, x), model_forward(end, we, x))

    def test_unknown(self):
        with pytest.raises(ConfigError):
            ablation("nope")


def test_full_model_gradients():
    for r in checks.run_suite("model", seed=0):
        assert r.error < 1e-4, r
