import fnmatch

import numpy as np
import pytest

from ftlab import tensor as T
from ftlab.adapt import (
    LoraSettings,
    StrategyConfig,
    apply_strategy,
    build_param_groups,
    freeze_below,
    freeze_layers,
    merge_lora,
    selector_matches,
    wrap_lora,
)
from ftlab.errors import ConfigError
from ftlab.model import ModelConfig, init_model, parameter_count, preset
from ftlab.train import TrainConfig, run_training


def randomize_b(model, seed, scale=0.1):
    rng = np.random.default_rng(seed)
    for ad in model.adapters.values():
        ad.b.data = rng.normal(0.0, scale, ad.b.shape)


def trainable(model):
    return {p.path for p in model.named_parameters() if p.trainable}


class TestSelectors:
    @pytest.mark.parametrize(
        "selector,path,hit",
        [
            ("head", "head.w", True),
            ("head", "headless.w", False),
            ("layers.1-2", "layers.2.attn.wq", True),
            ("layers.1-2", "layers.3.attn.wq", False),
            ("layers.*.ff.w*", "layers.0.ff.w1", True),
            ("layers.*.ff.w*", "layers.0.ff.b1", False),
        ],
    )
    def test_matching(self, selector, path, hit):
        assert selector_matches(selector, path) is hit


class TestWrap:
    def test_zero_init_identity(self, tiny_model, batch):
        before = tiny_model.forward(*batch).data
        wrap_lora(tiny_model, r=4, seed=3)
        np.testing.assert_allclose(tiny_model.forward(*batch).data, before, atol=1e-12, rtol=0)

    def test_square_target_adds_512(self):
        m = init_model(preset("micro"))
        wrap_lora(m, "layers.0.attn.wq", r=4)
        ad = m.adapters["layers.0.attn.wq"]
        assert ad.a.size + ad.b.size == 64 * 4 + 4 * 64 == 512
        assert m.params["layers.0.attn.wq"].size == 4096

    def test_every_dense_weight_adapted(self, tiny_model):
        wrap_lora(tiny_model, r=2)
        dense = {
            p for p, t in tiny_model.params.items()
            if t.ndim == 2 and not p.startswith(("embed", "head"))
        }
        assert set(tiny_model.adapters) == dense

    def test_only_adapters_and_head_train(self, tiny_model):
        wrap_lora(tiny_model, r=2)
        assert trainable(tiny_model) == {"head.w", "head.b"} | {
            f"{p}.lora_{x}" for p in tiny_model.adapters for x in "ab"
        }

    def test_init_distribution(self):
        m = wrap_lora(init_model(preset("micro")), r=8, seed=0)
        a = np.concatenate([ad.a.data.ravel() for ad in m.adapters.values()])
        assert a.std() == pytest.approx(0.02, rel=0.05)
        assert all(not ad.b.data.any() for ad in m.adapters.values())

    def test_seeded(self, tiny_model):
        a = wrap_lora(tiny_model.clone(), r=2, seed=5)
        b = wrap_lora(tiny_model.clone(), r=2, seed=5)
        for p in a.adapters:
            np.testing.assert_array_equal(a.adapters[p].a.data, b.adapters[p].a.data)

    @pytest.mark.parametrize("r", [16, 17, 100])
    def test_rank_too_large(self, tiny_model, r):
        with pytest.raises(ConfigError, match="r < min"):
            wrap_lora(tiny_model, r=r)

    def test_rank_64_micro_vs_mini(self):
        with pytest.raises(ConfigError):
            wrap_lora(init_model(preset("micro")), r=64)
        wrap_lora(init_model(preset("mini")), r=64)

    def test_no_targets(self, tiny_model):
        with pytest.raises(ConfigError, match="no parameters matched"):
            wrap_lora(tiny_model, "nothing.*")

    @pytest.mark.parametrize("kwargs", [{"r": 0}, {"alpha": 0}, {"dropout_p": 1.0}])
    def test_bad_hyperparameters(self, tiny_model, kwargs):
        with pytest.raises(ConfigError):
            wrap_lora(tiny_model, **kwargs)

    def test_scale(self, tiny_model):
        wrap_lora(tiny_model, r=4, alpha=8)
        assert next(iter(tiny_model.adapters.values())).scale == 2.0

    def test_raw_alpha_scale(self, tiny_model):
        wrap_lora(tiny_model, r=4, alpha=8, raw_alpha=True)
        assert next(iter(tiny_model.adapters.values())).scale == 8.0

    def test_forward_matches_formula(self):
        cfg = ModelConfig(vocab_size=11, max_seq_len=4, d_model=8, n_heads=2, n_layers=1, d_ff=16)
        m = wrap_lora(init_model(cfg), "head.w", r=1, alpha=3.0, dropout_p=0.0)
        randomize_b(m, 0)
        ad = m.adapters["head.w"]
        h = m.encode(np.array([[1, 2, 3]]), np.ones((1, 3), bool))
        pooled = h.data[:, -1]
        w, b = m.params["head.w"].data, m.params["head.b"].data
        expected = pooled @ w + 3.0 * (pooled @ ad.a.data) @ ad.b.data + b
        np.testing.assert_allclose(m.forward(np.array([[1, 2, 3]]), np.ones((1, 3), bool)).data, expected, atol=1e-12)


class TestMerge:
    def test_merge_after_wrap_bitwise(self, tiny_model):
        wrap_lora(tiny_model, r=2)
        merged = merge_lora(tiny_model)
        for p, t in tiny_model.params.items():
            np.testing.assert_array_equal(merged.params[p].data, t.data)
        assert not merged.adapters

    @pytest.mark.parametrize("seed", range(10))
    def test_merge_equivalence(self, seed, batch):
        m = init_model(ModelConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32, seed=seed))
        wrap_lora(m, r=3, alpha=5, seed=seed)
        randomize_b(m, seed)
        ids = np.random.default_rng(seed).integers(0, 256, (4, 12))
        mask = np.ones((4, 12), bool)
        np.testing.assert_allclose(merge_lora(m).forward(ids, mask).data, m.forward(ids, mask).data, atol=1e-9, rtol=0)

    def test_unit_scale(self, tiny_model):
        wrap_lora(tiny_model, r=8, alpha=8)
        randomize_b(tiny_model, 1)
        merged = merge_lora(tiny_model)
        p = "layers.0.attn.wq"
        ad = tiny_model.adapters[p]
        np.testing.assert_allclose(merged.params[p].data, tiny_model.params[p].data + ad.a.data @ ad.b.data, atol=1e-15)


class TestFreezing:
    def test_freeze_all_but_last_two(self):
        m = init_model(preset("micro"))
        freeze_below(m, m.cfg.n_layers - 2)
        expected = {
            p for p in m.params
            if fnmatch.fnmatch(p, "layers.[23].*") or p.startswith(("ln_f", "head"))
        }
        assert trainable(m) == expected

    def test_freeze_nothing(self, tiny_model):
        before = trainable(tiny_model)
        freeze_layers(tiny_model, [])
        assert trainable(tiny_model) == before

    def test_freeze_everything(self, tiny_model):
        with pytest.raises(ConfigError, match="nothing to train"):
            freeze_layers(tiny_model, lambda p: True)

    def test_freeze_below_range(self, tiny_model):
        with pytest.raises(ConfigError):
            freeze_below(tiny_model, 3)

    def test_frozen_bitwise_stable(self, tiny_model, small_pairs):
        freeze_below(tiny_model, 1)
        frozen = {p.path: p.tensor.data.copy() for p in tiny_model.named_parameters() if not p.trainable}
        live = {p.path: p.tensor.data.copy() for p in tiny_model.named_parameters() if p.trainable}
        cfg = TrainConfig(epochs=1, batch_size=8, base_lr=1e-2, seed=0)
        strategy = StrategyConfig("adaptive", freeze_below_layer=1)
        run_training(tiny_model, strategy, small_pairs.train, small_pairs, cfg)  # 80 / 8 = 10 steps
        for p, t in tiny_model.params.items():
            if p in frozen:
                np.testing.assert_array_equal(t.data, frozen[p])
        assert any(not np.array_equal(tiny_model.params[p].data, v) for p, v in live.items())


class TestParamGroups:
    def test_default_single_group(self, tiny_model):
        groups = build_param_groups(tiny_model)
        assert len(groups) == 1 and groups[0].lr_multiplier == 1.0
        assert set(groups[0].paths) == trainable(tiny_model)

    def test_partition(self):
        m = init_model(preset("micro"))
        freeze_below(m, 2)
        groups = build_param_groups(m, {"head": 1.0, "layers.2-3": 0.1})
        paths = [p for g in groups for p in g.paths]
        assert len(paths) == len(set(paths))
        assert set(paths) == trainable(m)
        mult = {g.name: g.lr_multiplier for g in groups}
        assert mult["head"] == 1.0 and mult["layers.2-3"] == 0.1
        # the final norm is not covered explicitly and lands in the default group
        assert mult["default"] == 1.0

    def test_zero_multiplier(self, tiny_model):
        with pytest.raises(ConfigError, match="freeze"):
            build_param_groups(tiny_model, {"head": 0.0})

    def test_overlap(self, tiny_model):
        with pytest.raises(ConfigError, match="both"):
            build_param_groups(tiny_model, {"layers.0": 0.5, "layers.*.attn.*": 0.1})

    def test_frozen_excluded(self, tiny_model):
        freeze_layers(tiny_model, "embed")
        paths = {p for g in build_param_groups(tiny_model) for p in g.paths}
        assert not any(p.startswith("embed") for p in paths)


class TestStrategies:
    def test_lora_settings_only_for_lora(self):
        with pytest.raises(ConfigError):
            StrategyConfig("vanilla", lora=LoraSettings())

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            StrategyConfig("prefix_tuning")

    def test_label(self):
        assert StrategyConfig("lora", lora={"r": 4}).label == "lora_r4"
        assert StrategyConfig("pbft").label == "pbft"

    def test_adaptive_defaults(self):
        m = init_model(preset("micro"))
        groups = apply_strategy(m, StrategyConfig("adaptive"))
        assert {g.name: g.lr_multiplier for g in groups} == {"head": 1.0, "layers.2-3": 0.1, "default": 1.0}

    def test_vanilla_trains_everything(self, tiny_model):
        apply_strategy(tiny_model, StrategyConfig("vanilla"))
        assert parameter_count(tiny_model, True) == parameter_count(tiny_model)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_through_adapters(seed):
    cfg = ModelConfig(vocab_size=11, max_seq_len=4, d_model=8, n_heads=2, n_layers=1, d_ff=16, seed=seed)
    m = wrap_lora(init_model(cfg), r=2, alpha=4, dropout_p=0.0, seed=seed)
    rng = np.random.default_rng(seed)
    # at init scale the B gradients are ~1e-8 and central differences drown in round-off
    for ad in m.adapters.values():
        ad.a.data = rng.normal(0.0, 0.3, ad.a.shape)
        ad.b.data = rng.normal(0.0, 0.3, ad.b.shape)
    ids, mask = rng.integers(0, 11, (2, 4)), np.ones((2, 4), bool)
    for ad in m.adapters.values():
        for t in (ad.a, ad.b):
            err = T.finite_diff_check(lambda _x: T.cross_entropy(m.forward(ids, mask), [0, 1]), t)
            assert err < 1e-4, ad.target_path


def test_trainable_fraction_monotonic_in_rank():
    total = parameter_count(init_model(preset("mini")))
    counts = []
    for r in (1, 2, 4, 8, 64):
        m = wrap_lora(init_model(preset("mini")), r=r)
        counts.append(parameter_count(m, True))
        gain = sum(r * sum(m.params[p].shape) for p in m.adapters)
        assert counts[-1] == gain + 128 * 2 + 2
    fractions = [c / total for c in counts]
    assert fractions == sorted(fractions) and len(set(fractions)) == 5
