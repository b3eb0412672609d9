import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftlab import train as train_mod
from ftlab.adapt import StrategyConfig, apply_strategy
from ftlab.errors import ConfigError, ContractError, TrainingError
from ftlab.tensor import Tensor
from ftlab.train import (
    OptimizerState,
    ResultSink,
    SweepSpec,
    TrainConfig,
    TrialResult,
    adamw_step,
    derive_seed,
    lr_at_step,
    plan_sweep,
    run_sweep,
    run_training,
    warmup_steps,
)


def scalar_param(theta, grad):
    p = Tensor(np.array([float(theta)]), requires_grad=True)
    p.grad = np.array([float(grad)])
    return p


def adamw_oracle(theta, g, lr, wd, eps=1e-8):
    # first step: m_hat = g, v_hat = g^2
    return theta - lr * (g / (abs(g) + eps) + wd * theta)


class TestAdamW:
    def test_single_step(self):
        p = scalar_param(1.0, 1.0)
        adamw_step([("p", p, 1.0)], OptimizerState(), 0.1, TrainConfig())
        assert p.data[0] == pytest.approx(0.9, abs=1e-8)
        assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)

    def test_zero_grad_no_decay(self):
        p = scalar_param(3.0, 0.0)
        adamw_step([("p", p, 1.0)], OptimizerState(), 0.1, TrainConfig(weight_decay=0.0))
        assert p.data[0] == 3.0

    def test_zero_grad_pure_shrink(self):
        p = scalar_param(3.0, 0.0)
        adamw_step([("p", p, 1.0)], OptimizerState(), 0.1, TrainConfig(weight_decay=0.01))
        assert p.data[0] == pytest.approx(3.0 * (1 - 0.1 * 0.01), abs=1e-15)

    def test_hundred_draws(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            theta, g = rng.normal(), rng.normal()
            lr, wd = 10 ** rng.uniform(-5, -1), rng.uniform(0, 0.1)
            p = scalar_param(theta, g)
            adamw_step([("p", p, 1.0)], OptimizerState(), lr, TrainConfig(weight_decay=wd))
            assert abs(p.data[0] - adamw_oracle(theta, g, lr, wd)) <= 1e-12

    def test_second_step_bias_correction(self):
        cfg = TrainConfig()
        p, state = scalar_param(0.0, 1.0), OptimizerState()
        adamw_step([("p", p, 1.0)], state, 0.1, cfg)
        p.grad = np.array([-1.0])
        adamw_step([("p", p, 1.0)], state, 0.1, cfg)
        m = (0.9 * 0.1 * 1 + 0.1 * -1) / (1 - 0.9**2)
        v = (0.999 * 0.001 * 1 + 0.001 * 1) / (1 - 0.999**2)
        assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8) - 0.1 * m / (math.sqrt(v) + 1e-8), abs=1e-14)

    def test_multiplier(self):
        a, b = scalar_param(1.0, 1.0), scalar_param(1.0, 1.0)
        adamw_step([("a", a, 1.0), ("b", b, 0.1)], OptimizerState(), 0.1, TrainConfig())
        assert (1 - b.data[0]) == pytest.approx(0.1 * (1 - a.data[0]), rel=1e-12)

    def test_missing_grad(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ContractError, match="p"):
            adamw_step([("p", p, 1.0)], OptimizerState(), 0.1, TrainConfig())


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        cfg = TrainConfig(base_lr=1e-5, warmup_ratio=0.1)
        assert warmup_steps(100, cfg) == 10
        assert lr_at_step(0, 100, cfg) == 0.0
        assert lr_at_step(5, 100, cfg) == pytest.approx(5e-6, abs=1e-20)
        assert lr_at_step(10, 100, cfg) == 1e-5
        assert lr_at_step(100, 100, cfg) == 0.0

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            lr_at_step(101, 100, TrainConfig())

    def test_warmup_rounding(self):
        assert warmup_steps(30, TrainConfig(warmup_ratio=0.1)) == 3
        assert warmup_steps(31, TrainConfig(warmup_ratio=0.1)) == 4

    def test_constant_schedule(self):
        cfg = TrainConfig(base_lr=1.0, warmup_ratio=0.1, schedule="constant")
        assert lr_at_step(100, 100, cfg) == 1.0

    @given(st.integers(2, 2000), st.floats(0.0, 0.5), st.floats(1e-6, 1.0))
    def test_piecewise_linear(self, total, ratio, base):
        cfg = TrainConfig(base_lr=base, warmup_ratio=ratio)
        lrs = [lr_at_step(t, total, cfg) for t in range(total + 1)]
        w = warmup_steps(total, cfg)
        assert lrs[-1] == 0.0
        if w > 0:
            assert lrs[0] == 0.0
        assert max(lrs) == pytest.approx(base, rel=1e-12)
        if 0 < w < total:
            assert lrs[w] == base
        diffs = np.diff(lrs)
        up, down = diffs[:w], diffs[w:]
        assert np.all(up >= 0) and np.all(down <= 1e-18)
        if len(up):
            np.testing.assert_allclose(up, up[0], rtol=1e-9)
        if len(down):
            np.testing.assert_allclose(down, down[0], rtol=1e-9)

    @pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"warmup_ratio": 1.0}, {"schedule": "cosine"}, {"max_grad_norm": 0}])
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


def count_steps(monkeypatch):
    calls = []
    real = train_mod.adamw_step

    def counting(params, state, lr_t, cfg):
        calls.append(lr_t)
        real(params, state, lr_t, cfg)

    monkeypatch.setattr(train_mod, "adamw_step", counting)
    return calls


class TestRunTraining:
    def test_step_count(self, monkeypatch, tiny_model, small_pairs):
        calls = count_steps(monkeypatch)
        cfg = TrainConfig(epochs=40, batch_size=32, base_lr=1e-3)
        res = run_training(tiny_model, StrategyConfig(), small_pairs.train[:32], small_pairs, cfg)
        assert len(calls) == 40
        assert len(res.epochs) == 40
        assert calls[0] == 0.0 and max(calls) == 1e-3

    def test_partial_last_batch(self, monkeypatch, tiny_model, small_pairs):
        calls = count_steps(monkeypatch)
        run_training(tiny_model, StrategyConfig(), small_pairs.train[:33], small_pairs, TrainConfig(epochs=3))
        assert len(calls) == 3 * 2

    def test_bitwise_determinism(self, tiny_model, small_pairs, quick_cfg):
        a, b = tiny_model.clone(), tiny_model.clone()
        ra = run_training(a, StrategyConfig(), small_pairs.train, small_pairs, quick_cfg)
        rb = run_training(b, StrategyConfig(), small_pairs.train, small_pairs, quick_cfg)
        np.testing.assert_array_equal(a.parameter_vector(), b.parameter_vector())
        assert [e.train_loss for e in ra.epochs] == [e.train_loss for e in rb.epochs]

    def test_seed_changes_trajectory(self, tiny_model, small_pairs, quick_cfg):
        a, b = tiny_model.clone(), tiny_model.clone()
        run_training(a, StrategyConfig(), small_pairs.train, small_pairs, quick_cfg)
        run_training(b, StrategyConfig(), small_pairs.train, small_pairs, TrainConfig(epochs=2, batch_size=8, base_lr=1e-3, seed=12))
        assert not np.array_equal(a.parameter_vector(), b.parameter_vector())

    def test_frozen_untouched_under_lora(self, tiny_model, small_pairs, quick_cfg):
        strategy = StrategyConfig("lora", lora={"r": 2})
        apply_strategy(tiny_model, strategy, seed=0)
        snap = {p: t.data.copy() for p, t in tiny_model.params.items() if not t.requires_grad}
        run_training(tiny_model, strategy, small_pairs.train, small_pairs, quick_cfg)
        for p, before in snap.items():
            np.testing.assert_array_equal(tiny_model.params[p].data, before)
        assert any(ad.b.data.any() for ad in tiny_model.adapters.values())

    def test_records(self, tiny_model, small_pairs, quick_cfg):
        seen = []
        res = run_training(tiny_model, StrategyConfig("pbft"), small_pairs.train, small_pairs, quick_cfg, on_epoch=seen.append)
        assert [e.epoch for e in res.epochs] == [1, 2] and seen == res.epochs
        assert res.acc_in == res.epochs[-1].acc_in and 0.0 <= res.acc_ood <= 1.0
        assert res.episode_counts == (40, 40)

    def test_non_finite_reports_epoch_and_step(self, tiny_model, small_pairs, quick_cfg):
        def poison(record):
            tiny_model.params["head.w"].data = np.full_like(tiny_model.params["head.w"].data, 1e308)

        with pytest.raises(TrainingError) as info:
            run_training(tiny_model, StrategyConfig(), small_pairs.train, small_pairs, quick_cfg, on_epoch=poison)
        assert (info.value.epoch, info.value.step) == (2, 10)
        assert "epoch 2" in str(info.value) and "step 10" in str(info.value)

    def test_empty_episode(self, tiny_model, small_pairs, quick_cfg):
        with pytest.raises(ContractError):
            run_training(tiny_model, StrategyConfig(), [], small_pairs, quick_cfg)

    def test_clipping_runs(self, tiny_model, small_pairs):
        cfg = TrainConfig(epochs=1, batch_size=16, base_lr=1e-3, max_grad_norm=0.01)
        res = run_training(tiny_model, StrategyConfig(), small_pairs.train, small_pairs, cfg)
        assert math.isfinite(res.epochs[0].train_loss)


class TestSeeds:
    def test_derive_seed_deterministic_and_distinct(self):
        assert derive_seed(0, 2, 3) == derive_seed(0, 2, 3)
        seeds = {derive_seed(0, n, i) for n in (2, 16) for i in range(10)}
        assert len(seeds) == 20
        assert all(0 <= s < 2**63 for s in seeds)

    def test_plan_same_master(self):
        spec = SweepSpec(n_values=[2, 4], trials_per_n=3)
        assert plan_sweep(spec, 7) == plan_sweep(spec, 7)
        assert plan_sweep(spec, 7) != plan_sweep(spec, 8)

    def test_default_shape(self):
        plans = plan_sweep(SweepSpec(), 0)
        assert len(plans) == 50
        assert sorted({p.n_per_class for p in plans}) == [2, 16, 32, 64, 128]

    @pytest.mark.parametrize("kwargs", [{"trials_per_n": 0}, {"n_values": []}, {"n_values": [0]}])
    def test_bad_spec(self, kwargs):
        with pytest.raises(ConfigError):
            SweepSpec(**kwargs)


QUICK = TrainConfig(epochs=1, batch_size=8, base_lr=1e-3, seed=5)


class TestSweep:
    def test_counts(self, tiny_preset, small_pairs):
        spec = SweepSpec(n_values=[2, 4], trials_per_n=3, model_config_name=tiny_preset)
        results = run_sweep(spec, small_pairs, QUICK)
        assert len(results) == 6
        assert [(r.n_per_class, r.trial_index) for r in results] == [(n, i) for n in (2, 4) for i in range(3)]
        assert all(r.ok and sum(r.episode_counts) == 2 * r.n_per_class for r in results)

    def test_single(self, tiny_preset, small_pairs):
        spec = SweepSpec(n_values=[2], trials_per_n=1, model_config_name=tiny_preset)
        assert len(run_sweep(spec, small_pairs, QUICK)) == 1

    def test_same_master_same_episodes(self, tiny_preset, small_pairs, monkeypatch):
        episodes = []
        real = train_mod.run_training

        def spy(model, strategy, episode, *args, **kwargs):
            episodes.append(tuple(e.text_a + str(e.text_b) for e in episode))
            return real(model, strategy, episode, *args, **kwargs)

        monkeypatch.setattr(train_mod, "run_training", spy)
        spec = SweepSpec(n_values=[2, 4], trials_per_n=2, model_config_name=tiny_preset)
        run_sweep(spec, small_pairs, QUICK)
        first = list(episodes)
        episodes.clear()
        run_sweep(spec, small_pairs, QUICK)
        assert first == episodes
        assert len(set(first)) == 4

    def test_failure_recorded_sweep_continues(self, tiny_preset, small_pairs, monkeypatch):
        real = train_mod.run_training

        def flaky(model, strategy, episode, data, cfg, **kwargs):
            if kwargs.get("n_per_class") == 2:
                raise TrainingError("boom", 1, 0)
            return real(model, strategy, episode, data, cfg, **kwargs)

        monkeypatch.setattr(train_mod, "run_training", flaky)
        spec = SweepSpec(n_values=[2, 4], trials_per_n=2, model_config_name=tiny_preset)
        results = run_sweep(spec, small_pairs, QUICK)
        assert len(results) == 4
        assert [r.ok for r in results] == [False, False, True, True]
        assert "boom" in results[0].error and results[0].acc_in is None

    def test_jobs_match_serial(self, tiny_preset, small_pairs):
        spec = SweepSpec(n_values=[2, 4], trials_per_n=2, model_config_name=tiny_preset)
        serial = run_sweep(spec, small_pairs, QUICK, jobs=1)
        threaded = run_sweep(spec, small_pairs, QUICK, jobs=2)
        for a, b in zip(serial, threaded):
            assert (a.acc_in, a.acc_ood, a.seed) == (b.acc_in, b.acc_ood, b.seed)
            assert [e.train_loss for e in a.epochs] == [e.train_loss for e in b.epochs]

    def test_streams_results(self, tiny_preset, small_pairs):
        streamed = []
        spec = SweepSpec(n_values=[2], trials_per_n=2, model_config_name=tiny_preset)
        run_sweep(spec, small_pairs, QUICK, sink=ResultSink(streamed.append))
        assert len(streamed) == 2

    def test_dataset_too_small(self, tiny_preset, small_pairs):
        spec = SweepSpec(n_values=[64], trials_per_n=1, model_config_name=tiny_preset)
        with pytest.raises(ConfigError, match="class 0"):
            run_sweep(spec, small_pairs, QUICK)

    def test_result_round_trip(self, tiny_preset, small_pairs):
        spec = SweepSpec(n_values=[2], trials_per_n=1, strategy=StrategyConfig("lora", lora={"r": 2}),
                         model_config_name=tiny_preset)
        (res,) = run_sweep(spec, small_pairs, QUICK)
        assert TrialResult.from_dict(res.to_dict()) == res
