"""Built-in oracle suite behind ``ftlab selftest``.

Each check returns a short detail string and raises ``AssertionError`` on
failure. Everything runs on tiny shapes and finishes in a few seconds.
"""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import tensor as T
from .adapt import merge_lora, wrap_lora
from .distill import DistillConfig, combined_loss, kl_divergence
from .model import ModelConfig, init_model
from .tensor import Tensor
from .train import OptimizerState, TrainConfig, adamw_step, lr_at_step, warmup_steps

PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4


def _tiny_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(vocab_size=11, max_seq_len=4, d_model=8, n_heads=2, n_layers=1, d_ff=16, seed=seed)


def _tiny_batch(rng: np.random.Generator):
    ids = rng.integers(0, 11, size=(3, 4))
    mask = np.ones((3, 4), dtype=bool)
    mask[1, 3:] = False
    mask[2, 2:] = False
    return ids, mask, rng.integers(0, 2, size=3)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """Scalar-valued functions of one input, one per primitive op."""
    other = Tensor(rng.normal(size=(3, 4)))
    row = Tensor(rng.normal(size=(4,)))
    w = Tensor(rng.normal(size=(4, 5)))
    gain, bias = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    mask = rng.random((3, 4)) > 0.3
    mask[:, 0] = True
    weights = Tensor(rng.normal(size=(3, 4)))
    ids = rng.integers(0, 6, size=(2, 3))
    x34 = rng.normal(size=(3, 4))

    fixed: dict[tuple, np.ndarray] = {}

    def weighted(y: Tensor) -> Tensor:
        # a fixed random projection per output shape makes the output scalar
        if y.shape not in fixed:
            fixed[y.shape] = np.random.default_rng(sum(y.shape) * 31 + y.ndim).normal(size=y.shape)
        return T.tsum(y * Tensor(fixed[y.shape]))

    return {
        "add": (lambda x: weighted(x + other + row), x34),
        "sub": (lambda x: weighted(other - x - row), x34),
        "mul": (lambda x: weighted(x * other * row), x34),
        "scale": (lambda x: weighted(-x / 3.0), x34),
        "exp": (lambda x: weighted(T.exp(x)), x34),
        "log": (lambda x: weighted(T.log(x * x + 0.5)), x34),
        "tanh": (lambda x: weighted(T.tanh(x)), x34),
        "gelu": (lambda x: weighted(T.gelu(x)), x34),
        "reshape": (lambda x: weighted(x.reshape(2, 6) * Tensor(np.arange(12.0).reshape(2, 6))), x34),
        "transpose": (lambda x: weighted(T.transpose(x)), x34),
        "sum": (lambda x: weighted(T.tsum(x * x, axis=1)), x34),
        "mean": (lambda x: weighted(T.mean(x * x, axis=0, keepdims=True)), x34),
        "matmul": (lambda x: weighted(x @ w), x34),
        "batched_matmul": (lambda x: weighted(x @ T.transpose(x)), rng.normal(size=(2, 3, 4))),
        "layer_norm": (lambda x: weighted(T.layer_norm(x, gain, bias)), x34),
        "softmax": (lambda x: T.tsum(T.softmax(x) * weights), x34),
        "masked_softmax": (lambda x: T.tsum(T.softmax(x, mask) * weights), x34),
        "log_softmax": (lambda x: T.tsum(T.log_softmax(x) * weights), x34),
        "cross_entropy": (lambda x: T.cross_entropy(x, [0, 3, 1]), x34),
        "embedding": (lambda t: weighted(T.embedding(t, ids)), rng.normal(size=(6, 4))),
        "select_positions": (lambda x: weighted(T.select_positions(x, [2, 0])), rng.normal(size=(2, 3, 4))),
    }


def check_primitives(seeds: range = range(10)) -> str:
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (f, x0) in primitive_cases(rng).items():
            err = T.finite_diff_check(f, Tensor(np.array(x0, dtype=np.float64)))
            assert err < PRIMITIVE_TOL, f"{name} (seed {seed}): rel. error {err:.2e}"
            worst = max(worst, err)
    return f"worst rel. error {worst:.2e}"


def check_model_gradients(seeds: range = range(10)) -> str:
    """Full loss of a one-layer model against finite differences.

    The key bias has an identically zero gradient (softmax is invariant to
    adding a per-query constant), so its relative error is 0/0 noise; it is
    checked for an absolute value near zero instead.
    """
    worst = 0.0
    for seed in seeds:
        model = init_model(_tiny_config(seed))
        rng = np.random.default_rng(seed)
        for p in model.named_parameters():
            p.tensor.data = p.tensor.data + rng.normal(0.0, 0.5, p.tensor.data.shape)
        ids, mask, labels = _tiny_batch(rng)

        def loss() -> Tensor:
            return T.cross_entropy(model.forward(ids, mask), labels)

        for p in model.named_parameters():
            if p.path.endswith("attn.bk"):
                loss().backward()
                assert np.abs(p.tensor.grad).max() < 1e-9, "key bias gradient should vanish"
                model.zero_grads()
                continue
            err = T.finite_diff_check(lambda _x: loss(), p.tensor)
            assert err < MODEL_TOL, f"{p.path} (seed {seed}): rel. error {err:.2e}"
            worst = max(worst, err)
    return f"worst rel. error {worst:.2e}"


def check_lora_identities() -> str:
    cfg = _tiny_config(3)
    base = init_model(cfg)
    ids, mask, _ = _tiny_batch(np.random.default_rng(0))
    before = base.forward(ids, mask).data
    wrapped = wrap_lora(base.clone(), r=2, alpha=8, seed=1)
    gap = np.abs(wrapped.forward(ids, mask).data - before).max()
    assert gap <= 1e-12, f"zero-init wrap changed logits by {gap:.2e}"
    rng = np.random.default_rng(2)
    for ad in wrapped.adapters.values():
        ad.b.data = rng.normal(0.0, 0.1, ad.b.data.shape)
    merged = merge_lora(wrapped)
    gap_merge = np.abs(merged.forward(ids, mask).data - wrapped.forward(ids, mask).data).max()
    assert gap_merge <= 1e-9, f"merge changed logits by {gap_merge:.2e}"
    for path, ad in wrapped.adapters.items():
        m, n = wrapped.params[path].shape
        assert ad.a.data.size + ad.b.data.size == 2 * (m + n), f"{path}: wrong adapter size"
    return f"wrap gap {gap:.1e}, merge gap {gap_merge:.1e}"


def check_kl() -> str:
    def kl(s, t):
        return kl_divergence(T.log_softmax(Tensor(np.log(np.array([s])))), np.array([t])).item()

    assert abs(kl([0.5, 0.5], [0.5, 0.5])) < 1e-12
    assert abs(kl([0.5, 0.5], [1.0, 0.0]) - math.log(2)) < 1e-12
    assert abs(kl([0.5, 0.5], [0.75, 0.25]) - 0.1308) < 1e-4
    logits = Tensor(np.array([[1.0, -1.0], [0.2, 0.4]]))
    ce = T.cross_entropy(logits, [0, 1]).item()
    only_ce = combined_loss(logits, np.array([[0.5, 0.5], [0.5, 0.5]]), [0, 1], DistillConfig(0.0, 1.0))
    assert only_ce.item() == ce, "w_distill=0 must reduce to cross-entropy exactly"
    return "0, ln 2, 0.1308 and the zero-weight reduction hold"


def check_adamw(draws: int = 100) -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(draws):
        theta, g = rng.normal(), rng.normal()
        lr, wd = 10 ** rng.uniform(-5, -1), rng.uniform(0, 0.1)
        cfg = TrainConfig(weight_decay=wd)
        p = Tensor(np.array([theta]), requires_grad=True)
        p.grad = np.array([g])
        adamw_step([("p", p, 1.0)], OptimizerState(), lr, cfg)
        m_hat, v_hat = g, g * g  # bias-corrected first step
        expected = theta - lr * (m_hat / (math.sqrt(v_hat) + cfg.adam_eps) + wd * theta)
        worst = max(worst, abs(p.data[0] - expected))
    assert worst <= 1e-12, f"AdamW off by {worst:.2e}"
    return f"max deviation {worst:.1e} over {draws} draws"


def check_schedule() -> str:
    cfg = TrainConfig(base_lr=1e-3, warmup_ratio=0.1)
    total = 100
    w = warmup_steps(total, cfg)
    assert lr_at_step(0, total, cfg) == 0.0
    assert lr_at_step(w, total, cfg) == cfg.base_lr
    assert lr_at_step(total, total, cfg) == 0.0
    return f"warmup {w} of {total} steps"


CHECKS: dict[str, Callable[[], str]] = {
    "primitive gradients": check_primitives,
    "tiny-model gradients": check_model_gradients,
    "lora identities": check_lora_identities,
    "kl oracle": check_kl,
    "adamw closed form": check_adamw,
    "lr schedule": check_schedule,
}


def run(echo: Callable[[str], None] = print) -> bool:
    ok = True
    for name, check in CHECKS.items():
        started = time.perf_counter()
        try:
            detail = check()
            status = "PASS"
        except AssertionError as exc:
            detail, status, ok = str(exc), "FAIL", False
        echo(f"{status} {name}: {detail} ({time.perf_counter() - started:.1f}s)")
    return ok
