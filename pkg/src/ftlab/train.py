"""AdamW, the warmup/decay schedule, the training loop and the seeded
few-shot sweep runner.

Seed scheme: every random stream is a ``numpy.random.SeedSequence`` with the
master seed as entropy and a spawn key naming the stream. A sweep trial uses
``derive_seed(master, n_per_class, trial_index)`` as its own master; inside a
trial the streams are ``DATA`` (episode sampling), ``INIT`` (model weights),
``SHUFFLE`` (batch order), ``DROPOUT`` and ``LORA`` (adapter init). Holding one
stream fixed while varying the others only needs a different key.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .adapt import ParamGroup, StrategyConfig, apply_strategy, build_param_groups, merge_lora, resolve_adaptive
from .data import DEFAULT_PATTERN, Dataset, Example, FewShotSpec, Task, apply_pattern, get_pattern, sample_few_shot, trivial_pattern
from .distill import DistillConfig, combined_loss, resolve_teacher, teacher_signal
from .errors import ConfigError, ContractError, FTLabError, NonFiniteError, TrainingError
from .model import Model, encode_batch, init_model, preset
from .report import accuracy

log = logging.getLogger(__name__)

DATA, INIT, SHUFFLE, DROPOUT, LORA = range(5)


def derive_seed(master: int, *key: int) -> int:
    """Deterministic 63-bit child seed of ``master`` for the given key path."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in key))
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32 | int(lo)) & (2**63 - 1)


def derive_rng(master: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in key)))


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    base_lr: float = 1e-5
    weight_decay: float = 0.0
    warmup_ratio: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float | None = None
    seed: int = 0
    schedule: str = "linear"
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"train.warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.schedule not in ("linear", "constant"):
            raise ConfigError(f"train.schedule must be 'linear' or 'constant', got {self.schedule!r}")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ConfigError("train.max_grad_norm must be positive when set")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    # the epsilon keeps 0.1 * 30 from rounding up to 4
    return math.ceil(cfg.warmup_ratio * total_steps - 1e-9)


def lr_at_step(t: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> base_lr, then linear decay to 0 at ``total_steps``
    (or constant after warmup with ``schedule='constant'``)."""
    if not 0 <= t <= total_steps:
        raise ContractError(f"step {t} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, cfg)
    if t < warm:
        return cfg.base_lr * (t / warm)
    if cfg.schedule == "constant":
        return cfg.base_lr
    if total_steps == warm:
        return 0.0
    return cfg.base_lr * ((total_steps - t) / (total_steps - warm))


def adamw_step(
    params: Sequence[tuple[str, T.Tensor, float]],
    state: OptimizerState,
    lr_t: float,
    cfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update over ``(path, tensor,
    lr_multiplier)`` triples, in place."""
    for path, tensor, _ in params:
        if tensor.grad is None:
            raise ContractError(f"adamw_step: {path} has no gradient")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for path, tensor, mult in params:
        g = tensor.grad
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(tensor.data)
            state.v[path] = np.zeros_like(tensor.data)
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        lr = lr_t * mult
        tensor.data -= lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * tensor.data)


def clip_grad_norm(tensors: Sequence[T.Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float((t.grad * t.grad).sum()) for t in tensors))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in tensors:
            t.grad = t.grad * scale
    return norm


# -- results -------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    acc_in: float | None
    acc_ood: float | None


@dataclass
class TrialResult:
    strategy: StrategyConfig
    model_name: str
    n_per_class: int | None
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    acc_in: float | None = None
    acc_ood: float | None = None
    wall_time: float = 0.0
    episode_counts: tuple[int, int] = (0, 0)
    trial_index: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.to_dict()
        d["strategy_label"] = self.strategy.label
        d["episode_counts"] = list(self.episode_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrialResult:
        d = dict(d)
        d.pop("strategy_label", None)
        d["strategy"] = StrategyConfig(**d["strategy"])
        d["epochs"] = [EpochRecord(**e) for e in d.get("epochs", [])]
        d["episode_counts"] = tuple(d.get("episode_counts", (0, 0)))
        return cls(**d)


# -- training ------------------------------------------------------------------
def strategy_pattern(strategy: StrategyConfig, task: Task):
    """Pattern the student reads for ``strategy``."""
    if strategy.kind == "pbft":
        return get_pattern(strategy.pattern or DEFAULT_PATTERN[task])
    return trivial_pattern(task)


def param_groups_for(model: Model, strategy: StrategyConfig) -> list[ParamGroup]:
    if strategy.kind == "adaptive":
        _, mults = resolve_adaptive(strategy, model.cfg.n_layers)
        return build_param_groups(model, mults)
    return build_param_groups(model)


def predict_logits(model: Model, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
    eval_model = merge_lora(model) if model.adapters else model
    rows = []
    for i in range(0, len(texts), batch_size):
        ids, mask = encode_batch(texts[i : i + batch_size], model.cfg.max_seq_len)
        with T.no_grad():
            rows.append(eval_model.forward(ids, mask, train_mode=False).data)
    return np.concatenate(rows) if rows else np.zeros((0, 2))


def evaluate(model: Model, examples: Sequence[Example], pattern, batch_size: int = 64) -> float | None:
    if not examples:
        return None
    texts = [apply_pattern(ex, pattern) for ex in examples]
    return accuracy(predict_logits(model, texts, batch_size), [ex.label for ex in examples])


def run_training(
    model: Model,
    strategy: StrategyConfig,
    episode: Sequence[Example],
    data: Dataset,
    cfg: TrainConfig,
    groups: list[ParamGroup] | None = None,
    teacher: Model | None = None,
    distill_cfg: DistillConfig | None = None,
    model_name: str | None = None,
    n_per_class: int | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrialResult:
    """Train ``model`` (strategy already applied) on ``episode`` and
    evaluate on ``data.eval_in`` / ``data.eval_ood`` after every epoch."""
    if not episode:
        raise ContractError("run_training needs a non-empty episode")
    started = time.perf_counter()
    task = data.task
    pattern = strategy_pattern(strategy, task)
    groups = groups if groups is not None else param_groups_for(model, strategy)
    by_path = {p.path: p.tensor for p in model.named_parameters()}
    flat_params = [(path, by_path[path], g.lr_multiplier) for g in groups for path in g.paths]
    if not flat_params:
        raise ConfigError("no trainable parameters")

    texts = [apply_pattern(ex, pattern) for ex in episode]
    labels = np.array([ex.label for ex in episode], dtype=np.int64)

    teacher_probs = None
    if strategy.is_distill:
        if teacher is None:
            raise ConfigError(f"strategy {strategy.kind!r} needs a teacher model")
        distill_cfg = distill_cfg or DistillConfig()
        teacher_pattern = get_pattern(strategy.pattern or DEFAULT_PATTERN[task])
        teacher_probs = teacher_signal(teacher, episode, distill_cfg, teacher_pattern, task, cfg.eval_batch_size).data

    n = len(episode)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    shuffle_rng = derive_rng(cfg.seed, SHUFFLE)
    dropout_rng = derive_rng(cfg.seed, DROPOUT)
    state = OptimizerState()
    eval_pattern = pattern

    result = TrialResult(
        strategy=strategy,
        model_name=model_name or model.cfg.name,
        n_per_class=n_per_class,
        seed=cfg.seed,
        episode_counts=(int((labels == 0).sum()), int((labels == 1).sum())),
    )
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                ids, mask = encode_batch([texts[i] for i in idx], model.cfg.max_seq_len)
                logits = model.forward(ids, mask, train_mode=True, rng=dropout_rng)
                if teacher_probs is not None:
                    loss = combined_loss(logits, teacher_probs[idx], labels[idx], distill_cfg)
                else:
                    loss = T.cross_entropy(logits, labels[idx])
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NonFiniteError("loss is not finite")
                loss.backward()
                if cfg.max_grad_norm is not None:
                    clip_grad_norm([t for _, t, _ in flat_params], cfg.max_grad_norm)
                adamw_step(flat_params, state, lr_at_step(step, total, cfg), cfg)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value during training: {exc}", epoch, step) from exc
            finally:
                model.zero_grads()
            losses.append(loss_value)
            step += 1
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            acc_in=evaluate(model, data.eval_in, eval_pattern, cfg.eval_batch_size),
            acc_ood=evaluate(model, data.eval_ood, eval_pattern, cfg.eval_batch_size),
        )
        result.epochs.append(record)
        if on_epoch is not None:
            on_epoch(record)

    result.acc_in = result.epochs[-1].acc_in
    result.acc_ood = result.epochs[-1].acc_ood
    result.wall_time = time.perf_counter() - started
    return result


# -- sweeps --------------------------------------------------------------------
@dataclass
class SweepSpec:
    n_values: list[int] = field(default_factory=lambda: [2, 16, 32, 64, 128])
    trials_per_n: int = 10
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    model_config_name: str = "micro"

    def __post_init__(self):
        if self.trials_per_n < 1:
            raise ConfigError(f"sweep.trials_per_n must be >= 1, got {self.trials_per_n}")
        if not self.n_values or any(int(n) < 1 for n in self.n_values):
            raise ConfigError("sweep.n_values must be a non-empty list of positive integers")


class ResultSink:
    """Thread-safe collector; ``results()`` orders by (n, trial index)."""

    def __init__(self, stream: Callable[[TrialResult], None] | None = None):
        self._lock = threading.Lock()
        self._items: list[TrialResult] = []
        self._stream = stream

    def append(self, result: TrialResult) -> None:
        with self._lock:
            self._items.append(result)
            if self._stream is not None:
                self._stream(result)

    def results(self) -> list[TrialResult]:
        with self._lock:
            return sorted(self._items, key=lambda r: (r.n_per_class or 0, r.trial_index))


@dataclass(frozen=True)
class TrialPlan:
    n_per_class: int
    trial_index: int
    trial_seed: int

    @property
    def data_seed(self) -> int:
        return derive_seed(self.trial_seed, DATA)

    @property
    def init_seed(self) -> int:
        return derive_seed(self.trial_seed, INIT)

    @property
    def lora_seed(self) -> int:
        return derive_seed(self.trial_seed, LORA)


def plan_sweep(spec: SweepSpec, master_seed: int) -> list[TrialPlan]:
    return [
        TrialPlan(int(n), i, derive_seed(master_seed, int(n), i))
        for n in spec.n_values
        for i in range(spec.trials_per_n)
    ]


def build_trial(
    plan: TrialPlan,
    spec: SweepSpec,
    dataset: Dataset,
    distill_cfg: DistillConfig | None = None,
    teacher: Model | None = None,
) -> tuple[Model, Model | None, list[Example]]:
    """Fresh student with the strategy applied, the teacher (distillation
    only) and the training episode. ``n_per_class == 0`` means the full
    training split."""
    strategy = spec.strategy
    if plan.n_per_class > 0:
        episode = sample_few_shot(dataset.train, FewShotSpec(plan.n_per_class, plan.data_seed))
    else:
        episode = list(dataset.train)
    student = init_model(preset(spec.model_config_name, plan.init_seed))
    if strategy.is_distill and teacher is None:
        teacher = resolve_teacher(distill_cfg or DistillConfig(), student)
    apply_strategy(student, strategy, plan.lora_seed)
    return student, teacher if strategy.is_distill else None, episode


def run_trial(
    plan: TrialPlan,
    spec: SweepSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    distill_cfg: DistillConfig | None = None,
    teacher: Model | None = None,
) -> TrialResult:
    """One sweep cell. Library errors are captured on the result rather
    than raised."""
    trial_cfg = TrainConfig(**{**asdict(cfg), "seed": plan.trial_seed})
    n = plan.n_per_class or None
    try:
        student, teacher, episode = build_trial(plan, spec, dataset, distill_cfg, teacher)
        result = run_training(
            student, spec.strategy, episode, dataset, trial_cfg,
            teacher=teacher, distill_cfg=distill_cfg,
            model_name=spec.model_config_name, n_per_class=n,
        )
    except FTLabError as exc:
        log.warning("trial n=%s #%d failed: %s", n, plan.trial_index, exc)
        result = TrialResult(spec.strategy, spec.model_config_name, n, plan.trial_seed, error=str(exc))
    result.trial_index = plan.trial_index
    return result


def run_sweep(
    spec: SweepSpec,
    dataset: Dataset,
    cfg: TrainConfig | None = None,
    distill_cfg: DistillConfig | None = None,
    sink: ResultSink | None = None,
    jobs: int = 1,
) -> list[TrialResult]:
    """For each n and trial: sample an episode, build a fresh model, apply
    the strategy, train and record. Failed trials are recorded with their
    error and the sweep carries on."""
    cfg = cfg or TrainConfig()
    sink = sink or ResultSink()
    largest = max(spec.n_values)
    for label in (0, 1):
        have = sum(1 for ex in dataset.train if ex.label == label)
        if have < largest:
            raise ConfigError(f"dataset has {have} training examples of class {label}; sweep needs {largest}")
    shared_teacher = None
    if spec.strategy.is_distill and (distill_cfg or DistillConfig()).teacher_checkpoint:
        shared_teacher = resolve_teacher(distill_cfg or DistillConfig())

    plans = plan_sweep(spec, cfg.seed)
    task = lambda plan: sink.append(run_trial(plan, spec, dataset, cfg, distill_cfg, shared_teacher))  # noqa: E731
    if jobs <= 1:
        for plan in plans:
            task(plan)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(task, plans))
    return sink.results()
