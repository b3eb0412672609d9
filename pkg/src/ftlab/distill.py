"""Context distillation: teacher probabilities and the weighted
KL + cross-entropy objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, Example, FewShotSpec, Pattern, apply_pattern, sample_few_shot, trivial_pattern
from .errors import ConfigError, ContractError
from .model import Model, encode_batch, load_checkpoint
from .tensor import Tensor

TEACHER_MODES = ("checkpoint", "patterned_self")


@dataclass
class DistillConfig:
    w_distill: float = 0.5
    w_class: float = 0.5
    temperature: float = 1.0
    teacher: str = "checkpoint"
    teacher_checkpoint: str | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"distill.temperature must be positive, got {self.temperature}")
        if self.w_distill < 0 or self.w_class < 0:
            raise ConfigError("distill.w_distill and distill.w_class must be non-negative")
        if self.teacher not in TEACHER_MODES:
            raise ConfigError(f"distill.teacher must be one of {TEACHER_MODES}, got {self.teacher!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_distribution(p: np.ndarray, what: str) -> None:
    if (p < 0).any() or not np.allclose(p.sum(axis=-1), 1.0, rtol=0.0, atol=1e-9):
        raise ContractError(f"{what} rows must be probability distributions")


def kl_divergence(student_log_probs: Tensor, teacher_probs: Tensor | np.ndarray) -> Tensor:
    """Batch mean of KL(teacher || student) = sum_j t_j (log t_j - s_j),
    with 0 * log 0 taken as 0. Gradients flow only into the student."""
    t = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, dtype=np.float64)
    if t.shape != student_log_probs.shape or t.ndim != 2:
        raise ContractError(f"kl_divergence: shapes {t.shape} and {student_log_probs.shape} must be equal [b, c]")
    _check_distribution(t, "teacher")
    _check_distribution(np.exp(student_log_probs.data), "student (exp of log-probs)")
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy_term = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0).sum(axis=1)
    cross = T.tsum(student_log_probs * Tensor(t), axis=1)
    return T.mean(Tensor(entropy_term) - cross)


def combine(kl, ce, cfg: DistillConfig):
    """Weighted sum; a zero weight drops its term entirely."""
    terms = []
    if cfg.w_distill != 0.0:
        terms.append(kl * cfg.w_distill)
    if cfg.w_class != 0.0:
        terms.append(ce * cfg.w_class)
    if not terms:
        raise ConfigError("distill.w_distill and distill.w_class cannot both be zero")
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def loss_components(student_logits: Tensor, teacher_probs, labels, cfg: DistillConfig):
    """(kl, ce); a component whose weight is zero is returned as None."""
    kl = ce = None
    if cfg.w_distill != 0.0:
        scaled = student_logits if cfg.temperature == 1.0 else student_logits * (1.0 / cfg.temperature)
        kl = kl_divergence(T.log_softmax(scaled), teacher_probs)
    if cfg.w_class != 0.0:
        ce = T.cross_entropy(student_logits, labels)
    return kl, ce


def combined_loss(student_logits: Tensor, teacher_probs, labels: Sequence[int], cfg: DistillConfig) -> Tensor:
    kl, ce = loss_components(student_logits, teacher_probs, labels, cfg)
    return combine(kl, ce, cfg)


def teacher_inputs(
    examples: Sequence[Example], mode: str, pattern: Pattern | None, task
) -> list[str]:
    """Strings the teacher reads. In ``patterned_self`` mode the pattern
    supplies the context the student never sees."""
    if mode == "patterned_self":
        if pattern is None:
            raise ConfigError("patterned_self teacher needs a pattern")
        return [apply_pattern(ex, pattern) for ex in examples]
    return student_inputs(examples, task)


def student_inputs(examples: Sequence[Example], task) -> list[str]:
    raw = trivial_pattern(task)
    return [apply_pattern(ex, raw) for ex in examples]


def probs_from_logits(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def teacher_signal(
    teacher: Model,
    batch: Sequence[Example],
    cfg: DistillConfig,
    pattern: Pattern | None = None,
    task=None,
    batch_size: int = 64,
) -> Tensor:
    """Teacher probabilities [b, 2] at the configured temperature (eval mode)."""
    if task is None:
        from .data import Task

        task = Task.PAIR if batch and batch[0].text_b is not None else Task.SINGLE
    texts = teacher_inputs(batch, cfg.teacher, pattern, task)
    rows = []
    for i in range(0, len(texts), batch_size):
        ids, mask = encode_batch(texts[i : i + batch_size], teacher.cfg.max_seq_len)
        with T.no_grad():
            rows.append(teacher.forward(ids, mask, train_mode=False).data)
    return Tensor(probs_from_logits(np.concatenate(rows), cfg.temperature))


def resolve_teacher(cfg: DistillConfig, student: Model | None = None) -> Model:
    """Load (checkpoint mode) or copy (patterned_self without a checkpoint)
    the teacher, with every parameter frozen."""
    if cfg.teacher_checkpoint:
        path = Path(cfg.teacher_checkpoint)
        if not path.exists():
            raise ConfigError(f"distill.teacher_checkpoint: {path} does not exist")
        teacher = load_checkpoint(path)
    elif cfg.teacher == "checkpoint":
        raise ConfigError("distill.teacher is 'checkpoint' but distill.teacher_checkpoint is not set")
    elif student is None:
        raise ConfigError("patterned_self teacher without a checkpoint needs the student model")
    else:
        teacher = student.clone()
    for p in teacher.named_parameters():
        p.tensor.requires_grad = False
        p.tensor.grad = None
    return teacher


def run_distillation(
    student: Model,
    teacher: Model,
    data: Dataset,
    few_shot: FewShotSpec | None,
    train_cfg,
    distill_cfg: DistillConfig | None = None,
    pattern: str | None = None,
    model_name: str | None = None,
):
    """Train ``student`` against ``teacher`` on the full training split, or
    on a few-shot episode when ``few_shot`` is given."""
    from .adapt import StrategyConfig
    from .train import run_training

    distill_cfg = distill_cfg or DistillConfig()
    kind = "few_shot_distill" if few_shot is not None else "context_distill"
    strategy = StrategyConfig(kind=kind, pattern=pattern)
    episode = sample_few_shot(data.train, few_shot) if few_shot is not None else list(data.train)
    for p in teacher.named_parameters():
        p.tensor.requires_grad = False
    return run_training(
        student, strategy, episode, data, train_cfg,
        teacher=teacher, distill_cfg=distill_cfg,
        model_name=model_name,
        n_per_class=few_shot.n_per_class if few_shot is not None else None,
    )
