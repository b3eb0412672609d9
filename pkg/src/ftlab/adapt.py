"""Strategy mechanics: LoRA wrapping and merging, layer freezing, and
per-group learning-rate multipliers."""

from __future__ import annotations

import fnmatch
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import Model
from .tensor import Tensor

PathPredicate = Callable[[str], bool]

DEFAULT_LORA_TARGETS = ("layers.*.attn.w*", "layers.*.ff.w*")
_RANGE = re.compile(r"^layers\.(\d+)-(\d+)$")

STRATEGY_KINDS = ("vanilla", "pbft", "adaptive", "lora", "context_distill", "few_shot_distill")


def selector_matches(selector: str, path: str) -> bool:
    """``layers.2-3`` selects blocks 2..3; glob characters use fnmatch;
    anything else is a dotted prefix (``head`` matches ``head.w``)."""
    m = _RANGE.match(selector)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        parts = path.split(".")
        return len(parts) > 1 and parts[0] == "layers" and parts[1].isdigit() and lo <= int(parts[1]) <= hi
    if any(c in selector for c in "*?["):
        return fnmatch.fnmatchcase(path, selector)
    return path == selector or path.startswith(selector + ".")


def as_predicate(spec: PathPredicate | str | Iterable[str]) -> PathPredicate:
    if callable(spec):
        return spec
    selectors = [spec] if isinstance(spec, str) else list(spec)
    return lambda path: any(selector_matches(s, path) for s in selectors)


# -- LoRA --------------------------------------------------------------------
@dataclass
class LoraAdapter:
    """Low-rank update for a dense weight W [m x n]: delta W = scale * A @ B,
    with A [m x r] and B [r x n]. ``scale`` is alpha / r, or alpha itself when
    ``raw_alpha`` is set."""

    a: Tensor
    b: Tensor
    rank: int
    alpha: float
    dropout_p: float
    target_path: str
    raw_alpha: bool = False

    @property
    def scale(self) -> float:
        return self.alpha if self.raw_alpha else self.alpha / self.rank

    def delta(self, x: Tensor, train: bool, rng) -> Tensor:
        xd = T.dropout(x, self.dropout_p, rng, train)
        return ((xd @ self.a) @ self.b) * self.scale

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.a.data @ self.b.data)


def wrap_lora(
    model: Model,
    targets: PathPredicate | str | Iterable[str] = DEFAULT_LORA_TARGETS,
    r: int = 8,
    alpha: float = 8.0,
    dropout_p: float = 0.1,
    seed: int = 0,
    raw_alpha: bool = False,
    keep_trainable: PathPredicate | str | Iterable[str] = ("head",),
) -> Model:
    """Attach adapters in place and return ``model``.

    Every base parameter is frozen except those matched by ``keep_trainable``
    (the classification head by default); A ~ N(0, 0.02), B = 0.
    """
    match = as_predicate(targets)
    keep = as_predicate(keep_trainable)
    paths = [p for p in model.params if match(p) and p not in model.adapters]
    if not paths:
        raise ConfigError("lora: no parameters matched the target selectors")
    if r < 1:
        raise ConfigError(f"lora.r must be positive, got {r}")
    if alpha <= 0:
        raise ConfigError(f"lora.alpha must be positive, got {alpha}")
    if not 0.0 <= dropout_p < 1.0:
        raise ConfigError(f"lora.dropout must be in [0, 1), got {dropout_p}")
    for p in paths:
        w = model.params[p]
        if w.ndim != 2:
            raise ConfigError(f"lora: target {p} is not a 2-D weight")
        if r >= min(w.shape):
            raise ConfigError(f"lora.r={r} violates r < min(m, n) for {p} with shape {w.shape}")

    rng = np.random.default_rng(seed)
    for p in paths:
        m, n = model.params[p].shape
        model.adapters[p] = LoraAdapter(
            a=Tensor(rng.normal(0.0, 0.02, size=(m, r)), requires_grad=True),
            b=Tensor(np.zeros((r, n)), requires_grad=True),
            rank=r, alpha=float(alpha), dropout_p=float(dropout_p),
            target_path=p, raw_alpha=raw_alpha,
        )
    for p, t in model.params.items():
        t.requires_grad = bool(keep(p)) and p not in model.adapters
    return model


def merge_lora(model: Model) -> Model:
    """Copy of ``model`` with every adapter folded into its base weight."""
    merged = Model(model.cfg, {p: Tensor(t.data.copy(), t.requires_grad) for p, t in model.params.items()})
    for p, adapter in model.adapters.items():
        merged.params[p].data = model.params[p].data + adapter.delta_weight()
    return merged


# -- freezing and groups -------------------------------------------------------
def freeze_layers(model: Model, predicate: PathPredicate | str | Iterable[str]) -> None:
    match = as_predicate(predicate)
    to_freeze = [p for p in model.named_parameters() if p.trainable and match(p.path)]
    remaining = sum(1 for p in model.named_parameters() if p.trainable) - len(to_freeze)
    if remaining == 0:
        raise ConfigError("freezing these layers leaves nothing to train")
    for p in to_freeze:
        p.tensor.requires_grad = False


def freeze_below(model: Model, layer: int) -> None:
    """Freeze the embeddings and blocks ``0..layer-1``."""
    if not 0 <= layer <= model.cfg.n_layers:
        raise ConfigError(f"freeze_below_layer must be in [0, {model.cfg.n_layers}], got {layer}")
    selectors = ["embed"] + ([f"layers.0-{layer - 1}"] if layer > 0 else [])
    freeze_layers(model, selectors)


@dataclass
class ParamGroup:
    paths: list[str]
    lr_multiplier: float = 1.0
    name: str = "default"


def build_param_groups(model: Model, multipliers: Mapping[str, float] | None = None) -> list[ParamGroup]:
    """Partition trainable parameters by selector. Unmatched trainables go to
    a default group with multiplier 1.0."""
    trainable = [p.path for p in model.named_parameters() if p.trainable]
    owner: dict[str, str] = {}
    groups: list[ParamGroup] = []
    for selector, mult in (multipliers or {}).items():
        mult = float(mult)
        if mult == 0.0:
            raise ConfigError(f"lr multiplier for {selector!r} is 0; freeze those layers instead")
        if mult < 0.0:
            raise ConfigError(f"lr multiplier for {selector!r} must be positive, got {mult}")
        paths = [p for p in trainable if selector_matches(selector, p.removesuffix(".lora_a").removesuffix(".lora_b"))]
        for p in paths:
            if p in owner:
                raise ConfigError(f"parameter {p} matched by both {owner[p]!r} and {selector!r}")
            owner[p] = selector
        if paths:
            groups.append(ParamGroup(paths, mult, selector))
    rest = [p for p in trainable if p not in owner]
    if rest:
        groups.append(ParamGroup(rest, 1.0, "default"))
    return groups


# -- strategies --------------------------------------------------------------
@dataclass
class LoraSettings:
    r: int = 8
    alpha: float = 8.0
    dropout: float = 0.1
    raw_alpha: bool = False
    targets: list[str] = field(default_factory=lambda: list(DEFAULT_LORA_TARGETS))


@dataclass
class StrategyConfig:
    kind: str = "vanilla"
    pattern: str | None = None
    lora: LoraSettings | None = None
    freeze_below_layer: int | None = None
    lr_multipliers: dict[str, float] | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"strategy.kind must be one of {STRATEGY_KINDS}, got {self.kind!r}")
        if isinstance(self.lora, Mapping):
            self.lora = LoraSettings(**self.lora)
        if self.kind == "lora" and self.lora is None:
            self.lora = LoraSettings()
        if self.kind != "lora" and self.lora is not None:
            raise ConfigError(f"strategy.lora only applies to kind 'lora', not {self.kind!r}")
        if self.kind != "adaptive" and (self.freeze_below_layer is not None or self.lr_multipliers):
            raise ConfigError("strategy.freeze_below_layer / lr_multipliers only apply to kind 'adaptive'")
        if self.pattern is not None and self.kind not in ("pbft", "context_distill", "few_shot_distill"):
            raise ConfigError(f"strategy.pattern does not apply to kind {self.kind!r}")

    @property
    def label(self) -> str:
        return f"lora_r{self.lora.r}" if self.kind == "lora" else self.kind

    @property
    def is_distill(self) -> bool:
        return self.kind in ("context_distill", "few_shot_distill")

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_adaptive(strategy: StrategyConfig, n_layers: int) -> tuple[int, dict[str, float]]:
    """Defaults: train only the last two blocks (plus final norm and head),
    head at the full rate and the blocks at a tenth of it."""
    k = strategy.freeze_below_layer if strategy.freeze_below_layer is not None else max(n_layers - 2, 0)
    mults = strategy.lr_multipliers
    if mults is None:
        mults = {"head": 1.0}
        if k < n_layers:
            mults[f"layers.{k}-{n_layers - 1}"] = 0.1
    return k, dict(mults)


def apply_strategy(model: Model, strategy: StrategyConfig, seed: int = 0) -> list[ParamGroup]:
    """Wrap or freeze ``model`` in place for ``strategy``; return its optimizer groups."""
    if strategy.kind == "lora":
        s = strategy.lora
        wrap_lora(model, s.targets, s.r, s.alpha, s.dropout, seed, s.raw_alpha)
        return build_param_groups(model)
    if strategy.kind == "adaptive":
        k, mults = resolve_adaptive(strategy, model.cfg.n_layers)
        freeze_below(model, k)
        return build_param_groups(model, mults)
    return build_param_groups(model)
