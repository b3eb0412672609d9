"""Micro decoder-only transformer with a two-way classification head.

Pre-norm blocks (layernorm -> causal multi-head attention -> residual,
layernorm -> GELU MLP -> residual), learned positional embeddings and a final
layernorm. The head reads the hidden state at the last non-pad position.

Weights use the ``x @ W`` convention, so a dense weight has shape
``[in_features, out_features]``.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, InputError
from .tensor import Tensor

PAD_ID = 256
BOS_ID = 257
BYTE_VOCAB_SIZE = 258

CHECKPOINT_MAGIC = b"FTLB1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = BYTE_VOCAB_SIZE
    max_seq_len: int = 128
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 256
    n_classes: int = 2
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        for field in ("vocab_size", "max_seq_len", "d_model", "n_heads", "n_layers", "d_ff"):
            if getattr(self, field) < 1:
                raise ConfigError(f"model.{field} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"model.d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.n_classes != 2:
            raise ConfigError("model.n_classes must be 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def with_seed(self, seed: int) -> ModelConfig:
        return replace(self, seed=int(seed))


PRESETS: dict[str, ModelConfig] = {
    "micro": ModelConfig(n_layers=4, d_model=64, n_heads=4, d_ff=256, name="micro"),
    "mini": ModelConfig(n_layers=8, d_model=128, n_heads=8, d_ff=512, name="mini"),
}


def preset(name: str, seed: int = 0) -> ModelConfig:
    try:
        return PRESETS[name].with_seed(seed)
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None


class NamedParameter(NamedTuple):
    path: str
    tensor: Tensor
    trainable: bool


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Path -> shape for every base parameter, in initialization order."""
    d, ff = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tokens": (cfg.vocab_size, d),
        "embed.positions": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w{name}"] = (d, d)
            shapes[f"{p}.attn.b{name}"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ff.w1"] = (d, ff)
        shapes[f"{p}.ff.b1"] = (ff,)
        shapes[f"{p}.ff.w2"] = (ff, d)
        shapes[f"{p}.ff.b2"] = (d,)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["head.w"] = (d, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form size of an unadapted model."""
    d, ff = cfg.d_model, cfg.d_ff
    per_block = (4 * d * d + 4 * d) + (2 * d * ff + d + ff) + 4 * d
    return (
        cfg.vocab_size * d
        + cfg.max_seq_len * d
        + cfg.n_layers * per_block
        + 2 * d
        + d * cfg.n_classes
        + cfg.n_classes
    )


class Model:
    """Parameters plus the forward pass. Adapters, when present, live in
    ``adapters`` keyed by the path of the dense weight they wrap."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], adapters: dict | None = None):
        self.cfg = cfg
        self.params = params
        self.adapters = adapters if adapters is not None else {}

    def named_parameters(self) -> Iterator[NamedParameter]:
        for path, t in self.params.items():
            yield NamedParameter(path, t, t.requires_grad)
        for target, adapter in self.adapters.items():
            yield NamedParameter(f"{target}.lora_a", adapter.a, adapter.a.requires_grad)
            yield NamedParameter(f"{target}.lora_b", adapter.b, adapter.b.requires_grad)

    def trainable_parameters(self) -> list[NamedParameter]:
        return [p for p in self.named_parameters() if p.trainable]

    def zero_grads(self) -> None:
        for p in self.named_parameters():
            p.tensor.grad = None

    def clone(self) -> Model:
        return copy.deepcopy(self)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.path: p.tensor.data.copy() for p in self.named_parameters()}

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([p.tensor.data.reshape(-1) for p in self.named_parameters()])

    # -- forward ----------------------------------------------------------
    def linear(self, x: Tensor, path: str, train: bool, rng) -> Tensor:
        w = self.params[path]
        bias = self.params[_bias_path(path)]
        out = x @ w + bias
        adapter = self.adapters.get(path)
        if adapter is not None:
            out = out + adapter.delta(x, train, rng)
        return out

    def encode(
        self,
        token_ids: np.ndarray,
        pad_mask: np.ndarray,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
        capture: list | None = None,
    ) -> Tensor:
        """Hidden states after the final layernorm, shape [b, T, d]."""
        cfg = self.cfg
        ids = np.asarray(token_ids, dtype=np.int64)
        mask = np.asarray(pad_mask, dtype=bool)
        if ids.ndim != 2 or mask.shape != ids.shape:
            raise InputError(f"token_ids and pad_mask must be matching [b, T] arrays, got {ids.shape} / {mask.shape}")
        b, t = ids.shape
        if t > cfg.max_seq_len:
            raise InputError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if (ids < 0).any() or (ids >= cfg.vocab_size).any():
            raise InputError(f"token id out of range [0, {cfg.vocab_size})")
        if not mask.any(axis=1).all():
            raise InputError("every row needs at least one non-pad token")

        h = T.embedding(self.params["embed.tokens"], ids)
        pos = T.embedding(self.params["embed.positions"], np.arange(t))
        h = h + pos

        causal = np.tril(np.ones((t, t), dtype=bool))
        attn_mask = causal[None, None, :, :] & mask[:, None, None, :]
        nh, hd = cfg.n_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(hd)

        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            a = T.layer_norm(h, self.params[f"{p}.ln1.gain"], self.params[f"{p}.ln1.bias"])
            q = self._heads(self.linear(a, f"{p}.attn.wq", train_mode, rng), b, t, nh, hd)
            k = self._heads(self.linear(a, f"{p}.attn.wk", train_mode, rng), b, t, nh, hd)
            v = self._heads(self.linear(a, f"{p}.attn.wv", train_mode, rng), b, t, nh, hd)
            scores = (q @ T.transpose(k)) * scale
            probs = T.softmax(scores, attn_mask)
            ctx = T.transpose(probs @ v, (0, 2, 1, 3)).reshape(b, t, cfg.d_model)
            h = h + self.linear(ctx, f"{p}.attn.wo", train_mode, rng)

            m = T.layer_norm(h, self.params[f"{p}.ln2.gain"], self.params[f"{p}.ln2.bias"])
            m = T.gelu(self.linear(m, f"{p}.ff.w1", train_mode, rng))
            h = h + self.linear(m, f"{p}.ff.w2", train_mode, rng)
            if capture is not None:
                capture.append(h)

        return T.layer_norm(h, self.params["ln_f.gain"], self.params["ln_f.bias"])

    @staticmethod
    def _heads(x: Tensor, b: int, t: int, nh: int, hd: int) -> Tensor:
        return T.transpose(x.reshape(b, t, nh, hd), (0, 2, 1, 3))

    def forward(self, token_ids, pad_mask, train_mode: bool = False, rng=None) -> Tensor:
        h = self.encode(token_ids, pad_mask, train_mode, rng)
        last = last_positions(pad_mask)
        pooled = T.select_positions(h, last)
        return self.linear(pooled, "head.w", train_mode, rng)


def _bias_path(weight_path: str) -> str:
    prefix, name = weight_path.rsplit(".", 1)
    if not name.startswith("w"):
        raise ContractError(f"{weight_path} is not a dense weight")
    return f"{prefix}.b{name[1:]}"


def last_positions(pad_mask: np.ndarray) -> np.ndarray:
    """Index of the last non-pad token in each row."""
    mask = np.asarray(pad_mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise InputError("every row needs at least one non-pad token")
    t = mask.shape[1]
    return t - 1 - np.argmax(mask[:, ::-1], axis=1)


def init_model(cfg: ModelConfig) -> Model:
    """Weights ~ N(0, 0.02) from ``cfg.seed``; biases 0; layernorm gains 1."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Tensor] = {}
    for path, shape in parameter_shapes(cfg).items():
        leaf = path.rsplit(".", 1)[1]
        if leaf == "gain":
            data = np.ones(shape)
        elif leaf == "bias" or (leaf.startswith("b") and len(shape) == 1):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[path] = Tensor(data, requires_grad=True)
    return Model(cfg, params)


def forward_classify(model: Model, token_ids, pad_mask, train_mode: bool = False, rng=None) -> Tensor:
    return model.forward(token_ids, pad_mask, train_mode, rng)


def parameter_count(model: Model, trainable_only: bool = False) -> int:
    return sum(p.tensor.size for p in model.named_parameters() if p.trainable or not trainable_only)


# -- tokenizer ------------------------------------------------------------
def encode_text(text: str, max_len: int) -> list[int]:
    """BOS followed by UTF-8 bytes, truncated to ``max_len`` tokens."""
    return ([BOS_ID] + list(text.encode("utf-8")))[:max_len]


def encode_batch(texts: Sequence[str], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-padded ids [b, T] and a boolean mask (True = real token)."""
    if not texts:
        raise InputError("encode_batch needs at least one text")
    rows = [encode_text(t, max_len) for t in texts]
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


# -- checkpoint -----------------------------------------------------------
def save_checkpoint(model: Model, path: str | Path) -> None:
    """Write config + named tensors.

    Layout (little-endian)::

        b"FTLB1"
        u32  header length, then a UTF-8 JSON header
             {"config": {...}, "tensors": [{"path", "shape", "trainable"}, ...]}
        per tensor, in header order: u64 byte length, raw float64 data

    Adapters are merged into their base weights before writing.
    """
    if model.adapters:
        from .adapt import merge_lora

        model = merge_lora(model)
    entries = [
        {"path": p, "shape": list(t.shape), "trainable": bool(t.requires_grad)}
        for p, t in model.params.items()
    ]
    header = json.dumps({"config": asdict(model.cfg), "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for t in model.params.values():
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not an FTLB1 checkpoint")
    try:
        cfg, params = _parse_checkpoint(blob, path)
    except (struct.error, ValueError, KeyError) as exc:
        raise DataError(f"{path}: corrupt checkpoint: {exc}") from exc
    expected = parameter_shapes(cfg)
    missing = set(expected) - set(params)
    if missing:
        raise DataError(f"{path}: missing tensors {sorted(missing)}")
    return Model(cfg, {k: params[k] for k in expected})


def _parse_checkpoint(blob: bytes, path: Path) -> tuple[ModelConfig, dict[str, Tensor]]:
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    header = json.loads(blob[pos : pos + hlen])
    pos += hlen
    try:
        cfg = ModelConfig(**header["config"])
    except TypeError as exc:
        raise DataError(f"{path}: bad config in header: {exc}") from exc
    expected = parameter_shapes(cfg)
    params: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        p, shape = entry["path"], tuple(entry["shape"])
        if expected.get(p) != shape:
            raise DataError(f"{path}: tensor {p} has shape {shape}, config expects {expected.get(p)}")
        (nbytes,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if nbytes != 8 * int(np.prod(shape)):
            raise DataError(f"{path}: tensor {p} byte length {nbytes} does not match shape {shape}")
        data = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
        pos += nbytes
        params[p] = Tensor(data.astype(np.float64), requires_grad=bool(entry["trainable"]))
    return cfg, params
