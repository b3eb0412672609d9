"""Layered experiment configuration: defaults <- JSON file <- overrides.

The JSON document has one object per section (``train``, ``strategy``,
``sweep``, ``distill``, ``data``) whose keys mirror the dataclass fields.
Override keys are dotted paths (``train.epochs``) or any unambiguous suffix
of one (``epochs``, ``lora.r``).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

from .adapt import LoraSettings, StrategyConfig
from .data import Dataset, Task, generate_synthetic, load_dataset, load_jsonl, load_tsv, split_by_domain
from .distill import DistillConfig
from .errors import ConfigError
from .train import SweepSpec, TrainConfig

SEED_ENV = "FTLAB_SEED"

DEFAULTS: dict[str, dict[str, Any]] = {
    "train": asdict(TrainConfig()),
    "strategy": {
        "kind": "vanilla",
        "pattern": None,
        "lora": asdict(LoraSettings()),
        "freeze_below_layer": None,
        "lr_multipliers": None,
    },
    "sweep": {
        "n_values": [2, 16, 32, 64, 128],
        "trials_per_n": 10,
        "model_config_name": "micro",
        "lora_ranks": None,
    },
    "distill": asdict(DistillConfig()),
    "data": {
        "source": "synthetic",
        "synthetic_task": "toy_entailment",
        "sizes": [1000, 200, 200],
        "seed": 0,
        "dir": None,
        "task_type": "sentence_pair",
        "train_path": None,
        "eval_in_path": None,
        "eval_ood_path": None,
        "label_map": None,
        "tsv_columns": None,
        "tsv_header": True,
    },
}

# values that are free-form objects rather than nested sections
_OPAQUE = {("strategy", "lr_multipliers"), ("data", "label_map"), ("data", "tsv_columns")}


def _flat_keys(tree: Mapping, prefix: tuple = ()) -> list[tuple[str, ...]]:
    keys = []
    for k, v in tree.items():
        path = prefix + (k,)
        if isinstance(v, Mapping) and path not in _OPAQUE:
            keys += _flat_keys(v, path)
        else:
            keys.append(path)
    return keys


VALID_KEYS = [".".join(k) for k in _flat_keys(DEFAULTS)]


def resolve_key(key: str) -> tuple[str, ...]:
    if key in VALID_KEYS:
        return tuple(key.split("."))
    hits = [k for k in VALID_KEYS if k.endswith("." + key)]
    if len(hits) == 1:
        return tuple(hits[0].split("."))
    if len(hits) > 1:
        raise ConfigError(f"config key {key!r} is ambiguous: {', '.join(hits)}")
    raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(VALID_KEYS)}")


def _merge(base: dict, update: Mapping, prefix: tuple = ()) -> None:
    for k, v in update.items():
        path = prefix + (k,)
        if k not in base:
            valid = ", ".join(".".join(prefix + (x,)) for x in base)
            raise ConfigError(f"unknown config key {'.'.join(path)!r}; valid keys here: {valid}")
        if isinstance(base[k], Mapping) and path not in _OPAQUE:
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {'.'.join(path)!r} must be an object")
            _merge(base[k], v, path)
        else:
            base[k] = v


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, _, value = item.partition("=")
    return key.strip(), parse_value(value.strip())


def bundled_config(name: str) -> Path | None:
    ref = resources.files("ftlab") / "configs" / name
    return Path(str(ref)) if ref.is_file() else None


@dataclass
class ResolvedConfig:
    raw: dict
    train: TrainConfig
    strategy: StrategyConfig
    sweep: SweepSpec
    distill: DistillConfig
    data: dict
    lora_ranks: list[int] | None

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def build(raw: dict) -> ResolvedConfig:
    try:
        train = TrainConfig(**raw["train"])
        s = raw["strategy"]
        kind = s["kind"]
        strategy = StrategyConfig(
            kind=kind,
            pattern=s["pattern"] if kind in ("pbft", "context_distill", "few_shot_distill") else None,
            lora=LoraSettings(**s["lora"]) if kind == "lora" else None,
            freeze_below_layer=s["freeze_below_layer"] if kind == "adaptive" else None,
            lr_multipliers=s["lr_multipliers"] if kind == "adaptive" else None,
        )
        sw = raw["sweep"]
        sweep = SweepSpec(
            n_values=[int(n) for n in sw["n_values"]],
            trials_per_n=int(sw["trials_per_n"]),
            strategy=strategy,
            model_config_name=sw["model_config_name"],
        )
        distill = DistillConfig(**raw["distill"])
    except TypeError as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    ranks = raw["sweep"]["lora_ranks"]
    return ResolvedConfig(raw, train, strategy, sweep, distill, raw["data"], [int(r) for r in ranks] if ranks else None)


def load_config(path: str | Path | None = None, overrides: Iterable[str | tuple[str, Any]] = ()) -> ResolvedConfig:
    """Defaults, then the file at ``path`` (or a bundled config of that
    name), then ``overrides``; ``FTLAB_SEED`` overrides the master seed."""
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            p = bundled_config(str(path)) or p
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            doc = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        doc.pop("_comment", None)
        _merge(raw, doc)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        *parents, leaf = resolve_key(key)
        node = raw
        for part in parents:
            node = node[part]
        node[leaf] = value
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        try:
            raw["train"]["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    return build(raw)


def load_data(data_cfg: Mapping) -> Dataset:
    """Build the dataset a config's ``data`` section describes."""
    source = data_cfg["source"]
    label_map = data_cfg.get("label_map")
    if source == "synthetic":
        return generate_synthetic(data_cfg["synthetic_task"], tuple(data_cfg["sizes"]), int(data_cfg["seed"]))
    if source == "dir":
        if not data_cfg.get("dir"):
            raise ConfigError("data.dir must be set when data.source is 'dir'")
        return load_dataset(data_cfg["dir"], label_map)
    if source in ("jsonl", "tsv"):
        task = Task(data_cfg["task_type"])
        if not data_cfg.get("train_path"):
            raise ConfigError(f"data.train_path must be set when data.source is {source!r}")

        def read(path_key: str):
            path = data_cfg.get(path_key)
            if not path:
                return []
            if source == "jsonl":
                return load_jsonl(path, task, label_map).examples
            columns = data_cfg.get("tsv_columns")
            if not columns:
                raise ConfigError("data.tsv_columns must map text_a/text_b/label to columns")
            return load_tsv(path, task, columns, label_map, bool(data_cfg.get("tsv_header", True))).examples

        train = read("train_path")
        eval_in, ood_from_in = split_by_domain(read("eval_in_path"))
        ood = list(ood_from_in) + list(read("eval_ood_path"))
        return Dataset(Path(data_cfg["train_path"]).stem, task, tuple(train), tuple(eval_in), tuple(ood))
    raise ConfigError(f"data.source must be synthetic, dir, jsonl or tsv, got {source!r}")
