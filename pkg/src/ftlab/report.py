"""Accuracy, seed aggregation, OOD delta tables and file output.

Numbers in csv and markdown are rendered with four decimals; json keeps
full precision, including the per-epoch curves.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ReportError

log = logging.getLogger(__name__)

TRIAL_COLUMNS = ["strategy", "model", "n", "seed", "acc_in", "acc_ood", "wall_time_s"]
CELL_COLUMNS = [
    "strategy", "model", "n", "n_trials",
    "mean_acc_in", "std_in", "mean_acc_ood", "std_ood", "single_trial",
]

DISPLAY_NAMES = {
    "vanilla": "Vanilla Fine Tuning",
    "pbft": "Pattern Based",
    "adaptive": "Adaptive Fine Tuning",
    "context_distill": "Context Distillation",
    "few_shot_distill": "Few Shot Context Distillation",
}


def display_name(label: str) -> str:
    if label.startswith("lora_r"):
        return f"LoRA r={label[len('lora_r'):]}"
    return DISPLAY_NAMES.get(label, label)


def fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.4f}"


def accuracy(logits, labels: Sequence[int]) -> float:
    """Fraction of rows whose argmax equals the label; ties go to class 0."""
    z = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != y.shape[0] or z.shape[0] == 0:
        raise ReportError(f"accuracy: need [b, 2] logits with b >= 1 labels, got {z.shape} and {y.shape}")
    pred = (z[:, 1] > z[:, 0]).astype(np.int64)
    return float((pred == y).mean())


@dataclass
class AggregateCell:
    strategy: str
    model: str
    n_per_class: int | None
    mean_acc_in: float | None
    mean_acc_ood: float | None
    std_in: float | None
    std_ood: float | None
    n_trials: int
    single_trial: bool = False


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        return mean, 0.0
    return mean, float(np.std(values, ddof=1))


def aggregate(results: Iterable) -> list[AggregateCell]:
    """Mean and sample (n-1) standard deviation of final accuracies per
    (strategy, model, n). Failed trials are ignored."""
    groups: dict[tuple, list] = {}
    for r in results:
        key = (r.strategy.label, r.model_name, r.n_per_class)
        groups.setdefault(key, [])
        if r.ok:
            groups[key].append(r)
    cells = []
    for (strategy, model, n), members in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] or 0)):
        if not members:
            log.warning("no successful trials for %s/%s/n=%s; skipped", strategy, model, n)
            continue
        mean_in, std_in = _mean_std([r.acc_in for r in members if r.acc_in is not None])
        mean_ood, std_ood = _mean_std([r.acc_ood for r in members if r.acc_ood is not None])
        cells.append(AggregateCell(
            strategy, model, n, mean_in, mean_ood, std_in, std_ood,
            n_trials=len(members), single_trial=len(members) == 1,
        ))
    return cells


@dataclass
class DeltaTable:
    reference: str
    model: str
    n_per_class: int | None
    rows: dict[str, float] = field(default_factory=dict)
    orientation: str = "reference - comparison"


def _find(cells: Sequence[AggregateCell], strategy: str, n, model: str | None) -> AggregateCell:
    hits = [c for c in cells if c.strategy == strategy and c.n_per_class == n and (model is None or c.model == model)]
    if not hits:
        where = f"model={model}, " if model else ""
        raise ReportError(f"no aggregate cell for strategy {strategy!r} ({where}n={n})")
    if len(hits) > 1:
        raise ReportError(f"strategy {strategy!r} at n={n} exists for several models; name one")
    return hits[0]


def delta_table(
    cells: Sequence[AggregateCell],
    reference: str,
    n: int | None,
    comparisons: Sequence[str] | None = None,
    model: str | None = None,
) -> DeltaTable:
    """OOD delta = mean_ood(reference) - mean_ood(comparison); positive means
    the reference strategy generalizes better."""
    ref = _find(cells, reference, n, model)
    if comparisons is None:
        comparisons = [c.strategy for c in cells if c.model == ref.model and c.n_per_class == n]
    table = DeltaTable(reference, ref.model, n)
    for name in comparisons:
        other = _find(cells, name, n, ref.model)
        if ref.mean_acc_ood is None or other.mean_acc_ood is None:
            raise ReportError(f"no OOD accuracy for {reference!r} or {name!r} at n={n}")
        table.rows[name] = ref.mean_acc_ood - other.mean_acc_ood
    return table


# -- markdown ---------------------------------------------------------------
def _md_table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] * len(header)) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines)


def render_delta_grid(tables: Sequence[DeltaTable], title: str | None = None, corner: str = "Method",
                      column_names: Sequence[str] | None = None) -> str:
    """Comparison strategies as rows, one column per reference table."""
    if not tables:
        raise ReportError("nothing to render")
    row_keys: list[str] = []
    for t in tables:
        row_keys += [k for k in t.rows if k not in row_keys]
    header = [corner] + list(column_names or [display_name(t.reference) for t in tables])
    body = [[display_name(k)] + [fmt(t.rows.get(k)) for t in tables] for k in row_keys]
    out = _md_table(header, body)
    return f"### {title}\n\n{out}\n" if title else out + "\n"


BASELINES = ("vanilla", "pbft")


def comparison_tables(cells: Sequence[AggregateCell], n: int, models: Sequence[str] | None = None,
                      strict: bool = False) -> str:
    """The four comparison tables at one few-shot size:

    1. OOD accuracy of vanilla FT and PBFT per model;
    2. adaptive FT minus each baseline;
    3. LoRA (one column per rank) minus each baseline;
    4. few-shot context distillation minus each baseline.

    The adaptive and distillation grids use the first model, the LoRA grid
    the first model with LoRA cells. Missing strategies skip their table
    unless ``strict``.
    """
    at_n = [c for c in cells if c.n_per_class == n]
    models = list(models or dict.fromkeys(c.model for c in at_n))
    parts: list[str] = []

    def attempt(fn):
        try:
            parts.append(fn())
        except ReportError as exc:
            if strict:
                raise
            log.info("table skipped: %s", exc)

    def table1():
        if not models:
            raise ReportError(f"no cells at n={n}")
        rows = []
        for strat in BASELINES:
            rows.append([display_name(strat)] + [fmt(_find(at_n, strat, n, m).mean_acc_ood) for m in models])
        body = _md_table(["Method/Model"] + models, rows)
        return f"### OOD accuracy comparison b/w Vanilla and PBFT (N={n})\n\n{body}\n"

    def grid(reference: str, title: str):
        t = delta_table(at_n, reference, n, BASELINES, models[0] if models else None)
        return render_delta_grid([t], f"{title} (N={n}, model={t.model})")

    def table3():
        lora = [c for c in at_n if c.strategy.startswith("lora_r")]
        if not lora:
            raise ReportError(f"no LoRA cells at n={n}")
        # the first model that has LoRA cells (rank 64 needs d_model > 64)
        model = next(m for m in models + [c.model for c in lora] if any(c.model == m for c in lora))
        ranks = sorted({int(c.strategy[len("lora_r"):]) for c in lora if c.model == model})
        tables = [delta_table(at_n, f"lora_r{r}", n, BASELINES, model) for r in ranks]
        return render_delta_grid(tables, f"OOD delta b/w LoRA and base FT (N={n}, model={tables[0].model})",
                                 corner="Method/Rank", column_names=[str(r) for r in ranks])

    attempt(table1)
    attempt(lambda: grid("adaptive", "OOD delta b/w adaptive and base FT"))
    attempt(table3)
    attempt(lambda: grid("few_shot_distill", "OOD delta b/w few shot context distillation and base FT"))
    return "\n".join(parts)


def render_cells_markdown(cells: Sequence[AggregateCell]) -> str:
    rows = [[display_name(c.strategy), c.model, str(c.n_per_class), str(c.n_trials),
             fmt(c.mean_acc_in), fmt(c.std_in), fmt(c.mean_acc_ood), fmt(c.std_ood)] for c in cells]
    return _md_table(["Method", "model", "N", "trials", "acc_in", "std_in", "acc_ood", "std_ood"], rows) + "\n"


# -- csv / json -------------------------------------------------------------
def cells_to_csv(cells: Sequence[AggregateCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CELL_COLUMNS)
    for c in cells:
        w.writerow([
            c.strategy, c.model, "" if c.n_per_class is None else c.n_per_class, c.n_trials,
            fmt(c.mean_acc_in), fmt(c.std_in), fmt(c.mean_acc_ood), fmt(c.std_ood), int(c.single_trial),
        ])
    return buf.getvalue()


def read_cells_csv(path: str | Path) -> list[AggregateCell]:
    def num(s: str) -> float | None:
        return float(s) if s != "" else None

    with open(path, newline="") as fh:
        return [
            AggregateCell(
                strategy=row["strategy"], model=row["model"],
                n_per_class=int(row["n"]) if row["n"] else None,
                mean_acc_in=num(row["mean_acc_in"]), mean_acc_ood=num(row["mean_acc_ood"]),
                std_in=num(row["std_in"]), std_ood=num(row["std_ood"]),
                n_trials=int(row["n_trials"]), single_trial=row["single_trial"] == "1",
            )
            for row in csv.DictReader(fh)
        ]


def trials_to_csv(results: Sequence, include_wall_time: bool = False) -> str:
    """Per-trial rows. ``wall_time_s`` is left blank unless requested so
    that reruns of the same configuration produce identical bytes."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_COLUMNS)
    for r in results:
        w.writerow([
            r.strategy.label, r.model_name, "" if r.n_per_class is None else r.n_per_class, r.seed,
            fmt(r.acc_in), fmt(r.acc_ood), f"{r.wall_time:.3f}" if include_wall_time else "",
        ])
    return buf.getvalue()


def to_json_document(cells: Sequence[AggregateCell], tables: Sequence[DeltaTable], results: Sequence = ()) -> dict:
    return {
        "cells": [asdict(c) for c in cells],
        "tables": [asdict(t) for t in tables],
        "trials": [r.to_dict() for r in results],
    }


def emit(cells: Sequence[AggregateCell], tables: Sequence[DeltaTable], format: str, path: str | Path,
         results: Sequence = ()) -> None:
    """Write aggregate cells and delta tables as csv, json or markdown."""
    if format == "csv":
        text = cells_to_csv(cells)
    elif format == "json":
        text = json.dumps(to_json_document(cells, tables, results), indent=2, sort_keys=True) + "\n"
    elif format == "markdown":
        text = "\n".join(
            render_delta_grid([t], f"OOD delta vs {display_name(t.reference)} (N={t.n_per_class}, model={t.model})")
            for t in tables
        )
    else:
        raise ReportError(f"unknown format {format!r}; use csv, json or markdown")
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def load_results(path: str | Path) -> list:
    """Trials from a json document (``results.json``) or a run directory."""
    from .train import TrialResult

    p = Path(path)
    if p.is_dir():
        p = p / "results.json"
    try:
        doc = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read results from {p}: {exc}") from exc
    return [TrialResult.from_dict(t) for t in doc.get("trials", [])]
