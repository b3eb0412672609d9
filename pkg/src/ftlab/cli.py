"""``ftlab`` command line: gen-data, train, sweep, distill, report, selftest.

Exit codes: 0 success, 1 when any trial failed, 2 for configuration, data
or input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import subprocess
import sys
import time
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, report
from .adapt import LoraSettings, StrategyConfig, apply_strategy
from .config import ResolvedConfig, load_config, load_data
from .data import save_dataset
from .distill import resolve_teacher
from .errors import FTLabError, TrainingError
from .model import init_model, preset, save_checkpoint
from .train import ResultSink, SweepSpec, TrialResult, build_trial, plan_sweep, run_sweep, run_training

VERBS = ("gen-data", "train", "sweep", "distill", "report", "selftest")
EXIT_OK, EXIT_TRIAL_FAILED, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("ftlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="ftlab",
        description="Compare fine-tuning strategies on tiny transformers.",
        epilog="Any other --section.key VALUE pair is treated as a config override.",
    )
    p.add_argument("verb", choices=VERBS)
    p.add_argument("inputs", nargs="*", help="run directories or results.json files (report)")
    p.add_argument("--config", help="JSON config file, or the name of a bundled one")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--jobs", type=int, default=1, help="parallel trials (default 1)")
    p.add_argument("--out", help="run directory (default runs/<timestamp>-<verb>)")
    p.add_argument("--few-shot", type=int, metavar="N", help="examples per class")
    p.add_argument("--strategy", help="vanilla, pbft, adaptive, lora, context_distill or few_shot_distill")
    p.add_argument("--model", choices=("micro", "mini"))
    p.add_argument("--format", choices=("csv", "json", "markdown"), default="markdown")
    p.add_argument("--teacher", metavar="PATH", help="teacher checkpoint for distillation")
    p.add_argument("--save-checkpoint", metavar="PATH", help="write the trained model (train, distill)")
    p.add_argument("--wall-time", action="store_true", help="fill wall_time_s in trials.csv")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def split_extra(extra: Sequence[str]) -> list[str]:
    """Turn leftover ``--a.b VALUE`` / ``--a.b=VALUE`` tokens into overrides."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            out.append(key)
            i += 1
        elif i + 1 < len(extra):
            out.append(f"{key}={extra[i + 1]}")
            i += 2
        else:
            raise UsageError(f"option {tok} needs a value")
    return out


def _overrides(args) -> list[str]:
    items = list(args.set) + split_extra(args.extra)
    if args.strategy:
        items.append(f"strategy.kind={json.dumps(args.strategy)}")
    if args.model:
        items.append(f"sweep.model_config_name={json.dumps(args.model)}")
    if args.teacher:
        items.append(f"distill.teacher_checkpoint={json.dumps(args.teacher)}")
    return items


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=10, cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


class Run:
    """Output directory plus the manifest written when the command ends."""

    def __init__(self, verb: str, out: str | None, cfg: ResolvedConfig, argv: Sequence[str]):
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        self.dir = Path(out) if out else Path("runs") / f"{stamp}-{verb}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.verb, self.cfg, self.argv = verb, cfg, list(argv)
        self.started = time.perf_counter()
        self.seeds: list[dict] = []
        (self.dir / "config.json").write_text(cfg.to_json())

    def write_manifest(self, **extra) -> None:
        manifest = {
            "verb": self.verb,
            "argv": self.argv,
            "config": self.cfg.raw,
            "master_seed": self.cfg.train.seed,
            "trial_seeds": self.seeds,
            "git_describe": git_describe(),
            "wall_time_s": round(time.perf_counter() - self.started, 3),
            "versions": {"ftlab": __version__, "python": platform.python_version(), "numpy": np.__version__},
            **extra,
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


class Progress:
    """Prints one line per finished trial and streams it to trials.jsonl."""

    def __init__(self, total: int, path: Path):
        self.total, self.done = total, 0
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, r: TrialResult) -> None:
        self.done += 1
        n = "full" if r.n_per_class is None else r.n_per_class
        head = f"[{self.done}/{self.total}] {r.strategy.label} {r.model_name} n={n} trial={r.trial_index}"
        if r.ok:
            print(f"{head} acc_in={report.fmt(r.acc_in)} acc_ood={report.fmt(r.acc_ood)} {r.wall_time:.1f}s",
                  flush=True)
        else:
            print(f"{head} FAILED: {r.error}", flush=True)
        self.fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def write_results(run: Run, results: list[TrialResult], wall_time: bool, n_report: int | None) -> None:
    cells = report.aggregate(results)
    (run.dir / "trials.csv").write_text(report.trials_to_csv(results, include_wall_time=wall_time))
    doc = report.to_json_document(cells, [], results)
    (run.dir / "results.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (run.dir / "aggregate.csv").write_text(report.cells_to_csv(cells))
    md = report.render_cells_markdown(cells)
    if n_report is not None:
        tables = report.comparison_tables(cells, n_report)
        if tables:
            md += "\n" + tables
    (run.dir / "tables.md").write_text(md)


def _strategies(cfg: ResolvedConfig) -> list[StrategyConfig]:
    s = cfg.strategy
    if s.kind == "lora" and cfg.lora_ranks:
        return [replace(s, lora=replace(s.lora or LoraSettings(), r=r)) for r in cfg.lora_ranks]
    return [s]


def _validate_strategies(cfg: ResolvedConfig, strategies: list[StrategyConfig]) -> None:
    """Apply each strategy to a throwaway model so that configuration
    mistakes surface before any training starts."""
    model = init_model(preset(cfg.sweep.model_config_name, 0))
    for s in strategies:
        if s.is_distill and (cfg.distill.teacher_checkpoint or cfg.distill.teacher == "checkpoint"):
            resolve_teacher(cfg.distill)
        apply_strategy(model.clone(), s)


# -- verbs ---------------------------------------------------------------------
def cmd_gen_data(args, cfg: ResolvedConfig, run: Run) -> int:
    ds = load_data(cfg.data)
    paths = save_dataset(ds, run.dir / "data")
    for split, path in paths.items():
        print(f"{split}: {len(getattr(ds, split))} examples -> {path}")
    run.write_manifest(dataset=ds.name)
    return EXIT_OK


def _sweep(args, cfg: ResolvedConfig, run: Run, strategies: list[StrategyConfig], n_values: list[int]) -> int:
    dataset = load_data(cfg.data)
    specs = [SweepSpec(n_values, cfg.sweep.trials_per_n, s, cfg.sweep.model_config_name) for s in strategies]
    total = sum(len(plan_sweep(spec, cfg.train.seed)) for spec in specs)
    progress = Progress(total, run.dir / "trials.jsonl")
    results: list[TrialResult] = []
    try:
        for spec in specs:
            run.seeds += [
                {"strategy": spec.strategy.label, "n": p.n_per_class, "trial": p.trial_index, "seed": p.trial_seed}
                for p in plan_sweep(spec, cfg.train.seed)
            ]
            results += run_sweep(spec, dataset, cfg.train, cfg.distill, ResultSink(progress), jobs=args.jobs)
    finally:
        progress.close()
    write_results(run, results, args.wall_time, max(n_values))
    failed = sum(not r.ok for r in results)
    run.write_manifest(trials=len(results), failed_trials=failed)
    print(f"{len(results)} trials, {failed} failed -> {run.dir}")
    return EXIT_TRIAL_FAILED if failed else EXIT_OK


def cmd_sweep(args, cfg: ResolvedConfig, run: Run) -> int:
    strategies = _strategies(cfg)
    _validate_strategies(cfg, strategies)
    n_values = [args.few_shot] if args.few_shot else cfg.sweep.n_values
    return _sweep(args, cfg, run, strategies, n_values)


def _single(args, cfg: ResolvedConfig, run: Run, strategy: StrategyConfig, n: int) -> int:
    """One trial (n = 0 trains on the whole training split)."""
    dataset = load_data(cfg.data)
    spec = SweepSpec([max(n, 1)], 1, strategy, cfg.sweep.model_config_name)
    plan = replace(plan_sweep(spec, cfg.train.seed)[0], n_per_class=n)
    run.seeds.append({"strategy": strategy.label, "n": n or None, "trial": 0, "seed": plan.trial_seed})
    progress = Progress(1, run.dir / "trials.jsonl")
    trial_cfg = replace(cfg.train, seed=plan.trial_seed)
    try:
        student, teacher, episode = build_trial(plan, spec, dataset, cfg.distill)
        result = run_training(
            student, strategy, episode, dataset, trial_cfg, teacher=teacher, distill_cfg=cfg.distill,
            model_name=spec.model_config_name, n_per_class=n or None,
            on_epoch=(lambda e: log.info("epoch %d loss %.4f acc_in %s acc_ood %s", e.epoch, e.train_loss,
                                         report.fmt(e.acc_in), report.fmt(e.acc_ood))),
        )
    except TrainingError as exc:
        result = TrialResult(strategy, spec.model_config_name, n or None, plan.trial_seed, error=str(exc))
        student = None
    progress(result)
    progress.close()
    if args.save_checkpoint and student is not None:
        save_checkpoint(student, args.save_checkpoint)
        print(f"checkpoint -> {args.save_checkpoint}")
    write_results(run, [result], args.wall_time, None)
    run.write_manifest(trials=1, failed_trials=int(not result.ok))
    return EXIT_OK if result.ok else EXIT_TRIAL_FAILED


def cmd_train(args, cfg: ResolvedConfig, run: Run) -> int:
    _validate_strategies(cfg, [cfg.strategy])
    n = args.few_shot if args.few_shot is not None else max(cfg.sweep.n_values)
    return _single(args, cfg, run, cfg.strategy, n)


def cmd_distill(args, cfg: ResolvedConfig, run: Run) -> int:
    kind = "few_shot_distill" if args.few_shot else "context_distill"
    strategy = StrategyConfig(kind=kind, pattern=cfg.raw["strategy"]["pattern"])
    _validate_strategies(cfg, [strategy])
    if args.few_shot:
        return _sweep(args, cfg, run, [strategy], [args.few_shot])
    return _single(args, cfg, run, strategy, 0)


def cmd_report(args, cfg: ResolvedConfig, run: Run) -> int:
    if not args.inputs:
        raise UsageError("report needs at least one run directory or results.json")
    results = [r for path in args.inputs for r in report.load_results(path)]
    ok = [r for r in results if r.ok]
    cells = report.aggregate(ok)
    ns = sorted({c.n_per_class for c in cells if c.n_per_class is not None})
    n = args.few_shot if args.few_shot is not None else (ns[-1] if ns else None)
    text = report.comparison_tables(cells, n) if n is not None else ""
    deltas = []
    models = list(dict.fromkeys(c.model for c in cells))
    for ref in ("adaptive", "few_shot_distill", *sorted({c.strategy for c in cells if c.strategy.startswith("lora_r")})):
        try:
            deltas.append(report.delta_table(cells, ref, n, report.BASELINES, models[0] if models else None))
        except FTLabError:
            continue
    suffix = {"csv": "csv", "json": "json", "markdown": "md"}[args.format]
    target = run.dir / f"report.{suffix}"
    report.emit(cells, deltas, args.format, target, ok)
    (run.dir / "tables.md").write_text(report.render_cells_markdown(cells) + ("\n" + text if text else ""))
    print(report.render_cells_markdown(cells))
    if text:
        print(text)
    print(f"report -> {target}")
    run.write_manifest(inputs=list(args.inputs), trials=len(results))
    return EXIT_OK


def cmd_selftest(args, cfg: ResolvedConfig, run: Run | None) -> int:
    from . import selftest

    return EXIT_OK if selftest.run() else EXIT_TRIAL_FAILED


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "distill": cmd_distill,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        args.extra = extra
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.verb == "selftest":
            return cmd_selftest(args, None, None)
        cfg = load_config(args.config, _overrides(args))
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        run = Run(args.verb, args.out, cfg, argv)
        return COMMANDS[args.verb](args, cfg, run)
    except UsageError as exc:
        print(f"ftlab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FTLabError, OSError, KeyError, ValueError) as exc:
        print(f"ftlab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
