"""Datasets, label binarization, synthetic HANS-style corpora, few-shot
episodes and pattern templating.

Label convention: 0 = entailment / acceptable, 1 = non-entailment /
unacceptable. Loaders accept a ``label_map`` to translate other schemes.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import string
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, ParseError, TemplateError

log = logging.getLogger(__name__)


class Domain(str, Enum):
    IN = "in"
    OOD = "ood"


class Task(str, Enum):
    SINGLE = "single_sentence"
    PAIR = "sentence_pair"


@dataclass(frozen=True)
class Example:
    text_a: str
    text_b: str | None
    label: int
    domain: Domain = Domain.IN
    tag: str | None = None  # generator template that produced the example, if any

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if not self.text_a:
            raise DataError("text_a must be non-empty")

    def to_json(self) -> dict:
        row = {"text_a": self.text_a, "text_b": self.text_b, "label": self.label, "domain": self.domain.value}
        if self.tag is not None:
            row["tag"] = self.tag
        return row


@dataclass(frozen=True)
class Dataset:
    name: str
    task: Task
    train: tuple[Example, ...]
    eval_in: tuple[Example, ...] = ()
    eval_ood: tuple[Example, ...] = ()

    def __post_init__(self):
        for split in ("train", "eval_in", "eval_ood"):
            for ex in getattr(self, split):
                if (ex.text_b is None) != (self.task is Task.SINGLE):
                    raise DataError(
                        f"{self.name}/{split}: {self.task.value} examples "
                        f"{'must not' if self.task is Task.SINGLE else 'must'} have text_b"
                    )


@dataclass(frozen=True)
class Pattern:
    template: str
    name: str = "custom"

    @property
    def placeholders(self) -> set[str]:
        return {f for _, f, _, _ in string.Formatter().parse(self.template) if f}


@dataclass(frozen=True)
class FewShotSpec:
    n_per_class: int
    seed: int = 0


TRIVIAL_PAIR = Pattern("{text_a} {text_b}", "trivial_pair")
TRIVIAL_SINGLE = Pattern("{text_a}", "trivial_single")

PATTERNS: dict[str, Pattern] = {
    p.name: p
    for p in (
        TRIVIAL_PAIR,
        TRIVIAL_SINGLE,
        Pattern("{text_a} ? ⟂ {text_b}", "gpt3_symbol"),
        Pattern("{text_a} question: {text_b} true or false? answer:", "gpt3_question"),
        Pattern("{text_a} Is this sentence acceptable?", "acceptability_question"),
    )
}
DEFAULT_PATTERN = {Task.PAIR: "gpt3_question", Task.SINGLE: "acceptability_question"}


def trivial_pattern(task: Task) -> Pattern:
    return TRIVIAL_PAIR if task is Task.PAIR else TRIVIAL_SINGLE


def get_pattern(name_or_template: str) -> Pattern:
    """Look up a shipped pattern by name, or wrap a raw template string."""
    if name_or_template in PATTERNS:
        return PATTERNS[name_or_template]
    if "{text_a}" not in name_or_template:
        raise TemplateError(f"unknown pattern {name_or_template!r} and it is not a template")
    return Pattern(name_or_template)


def apply_pattern(ex: Example, pattern: Pattern) -> str:
    values = {"text_a": ex.text_a}
    if ex.text_b is not None:
        values["text_b"] = ex.text_b
    missing = pattern.placeholders - set(values)
    if missing:
        raise TemplateError(f"pattern {pattern.name!r} needs {sorted(missing)} but the example has no value")
    unknown = pattern.placeholders - {"text_a", "text_b"}
    if unknown:
        raise TemplateError(f"pattern {pattern.name!r} uses unknown placeholders {sorted(unknown)}")
    return pattern.template.format(**values)


# -- loading ---------------------------------------------------------------
_TEXT_KEYS = {"text_a": ("text_a", "premise", "sentence"), "text_b": ("text_b", "hypothesis")}


def _first_key(row: dict, keys: Iterable[str]):
    for k in keys:
        if k in row:
            return row[k]
    return None


def _map_label(raw, label_map: Mapping | None) -> int | None:
    if label_map:
        key = raw if raw in label_map else str(raw)
        return label_map.get(key)
    if isinstance(raw, bool):
        return None
    if isinstance(raw, int) and raw in (0, 1):
        return raw
    if isinstance(raw, str) and raw.strip() in ("0", "1"):
        return int(raw)
    return None


def _parse_domain(raw) -> Domain:
    if raw in (None, "in", "in_domain"):
        return Domain.IN
    if raw in ("ood", "out_of_domain"):
        return Domain.OOD
    raise DataError(f"unknown domain {raw!r}")


@dataclass
class LoadReport:
    examples: list[Example] = field(default_factory=list)
    dropped: int = 0


def load_jsonl(path: str | Path, task: Task | str, label_map: Mapping | None = None) -> LoadReport:
    """Read one JSON object per line.

    Text fields may be named ``text_a``/``text_b`` or ``premise``/``hypothesis``
    (``sentence`` for single-sentence tasks). Rows whose label is not in
    ``label_map`` are dropped and counted.
    """
    task = Task(task)
    report = LoadReport()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(row, dict):
                raise ParseError(f"{path}: expected a JSON object", lineno)
            text_a = _first_key(row, _TEXT_KEYS["text_a"])
            text_b = _first_key(row, _TEXT_KEYS["text_b"]) if task is Task.PAIR else None
            if not text_a or (task is Task.PAIR and not text_b):
                raise ParseError(f"{path}: missing text field(s)", lineno)
            if "label" not in row:
                raise ParseError(f"{path}: missing label", lineno)
            label = _map_label(row["label"], label_map)
            if label is None:
                report.dropped += 1
                continue
            report.examples.append(
                Example(text_a, text_b, int(label), _parse_domain(row.get("domain")), row.get("tag"))
            )
    if report.dropped:
        log.info("%s: dropped %d rows with unmapped labels", path, report.dropped)
    if not report.examples:
        raise DataError(f"{path}: no usable examples")
    return report


def load_tsv(
    path: str | Path,
    task: Task | str,
    columns: Mapping[str, str | int],
    label_map: Mapping | None = None,
    header: bool = True,
    domain: Domain = Domain.IN,
) -> LoadReport:
    """GLUE-style TSV reader. ``columns`` maps text_a/text_b/label to column
    names (with a header row) or zero-based indices."""
    task = Task(task)
    report = LoadReport()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        names: list[str] | None = next(reader, None) if header else None

        def col(row, key):
            spec = columns.get(key)
            if spec is None:
                return None
            idx = spec if isinstance(spec, int) else (names.index(spec) if names and spec in names else None)
            if idx is None:
                raise DataError(f"{path}: column {spec!r} not found")
            return row[idx] if idx < len(row) else None

        for lineno, row in enumerate(reader, 2 if header else 1):
            if not row:
                continue
            text_a, raw_label = col(row, "text_a"), col(row, "label")
            text_b = col(row, "text_b") if task is Task.PAIR else None
            if not text_a or raw_label is None or (task is Task.PAIR and not text_b):
                raise ParseError(f"{path}: missing field", lineno)
            label = _map_label(raw_label, label_map)
            if label is None:
                report.dropped += 1
                continue
            report.examples.append(Example(text_a, text_b, int(label), domain))
    if not report.examples:
        raise DataError(f"{path}: no usable examples")
    return report


def write_jsonl(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")


def split_by_domain(examples: Sequence[Example]) -> tuple[tuple[Example, ...], tuple[Example, ...]]:
    return (
        tuple(e for e in examples if e.domain is Domain.IN),
        tuple(e for e in examples if e.domain is Domain.OOD),
    )


# -- few-shot ---------------------------------------------------------------
def sample_few_shot(train: Sequence[Example], spec: FewShotSpec) -> list[Example]:
    """Exactly ``n_per_class`` examples of each label, without replacement,
    in a seed-determined shuffled order."""
    if spec.n_per_class < 1:
        raise DataError("n_per_class must be at least 1")
    rng = np.random.default_rng(spec.seed)
    chosen: list[int] = []
    for label in (0, 1):
        pool = [i for i, ex in enumerate(train) if ex.label == label]
        if len(pool) < spec.n_per_class:
            raise DataError(
                f"class {label} has {len(pool)} training examples, {spec.n_per_class} requested"
            )
        chosen.extend(rng.choice(pool, size=spec.n_per_class, replace=False).tolist())
    order = rng.permutation(len(chosen))
    return [train[chosen[i]] for i in order]


# -- synthetic corpora ------------------------------------------------------
_NOUNS = ["actor", "senator", "doctor", "lawyer", "artist", "banker"]
# past tense, base form
_TRANSITIVE = [("supported", "support"), ("saw", "see"), ("helped", "help"), ("called", "call")]
_INTRANSITIVE = ["danced", "slept", "ran", "waited", "laughed", "left", "shouted", "arrived"]
_ADVERBS = ["quietly", "happily", "quickly", "suddenly", "politely"]
_PREPOSITIONS = ["near", "behind", "beside"]


def _np(noun: str, plural: bool, cap: bool = False) -> str:
    det = "The" if cap else "the"
    return f"{det} {noun}{'s' if plural else ''}"


def overlap_heuristic(ex: Example) -> int:
    """Predict entailment (0) iff every hypothesis word occurs in the premise."""
    def words(s: str) -> set[str]:
        return set(re.findall(r"[a-z]+", s.lower()))

    return 0 if words(ex.text_b or "") <= words(ex.text_a) else 1


class _EntailmentGenerator:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def pick(self, seq, k=1):
        idx = self.rng.choice(len(seq), size=k, replace=False)
        return [seq[i] for i in idx] if k > 1 else seq[idx[0]]

    def subj_obj(self):
        n1, n2 = self.pick(_NOUNS, 2)
        return n1, bool(self.rng.integers(2)), n2, bool(self.rng.integers(2))

    # in-domain, label 0: hypothesis words all occur in the premise
    def identical(self):
        s, sp, o, op = self.subj_obj()
        v, _ = self.pick(_TRANSITIVE)
        sent = f"{_np(s, sp, True)} {v} {_np(o, op)}."
        return Example(sent, sent, 0, Domain.IN, "identical")

    def adverb_drop(self):
        s, sp, o, op = self.subj_obj()
        v, _ = self.pick(_TRANSITIVE)
        adv = self.pick(_ADVERBS)
        return Example(
            f"{_np(s, sp, True)} {adv} {v} {_np(o, op)}.",
            f"{_np(s, sp, True)} {v} {_np(o, op)}.",
            0, Domain.IN, "adverb_drop",
        )

    def conjunct_drop(self):
        s, sp, o, op = self.subj_obj()
        v, _ = self.pick(_TRANSITIVE)
        other = self.pick([n for n in _NOUNS if n not in (s, o)])
        iv = self.pick(_INTRANSITIVE)
        return Example(
            f"{_np(s, sp, True)} {v} {_np(o, op)} and {_np(other, False)} {iv}.",
            f"{_np(s, sp, True)} {v} {_np(o, op)}.",
            0, Domain.IN, "conjunct_drop",
        )

    # in-domain, label 1: hypothesis introduces words absent from the premise
    def negation(self):
        s, sp, o, op = self.subj_obj()
        v, base = self.pick(_TRANSITIVE)
        return Example(
            f"{_np(s, sp, True)} {v} {_np(o, op)}.",
            f"{_np(s, sp, True)} did not {base} {_np(o, op)}.",
            1, Domain.IN, "negation",
        )

    def adverb_negation(self):
        s, sp, o, op = self.subj_obj()
        v, base = self.pick(_TRANSITIVE)
        adv = self.pick(_ADVERBS)
        return Example(
            f"{_np(s, sp, True)} {adv} {v} {_np(o, op)}.",
            f"{_np(s, sp, True)} did not {base} {_np(o, op)}.",
            1, Domain.IN, "negation",
        )

    # out-of-domain: full lexical overlap, heuristic misleads on label 1
    def swap(self):
        s, sp, o, op = self.subj_obj()
        v, _ = self.pick(_TRANSITIVE)
        return Example(
            f"{_np(s, sp, True)} {v} {_np(o, op)}.",
            f"{_np(o, op, True)} {v} {_np(s, sp)}.",
            1, Domain.OOD, "lexical_overlap",
        )

    def subsequence(self):
        s, sp, o, op = self.subj_obj()
        prep = self.pick(_PREPOSITIONS)
        iv = self.pick(_INTRANSITIVE)
        return Example(
            f"{_np(s, sp, True)} {prep} {_np(o, op)} {iv}.",
            f"{_np(o, op, True)} {iv}.",
            1, Domain.OOD, "subsequence",
        )

    def constituent(self):
        s, sp, o, op = self.subj_obj()
        iv1, iv2 = self.pick(_INTRANSITIVE, 2)
        return Example(
            f"If {_np(s, sp)} {iv1}, {_np(o, op)} {iv2}.",
            f"{_np(s, sp, True)} {iv1}.",
            1, Domain.OOD, "constituent",
        )

    # out-of-domain, label 0: overlap heuristic happens to be right
    def passive(self):
        s, sp, o, op = self.subj_obj()
        v, _ = self.pick(_TRANSITIVE)
        aux = "were" if op else "was"
        return Example(
            f"{_np(o, op, True)} {aux} {v} by {_np(s, sp)}.",
            f"{_np(s, sp, True)} {v} {_np(o, op)}.",
            0, Domain.OOD, "passive",
        )

    def relative_clause(self):
        s, sp, o, op = self.subj_obj()
        v, _ = self.pick(_TRANSITIVE)
        iv = self.pick(_INTRANSITIVE)
        return Example(
            f"{_np(s, sp, True)} who {v} {_np(o, op)} {iv}.",
            f"{_np(s, sp, True)} {iv}.",
            0, Domain.OOD, "relative_clause",
        )

    def in_domain(self, label: int) -> Example:
        makers = (
            [self.identical, self.adverb_drop, self.conjunct_drop]
            if label == 0
            else [self.negation, self.adverb_negation]
        )
        return makers[self.rng.integers(len(makers))]()

    def out_of_domain(self, label: int) -> Example:
        makers = (
            [self.passive, self.relative_clause]
            if label == 0
            else [self.swap, self.subsequence, self.constituent]
        )
        return makers[self.rng.integers(len(makers))]()


# toy acceptability grammar
_SING_VERBS = ["sleeps", "runs", "laughs", "waits", "dances", "sings"]
_PLUR_VERBS = ["sleep", "run", "laugh", "wait", "dance", "sing"]
_SING_TRANS = ["sees", "helps", "likes", "calls", "follows"]
_PLUR_TRANS = ["see", "help", "like", "call", "follow"]
_ADJECTIVES = ["old", "young", "tall", "quiet", "clever"]
_ANIMALS = ["dog", "cat", "bird", "horse", "rabbit", "child", "teacher", "farmer"]


class _AcceptabilityGenerator:
    """Small PCFG. In-domain templates: S -> NP VP with optional adjective
    and transitive object. Held-out (OOD) templates add a prepositional
    phrase or a coordinated subject."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def choice(self, seq):
        return seq[self.rng.integers(len(seq))]

    def noun_phrase(self, plural: bool, cap: bool = False) -> list[str]:
        words = ["The" if cap else "the"]
        if self.rng.random() < 0.4:
            words.append(self.choice(_ADJECTIVES))
        n = self.choice(_ANIMALS)
        words.append(("children" if n == "child" else n + "s") if plural else n)
        return words

    def sentence(self, held_out: bool) -> tuple[list[str], bool, int]:
        """Return (words, subject_plural, index of the finite verb)."""
        if held_out and self.rng.random() < 0.5:
            subj = self.noun_phrase(False, True) + ["and"] + self.noun_phrase(False)
            plural = True
        else:
            plural = bool(self.rng.integers(2))
            subj = self.noun_phrase(plural, True)
        if held_out and not subj.count("and"):
            subj += [self.choice(["near", "behind", "with"])] + self.noun_phrase(bool(self.rng.integers(2)))
        verb_idx = len(subj)
        if self.rng.random() < 0.5:
            verb = self.choice(_PLUR_TRANS if plural else _SING_TRANS)
            words = subj + [verb] + self.noun_phrase(bool(self.rng.integers(2)))
        else:
            words = subj + [self.choice(_PLUR_VERBS if plural else _SING_VERBS)]
        return words, plural, verb_idx

    def make(self, label: int, held_out: bool) -> Example:
        words, plural, vi = self.sentence(held_out)
        domain = Domain.OOD if held_out else Domain.IN
        if label == 0:
            return Example(" ".join(words) + ".", None, 0, domain, "grammatical")
        if self.rng.random() < 0.5:
            verbs_from, verbs_to = (
                (_PLUR_VERBS + _PLUR_TRANS, _SING_VERBS + _SING_TRANS)
                if plural
                else (_SING_VERBS + _SING_TRANS, _PLUR_VERBS + _PLUR_TRANS)
            )
            words[vi] = verbs_to[verbs_from.index(words[vi])]
            tag = "agreement"
        else:
            original = list(words)
            while words == original:
                words = [words[i] for i in self.rng.permutation(len(words))]
            words[0] = words[0][0].upper() + words[0][1:]
            tag = "scrambled"
        return Example(" ".join(words) + ".", None, 1, domain, tag)


def generate_synthetic(task: str, sizes: tuple[int, int, int], seed: int = 0) -> Dataset:
    """Desk-scale stand-ins: ``toy_entailment`` (MNLI/HANS-like) or
    ``toy_acceptability`` (CoLA-like). Each split is class-balanced."""
    if any(int(s) < 1 for s in sizes):
        raise DataError(f"split sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    n_train, n_in, n_ood = (int(s) for s in sizes)

    def balanced(n: int, make) -> tuple[Example, ...]:
        labels = [i % 2 for i in range(n)]
        return tuple(make(lab) for lab in labels)

    if task == "toy_entailment":
        gen = _EntailmentGenerator(rng)
        return Dataset(
            "toy_entailment", Task.PAIR,
            balanced(n_train, gen.in_domain),
            balanced(n_in, gen.in_domain),
            balanced(n_ood, gen.out_of_domain),
        )
    if task == "toy_acceptability":
        gen = _AcceptabilityGenerator(rng)
        return Dataset(
            "toy_acceptability", Task.SINGLE,
            balanced(n_train, lambda lab: gen.make(lab, False)),
            balanced(n_in, lambda lab: gen.make(lab, False)),
            balanced(n_ood, lambda lab: gen.make(lab, True)),
        )
    raise DataError(f"unknown synthetic task {task!r}; use toy_entailment or toy_acceptability")


def save_dataset(ds: Dataset, directory: str | Path) -> dict[str, Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in ("train", "eval_in", "eval_ood"):
        paths[split] = out / f"{split}.jsonl"
        write_jsonl(getattr(ds, split), paths[split])
    (out / "meta.json").write_text(json.dumps({"name": ds.name, "task": ds.task.value}, indent=2) + "\n")
    return paths


def load_dataset(directory: str | Path, label_map: Mapping | None = None) -> Dataset:
    """Read a directory written by :func:`save_dataset`."""
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{d}: missing or invalid meta.json") from exc
    task = Task(meta["task"])
    splits = {}
    for split in ("train", "eval_in", "eval_ood"):
        path = d / f"{split}.jsonl"
        splits[split] = tuple(load_jsonl(path, task, label_map).examples) if path.exists() else ()
    if not splits["train"]:
        raise DataError(f"{d}: no training split")
    return Dataset(meta.get("name", d.name), task, **splits)
