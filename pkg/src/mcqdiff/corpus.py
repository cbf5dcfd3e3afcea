"""MCQ data model: JSONL ingestion, response aggregation, and fold splitting.

Options are canonicalized key-first: ``counts[0]`` always refers to the key,
``counts[1:4]`` follow the distractor order.  Original display letters, when
present in the source file, ride along in ``labels`` for reporting.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

N_OPTIONS = 4
N_DISTRACTORS = 3

# Fixed JSONL field order so serialization is deterministic and diffable.
_FIELD_ORDER = ("id", "stem", "key", "distractors", "counts", "difficulty", "labels")


class CorpusError(ValueError):
    """Malformed corpus data or an invariant violation."""


@dataclass(frozen=True)
class Mcq:
    """One multiple-choice question with aggregated selection counts."""

    id: str
    stem: str
    key: str
    distractors: tuple[str, str, str]
    counts: tuple[int, int, int, int] = (0, 0, 0, 0)
    difficulty: float | None = None
    labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise CorpusError("mcq id must be non-empty")
        if not self.stem:
            raise CorpusError(f"mcq {self.id!r}: stem must be non-empty")
        object.__setattr__(self, "distractors", tuple(self.distractors))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.distractors) != N_DISTRACTORS:
            raise CorpusError(
                f"mcq {self.id!r}: expected {N_DISTRACTORS} distractors, "
                f"got {len(self.distractors)}"
            )
        if any(not d for d in self.distractors):
            raise CorpusError(f"mcq {self.id!r}: distractor text must be non-empty")
        if self.key in self.distractors:
            raise CorpusError(f"mcq {self.id!r}: key text equals a distractor")
        if len(self.counts) != N_OPTIONS:
            raise CorpusError(f"mcq {self.id!r}: counts must have {N_OPTIONS} entries")
        if any(c < 0 for c in self.counts):
            raise CorpusError(f"mcq {self.id!r}: counts must be non-negative")
        if self.difficulty is not None and not np.isfinite(self.difficulty):
            raise CorpusError(f"mcq {self.id!r}: difficulty must be finite")
        if self.labels is not None and len(self.labels) != N_OPTIONS:
            raise CorpusError(f"mcq {self.id!r}: labels must have {N_OPTIONS} entries")

    @property
    def options(self) -> tuple[str, str, str, str]:
        """All option texts, key first."""
        return (self.key, *self.distractors)

    @property
    def total_count(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True, slots=True)
class ResponseRecord:
    """A single student's selection on one question (0 = key position)."""

    student_id: str
    mcq_id: str
    selected: int
    timestamp: str | None = None

    def __post_init__(self) -> None:
        if self.selected not in range(N_OPTIONS):
            raise CorpusError(
                f"response {self.student_id}/{self.mcq_id}: "
                f"selected={self.selected} outside 0..{N_OPTIONS - 1}"
            )


@dataclass(frozen=True)
class Corpus:
    """An immutable collection of MCQs with unique ids."""

    items: tuple[Mcq, ...]
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        if len(self.items) == 0:
            raise CorpusError("corpus must contain at least one item")
        seen: set[str] = set()
        dups = [m.id for m in self.items if m.id in seen or seen.add(m.id)]
        if dups:
            raise CorpusError(f"duplicate mcq ids: {sorted(set(dups))}")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @cached_property
    def by_id(self) -> dict[str, Mcq]:
        return {m.id: m for m in self.items}

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(m.id for m in self.items)

    @property
    def zero_count_ids(self) -> tuple[str, ...]:
        """Items with no recorded responses (prediction-only items)."""
        return tuple(m.id for m in self.items if m.total_count == 0)

    def with_items(self, items: list[Mcq]) -> "Corpus":
        return Corpus(items=tuple(items), provenance=dict(self.provenance))


@dataclass(frozen=True)
class FoldAssignment:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    """Disjoint train/validation/test id sets for each cross-validation fold."""

    fold_count: int
    seed: int
    folds: tuple[FoldAssignment, ...]

    def __post_init__(self) -> None:
        for k, f in enumerate(self.folds):
            sets = (set(f.train_ids), set(f.val_ids), set(f.test_ids))
            if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
                raise CorpusError(f"fold {k}: train/val/test overlap")


def _parse_record(obj: dict, line_no: int) -> Mcq:
    def need(fld: str, kind) -> object:
        if fld not in obj:
            raise CorpusError(f"line {line_no}: missing field {fld!r}")
        val = obj[fld]
        if not isinstance(val, kind):
            raise CorpusError(f"line {line_no}: field {fld!r} has wrong type")
        return val

    item_id = need("id", str)
    stem = need("stem", str)
    key = need("key", str)
    distractors = need("distractors", list)
    if not all(isinstance(d, str) for d in distractors):
        raise CorpusError(f"line {line_no}: field 'distractors' has wrong type")
    if len(distractors) != N_DISTRACTORS:
        raise CorpusError(
            f"line {line_no}: item {item_id!r} has {len(distractors)} distractors, "
            f"expected {N_DISTRACTORS}"
        )
    counts = obj.get("counts", [0] * N_OPTIONS)
    if not isinstance(counts, list) or not all(isinstance(c, int) for c in counts):
        raise CorpusError(f"line {line_no}: field 'counts' has wrong type")
    difficulty = obj.get("difficulty")
    if difficulty is not None and not isinstance(difficulty, (int, float)):
        raise CorpusError(f"line {line_no}: field 'difficulty' has wrong type")
    labels = obj.get("labels")
    if labels is not None and (
        not isinstance(labels, list) or not all(isinstance(x, str) for x in labels)
    ):
        raise CorpusError(f"line {line_no}: field 'labels' has wrong type")
    try:
        return Mcq(
            id=item_id,
            stem=stem,
            key=key,
            distractors=tuple(distractors),
            counts=tuple(counts),
            difficulty=float(difficulty) if difficulty is not None else None,
            labels=tuple(labels) if labels is not None else None,
        )
    except CorpusError as exc:
        raise CorpusError(f"line {line_no}: {exc}") from exc


def load_corpus(path: str | Path, schema: str = "jsonl") -> Corpus:
    """Load a corpus file; one JSON object per line, key stored first."""
    if schema != "jsonl":
        raise CorpusError(f"unknown corpus schema {schema!r}")
    path = Path(path)
    items: list[Mcq] = []
    seen: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            mcq = _parse_record(obj, line_no)
            if mcq.id in seen:
                raise CorpusError(
                    f"line {line_no}: duplicate id {mcq.id!r} "
                    f"(first seen on line {seen[mcq.id]})"
                )
            seen[mcq.id] = line_no
            items.append(mcq)
    if not items:
        raise CorpusError(f"{path}: no records found")
    return Corpus(items=tuple(items), provenance={"source": str(path)})


def mcq_to_json_line(mcq: Mcq) -> str:
    """Canonical single-line serialization with fixed field order."""
    obj: dict = {
        "id": mcq.id,
        "stem": mcq.stem,
        "key": mcq.key,
        "distractors": list(mcq.distractors),
        "counts": list(mcq.counts),
    }
    if mcq.difficulty is not None:
        obj["difficulty"] = mcq.difficulty
    if mcq.labels is not None:
        obj["labels"] = list(mcq.labels)
    return json.dumps(obj, ensure_ascii=False)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for mcq in corpus:
            fh.write(mcq_to_json_line(mcq) + "\n")


def aggregate_responses(records: list[ResponseRecord], corpus: Corpus) -> Corpus:
    """Recompute per-option counts from raw responses.

    Items with no responses keep zero counts and are reported via
    ``Corpus.zero_count_ids`` (and a warning).
    """
    unknown = sorted({r.mcq_id for r in records} - set(corpus.ids))
    if unknown:
        raise CorpusError(f"responses reference unknown mcq ids: {unknown}")
    tallies: dict[str, list[int]] = {mid: [0] * N_OPTIONS for mid in corpus.ids}
    for rec in records:
        tallies[rec.mcq_id][rec.selected] += 1
    items = [replace(m, counts=tuple(tallies[m.id])) for m in corpus]
    out = corpus.with_items(items)
    if out.zero_count_ids:
        logger.warning(
            "%d items received no responses: %s",
            len(out.zero_count_ids),
            list(out.zero_count_ids)[:10],
        )
    return out


def selection_distribution(mcq: Mcq) -> np.ndarray:
    """Ground-truth option-selection distribution: counts normalized to sum 1."""
    total = mcq.total_count
    if total <= 0:
        raise CorpusError(
            f"mcq {mcq.id!r}: all-zero counts, no selection distribution exists"
        )
    return np.asarray(mcq.counts, dtype=np.float64) / float(total)


def _largest_remainder(total: int, weights: list[float]) -> list[int]:
    """Apportion ``total`` into integer parts proportional to ``weights``."""
    quotas = [total * w / sum(weights) for w in weights]
    parts = [int(np.floor(q)) for q in quotas]
    leftover = total - sum(parts)
    order = sorted(range(len(weights)), key=lambda i: quotas[i] - parts[i], reverse=True)
    for i in order[:leftover]:
        parts[i] += 1
    return parts


def split_folds(corpus: Corpus, seed: int, fold_count: int = 5) -> FoldPlan:
    """Deterministic cross-validation plan with 6.5:1.5:2 train/val/test ratios.

    The ``fold_count`` test sets partition the corpus; per fold the remaining
    items are split 6.5:1.5 by largest-remainder apportionment.
    """
    n = len(corpus)
    if n < 2 * fold_count:
        raise CorpusError(f"corpus of {n} items is too small for {fold_count} folds")
    rng = np.random.default_rng(seed)
    order = [corpus.ids[i] for i in rng.permutation(n)]
    test_sizes = _largest_remainder(n, [1.0] * fold_count)
    folds: list[FoldAssignment] = []
    start = 0
    for k in range(fold_count):
        test_ids = order[start : start + test_sizes[k]]
        start += test_sizes[k]
        rest = [i for i in order if i not in set(test_ids)]
        n_train, n_val = _largest_remainder(len(rest), [6.5, 1.5])
        folds.append(
            FoldAssignment(
                train_ids=tuple(rest[:n_train]),
                val_ids=tuple(rest[n_train : n_train + n_val]),
                test_ids=tuple(test_ids),
            )
        )
    plan = FoldPlan(fold_count=fold_count, seed=seed, folds=tuple(folds))
    covered = [i for f in plan.folds for i in f.test_ids]
    assert sorted(covered) == sorted(corpus.ids)
    return plan


def export_counts_csv(corpus: Corpus, path: str | Path) -> None:
    """Counts + normalized distributions for external analysis."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "n_key", "n_d1", "n_d2", "n_d3", "p_key", "p_d1", "p_d2", "p_d3"]
        )
        for mcq in corpus:
            if mcq.total_count > 0:
                dist = [repr(p) for p in selection_distribution(mcq)]
            else:
                dist = ["", "", "", ""]
            writer.writerow([mcq.id, *mcq.counts, *dist])
