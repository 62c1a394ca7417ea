"""Frequency tables, accuracy tables, and long-tail statistics.

The analysis vocabulary: sort concepts by how often they occur, bin them on
a log scale, split them into head and tail, and correlate log-frequency
with per-class accuracy. All functions are deterministic, with ties broken
by ascending concept_id so repeated runs produce identical artifacts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .errors import InputError, UndefinedCorrelationError

ZERO_BIN = -1  # dedicated bin index for zero-count concepts


@dataclass
class FrequencyTable:
    """Per-concept caption counts: raw (any hit) and filtered (judged relevant)."""

    counts: dict[int, tuple[int, int]]  # concept_id -> (raw, filtered)
    corpus_id: str = ""

    def __post_init__(self):
        for cid, (raw, filtered) in self.counts.items():
            if raw < 0 or filtered < 0:
                raise InputError(f"concept {cid}: negative count")
            if filtered > raw:
                raise InputError(
                    f"concept {cid}: filtered count {filtered} exceeds raw count {raw}"
                )

    @property
    def ids(self) -> list[int]:
        return list(self.counts)

    def raw(self, concept_id: int) -> int:
        return self.counts[concept_id][0]

    def filtered(self, concept_id: int) -> int:
        return self.counts[concept_id][1]

    def to_csv(self, path: str, names: dict[int, str] | None = None) -> None:
        names = names or {}
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["concept_id", "name", "raw", "filtered"])
            for cid in sorted(self.counts):
                raw, filt = self.counts[cid]
                w.writerow([cid, names.get(cid, ""), raw, filt])

    @classmethod
    def from_csv(cls, path: str, corpus_id: str = "") -> "FrequencyTable":
        counts = {}
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            required = {"concept_id", "raw", "filtered"}
            if not required.issubset(reader.fieldnames or ()):
                raise InputError(f"{path}: expected columns {sorted(required)}")
            for row in reader:
                counts[int(row["concept_id"])] = (int(row["raw"]), int(row["filtered"]))
        if not counts:
            raise InputError(f"{path}: empty frequency table")
        return cls(counts, corpus_id=corpus_id)


@dataclass
class AccuracyTable:
    """Per-concept accuracy in [0, 1] for one model."""

    accuracies: dict[int, float]
    model_id: str = ""

    def __post_init__(self):
        for cid, acc in self.accuracies.items():
            if not (0.0 <= acc <= 1.0):
                raise InputError(f"concept {cid}: accuracy {acc} outside [0, 1]")

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["concept_id", "accuracy"])
            for cid in sorted(self.accuracies):
                w.writerow([cid, repr(self.accuracies[cid])])

    @classmethod
    def from_csv(cls, path: str, model_id: str = "") -> "AccuracyTable":
        accuracies = {}
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if not {"concept_id", "accuracy"}.issubset(reader.fieldnames or ()):
                raise InputError(f"{path}: expected columns concept_id,accuracy")
            for row in reader:
                accuracies[int(row["concept_id"])] = float(row["accuracy"])
        if not accuracies:
            raise InputError(f"{path}: empty accuracy table")
        return cls(accuracies, model_id=model_id)


def sort_by_frequency(freq: FrequencyTable) -> list[int]:
    """Concept ids by descending filtered count, ties by ascending id."""
    return sorted(freq.counts, key=lambda cid: (-freq.filtered(cid), cid))


def _bin_index(n: int, base: float) -> int:
    """floor(log_base(n)) for n >= 1, computed safely near powers of base."""
    if n <= 0:
        return ZERO_BIN
    k = math.floor(math.log(n, base))
    # Float log can land one off right at bin edges (e.g. log10(1000)); nudge.
    while base ** (k + 1) <= n:
        k += 1
    while base**k > n:
        k -= 1
    return k


@dataclass
class LogBin:
    bin: int  # floor(log_base(count)); ZERO_BIN for zero-count concepts
    lower_bound: float  # smallest count that falls in this bin
    mean_accuracy: float
    count: int  # number of concepts in the bin


def log_bins(freq: FrequencyTable, acc: AccuracyTable, base: float = 10.0) -> list[LogBin]:
    """Bucket concepts by order of magnitude of filtered count; mean accuracy per bin.

    A concept with count n lands in bin floor(log_base(n)); zero-count
    concepts get a dedicated bin below all others. Returned in ascending
    bin order.
    """
    if base <= 1.0:
        raise InputError(f"log base must exceed 1, got {base}")
    _check_same_ids(freq, acc)
    members: dict[int, list[float]] = {}
    for cid in freq.counts:
        b = _bin_index(freq.filtered(cid), base)
        members.setdefault(b, []).append(acc.accuracies[cid])
    out = []
    for b in sorted(members):
        accs = members[b]
        lower = 0.0 if b == ZERO_BIN else float(base**b)
        out.append(LogBin(b, lower, sum(accs) / len(accs), len(accs)))
    return out


def head_tail_split(freq: FrequencyTable, tail_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """Split concepts into (head, tail): tail = ceil(fraction * C) least frequent.

    Least frequent by filtered count, ties by ascending concept_id. Both
    returned lists are sorted by concept_id.
    """
    if not (0.0 < tail_fraction < 1.0):
        raise InputError(f"tail_fraction must be in (0, 1), got {tail_fraction}")
    ids = sorted(freq.counts, key=lambda cid: (freq.filtered(cid), cid))
    n_tail = math.ceil(tail_fraction * len(ids))
    tail = sorted(ids[:n_tail])
    head = sorted(ids[n_tail:])
    return head, tail


def correlate(freq: FrequencyTable, acc: AccuracyTable, method: str = "pearson") -> float:
    """Correlation between concept frequency and accuracy.

    pearson: on (log(1 + filtered count), accuracy) — counts span orders of
    magnitude, so the raw scale would let the head dominate.
    spearman: rank correlation on the counts directly.
    """
    _check_same_ids(freq, acc)
    ids = sorted(freq.counts)
    if len(ids) < 3:
        raise InputError(f"need at least 3 concepts to correlate, got {len(ids)}")
    counts = np.array([freq.filtered(cid) for cid in ids], dtype=np.float64)
    accs = np.array([acc.accuracies[cid] for cid in ids], dtype=np.float64)
    if method == "pearson":
        x = np.log1p(counts)
        y = accs
    elif method == "spearman":
        x, y = counts, accs
    else:
        raise InputError(f"unknown correlation method {method!r}")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise UndefinedCorrelationError(f"{method}: an input has zero variance")
    if method == "pearson":
        return float(scipy.stats.pearsonr(x, y).statistic)
    return float(scipy.stats.spearmanr(x, y).statistic)


def _check_same_ids(freq: FrequencyTable, acc: AccuracyTable) -> None:
    if set(freq.counts) != set(acc.accuracies):
        only_f = sorted(set(freq.counts) - set(acc.accuracies))[:5]
        only_a = sorted(set(acc.accuracies) - set(freq.counts))[:5]
        raise InputError(
            f"frequency and accuracy tables cover different concepts "
            f"(only in frequency: {only_f}, only in accuracy: {only_a})"
        )


def mean_per_class_accuracy(
    predictions: list[tuple[int, int]],
    concepts: list[int] | None = None,
    model_id: str = "",
) -> tuple[float, AccuracyTable]:
    """Unweighted mean of per-class accuracies from (gold, predicted) pairs.

    Every class counts equally regardless of example count — the quantity
    that makes tail collapse visible. When `concepts` is given, every listed
    class must appear as a gold label at least once; a class with zero
    examples is an error naming it (its accuracy would be 0/0).
    """
    if not predictions:
        raise InputError("no predictions to score")
    totals: dict[int, int] = {}
    correct: dict[int, int] = {}
    for gold, pred in predictions:
        totals[gold] = totals.get(gold, 0) + 1
        correct[gold] = correct.get(gold, 0) + (1 if pred == gold else 0)
    if concepts is not None:
        missing = [cid for cid in concepts if cid not in totals]
        if missing:
            raise InputError(f"classes with zero examples: {sorted(missing)}")
        extra = [cid for cid in totals if cid not in set(concepts)]
        if extra:
            raise InputError(f"gold labels outside the concept set: {sorted(extra)}")
    accs = {cid: correct[cid] / totals[cid] for cid in totals}
    table = AccuracyTable(accs, model_id=model_id)
    return sum(accs.values()) / len(accs), table


def subset_mean_accuracy(acc: AccuracyTable, concept_ids: list[int]) -> float:
    """Unweighted mean accuracy over a subset of classes (e.g. head or tail)."""
    if not concept_ids:
        raise InputError("empty concept subset")
    missing = [cid for cid in concept_ids if cid not in acc.accuracies]
    if missing:
        raise InputError(f"accuracy table missing concepts: {missing[:5]}")
    return sum(acc.accuracies[cid] for cid in concept_ids) / len(concept_ids)
