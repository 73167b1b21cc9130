"""Word alignment and WER scoring split by biasing-list membership.

``align`` produces a minimal unit-cost edit alignment; ``wer_breakdown``
attributes each error to the biased (B) or unbiased (U) word class, and
``corpus_report`` aggregates by summing counts before recomputing rates.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels

MATCH = "match"
SUB = "substitution"
DEL = "deletion"
INS = "insertion"

_PUNCT = re.compile(r"[^a-z0-9' ]+")


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation except apostrophes, collapse whitespace."""
    lowered = text.lower()
    stripped = _PUNCT.sub(" ", lowered)
    return " ".join(stripped.split())


@dataclass
class AlignmentResult:
    ops: list  # (op, ref_word or None, hyp_word or None)
    cost: int

    @property
    def matches(self) -> int:
        return sum(1 for op, _, _ in self.ops if op == MATCH)

    @property
    def substitutions(self) -> int:
        return sum(1 for op, _, _ in self.ops if op == SUB)

    @property
    def deletions(self) -> int:
        return sum(1 for op, _, _ in self.ops if op == DEL)

    @property
    def insertions(self) -> int:
        return sum(1 for op, _, _ in self.ops if op == INS)


def align(ref: list, hyp: list) -> AlignmentResult:
    """Minimal edit alignment of two word sequences.

    Backtrace ties prefer match, then substitution, then deletion, then
    insertion, so the alignment is deterministic.
    """
    vocab = {}
    for w in ref:
        vocab.setdefault(w, len(vocab))
    for w in hyp:
        vocab.setdefault(w, len(vocab))
    a = np.array([vocab[w] for w in ref], dtype=np.int64)
    b = np.array([vocab[w] for w in hyp], dtype=np.int64)
    dist = kernels.edit_distance_matrix(a, b)

    ops = []
    i, j = len(ref), len(hyp)
    while i > 0 or j > 0:
        here = dist[i, j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and here == dist[i - 1, j - 1]:
            ops.append((MATCH, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and here == dist[i - 1, j - 1] + 1:
            ops.append((SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and here == dist[i - 1, j] + 1:
            ops.append((DEL, ref[i - 1], None))
            i = i - 1
        else:
            ops.append((INS, None, hyp[j - 1]))
            j = j - 1
    ops.reverse()
    return AlignmentResult(ops=ops, cost=int(dist[len(ref), len(hyp)]))


@dataclass
class ClassCounts:
    errors: int = 0
    ref_count: int = 0
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0

    @property
    def rate(self):
        if self.ref_count == 0:
            return None
        return self.errors / self.ref_count

    def add(self, other: "ClassCounts"):
        self.errors += other.errors
        self.ref_count += other.ref_count
        self.substitutions += other.substitutions
        self.deletions += other.deletions
        self.insertions += other.insertions

    def to_dict(self) -> dict:
        return {
            "errors": self.errors,
            "ref_count": self.ref_count,
            "rate": self.rate,
            "substitutions": self.substitutions,
            "deletions": self.deletions,
            "insertions": self.insertions,
        }


@dataclass
class WerReport:
    overall: ClassCounts = field(default_factory=ClassCounts)
    u_class: ClassCounts = field(default_factory=ClassCounts)
    b_class: ClassCounts = field(default_factory=ClassCounts)
    utterances: int = 0

    def add(self, other: "WerReport"):
        self.overall.add(other.overall)
        self.u_class.add(other.u_class)
        self.b_class.add(other.b_class)
        self.utterances += other.utterances

    def to_dict(self) -> dict:
        return {
            "utterances": self.utterances,
            "overall": self.overall.to_dict(),
            "u_class": self.u_class.to_dict(),
            "b_class": self.b_class.to_dict(),
        }


def wer_breakdown(alignment: AlignmentResult, biasing_set: set) -> WerReport:
    """Per-utterance WER with B/U attribution.

    Substitutions and deletions follow the reference word's membership;
    insertions follow the hypothesis word's membership. Reference counts per
    class come from the reference words alone.
    """
    report = WerReport(utterances=1)
    for op, ref_word, hyp_word in alignment.ops:
        if ref_word is not None:
            cls = report.b_class if ref_word in biasing_set else report.u_class
            cls.ref_count += 1
            report.overall.ref_count += 1
        if op == MATCH:
            continue
        if op == SUB:
            cls = report.b_class if ref_word in biasing_set else report.u_class
            cls.substitutions += 1
            cls.errors += 1
            report.overall.substitutions += 1
        elif op == DEL:
            cls = report.b_class if ref_word in biasing_set else report.u_class
            cls.deletions += 1
            cls.errors += 1
            report.overall.deletions += 1
        else:
            cls = report.b_class if hyp_word in biasing_set else report.u_class
            cls.insertions += 1
            cls.errors += 1
            report.overall.insertions += 1
        report.overall.errors += 1
    return report


def corpus_report(reports: list) -> WerReport:
    """Sum error and reference counts; rates are recomputed, never averaged."""
    total = WerReport()
    for rep in reports:
        total.add(rep)
    return total


def score_pair(ref_text: str, hyp_text: str, biasing_set: set) -> WerReport:
    """Normalize, align and break down a single reference/hypothesis pair."""
    ref = normalize_text(ref_text).split()
    hyp = normalize_text(hyp_text).split()
    return wer_breakdown(align(ref, hyp), biasing_set)


def _fmt_rate(rate) -> str:
    return "   n/a" if rate is None else f"{100.0 * rate:6.2f}"


def format_report(report: WerReport, title: str = "") -> str:
    """Human-readable table; one row per word class."""
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'class':<8} {'WER%':>6} {'err':>6} {'ref':>6} {'sub':>5} {'del':>5} {'ins':>5}")
    for name, cls in (("overall", report.overall), ("U", report.u_class), ("B", report.b_class)):
        lines.append(
            f"{name:<8} {_fmt_rate(cls.rate)} {cls.errors:>6} {cls.ref_count:>6}"
            f" {cls.substitutions:>5} {cls.deletions:>5} {cls.insertions:>5}"
        )
    return "\n".join(lines)
