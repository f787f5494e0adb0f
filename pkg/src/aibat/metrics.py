"""Evaluation metrics: character error rate, flagged-note accuracy,
R0-R3 review bookkeeping, and the endpoint cost model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .model import CostEstimate, NoteType, ReviewRecord, REVIEW_LABELS


@dataclass(frozen=True)
class CerSample:
    reference: str
    hypothesis: str
    cer: float

    def __post_init__(self):
        if not self.reference:
            raise ValueError("reference must be non-empty")


@dataclass(frozen=True)
class PricingTable:
    """Dollars per 1000 prompt/completion tokens."""

    prompt_price: float
    completion_price: float

    def __post_init__(self):
        if self.prompt_price < 0 or self.completion_price < 0:
            raise ValueError("prices must be >= 0")


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance over Unicode scalar values, unit costs."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate: edit distance divided by reference length."""
    if not reference:
        raise ValueError("reference must be non-empty")
    return edit_distance(reference, hypothesis) / len(reference)


def make_sample(reference: str, hypothesis: str) -> CerSample:
    return CerSample(reference, hypothesis, cer(reference, hypothesis))


def aggregate_cer(samples: Sequence[CerSample | float], population_std: bool = False) -> tuple[float, float]:
    """Mean and standard deviation over CER samples.

    Sample (n-1) standard deviation by default; pass population_std=True for
    the n-denominator variant.
    """
    values = [s.cer if isinstance(s, CerSample) else float(s) for s in samples]
    if len(values) < 2:
        raise ValueError("need >= 2 samples for a standard deviation")
    mean = sum(values) / len(values)
    denom = len(values) if population_std else len(values) - 1
    var = sum((v - mean) ** 2 for v in values) / denom
    return mean, math.sqrt(var)


def flagged_accuracy(ground_truth: Sequence[NoteType | str], predicted: Sequence[NoteType | str]) -> float:
    """Fraction of notes whose flagged/plain classification matches."""
    if len(ground_truth) != len(predicted):
        raise ValueError(f"length mismatch: {len(ground_truth)} vs {len(predicted)}")
    if not ground_truth:
        raise ValueError("need >= 1 note")
    matches = sum(
        1 for g, p in zip(ground_truth, predicted) if _as_label(g) == _as_label(p)
    )
    return matches / len(ground_truth)


def _as_label(v: NoteType | str) -> str:
    return v.value if isinstance(v, NoteType) else str(v)


def pr01(records: Sequence[ReviewRecord]) -> float:
    """Fraction of records whose labels are only R0/R1 (usable without major edits)."""
    if not records:
        raise ValueError("need >= 1 review record")
    good = sum(1 for r in records if r.labels <= {"R0", "R1"})
    return good / len(records)


def r_counts(records: Iterable[ReviewRecord]) -> dict[str, int]:
    """Label occurrence counts; a record with several labels increments each,
    so totals may exceed the record count."""
    counts = {label: 0 for label in REVIEW_LABELS}
    for r in records:
        for label in r.labels:
            counts[label] += 1
    return counts


def estimate_cost(prompt_tokens: int, completion_tokens: int, pricing: PricingTable) -> CostEstimate:
    if prompt_tokens < 0 or completion_tokens < 0:
        raise ValueError("token counts must be >= 0")
    return CostEstimate.compute(
        prompt_tokens, completion_tokens, pricing.prompt_price, pricing.completion_price
    )


def estimate_pair_cost(
    n_notes: int,
    n_substeps: int,
    parse_call_tokens: tuple[int, int],
    generate_call_tokens: tuple[int, int],
    pricing: PricingTable,
) -> float:
    """Dollars for one drawing/instruction pair: n parse calls + m generate calls."""
    parse_cost = estimate_cost(*parse_call_tokens, pricing).total_dollars
    generate_cost = estimate_cost(*generate_call_tokens, pricing).total_dollars
    return n_notes * parse_cost + n_substeps * generate_cost
