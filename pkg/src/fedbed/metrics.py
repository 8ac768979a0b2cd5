"""Evaluation metrics: clean accuracy, backdoor success rate, acceptance rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SampleSet
from .nn import Model, forward


def predict(model: Model, samples: SampleSet) -> np.ndarray:
    return forward(model, samples.features).argmax(axis=1)


def accuracy(model: Model, samples: SampleSet) -> float:
    """Fraction of samples classified as their label."""
    if len(samples) == 0:
        raise ValueError("accuracy needs a non-empty sample set")
    return float(np.mean(predict(model, samples) == samples.labels))


def compute_bsr(model: Model, triggered: SampleSet) -> float:
    """Backdoor success rate: fraction of triggered samples classified as the
    target class. The set must already exclude samples whose original label
    was the target (its labels all carry the target label by construction)."""
    if len(triggered) == 0:
        raise ValueError("backdoor success rate needs a non-empty sample set")
    return float(np.mean(predict(model, triggered) == triggered.labels))


def compute_mar_bar(history, malicious_ids) -> tuple[float | None, float | None]:
    """Per-submission acceptance rates over a training history.

    MAR counts malicious submissions accepted by the defense, BAR the benign
    ones. Returns None for a rate whose denominator is zero.
    """
    malicious = frozenset(malicious_ids)
    mal_seen = mal_ok = ben_seen = ben_ok = 0
    for rec in history.rounds:
        sampled = set(rec.sampled)
        accepted = set(rec.accepted)
        mal = sampled & malicious
        ben = sampled - malicious
        mal_seen += len(mal)
        ben_seen += len(ben)
        mal_ok += len(mal & accepted)
        ben_ok += len(ben & accepted)
    mar = mal_ok / mal_seen if mal_seen else None
    bar = ben_ok / ben_seen if ben_seen else None
    return mar, bar


@dataclass(frozen=True)
class MetricsSummary:
    """Headline numbers for one run.

    last10 values average the final 10 rounds to damp round noise; best
    values take the single best round. mar/bar are None when no malicious
    (resp. benign) submission ever happened.
    """

    acc_last10: float
    bsr_last10: float
    acc_best: float
    bsr_best: float
    mar: float | None
    bar: float | None

    def __post_init__(self):
        for name in ("acc_last10", "bsr_last10", "acc_best", "bsr_best"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} out of [0, 1]: {v}")
        for name in ("mar", "bar"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} out of [0, 1]: {v}")


def summarize_history(history, malicious_ids) -> MetricsSummary:
    accs = [rec.acc for rec in history.rounds]
    bsrs = [rec.bsr for rec in history.rounds]
    if not accs:
        raise ValueError("cannot summarize an empty history")
    tail = min(10, len(accs))
    mar, bar = compute_mar_bar(history, malicious_ids)
    return MetricsSummary(
        acc_last10=float(np.mean(accs[-tail:])),
        bsr_last10=float(np.mean(bsrs[-tail:])),
        acc_best=float(max(accs)),
        bsr_best=float(max(bsrs)),
        mar=mar,
        bar=bar,
    )
