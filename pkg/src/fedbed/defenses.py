"""Server-side aggregation rules.

Every rule takes the round's updates (sorted by client id), the previous
global parameter vector, and a DefenseParams bundle; it returns the new
aggregate plus the accepted/rejected client partition the acceptance-rate
metrics are computed from. Median and trimmed mean filter per coordinate,
so by convention they report every client as accepted.

FLTrust and the FLAME variant reason about update *directions* and operate
on deltas (update - previous global); FedAvg, median and trimmed mean work
on raw parameters (for Multi-Krum pairwise distances the two are identical).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import SampleSet
from .engine import Hyper, Update
from .nn import ArchSpec, FlatVector, flatten, train_local, unflatten


class DefenseError(ValueError):
    pass


# the flame variant's accepted cluster is the single-link component at this
# multiple of the tightest threshold that first yields a majority component
THRESHOLD_MARGIN = 1.0


@dataclass(frozen=True)
class AggregationResult:
    aggregate: FlatVector
    accepted: frozenset[int]
    rejected: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "accepted", frozenset(self.accepted))
        object.__setattr__(self, "rejected", frozenset(self.rejected))
        if self.accepted & self.rejected:
            raise DefenseError("accepted and rejected sets overlap")


@dataclass(frozen=True)
class DefenseParams:
    """Knobs for the robust rules; None means 'derive from the round size'.

    krum_f defaults to ceil(0.1 * n) assumed Byzantine, krum_m to the
    standard n - f - 2 selection count. fltrust needs the server's small
    clean root set plus the architecture and local hyperparameters to train
    its reference update.
    """

    trim_fraction: float = 0.2
    krum_f: int | None = None
    krum_m: int | None = None
    flame_noise_sigma: float = 1e-3
    fltrust_root: SampleSet | None = None
    arch: ArchSpec | None = None
    hyper: Hyper | None = None

    def __post_init__(self):
        if not (0.0 <= self.trim_fraction < 0.5):
            raise DefenseError("trim_fraction must lie in [0, 0.5)")
        if self.krum_m is not None and self.krum_m < 1:
            raise DefenseError("krum_m must be >= 1")
        if self.krum_f is not None and self.krum_f < 0:
            raise DefenseError("krum_f must be >= 0")
        if self.flame_noise_sigma < 0:
            raise DefenseError("flame noise sigma must be >= 0")


def _sorted_updates(updates: Sequence[Update]) -> list[Update]:
    if not updates:
        raise DefenseError("no updates to aggregate")
    return sorted(updates, key=lambda u: u.client_id)


def _stack(updates: Sequence[Update]) -> np.ndarray:
    dim = updates[0].params.values.size
    for u in updates:
        if u.params.values.size != dim:
            raise DefenseError(f"client {u.client_id}: update length mismatch")
    return np.stack([u.params.values for u in updates])


def _ids(updates: Sequence[Update]) -> list[int]:
    return [u.client_id for u in updates]


def _result(values: np.ndarray, layout, accepted, rejected) -> AggregationResult:
    return AggregationResult(FlatVector(values, layout), frozenset(accepted), frozenset(rejected))


def fedavg(updates, prev_global: FlatVector, params: DefenseParams, rng=None) -> AggregationResult:
    """Weighted mean with the declared data-share weights renormalized over
    the present clients; accepts everyone."""
    updates = _sorted_updates(updates)
    weights = np.array([u.declared_weight for u in updates], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise DefenseError("total declared weight is zero")
    agg = (_stack(updates) * (weights / total)[:, None]).sum(axis=0)
    return _result(agg, updates[0].params.layout, _ids(updates), [])


def coordinate_median(updates, prev_global: FlatVector, params: DefenseParams, rng=None) -> AggregationResult:
    """Coordinate-wise median (mean of the two middle values when even)."""
    updates = _sorted_updates(updates)
    agg = np.median(_stack(updates), axis=0)
    return _result(agg, updates[0].params.layout, _ids(updates), [])


def trimmed_mean(updates, prev_global: FlatVector, params: DefenseParams, rng=None) -> AggregationResult:
    """Per coordinate, drop the floor(beta*n) lowest and highest values and
    average the remainder."""
    updates = _sorted_updates(updates)
    n = len(updates)
    k = int(math.floor(params.trim_fraction * n))
    if n <= 2 * k:
        raise DefenseError(f"cannot trim {k} per side from {n} updates")
    stacked = np.sort(_stack(updates), axis=0)
    agg = stacked[k : n - k].mean(axis=0)
    return _result(agg, updates[0].params.layout, _ids(updates), [])


def multi_krum(updates, prev_global: FlatVector, params: DefenseParams, rng=None) -> AggregationResult:
    """Score every update by the sum of squared distances to its n-f-2
    nearest peers; keep the krum_m best-scored and average them."""
    updates = _sorted_updates(updates)
    n = len(updates)
    f = params.krum_f if params.krum_f is not None else int(math.ceil(0.1 * n))
    m = params.krum_m if params.krum_m is not None else max(1, n - f - 2)
    if n < f + 3:
        raise DefenseError(f"multi-krum needs n >= f + 3 (n={n}, f={f})")
    if n < m:
        raise DefenseError(f"multi-krum needs n >= krum_m (n={n}, m={m})")
    stacked = _stack(updates)
    sq = ((stacked[:, None, :] - stacked[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(sq, np.inf)
    neighbors = n - f - 2
    scores = np.sort(sq, axis=1)[:, :neighbors].sum(axis=1)
    order = sorted(range(n), key=lambda i: (scores[i], updates[i].client_id))
    chosen = sorted(order[:m])
    agg = stacked[chosen].mean(axis=0)
    accepted = [updates[i].client_id for i in chosen]
    rejected = [u.client_id for i, u in enumerate(updates) if i not in set(chosen)]
    return _result(agg, updates[0].params.layout, accepted, rejected)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def fltrust_like(updates, prev_global: FlatVector, params: DefenseParams, rng=None) -> AggregationResult:
    """Trust-weighted aggregation against a server-trained reference update.

    trust_i = relu(cos(delta_i, delta_ref)); deltas are rescaled to the
    reference norm before the trust-weighted mean is added to the previous
    global. Clients with zero trust are rejected.
    """
    updates = _sorted_updates(updates)
    if params.fltrust_root is None or len(params.fltrust_root) == 0:
        raise DefenseError("fltrust needs a non-empty root set")
    if params.arch is None or params.hyper is None:
        raise DefenseError("fltrust needs the architecture and hyperparameters")
    if rng is None:
        rng = np.random.default_rng(0)
    seed = int(rng.integers(0, 2**63 - 1))
    ref_model = train_local(
        unflatten(params.arch, prev_global),
        params.fltrust_root.features,
        params.fltrust_root.labels,
        params.hyper.epochs,
        params.hyper.lr,
        params.hyper.batch,
        seed,
    )
    ref_delta = flatten(ref_model).values - prev_global.values
    ref_norm = np.linalg.norm(ref_delta)

    stacked = _stack(updates)
    deltas = stacked - prev_global.values
    trusts = np.array([max(0.0, _cosine(d, ref_delta)) for d in deltas])
    accepted = [u.client_id for u, tr in zip(updates, trusts) if tr > 0]
    rejected = [u.client_id for u, tr in zip(updates, trusts) if tr <= 0]
    total = trusts.sum()
    if total == 0.0:
        return _result(prev_global.values.copy(), prev_global.layout, [], rejected)
    norms = np.linalg.norm(deltas, axis=1)
    scale = np.where(norms > 0, ref_norm / np.where(norms > 0, norms, 1.0), 0.0)
    mixed = (deltas * (trusts * scale)[:, None]).sum(axis=0) / total
    return _result(prev_global.values + mixed, prev_global.layout, accepted, rejected)


def flame_lite(updates, prev_global: FlatVector, params: DefenseParams, rng=None) -> AggregationResult:
    """Cosine-clustering defense on update deltas.

    Single-link clustering at an adaptive threshold: the threshold grows
    through the sorted pairwise cosine distances until the largest component
    first reaches a strict majority (ceil(n/2) + 1), so the accepted cluster
    is the tightest majority structure in the round. If no such cluster
    exists everyone is accepted. Accepted deltas are clipped to their median
    L2 norm, averaged, and perturbed with Gaussian noise of scale
    flame_noise_sigma times that median norm.
    """
    updates = _sorted_updates(updates)
    n = len(updates)
    if n < 2:
        raise DefenseError("flame needs at least two updates")
    deltas = _stack(updates) - prev_global.values

    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if not deltas[i].any() and not deltas[j].any():
                d = 0.0
            else:
                d = 1.0 - _cosine(deltas[i], deltas[j])
            dist[i, j] = dist[j, i] = d

    component = list(range(n))

    def find(i):
        while component[i] != i:
            component[i] = component[component[i]]
            i = component[i]
        return i

    majority = (n + 1) // 2 + 1
    edges = sorted(
        (dist[i, j], i, j) for i in range(n) for j in range(i + 1, n)
    )
    keep = list(range(n))
    pos = 0
    threshold = None
    while pos < len(edges):
        # add every edge of equal weight before re-checking, so results do
        # not depend on tie order
        weight = edges[pos][0]
        while pos < len(edges) and edges[pos][0] == weight:
            _, i, j = edges[pos]
            component[find(i)] = find(j)
            pos += 1
        roots = [find(i) for i in range(n)]
        sizes = {r: roots.count(r) for r in set(roots)}
        best = min(sizes, key=lambda r: (-sizes[r], r))
        if sizes[best] >= majority:
            threshold = weight
            break
    if threshold is not None:
        final = THRESHOLD_MARGIN * threshold
        for d, i, j in edges:
            if d <= final:
                component[find(i)] = find(j)
        roots = [find(i) for i in range(n)]
        sizes = {r: roots.count(r) for r in set(roots)}
        best = min(sizes, key=lambda r: (-sizes[r], r))
        keep = [i for i in range(n) if roots[i] == best]

    norms = np.linalg.norm(deltas[keep], axis=1)
    med = float(np.median(norms))
    clip = np.where(norms > med, med / np.where(norms > 0, norms, 1.0), 1.0)
    clipped = deltas[keep] * clip[:, None]
    agg = prev_global.values + clipped.mean(axis=0)
    if params.flame_noise_sigma > 0 and med > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        agg = agg + rng.normal(0.0, params.flame_noise_sigma * med, size=agg.size)
    accepted = [updates[i].client_id for i in keep]
    rejected = [u.client_id for i, u in enumerate(updates) if i not in set(keep)]
    return _result(agg, prev_global.layout, accepted, rejected)


DEFENSES = {
    "fedavg": fedavg,
    "median": coordinate_median,
    "trimmed_mean": trimmed_mean,
    "multi_krum": multi_krum,
    "fltrust": fltrust_like,
    "flame": flame_lite,
}


def make_defense(name: str, params: DefenseParams):
    """Bind a rule and its parameters into the callable the engine expects."""
    if name not in DEFENSES:
        raise DefenseError(
            f"unknown defense {name!r}; pick one of {sorted(DEFENSES)}"
        )
    rule = DEFENSES[name]

    def run(updates, prev_global, rng=None):
        return rule(updates, prev_global, params, rng)

    run.defense_name = name
    return run
