"""Federated training orchestration: sampling, local training, aggregation.

Client-side computation is embarrassingly parallel within a round; results
are invariant to execution order because every client's seed is derived
from (master_seed, round, client_id) and aggregation inputs are sorted by
client id before the defense sees them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import ClientDataset, SampleSet, TriggerSpec
from .metrics import accuracy, compute_bsr
from .nn import ArchSpec, FlatVector, Model, build_model, flatten, train_local, unflatten
from .util import derive_seed, rng_from


@dataclass(frozen=True)
class Hyper:
    """Local training knobs shared by every client."""

    lr: float = 0.05
    epochs: int = 2
    batch: int = 32

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch < 1:
            raise ValueError("need lr > 0, epochs >= 0, batch >= 1")


@dataclass(frozen=True)
class FLConfig:
    num_clients: int
    num_malicious: int
    sample_fraction: float
    rounds: int
    hyper: Hyper
    master_seed: int

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("need at least one client")
        # threat model: strictly fewer than half the users are compromised
        if not (0 <= self.num_malicious < self.num_clients / 2):
            raise ValueError(
                f"num_malicious must lie in [0, num_clients/2), got "
                f"{self.num_malicious} of {self.num_clients}"
            )
        if not (0.0 < self.sample_fraction <= 1.0):
            raise ValueError("sample_fraction must lie in (0, 1]")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")


@dataclass(frozen=True)
class Update:
    """One client's submitted local model for a round."""

    client_id: int
    params: FlatVector
    declared_weight: float


@dataclass(frozen=True)
class RoundRecord:
    t: int
    sampled: tuple[int, ...]
    accepted: tuple[int, ...]
    rejected: tuple[int, ...]
    acc: float
    bsr: float


@dataclass
class History:
    rounds: list[RoundRecord] = field(default_factory=list)
    final_model: Model | None = None


@dataclass(frozen=True)
class World:
    """Everything a run needs besides the adversary and the defense."""

    arch: ArchSpec
    cfg: FLConfig
    clients: list[ClientDataset]
    trigger: TriggerSpec
    test_clean: SampleSet
    test_triggered: SampleSet
    root: SampleSet | None = None


def sample_clients(t: int, cfg: FLConfig, rng: np.random.Generator | None = None) -> tuple[int, ...]:
    """round(N * fraction) distinct client ids, uniform without replacement,
    deterministic per (master_seed, t)."""
    if rng is None:
        rng = rng_from(cfg.master_seed, "sample", t)
    size = max(1, int(round(cfg.num_clients * cfg.sample_fraction)))
    ids = rng.choice(cfg.num_clients, size=size, replace=False)
    return tuple(sorted(int(i) for i in ids))


def client_seed(master_seed: int, t: int, client_id: int) -> int:
    return derive_seed(master_seed, t, client_id)


def _benign_update(model: Model, client: ClientDataset, cfg: FLConfig, t: int) -> Update:
    trained = train_local(
        model,
        client.all.features,
        client.all.labels,
        cfg.hyper.epochs,
        cfg.hyper.lr,
        cfg.hyper.batch,
        client_seed(cfg.master_seed, t, client.client_id),
    )
    return Update(client.client_id, flatten(trained), client.weight)


def run_round(
    model: Model,
    t: int,
    world: World,
    adversary,
    defense: Callable,
) -> tuple[Model, RoundRecord]:
    """One synchronous round: sample, train/attack, aggregate, evaluate.

    The adversary sees the global model every round (it may refresh internal
    state even when none of its clients were sampled). If the defense accepts
    nothing the previous global is kept and the round records all-rejected.
    """
    cfg = world.cfg
    sampled = sample_clients(t, cfg)
    malicious = adversary.malicious_ids(cfg)
    sampled_malicious = tuple(i for i in sampled if i in malicious)

    updates = [
        _benign_update(model, world.clients[i], cfg, t)
        for i in sampled
        if i not in malicious
    ]
    updates.extend(adversary.produce(world, model, t, sampled_malicious))
    updates.sort(key=lambda u: u.client_id)
    if tuple(u.client_id for u in updates) != sampled:
        raise RuntimeError("adversary did not submit for every sampled malicious client")

    result = defense(updates, flatten(model), rng_from(cfg.master_seed, "defense", t))
    accepted = tuple(sorted(result.accepted))
    rejected = tuple(sorted(result.rejected))
    if accepted:
        next_model = unflatten(world.arch, result.aggregate)
    else:
        next_model = model
    rec = RoundRecord(
        t=t,
        sampled=sampled,
        accepted=accepted,
        rejected=rejected,
        acc=accuracy(next_model, world.test_clean),
        bsr=compute_bsr(next_model, world.test_triggered),
    )
    return next_model, rec


def run_training(world: World, adversary, defense: Callable) -> History:
    """The full outer loop: T rounds from a freshly initialized global model."""
    cfg = world.cfg
    model = build_model(world.arch, derive_seed(cfg.master_seed, "init"))
    history = History()
    for t in range(cfg.rounds):
        model, rec = run_round(model, t, world, adversary, defense)
        history.rounds.append(rec)
    history.final_model = model
    return history
