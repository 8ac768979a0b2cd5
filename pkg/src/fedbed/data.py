"""Synthetic classification data, patch triggers, and non-IID partitioning.

Samples live in [0,1]^d (conceptually flattened images). Each class is a
Gaussian blob around a random mean; a trigger overwrites a fixed set of
feature positions and relabels the sample to the attacker's target class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

BLOB_SIGMA = 0.15
MEAN_SEPARATION = 4.0 * BLOB_SIGMA


class DataError(ValueError):
    pass


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SampleSet:
    """A batch of samples: features (n, d) in [0,1], integer labels (n,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        if self.features.ndim != 2:
            raise DataError("features must be a (n, d) array")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels must be one per sample")
        if self.features.size and (
            self.features.min() < 0.0 or self.features.max() > 1.0
        ):
            raise DataError("features must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be non-negative")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.features[idx], self.labels[idx])

    @staticmethod
    def concat(parts: Sequence["SampleSet"]) -> "SampleSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise DataError("nothing to concatenate")
        return SampleSet(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass(frozen=True)
class TriggerSpec:
    """Patch trigger: feature positions, the values written there, and the
    label every triggered sample is forced to."""

    indices: tuple[int, ...]
    values: tuple[float, ...]
    target_label: int

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.indices) != len(set(self.indices)):
            raise DataError("trigger indices must be distinct")
        if len(self.values) != len(self.indices):
            raise DataError("one trigger value per index")
        if any(i < 0 for i in self.indices):
            raise DataError("trigger indices must be non-negative")
        if any(not (0.0 <= v <= 1.0) for v in self.values):
            raise DataError("trigger values must lie in [0, 1]")
        if self.target_label < 0:
            raise DataError("target label must be non-negative")

    def validate_for(self, dim: int, classes: int | None = None) -> None:
        if self.indices and max(self.indices) >= dim:
            raise DataError(
                f"trigger index {max(self.indices)} out of range for d={dim}"
            )
        if classes is not None and self.target_label >= classes:
            raise DataError(
                f"target label {self.target_label} out of range for X={classes}"
            )

    def shard(self, shard_index: int, shard_count: int) -> "TriggerSpec":
        """The shard_index-th piece of the trigger split over shard_count
        colluding clients; every piece must be non-empty."""
        if shard_count < 1 or shard_index < 0 or shard_index >= shard_count:
            raise DataError("shard_index must lie in [0, shard_count)")
        if len(self.indices) < shard_count:
            raise DataError(
                f"too few trigger positions ({len(self.indices)}) for "
                f"{shard_count} shards"
            )
        parts = np.array_split(np.arange(len(self.indices)), shard_count)
        keep = parts[shard_index]
        return TriggerSpec(
            tuple(self.indices[i] for i in keep),
            tuple(self.values[i] for i in keep),
            self.target_label,
        )


def corner_trigger(dim: int, size: int = 4, value: float = 1.0, target_label: int = 0) -> TriggerSpec:
    """Default patch: an L-shaped block hugging the top-left corner of the
    flattened grid (cell (0,0), then alternating along the two border arms),
    so every trigger cell sits on the near-constant border background."""
    side = int(math.isqrt(dim))
    if side * side == dim:
        cells = [(0, 0)]
        k = 1
        while len(cells) < size and k < side:
            cells.append((0, k))
            if len(cells) < size:
                cells.append((k, 0))
            k += 1
        idx = [r * side + c for r, c in cells[:size]]
    else:
        idx = list(range(size))
    if len(idx) < size or (idx and max(idx) >= dim):
        raise DataError(f"trigger of size {size} does not fit in d={dim}")
    return TriggerSpec(tuple(idx), tuple(value for _ in idx), target_label)


@dataclass(frozen=True)
class PartitionConfig:
    """Label-skewed grouping: a sample of class y lands in group y with
    probability q and in each other group with probability (1-q)/(X-1)."""

    q: float
    num_clients: int
    classes: int

    def __post_init__(self):
        if self.classes < 2:
            raise DataError("need at least two classes")
        if self.num_clients < self.classes:
            raise DataError(
                f"num_clients ({self.num_clients}) must be >= classes ({self.classes})"
            )
        if not (1.0 / self.classes < self.q <= 1.0):
            raise DataError(f"q must lie in (1/{self.classes}, 1], got {self.q}")


@dataclass(frozen=True)
class ClientDataset:
    """One client's local data plus the clean/poison x train/val split.

    poison_train / poison_val hold trigger-applied copies; poison_base keeps
    the untriggered originals of poison_train so distributed-trigger attacks
    can re-poison them with a sub-trigger.
    """

    client_id: int
    group: int
    all: SampleSet
    weight: float
    clean_train: SampleSet | None = None
    clean_val: SampleSet | None = None
    poison_train: SampleSet | None = None
    poison_val: SampleSet | None = None
    poison_base: SampleSet | None = None

    @property
    def has_split(self) -> bool:
        return self.clean_train is not None


BACKGROUND_LEVEL = 0.1


def border_envelope(dim: int) -> np.ndarray:
    """How informative each feature is allowed to be, on the sqrt(d) grid.

    Flattened images carry their class content in the interior; border cells
    are near-constant background. Ring 0 (the outermost cells) keeps 10% of
    the class signal, ring 1 keeps 50%, ring 2 keeps 90%, everything deeper
    is unconstrained. Non-square dimensions get a flat envelope.
    """
    side = int(math.isqrt(dim))
    if side * side != dim:
        return np.ones(dim)
    env = np.empty((side, side))
    for r in range(side):
        for c in range(side):
            ring = min(r, c, side - 1 - r, side - 1 - c)
            env[r, c] = (0.1, 0.5, 0.9)[min(ring, 2)] if ring < 3 else 1.0
    return env.ravel()


def generate_dataset(
    classes: int,
    per_class: int,
    dim: int,
    seed: int,
    sigma: float = BLOB_SIGMA,
) -> SampleSet:
    """X well-separated Gaussian blobs in [0,1]^d, per_class samples each.

    The samples mimic flattened images: class means are drawn per class in
    a band away from the [0,1] edges, then pulled toward a shared background
    level near the grid border (so border features are weakly informative,
    like image backgrounds). Means are redrawn until all pairwise distances
    exceed 4*sigma, so a linear model separates the classes comfortably.
    """
    if classes < 2 or per_class < 1:
        raise DataError("need classes >= 2 and per_class >= 1")
    if dim < classes:
        raise DataError(f"d={dim} too small to place {classes} distinct means")
    rng = np.random.default_rng(seed)
    separation = 4.0 * sigma
    env = border_envelope(dim)
    for _ in range(1000):
        raw = rng.uniform(0.2, 0.8, size=(classes, dim))
        means = BACKGROUND_LEVEL + env * (raw - BACKGROUND_LEVEL)
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        if dist.min() > separation:
            break
    else:
        raise DataError("could not place well-separated class means")
    feats = np.empty((classes * per_class, dim))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        block = slice(c * per_class, (c + 1) * per_class)
        feats[block] = means[c] + rng.normal(0.0, sigma, size=(per_class, dim))
        labels[block] = c
    np.clip(feats, 0.0, 1.0, out=feats)
    return SampleSet(feats, labels)


def apply_trigger(samples: SampleSet, trigger: TriggerSpec) -> SampleSet:
    """Overwrite the trigger positions and force the target label.

    Untouched positions are bit-identical; applying twice equals once.
    """
    trigger.validate_for(samples.dim)
    feats = samples.features.copy()
    if trigger.indices:
        feats[:, list(trigger.indices)] = np.asarray(trigger.values)
    labels = np.full(len(samples), trigger.target_label, dtype=np.int64)
    return SampleSet(feats, labels)


def partition_noniid(
    samples: SampleSet, cfg: PartitionConfig, seed: int
) -> list[ClientDataset]:
    """Assign every sample to exactly one client under the q-skew rule.

    Clients are spread over the X groups round-robin (client i sits in group
    i mod X); within the drawn group the sample goes to a uniformly random
    member. Client weights are data-share fractions.
    """
    if samples.labels.size and samples.labels.max() >= cfg.classes:
        raise DataError("sample label outside [0, classes)")
    rng = np.random.default_rng(seed)
    n = len(samples)
    x = cfg.classes
    y = samples.labels
    own = rng.random(n) < cfg.q
    other = (y + 1 + rng.integers(0, x - 1, size=n)) % x
    groups = np.where(own, y, other)

    members = [
        np.array([c for c in range(cfg.num_clients) if c % x == g])
        for g in range(x)
    ]
    owner = np.empty(n, dtype=np.int64)
    for g in range(x):
        mask = groups == g
        count = int(mask.sum())
        owner[mask] = members[g][rng.integers(0, len(members[g]), size=count)]

    total = float(n)
    clients = []
    for cid in range(cfg.num_clients):
        idx = np.flatnonzero(owner == cid)
        clients.append(
            ClientDataset(
                client_id=cid,
                group=cid % x,
                all=samples.subset(idx),
                weight=len(idx) / total if total else 0.0,
            )
        )
    return clients


def split_four_way(
    client: ClientDataset,
    trigger: TriggerSpec,
    poison_rate: float,
    val_frac: float,
    seed: int,
) -> ClientDataset:
    """Fill in the clean/poison train/val split for one client.

    clean_train/clean_val split `all` by val_frac. poison_train holds
    triggered copies of a poison_rate share of the training samples;
    poison_val holds triggered copies of every validation sample whose
    original label differs from the trigger target, so backdoor success
    on it is never inflated by already-correct predictions.
    """
    if not (0.0 < poison_rate < 1.0) or not (0.0 < val_frac < 1.0):
        raise DataError("poison_rate and val_frac must lie in (0, 1)")
    trigger.validate_for(client.all.dim)
    n = len(client.all)
    rng = np.random.default_rng(seed)
    n_val = int(round(n * val_frac))
    if n_val < 1 or n - n_val < 1:
        raise DataError(
            f"client {client.client_id}: empty split "
            f"({'clean_val' if n_val < 1 else 'clean_train'})"
        )
    order = rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    clean_train = client.all.subset(np.sort(train_idx))
    clean_val = client.all.subset(np.sort(val_idx))

    n_poison = min(int(round(n * poison_rate)), len(clean_train))
    if n_poison < 1:
        raise DataError(f"client {client.client_id}: empty split (poison_train)")
    pick = np.sort(rng.choice(len(clean_train), size=n_poison, replace=False))
    base = clean_train.subset(pick)
    poison_train = apply_trigger(base, trigger)

    eligible = np.flatnonzero(clean_val.labels != trigger.target_label)
    if eligible.size == 0:
        raise DataError(f"client {client.client_id}: empty split (poison_val)")
    poison_val = apply_trigger(clean_val.subset(eligible), trigger)

    return replace(
        client,
        clean_train=clean_train,
        clean_val=clean_val,
        poison_train=poison_train,
        poison_val=poison_val,
        poison_base=base,
    )


def save_samples(path, samples: SampleSet) -> None:
    """Text table, one sample per line: label then the d feature values.

    repr() round-trips float64 exactly and never uses locale separators.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for row, label in zip(samples.features, samples.labels):
            fh.write(str(int(label)))
            for v in row:
                fh.write(" " + repr(float(v)))
            fh.write("\n")


def load_samples(path) -> SampleSet:
    feats, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            labels.append(int(parts[0]))
            feats.append([float(v) for v in parts[1:]])
    if not labels:
        raise DataError(f"{path}: no samples")
    return SampleSet(np.asarray(feats), np.asarray(labels))
