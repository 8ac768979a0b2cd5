"""Adversary strategies for the federated testbed.

Four attacks: classic data poisoning (badnets), the distributed-trigger
variant (dba), a naive layer-substitution baseline (lpa-like), and the
layer-smoothing attack (lsa). The layer-targeted attacks first measure how
much each layer contributes to the backdoor by swapping layers between a
benign and a poisoned local model, then submit crafted updates that keep
every non-critical coordinate at the benign average.

Compromised clients collude: one designated client (the lowest malicious
id) runs the layer analysis on an identification round, every other
malicious client reuses the shared cache, so all of them submit identical
parameters within a round.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import ClientDataset, SampleSet, TriggerSpec, apply_trigger
from .engine import FLConfig, Hyper, Update, World
from .metrics import compute_bsr
from .nn import (
    FlatVector,
    Model,
    flatten,
    substitute_layers,
    train_local,
    unflatten,
)
from .util import derive_seed

# a poisoned local model must beat chance by this factor for its layer
# report to be trusted (1.5/X on an X-class problem)
MIN_BASELINE_FACTOR = 1.5

# fine-tuning (poisoned model and frozen payload) runs at a fraction of the
# protocol learning rate: the backdoor is easy to embed, and a gentler step
# keeps the crafted parameters near the benign population
FT_LR_SCALE = 0.25

# when set, malicious fine-tuning stops once parameters drift further from
# their origin than this multiple of the median benign local-update
# magnitude; None lets the fine-tune run its configured length
DEVIATION_BUDGET_SCALE: float | None = None


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Knobs of the layer-targeted attacks.

    lam blends fine-tuned malicious coordinates against the benign average
    (0 removes the attack, above 1 enters scaling-attack territory). tau is
    the fraction of the poisoned model's backdoor rate that the selected
    layer set must recover. detection_period is how many rounds a layer
    analysis stays cached. train_epochs is how long data-poisoning attackers
    train locally; they are not bound by the protocol's epoch count.
    """

    trigger: TriggerSpec
    lam: float = 1.0
    tau: float = 0.8
    detection_period: int = 5
    ft_epochs: int = 5
    train_epochs: int = 20

    def __post_init__(self):
        if self.lam < 0:
            raise AttackError("lam must be >= 0")
        if not (0.0 < self.tau <= 1.0):
            raise AttackError("tau must lie in (0, 1]")
        if self.detection_period < 1:
            raise AttackError("detection_period must be >= 1")
        if self.ft_epochs < 0:
            raise AttackError("ft_epochs must be >= 0")
        if self.train_epochs < 1:
            raise AttackError("train_epochs must be >= 1")


@dataclass(frozen=True)
class CriticalLayerReport:
    """Per-layer backdoor contribution plus the greedily selected layer set.

    per_layer is sorted by descending drop; achieved_bsr is the backdoor rate
    of the benign model carrying the selected malicious layers. A report is
    unusable when the poisoned model never learned the backdoor well enough
    for the drops to mean anything.
    """

    per_layer: tuple[tuple[str, float], ...]
    selected: tuple[str, ...]
    baseline_bsr: float
    achieved_bsr: float
    usable: bool
    round: int | None = None

    def __post_init__(self):
        drops = [d for _, d in self.per_layer]
        if any(a < b for a, b in zip(drops, drops[1:])):
            raise AttackError("per_layer must be sorted by descending drop")

    def to_text(self) -> str:
        lines = [
            f"# baseline_bsr {self.baseline_bsr:.6f}",
            f"# achieved_bsr {self.achieved_bsr:.6f}",
            f"# usable {int(self.usable)}",
            f"# round {self.round if self.round is not None else -1}",
            "layer\tdelta_bsr\tselected",
        ]
        for name, drop in self.per_layer:
            lines.append(f"{name}\t{drop:.6f}\t{int(name in self.selected)}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SelectionVector:
    """Per-layer 0/1 mask expanded to parameter granularity."""

    values: np.ndarray
    selected: tuple[str, ...]

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "selected", tuple(self.selected))


def selection_vector(layout, selected) -> SelectionVector:
    wanted = set(selected)
    known = {name for name, _, _ in layout}
    unknown = wanted - known
    if unknown:
        raise AttackError(f"unknown layer name {sorted(unknown)[0]!r}")
    total = sum(length for _, _, length in layout)
    bits = np.zeros(total)
    for name, offset, length in layout:
        if name in wanted:
            bits[offset : offset + length] = 1.0
    return SelectionVector(bits, tuple(n for n, _, _ in layout if n in wanted))


def badnets_train(model: Model, client: ClientDataset, hyper: Hyper, rng_seed: int) -> Update:
    """Local training on clean plus fully-triggered data, submitted as-is."""
    if client.poison_train is None or len(client.poison_train) == 0:
        raise AttackError(f"client {client.client_id} has no poisoned training data")
    mixed = SampleSet.concat([client.clean_train, client.poison_train])
    trained = train_local(
        model, mixed.features, mixed.labels,
        hyper.epochs, hyper.lr, hyper.batch, rng_seed,
    )
    return Update(client.client_id, flatten(trained), client.weight)


def dba_train(
    model: Model,
    client: ClientDataset,
    hyper: Hyper,
    shard_index: int,
    shard_count: int,
    trigger: TriggerSpec,
    rng_seed: int,
) -> Update:
    """Like badnets_train but poisons with only this client's sub-trigger;
    success is still evaluated against the full trigger elsewhere."""
    if client.poison_base is None or len(client.poison_base) == 0:
        raise AttackError(f"client {client.client_id} has no poisoned training data")
    sub = trigger.shard(shard_index, shard_count)
    poisoned = apply_trigger(client.poison_base, sub)
    mixed = SampleSet.concat([client.clean_train, poisoned])
    trained = train_local(
        model, mixed.features, mixed.labels,
        hyper.epochs, hyper.lr, hyper.batch, rng_seed,
    )
    return Update(client.client_id, flatten(trained), client.weight)


def benign_local_model(model: Model, client: ClientDataset, hyper: Hyper, seed: int) -> Model:
    """What this client would have submitted honestly: trained on its clean
    training split only."""
    if not client.has_split:
        raise AttackError(f"client {client.client_id} has no four-way split")
    return train_local(
        model,
        client.clean_train.features,
        client.clean_train.labels,
        hyper.epochs,
        hyper.lr,
        hyper.batch,
        seed,
    )


def poisoned_local_model(
    model: Model,
    client: ClientDataset,
    ft_epochs: int,
    hyper: Hyper,
    seed: int,
    deviation_budget: float | None = None,
) -> Model:
    """Fine-tune the global model on the poisoned split mixed 1:1 with clean
    samples; pure-poison tuning collapses main accuracy and makes the
    per-layer drops noisy.

    With a deviation_budget the fine-tune stops at the last epoch whose
    parameters stay within that L2 distance of the starting model, keeping
    the poisoned model statistically close to what benign peers submit.
    """
    if client.poison_train is None or len(client.poison_train) == 0:
        raise AttackError(f"client {client.client_id} has no poisoned training data")
    rng = np.random.default_rng(derive_seed(seed, "mix"))
    k = min(len(client.clean_train), len(client.poison_train))
    pick = np.sort(rng.choice(len(client.clean_train), size=k, replace=False))
    mixed = SampleSet.concat([client.poison_train, client.clean_train.subset(pick)])
    if deviation_budget is None:
        return train_local(
            model, mixed.features, mixed.labels,
            ft_epochs, FT_LR_SCALE * hyper.lr, hyper.batch, derive_seed(seed, "train"),
        )
    origin = flatten(model).values
    current = model
    train_seed = derive_seed(seed, "train")
    for epoch in range(ft_epochs):
        candidate = train_local(
            current, mixed.features, mixed.labels,
            1, FT_LR_SCALE * hyper.lr, hyper.batch, derive_seed(train_seed, epoch),
        )
        if np.linalg.norm(flatten(candidate).values - origin) > deviation_budget:
            break
        current = candidate
    return current


def rank_critical_layers(
    w_benign: Model,
    w_malicious: Model,
    poison_val: SampleSet,
    tau: float,
    min_baseline: float = 0.0,
) -> CriticalLayerReport:
    """Measure each layer's backdoor contribution and select a compact set.

    The drop for layer l is the backdoor-rate loss when l in the poisoned
    model is replaced by its benign counterpart. Layers are then inserted
    into the benign model in descending-drop order until the hybrid recovers
    tau times the poisoned model's backdoor rate.
    """
    if w_benign.arch_id != w_malicious.arch_id:
        raise AttackError("benign and poisoned models must share an architecture")
    if len(poison_val) == 0:
        raise AttackError("poison_val is empty")
    baseline = compute_bsr(w_malicious, poison_val)
    names = w_malicious.layer_names()
    drops = []
    for name in names:
        swapped = substitute_layers(w_malicious, w_benign, {name})
        drops.append((name, baseline - compute_bsr(swapped, poison_val)))
    order = sorted(range(len(names)), key=lambda k: (-drops[k][1], k))
    per_layer = tuple(drops[k] for k in order)

    selected: list[str] = []
    achieved = 0.0
    for name, _ in per_layer:
        selected.append(name)
        hybrid = substitute_layers(w_benign, w_malicious, set(selected))
        achieved = compute_bsr(hybrid, poison_val)
        if achieved >= tau * baseline:
            break
    return CriticalLayerReport(
        per_layer=per_layer,
        selected=tuple(selected),
        baseline_bsr=baseline,
        achieved_bsr=achieved,
        usable=baseline >= min_baseline,
    )


def identify_bc_layers(
    model: Model,
    client: ClientDataset,
    cfg: AttackConfig,
    hyper: Hyper,
    seed: int,
) -> CriticalLayerReport:
    """Train the benign/poisoned local pair from the current global model and
    rank the layers by their backdoor contribution."""
    if not client.has_split:
        raise AttackError(f"client {client.client_id} has no four-way split")
    w_benign = benign_local_model(model, client, hyper, derive_seed(seed, "benign"))
    w_malicious = poisoned_local_model(
        model, client, cfg.ft_epochs, hyper, derive_seed(seed, "malicious")
    )
    classes = model.output_dim
    return rank_critical_layers(
        w_benign,
        w_malicious,
        client.poison_val,
        cfg.tau,
        min_baseline=MIN_BASELINE_FACTOR / classes,
    )


def finetune_frozen(
    base: Model,
    l_star,
    client: ClientDataset,
    ft_epochs: int,
    hyper: Hyper,
    seed: int,
    deviation_budget: float | None = None,
    reference: Model | None = None,
) -> Model:
    """SGD on the poisoned split with every layer outside l_star frozen.

    Frozen layers keep their original arrays, so they are bit-identical
    before and after by construction. With a deviation_budget the tuning
    stops at the last epoch whose selected-layer parameters stay within that
    L2 distance of `reference` (default: the starting model), so the payload
    never drifts further from the benign population than the budget allows.
    """
    wanted = set(l_star)
    if not wanted:
        raise AttackError("l_star must not be empty")
    unknown = wanted - set(base.layer_names())
    if unknown:
        raise AttackError(f"unknown layer name {sorted(unknown)[0]!r}")
    if client.poison_train is None or len(client.poison_train) == 0:
        raise AttackError(f"client {client.client_id} has no poisoned training data")
    if ft_epochs == 0:
        return base

    from .nn import _backprop_raw  # shared raw-array backprop core

    ref = reference if reference is not None else base
    ref_blocks = {b.name: b for b in ref.layers}

    weights = [b.weights.copy() if b.name in wanted else b.weights for b in base.layers]
    biases = [b.bias.copy() if b.name in wanted else b.bias for b in base.layers]
    activations = [b.activation for b in base.layers]
    trainable = [b.name in wanted for b in base.layers]

    def selected_deviation():
        dev = 0.0
        for k, b in enumerate(base.layers):
            if trainable[k]:
                rb = ref_blocks[b.name]
                dev += float(((weights[k] - rb.weights) ** 2).sum())
                dev += float(((biases[k] - rb.bias) ** 2).sum())
        return np.sqrt(dev)

    x = client.poison_train.features
    y = client.poison_train.labels
    lr = FT_LR_SCALE * hyper.lr
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    snapshot = None
    for _ in range(ft_epochs):
        if deviation_budget is not None:
            snapshot = ([w.copy() if t else w for w, t in zip(weights, trainable)],
                        [b.copy() if t else b for b, t in zip(biases, trainable)])
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch):
            idx = order[start : start + hyper.batch]
            _, dws, dbs = _backprop_raw(weights, biases, activations, x[idx], y[idx])
            for k in range(len(weights)):
                if trainable[k]:
                    weights[k] -= lr * dws[k]
                    biases[k] -= lr * dbs[k]
        if deviation_budget is not None and selected_deviation() > deviation_budget:
            weights, biases = snapshot
            break
    layers = tuple(
        type(b)(b.name, w, bb, b.activation) if trainable[k] else b
        for k, (b, w, bb) in enumerate(zip(base.layers, weights, biases))
    )
    return Model(layers, base.arch_id)


def craft_lsa_update(
    w_ft: Model,
    benign_models,
    v: SelectionVector,
    lam: float,
) -> Model:
    """Blend the fine-tuned malicious parameters into the benign average.

    Coordinate-wise: lam * v * u_ft + relu(1 - lam) * v * u_a + (1 - v) * u_a
    where u_a is the mean of the compromised devices' benign local models.
    lam=0 collapses to the benign average, lam=1 swaps the selected layers
    in verbatim, lam>1 scales them.
    """
    if lam < 0:
        raise AttackError("lam must be >= 0")
    benign_models = list(benign_models)
    if not benign_models:
        raise AttackError("need at least one benign local model")
    for m in benign_models:
        if m.arch_id != w_ft.arch_id:
            raise AttackError("benign models must share the payload's architecture")
    u_ft = flatten(w_ft).values
    u_a = np.mean([flatten(m).values for m in benign_models], axis=0)
    if v.values.size != u_ft.size:
        raise AttackError("selection vector length mismatch")
    bits = v.values
    crafted = lam * (bits * u_ft) + max(0.0, 1.0 - lam) * (bits * u_a) + (1.0 - bits) * u_a
    return unflatten(w_ft.arch_id, crafted)


@dataclass
class AdversaryState:
    """Shared state of the colluding clients.

    The layer report is the expensive, periodically refreshed part; the
    benign local models and the fine-tuned payload are rebuilt from the
    current global every submission round (the adversary sees the global
    each round, and a stale payload would stick out as the training moves).
    """

    report: CriticalLayerReport | None = None
    payload: Model | None = None
    benign_models: dict[int, Model] = field(default_factory=dict)
    last_identification: int | None = None
    reports_log: list[CriticalLayerReport] = field(default_factory=list)


def lsa_round(
    model: Model,
    t: int,
    state: AdversaryState,
    cfg: AttackConfig,
    clients,
    hyper: Hyper,
    master_seed: int,
    sampled_malicious,
    malicious_ids,
    finetune: bool = True,
) -> list[Update]:
    """One round of the layer-targeted attack.

    On identification rounds (cache empty or detection_period rounds old)
    the designated client (lowest malicious id) re-ranks the layers and the
    selected set is cached. On every submission round the compromised
    devices retrain their benign local models, the designated client
    rebuilds the poisoned model and the frozen fine-tuned payload (skipped
    when `finetune` is off, which gives the naive substitution baseline),
    and all sampled malicious clients submit the identical crafted update.
    """
    malicious = sorted(malicious_ids)
    if not malicious:
        raise AttackError("no malicious clients configured")
    refresh_due = (
        state.report is None
        or state.last_identification is None
        or t - state.last_identification >= cfg.detection_period
    )
    submitting = bool(sampled_malicious)
    if not refresh_due and not submitting:
        return []

    designated = malicious[0]
    client = clients[designated]
    state.benign_models = {
        cid: benign_local_model(
            model, clients[cid], hyper, derive_seed(master_seed, "adv-benign", t, cid)
        )
        for cid in malicious
    }
    # stay statistically close to the benign population: every malicious
    # training stops once it drifts further from its origin than a multiple
    # of the typical benign local-update magnitude
    if DEVIATION_BUDGET_SCALE is not None:
        g = flatten(model).values
        benign_norms = [
            np.linalg.norm(flatten(m).values - g) for m in state.benign_models.values()
        ]
        budget = DEVIATION_BUDGET_SCALE * float(np.median(benign_norms))
    else:
        budget = None
    w_benign = state.benign_models[designated]
    w_malicious = poisoned_local_model(
        model, client, cfg.ft_epochs, hyper,
        derive_seed(master_seed, "adv-poison", t), deviation_budget=budget,
    )
    if refresh_due:
        report = rank_critical_layers(
            w_benign,
            w_malicious,
            client.poison_val,
            cfg.tau,
            min_baseline=MIN_BASELINE_FACTOR / model.output_dim,
        )
        report = type(report)(
            report.per_layer, report.selected, report.baseline_bsr,
            report.achieved_bsr, report.usable, round=t,
        )
        state.reports_log.append(report)
        state.last_identification = t
        if report.usable:
            state.report = report

    if not submitting:
        return []

    u_a = np.mean([flatten(m).values for m in state.benign_models.values()], axis=0)
    if state.report is None:
        # no usable layer analysis yet: submit the benign average, which is
        # exactly the lam=0 form of the crafted update
        crafted = unflatten(model.arch_id, u_a)
        state.payload = None
    else:
        if finetune:
            hybrid = substitute_layers(w_benign, w_malicious, set(state.report.selected))
            state.payload = finetune_frozen(
                hybrid, state.report.selected, client, cfg.ft_epochs, hyper,
                derive_seed(master_seed, "adv-finetune", t),
                deviation_budget=budget, reference=unflatten(model.arch_id, u_a),
            )
        else:
            state.payload = w_malicious
        layout = flatten(state.payload).layout
        v = selection_vector(layout, state.report.selected)
        crafted = craft_lsa_update(state.payload, state.benign_models.values(), v, cfg.lam)
    params = flatten(crafted)
    return [Update(cid, params, clients[cid].weight) for cid in sorted(sampled_malicious)]


def default_malicious_ids(cfg: FLConfig) -> frozenset[int]:
    """Which clients the adversary controls: the first num_malicious ids
    (one per non-IID group while they last, matching the partitioner's
    round-robin group rule)."""
    return frozenset(range(cfg.num_malicious))


class Adversary:
    """Attack 'none': every client behaves honestly."""

    name = "none"

    def malicious_ids(self, cfg: FLConfig) -> frozenset[int]:
        return frozenset()

    def produce(self, world: World, model: Model, t: int, sampled_malicious) -> list[Update]:
        return []

    @property
    def reports(self) -> list[CriticalLayerReport]:
        return []


class BadnetsAdversary(Adversary):
    name = "badnets"

    def __init__(self, attack_cfg: AttackConfig):
        self.cfg = attack_cfg

    def malicious_ids(self, cfg: FLConfig) -> frozenset[int]:
        return default_malicious_ids(cfg)

    def _hyper(self, cfg: FLConfig) -> Hyper:
        return Hyper(cfg.hyper.lr, self.cfg.train_epochs, cfg.hyper.batch)

    def produce(self, world, model, t, sampled_malicious):
        cfg = world.cfg
        return [
            badnets_train(
                model, world.clients[cid], self._hyper(cfg),
                derive_seed(cfg.master_seed, "badnets", t, cid),
            )
            for cid in sorted(sampled_malicious)
        ]


class DbaAdversary(BadnetsAdversary):
    """Distributes the trigger over the colluding clients; with more clients
    than trigger positions the shards wrap around."""

    name = "dba"

    def produce(self, world, model, t, sampled_malicious):
        cfg = world.cfg
        malicious = sorted(self.malicious_ids(cfg))
        shard_count = min(len(malicious), len(world.trigger.indices))
        out = []
        for cid in sorted(sampled_malicious):
            shard_index = malicious.index(cid) % shard_count
            out.append(
                dba_train(
                    model, world.clients[cid], self._hyper(cfg),
                    shard_index, shard_count, world.trigger,
                    derive_seed(cfg.master_seed, "dba", t, cid),
                )
            )
        return out


class LayerSmoothingAdversary(Adversary):
    """The layer-smoothing attack (config name 'lsa')."""

    name = "lsa"
    finetune = True

    def __init__(self, attack_cfg: AttackConfig):
        self.cfg = attack_cfg
        self.state = AdversaryState()

    def malicious_ids(self, cfg: FLConfig) -> frozenset[int]:
        return default_malicious_ids(cfg)

    def produce(self, world, model, t, sampled_malicious):
        cfg = world.cfg
        return lsa_round(
            model, t, self.state, self.cfg, world.clients, cfg.hyper,
            cfg.master_seed, sampled_malicious, self.malicious_ids(cfg),
            finetune=self.finetune,
        )

    @property
    def reports(self):
        return list(self.state.reports_log)


class LayerSwapAdversary(LayerSmoothingAdversary):
    """Naive layer-substitution baseline (config name 'lpa-like'): selected
    malicious layers go in verbatim, no smoothing, no frozen fine-tune."""

    name = "lpa-like"
    finetune = False

    def __init__(self, attack_cfg: AttackConfig):
        super().__init__(replace(attack_cfg, lam=1.0))


ATTACKS = {
    "none": lambda attack_cfg: Adversary(),
    "badnets": BadnetsAdversary,
    "dba": DbaAdversary,
    "lpa-like": LayerSwapAdversary,
    "lsa": LayerSmoothingAdversary,
}


def make_adversary(name: str, attack_cfg: AttackConfig) -> Adversary:
    if name not in ATTACKS:
        raise AttackError(f"unknown attack {name!r}; pick one of {sorted(ATTACKS)}")
    return ATTACKS[name](attack_cfg)
