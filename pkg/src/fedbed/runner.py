"""Experiment runner: builds the world from a config, runs it, writes files.

All emitted files are byte-deterministic for a given (config, seed): fixed
float formatting, sorted JSON keys, no timestamps.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, CriticalLayerReport, identify_bc_layers, make_adversary
from .config import ExperimentConfig
from .data import (
    PartitionConfig,
    SampleSet,
    TriggerSpec,
    apply_trigger,
    corner_trigger,
    generate_dataset,
    partition_noniid,
    split_four_way,
)
from .defenses import DefenseParams, make_defense
from .engine import FLConfig, History, Hyper, World, run_training
from .metrics import MetricsSummary, summarize_history
from .nn import ArchSpec, build_model
from .util import derive_seed, rng_from

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("tau", "lambda", "period")
MATRIX_ATTACKS = ("badnets", "dba", "lpa-like", "lsa")
MATRIX_DEFENSES = ("fedavg", "median", "trimmed_mean", "multi_krum", "fltrust", "flame")


@dataclass
class RunResult:
    summary: MetricsSummary
    history: History
    reports: list[CriticalLayerReport]
    malicious_ids: frozenset[int]


def build_trigger(cfg: ExperimentConfig) -> TriggerSpec:
    if cfg.trigger_positions is None:
        trig = corner_trigger(cfg.dim, cfg.trigger_size, cfg.trigger_value, cfg.trigger_target)
    else:
        trig = TriggerSpec(
            cfg.trigger_positions,
            tuple(cfg.trigger_value for _ in cfg.trigger_positions),
            cfg.trigger_target,
        )
    trig.validate_for(cfg.dim, cfg.classes)
    return trig


def build_attack_config(cfg: ExperimentConfig, trigger: TriggerSpec) -> AttackConfig:
    return AttackConfig(
        trigger=trigger,
        lam=cfg.lam,
        tau=cfg.tau,
        detection_period=cfg.period,
        ft_epochs=cfg.ft_epochs,
        train_epochs=cfg.train_epochs,
    )


def build_world(cfg: ExperimentConfig) -> World:
    """Generate data, hold out the global test/root sets, partition the rest.

    The clean and triggered global test sets are carved out before
    partitioning so metrics are independent of any client. The triggered set
    drops samples whose true label already is the trigger target.
    """
    trigger = build_trigger(cfg)
    samples = generate_dataset(
        cfg.classes, cfg.per_class, cfg.dim, derive_seed(cfg.master_seed, "data"), cfg.sigma
    )
    rng = rng_from(cfg.master_seed, "holdout")
    order = rng.permutation(len(samples))
    n_test = int(round(cfg.test_frac * len(samples)))
    if n_test < 1:
        raise ValueError("test_frac leaves no global test samples")
    test_clean = samples.subset(np.sort(order[:n_test]))
    root = samples.subset(np.sort(order[n_test : n_test + cfg.root_size]))
    pool = samples.subset(np.sort(order[n_test + cfg.root_size :]))
    if cfg.label_noise > 0:
        pool = confuse_ambiguous_labels(pool, cfg.label_noise)

    eligible = np.flatnonzero(test_clean.labels != trigger.target_label)
    if eligible.size == 0:
        raise ValueError("triggered test set is empty")
    test_triggered = apply_trigger(test_clean.subset(eligible), trigger)

    part_cfg = PartitionConfig(q=cfg.q, num_clients=cfg.clients, classes=cfg.classes)
    clients = partition_noniid(pool, part_cfg, derive_seed(cfg.master_seed, "partition"))
    clients = [
        split_four_way(
            c, trigger, cfg.poison_rate, cfg.val_frac,
            derive_seed(cfg.master_seed, "split", c.client_id),
        )
        for c in clients
    ]

    fl_cfg = FLConfig(
        num_clients=cfg.clients,
        num_malicious=cfg.malicious,
        sample_fraction=cfg.fraction,
        rounds=cfg.rounds,
        hyper=Hyper(lr=cfg.lr, epochs=cfg.epochs, batch=cfg.batch),
        master_seed=cfg.master_seed,
    )
    arch = ArchSpec(cfg.dim, cfg.arch_hidden, cfg.classes)
    return World(
        arch=arch,
        cfg=fl_cfg,
        clients=clients,
        trigger=trigger,
        test_clean=test_clean,
        test_triggered=test_triggered,
        root=root,
    )


def confuse_ambiguous_labels(pool: SampleSet, fraction: float) -> SampleSet:
    """Annotation noise on the training pool: relabel the most ambiguous
    samples (smallest margin between the nearest and second-nearest class
    centroid) to their runner-up class. Mimics annotator confusion on
    genuinely hard items, keeps local losses from saturating, and is the
    same systematic rule for every client; evaluation data stays clean."""
    labels = pool.labels
    classes = int(labels.max()) + 1
    centroids = np.stack([
        pool.features[labels == c].mean(axis=0) for c in range(classes)
    ])
    d2 = ((pool.features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1)
    nearest, runner_up = order[:, 0], order[:, 1]
    margin = d2[np.arange(len(pool)), runner_up] - d2[np.arange(len(pool)), nearest]
    k = int(round(fraction * len(pool)))
    if k < 1:
        return pool
    flip = np.argsort(margin)[:k]
    new_labels = labels.copy()
    new_labels[flip] = runner_up[flip]
    return SampleSet(pool.features, new_labels)


def build_defense(cfg: ExperimentConfig, world: World):
    params = DefenseParams(
        trim_fraction=cfg.trim_beta,
        krum_f=cfg.krum_f,
        krum_m=cfg.krum_m,
        flame_noise_sigma=cfg.flame_sigma,
        fltrust_root=world.root,
        arch=world.arch,
        hyper=world.cfg.hyper,
    )
    return make_defense(cfg.defense_name, params)


def run_experiment(cfg: ExperimentConfig, world: World | None = None) -> RunResult:
    if world is None:
        world = build_world(cfg)
    adversary = make_adversary(cfg.attack_name, build_attack_config(cfg, world.trigger))
    defense = build_defense(cfg, world)
    log.info(
        "run: attack=%s defense=%s rounds=%d seed=%d",
        cfg.attack_name, cfg.defense_name, cfg.rounds, cfg.master_seed,
    )
    history = run_training(world, adversary, defense)
    summary = summarize_history(history, adversary.malicious_ids(world.cfg))
    log.info(
        "done: acc=%.4f bsr=%.4f mar=%s bar=%s",
        summary.acc_last10, summary.bsr_last10, summary.mar, summary.bar,
    )
    return RunResult(
        summary=summary,
        history=history,
        reports=adversary.reports,
        malicious_ids=adversary.malicious_ids(world.cfg),
    )


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _fmt_rate(x: float | None) -> str:
    return "n/a" if x is None else _fmt(x)


def rounds_csv(result: RunResult) -> str:
    lines = [
        "t,acc,bsr,n_accepted_malicious,n_accepted_benign,"
        "n_rejected_malicious,n_rejected_benign"
    ]
    mal = result.malicious_ids
    for rec in result.history.rounds:
        acc_m = sum(1 for i in rec.accepted if i in mal)
        rej_m = sum(1 for i in rec.rejected if i in mal)
        lines.append(
            f"{rec.t},{_fmt(rec.acc)},{_fmt(rec.bsr)},"
            f"{acc_m},{len(rec.accepted) - acc_m},{rej_m},{len(rec.rejected) - rej_m}"
        )
    return "\n".join(lines) + "\n"


def summary_json(cfg: ExperimentConfig, result: RunResult) -> str:
    s = result.summary
    doc = {
        "attack": cfg.attack_name,
        "defense": cfg.defense_name,
        "rounds": cfg.rounds,
        "master_seed": cfg.master_seed,
        "acc": {"last10_mean": s.acc_last10, "best_round": s.acc_best},
        "bsr": {"last10_mean": s.bsr_last10, "best_round": s.bsr_best},
        "mar": s.mar if s.mar is not None else "n/a",
        "bar": s.bar if s.bar is not None else "n/a",
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_outputs(cfg: ExperimentConfig, result: RunResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "rounds": out / "rounds.csv",
        "summary": out / "summary.json",
    }
    paths["rounds"].write_text(rounds_csv(result), encoding="utf-8")
    paths["summary"].write_text(summary_json(cfg, result), encoding="utf-8")
    if result.reports:
        paths["layer_reports"] = out / "layer_reports.txt"
        text = "\n".join(r.to_text() for r in result.reports)
        paths["layer_reports"].write_text(text, encoding="utf-8")
    return paths


def run(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Full pipeline for one config: run and write rounds.csv + summary.json
    (+ layer_reports.txt when the attack produced layer analyses)."""
    result = run_experiment(cfg)
    write_outputs(cfg, result, out_dir if out_dir is not None else cfg.output_dir)
    return result


def _with_sweep_value(cfg: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    if param == "tau":
        return replace(cfg, tau=float(value))
    if param == "lambda":
        return replace(cfg, lam=float(value))
    if param == "period":
        return replace(cfg, period=int(value))
    raise ValueError(f"unknown sweep parameter {param!r}; pick one of {SWEEP_PARAMS}")


def _point(cfg: ExperimentConfig) -> tuple[float, float]:
    result = run_experiment(cfg)
    return result.summary.bsr_last10, result.summary.acc_last10


def sweep(
    cfg: ExperimentConfig,
    param: str,
    values,
    out_dir=None,
    jobs: int = 1,
) -> list[tuple[float, float, float]]:
    """One full run per value (shared master seed); rows of
    (value, final BSR, final ACC) in the given value order."""
    values = list(values)
    configs = [_with_sweep_value(cfg, param, v) for v in values]
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(_point, configs))
    else:
        # sweep points only vary attack knobs, so the world can be shared
        world = build_world(cfg) if configs else None
        points = [_point_shared(c, world) for c in configs]
    rows = [(float(v), bsr, acc) for v, (bsr, acc) in zip(values, points)]
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{param},final_bsr,final_acc"]
    for v, bsr, acc in rows:
        value_str = str(int(v)) if param == "period" else _fmt(v)
        lines.append(f"{value_str},{_fmt(bsr)},{_fmt(acc)}")
    (out / f"sweep_{param}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


def _point_shared(cfg: ExperimentConfig, world: World) -> tuple[float, float]:
    result = run_experiment(cfg, world=world)
    return result.summary.bsr_last10, result.summary.acc_last10


def run_matrix(
    cfg: ExperimentConfig,
    attacks=MATRIX_ATTACKS,
    defenses=MATRIX_DEFENSES,
    out_dir=None,
    jobs: int = 1,
) -> list[tuple]:
    """Attack x defense grid; one row per cell with the four metrics."""
    cells = [
        replace(cfg, attack_name=a, defense_name=d) for a in attacks for d in defenses
    ]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_experiment, cells))
    else:
        world = build_world(cfg)
        results = [run_experiment(c, world=world) for c in cells]
    rows = []
    for cell, res in zip(cells, results):
        s = res.summary
        rows.append(
            (
                cell.attack_name, cell.defense_name,
                s.acc_last10, s.bsr_last10, s.acc_best, s.bsr_best, s.mar, s.bar,
            )
        )
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["attack,defense,acc_last10,bsr_last10,acc_best,bsr_best,mar,bar"]
    for a, d, acc, bsr, acc_b, bsr_b, mar, bar in rows:
        lines.append(
            f"{a},{d},{_fmt(acc)},{_fmt(bsr)},{_fmt(acc_b)},{_fmt(bsr_b)},"
            f"{_fmt_rate(mar)},{_fmt_rate(bar)}"
        )
    (out / "matrix.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


def analyze_layers(cfg: ExperimentConfig) -> CriticalLayerReport:
    """Run the layer identification once on a fresh global model and return
    the report (the CLI prints its text form)."""
    if cfg.malicious < 1:
        raise ValueError("analyze-layers needs at least one malicious client")
    world = build_world(cfg)
    attack_cfg = build_attack_config(cfg, world.trigger)
    model = build_model(world.arch, derive_seed(cfg.master_seed, "init"))
    client = world.clients[0]
    return identify_bc_layers(
        model, client, attack_cfg, world.cfg.hyper,
        derive_seed(cfg.master_seed, "identify", 0),
    )
