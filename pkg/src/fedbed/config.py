"""Experiment configuration: a flat key=value text format with dotted keys.

Lines look like `fl.clients = 30`; `#` starts a comment. Every key has a
default except master_seed, which must be explicit so runs are always
reproducible on purpose. Unknown keys are rejected by name.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int
    output_dir: str = "runs"
    # synthetic dataset
    classes: int = 10
    per_class: int = 200
    dim: int = 64
    q: float = 0.5
    sigma: float = 0.15
    test_frac: float = 0.1
    val_frac: float = 0.25
    poison_rate: float = 0.5
    label_noise: float = 0.08
    # model
    arch_hidden: tuple[int, ...] = (64, 128, 128, 64)
    # trigger (positions=None means the corner patch of `trigger_size` cells)
    trigger_positions: tuple[int, ...] | None = None
    trigger_size: int = 4
    trigger_value: float = 1.0
    trigger_target: int = 0
    # federation (paper-style defaults: 100 users, 10% malicious, 10% sampled)
    clients: int = 100
    malicious: int = 10
    fraction: float = 0.1
    rounds: int = 100
    lr: float = 0.05
    epochs: int = 2
    batch: int = 32
    # defense
    defense_name: str = "fedavg"
    trim_beta: float = 0.2
    krum_f: int | None = None
    krum_m: int | None = None
    flame_sigma: float = 1e-3
    root_size: int = 64
    # attack
    attack_name: str = "none"
    lam: float = 1.0
    tau: float = 0.8
    period: int = 5
    ft_epochs: int = 5
    train_epochs: int = 20


def _parse_int(s: str) -> int:
    return int(s)


def _parse_float(s: str) -> float:
    return float(s)


def _parse_str(s: str) -> str:
    return s


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _parse_opt_int(s: str) -> int | None:
    return None if s.lower() in ("auto", "none") else int(s)


def _parse_opt_int_tuple(s: str) -> tuple[int, ...] | None:
    return None if s.lower() in ("corner", "auto", "none") else _parse_int_tuple(s)


KEYS = {
    "master_seed": ("master_seed", _parse_int),
    "output_dir": ("output_dir", _parse_str),
    "data.classes": ("classes", _parse_int),
    "data.per_class": ("per_class", _parse_int),
    "data.dim": ("dim", _parse_int),
    "data.q": ("q", _parse_float),
    "data.sigma": ("sigma", _parse_float),
    "data.test_frac": ("test_frac", _parse_float),
    "data.val_frac": ("val_frac", _parse_float),
    "data.poison_rate": ("poison_rate", _parse_float),
    "data.label_noise": ("label_noise", _parse_float),
    "arch.hidden": ("arch_hidden", _parse_int_tuple),
    "trigger.positions": ("trigger_positions", _parse_opt_int_tuple),
    "trigger.size": ("trigger_size", _parse_int),
    "trigger.value": ("trigger_value", _parse_float),
    "trigger.target": ("trigger_target", _parse_int),
    "fl.clients": ("clients", _parse_int),
    "fl.malicious": ("malicious", _parse_int),
    "fl.fraction": ("fraction", _parse_float),
    "fl.rounds": ("rounds", _parse_int),
    "fl.lr": ("lr", _parse_float),
    "fl.epochs": ("epochs", _parse_int),
    "fl.batch": ("batch", _parse_int),
    "defense.name": ("defense_name", _parse_str),
    "defense.beta": ("trim_beta", _parse_float),
    "defense.krum_f": ("krum_f", _parse_opt_int),
    "defense.krum_m": ("krum_m", _parse_opt_int),
    "defense.flame_sigma": ("flame_sigma", _parse_float),
    "defense.root_size": ("root_size", _parse_int),
    "attack.name": ("attack_name", _parse_str),
    "attack.lambda": ("lam", _parse_float),
    "attack.tau": ("tau", _parse_float),
    "attack.period": ("period", _parse_int),
    "attack.ft_epochs": ("ft_epochs", _parse_int),
    "attack.epochs": ("train_epochs", _parse_int),
}

_REQUIRED = ("master_seed",)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict[str, object] = {}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key: {key}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate config key: {key}")
        seen.add(key)
        field_name, parser = KEYS[key]
        try:
            values[field_name] = parser(val)
        except ValueError:
            raise ConfigError(
                f"{source}:{lineno}: bad value for {key}: {val!r}"
            ) from None
    for key in _REQUIRED:
        field_name, _ = KEYS[key]
        if field_name not in values:
            raise ConfigError(f"{source}: missing config key: {key}")
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path))


def config_keys_doc() -> str:
    """One line per key with its default, for --help and the README."""
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    lines = []
    for key, (field_name, _) in KEYS.items():
        default = defaults.get(field_name, "?")
        if key == "master_seed":
            lines.append(f"{key}  (required)")
        else:
            lines.append(f"{key}  (default: {default})")
    return "\n".join(lines)
