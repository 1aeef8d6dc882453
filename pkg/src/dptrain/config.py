"""Experiment configuration: flat key=value files mapped onto RunConfig/SweepGrid.

Config files are UTF-8 text, one ``key = value`` pair per line, ``#`` starts
a comment. Unknown keys are errors so typos cannot silently fall back to
defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .mechanisms import NOISE_PLACEMENTS
from .optim import ADAM_VARIANTS

__all__ = [
    "ConfigError",
    "RunConfig",
    "SweepGrid",
    "parse_config_file",
    "run_config_from_mapping",
    "sweep_grid_from_mapping",
    "PRIVACY_MODES",
]

PRIVACY_MODES = ("off", "target-epsilon", "fixed-sigma")


class ConfigError(ValueError):
    """A configuration file or value is invalid."""


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run needs, seeds included.

    ``widths`` are the hidden and output layer widths; the input width is
    taken from the data. ``batch_size`` is the expected batch size B: the
    Poisson rate is p = B / n_train and an epoch is ceil(n_train / B) steps.
    Four independent seed streams (model init, data order, Poisson draws,
    noise) let ablations vary one randomness source at a time.
    """

    # dataset
    dataset: str = "synthetic"  # "synthetic" | "csv"
    csv_path: str | None = None
    test_csv_path: str | None = None
    n: int = 2000
    dim: int = 20
    separation: float = 3.0
    label_noise: float = 0.0
    test_fraction: float = 0.1
    train_fraction: float = 0.8
    # model
    widths: tuple[int, ...] = (16, 16, 1)
    norm: str = "none"
    freeze_prefix: int = 0
    # optimization
    lr: float = 0.08
    epochs: int = 30
    batch_size: int = 32
    variant: str = "adam"
    bias_correction: bool = True
    # privacy
    privacy: str = "target-epsilon"
    target_eps: float | None = 10.0
    sigma: float | None = None
    delta: float = 1e-5
    clip_norm: float = 1.0
    budget_eps: float | None = None
    noise_placement: str = "after-mean"
    # seeds
    seed_model: int = 1
    seed_data: int = 2
    seed_poisson: int = 3
    seed_noise: int = 4

    def __post_init__(self):
        if self.dataset not in ("synthetic", "csv"):
            raise ConfigError(f"dataset must be 'synthetic' or 'csv', got {self.dataset!r}")
        if self.dataset == "csv" and not self.csv_path:
            raise ConfigError("csv dataset requires csv_path")
        if not self.widths or self.widths[-1] != 1:
            raise ConfigError(f"widths must end in 1, got {self.widths}")
        if self.privacy not in PRIVACY_MODES:
            raise ConfigError(f"privacy must be one of {PRIVACY_MODES}, got {self.privacy!r}")
        if self.privacy == "target-epsilon":
            if self.target_eps is None or self.target_eps <= 0:
                raise ConfigError("target-epsilon mode requires a positive target_eps")
        if self.privacy == "fixed-sigma":
            if self.sigma is None or self.sigma <= 0:
                raise ConfigError("fixed-sigma mode requires a positive sigma")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must be in (0, 1), got {self.delta}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.budget_eps is not None and self.budget_eps <= 0:
            raise ConfigError("budget_eps must be positive when set")
        if self.variant not in ADAM_VARIANTS:
            raise ConfigError(f"variant must be one of {ADAM_VARIANTS}, got {self.variant!r}")
        if self.noise_placement not in NOISE_PLACEMENTS:
            raise ConfigError(
                f"noise_placement must be one of {NOISE_PLACEMENTS}, "
                f"got {self.noise_placement!r}"
            )
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError(f"test_fraction must be in [0, 1), got {self.test_fraction}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.freeze_prefix < 0:
            raise ConfigError(f"freeze_prefix must be >= 0, got {self.freeze_prefix}")

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class SweepGrid:
    """Cartesian grid of sweep cells: target epsilons (inf means no privacy)
    x clip norms x freeze prefixes, each run with ``seeds_per_cell`` seeds."""

    target_eps: tuple[float, ...] = (1.0, 2.0, 10.0, 100.0, 1000.0)
    clip_norms: tuple[float, ...] = (1.0, 0.8, 0.6, 0.4)
    freeze_prefixes: tuple[int, ...] = (0,)
    seeds_per_cell: int = 5

    def __post_init__(self):
        if not self.target_eps or not self.clip_norms or not self.freeze_prefixes:
            raise ConfigError("sweep grid axes must be non-empty")
        if self.seeds_per_cell < 1:
            raise ConfigError("seeds_per_cell must be >= 1")

    def cells(self):
        for eps in self.target_eps:
            for clip in self.clip_norms:
                for freeze in self.freeze_prefixes:
                    yield eps, clip, freeze


def parse_config_file(path) -> dict[str, str]:
    """Read a flat key=value config document into a string mapping."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: missing key")
        if key in mapping:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        mapping[key] = value
    return mapping


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def _parse_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def _parse_float_list(key: str, value: str) -> tuple[float, ...]:
    try:
        return tuple(float(v.strip()) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {value!r}") from None


def _parse_int_list(key: str, value: str) -> tuple[int, ...]:
    try:
        return tuple(int(v.strip()) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {value!r}") from None


_RUN_KEY_PARSERS = {
    "dataset": str,
    "csv_path": str,
    "test_csv_path": str,
    "n": _parse_int,
    "dim": _parse_int,
    "separation": _parse_float,
    "label_noise": _parse_float,
    "test_fraction": _parse_float,
    "train_fraction": _parse_float,
    "widths": _parse_int_list,
    "norm": str,
    "freeze_prefix": _parse_int,
    "lr": _parse_float,
    "epochs": _parse_int,
    "batch_size": _parse_int,
    "variant": str,
    "bias_correction": _parse_bool,
    "privacy": str,
    "target_eps": _parse_float,
    "sigma": _parse_float,
    "delta": _parse_float,
    "clip_norm": _parse_float,
    "budget_eps": _parse_float,
    "noise_placement": str,
    "seed_model": _parse_int,
    "seed_data": _parse_int,
    "seed_poisson": _parse_int,
    "seed_noise": _parse_int,
}

_SWEEP_KEY_PARSERS = {
    "sweep_target_eps": _parse_float_list,
    "sweep_clip_norm": _parse_float_list,
    "sweep_freeze_prefix": _parse_int_list,
    "seeds_per_cell": _parse_int,
}


def run_config_from_mapping(mapping: dict[str, str], allow_sweep_keys: bool = False) -> RunConfig:
    known = set(_RUN_KEY_PARSERS)
    if allow_sweep_keys:
        known |= set(_SWEEP_KEY_PARSERS)
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in mapping.items():
        if key in _RUN_KEY_PARSERS:
            parser = _RUN_KEY_PARSERS[key]
            parsed = parser(key, value) if parser is not str else value
            kwargs[key] = parsed
    return RunConfig(**kwargs)


def sweep_grid_from_mapping(mapping: dict[str, str]) -> SweepGrid:
    kwargs = {}
    for key, target in (
        ("sweep_target_eps", "target_eps"),
        ("sweep_clip_norm", "clip_norms"),
        ("sweep_freeze_prefix", "freeze_prefixes"),
        ("seeds_per_cell", "seeds_per_cell"),
    ):
        if key in mapping:
            kwargs[target] = _SWEEP_KEY_PARSERS[key](key, mapping[key])
    return SweepGrid(**kwargs)
