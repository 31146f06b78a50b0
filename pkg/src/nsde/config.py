"""
nsde/config.py
Load and validate experiment configuration.
"""

from __future__ import annotations

import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path

from nsde.fields import ACTIVATIONS
from nsde.user_config import iter_config_paths, load_config_file, merge_dicts
from nsde.variational import BetaMode, Engine, SeedPolicy

VALID_ACTIVATIONS = tuple(ACTIVATIONS)
DEFAULT_MESH_SWEEP = [4, 8, 16, 32, 64]


@dataclass
class DataConfig:
    """Synthetic data: y_j = X_1^(j) + noise-scale * eps_j."""

    n_samples: int = 1000
    activation: str = "sigmoid"
    noise_scale: float = 1.0
    fine_factor: int = 4
    zero_ground_truth: bool = False


@dataclass
class FitSection:
    mesh_n: int = 32
    step_size: float = 0.05
    n_iters: int = 200
    n_mc_paths: int = 16
    engine: str = Engine.PATHWISE.value
    seed_policy: str = SeedPolicy.FIXED.value
    beta_mode: str = BetaMode.SHARED.value
    antithetic: bool = False
    workers: int = 1
    timing: bool = True
    init_scale: float = 0.1


@dataclass
class SweepConfig:
    """Sweep points; an empty ``n_samples`` means ceil(sqrt d), d, 10d, 100d."""

    mesh_n: list[int] = field(default_factory=lambda: list(DEFAULT_MESH_SWEEP))
    n_samples: list[int] = field(default_factory=list)
    workers: int = 1


@dataclass
class SeedConfig:
    data: int = 0
    init: int = 1
    mc: int = 2


@dataclass
class ExperimentConfig:
    """Top-level configuration of one experiment."""

    dim: int = 10
    output_dir: Path = Path("results")
    data: DataConfig = field(default_factory=DataConfig)
    fit: FitSection = field(default_factory=FitSection)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def sample_sweep(self) -> list[int]:
        if self.sweep.n_samples:
            return list(self.sweep.n_samples)
        d = self.dim
        return [math.ceil(math.sqrt(d)), d, 10 * d, 100 * d]

    def fine_mesh_n(self) -> int:
        """Data mesh: fine_factor times the finest fit or sweep mesh."""
        return self.data.fine_factor * max([self.fit.mesh_n, *self.sweep.mesh_n])


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------


def _normalize_keys(raw: dict) -> dict:
    """Accept ``snake_case`` keys (JSON) alongside TOML's ``kebab-case``."""
    out = {}
    for key, value in raw.items():
        key = key.replace("_", "-")
        out[key] = _normalize_keys(value) if isinstance(value, dict) else value
    return out


def _table(raw: dict, name: str) -> dict:
    section = raw.get(name, {})
    if not isinstance(section, dict):
        raise ValueError(f"{name}: expected a table, got {type(section).__name__}")
    return section


def _int(section: dict, context: str, key: str, default: int, minimum: int = 1) -> int:
    value = section.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"{context}.{key}: expected an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{context}.{key}: must be >= {minimum}, got {value}")
    return value


def _float(section: dict, context: str, key: str, default: float) -> float:
    value = section.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"{context}.{key}: expected a number, got {type(value).__name__}")
    if not value > 0:
        raise ValueError(f"{context}.{key}: must be positive, got {value}")
    return float(value)


def _bool(section: dict, context: str, key: str, default: bool) -> bool:
    value = section.get(key, default)
    if not isinstance(value, bool):
        raise ValueError(f"{context}.{key}: expected a boolean, got {type(value).__name__}")
    return value


def _choice(section: dict, context: str, key: str, default: str, choices) -> str:
    value = section.get(key, default)
    if value not in choices:
        raise ValueError(
            f"{context}.{key}: must be one of {', '.join(choices)}, got {value!r}"
        )
    return value


def _int_list(section: dict, context: str, key: str, default: list[int]) -> list[int]:
    value = section.get(key, default)
    if not isinstance(value, list) or not all(
        isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value
    ):
        raise ValueError(f"{context}.{key}: expected an array of positive integers")
    return list(value)


def _parse_data(raw: dict) -> DataConfig:
    section = _table(raw, "data")
    return DataConfig(
        n_samples=_int(section, "data", "n-samples", 1000),
        activation=_choice(section, "data", "activation", "sigmoid", VALID_ACTIVATIONS),
        noise_scale=_float(section, "data", "noise-scale", 1.0),
        fine_factor=_int(section, "data", "fine-factor", 4),
        zero_ground_truth=_bool(section, "data", "zero-ground-truth", False),
    )


def _parse_fit(raw: dict) -> FitSection:
    section = _table(raw, "fit")
    return FitSection(
        mesh_n=_int(section, "fit", "mesh-n", 32),
        step_size=_float(section, "fit", "step-size", 0.05),
        n_iters=_int(section, "fit", "n-iters", 200, minimum=0),
        n_mc_paths=_int(section, "fit", "n-mc-paths", 16),
        engine=_choice(section, "fit", "engine", "pathwise", [e.value for e in Engine]),
        seed_policy=_choice(
            section, "fit", "seed-policy", "fixed", [p.value for p in SeedPolicy]
        ),
        beta_mode=_choice(section, "fit", "beta-mode", "shared", [m.value for m in BetaMode]),
        antithetic=_bool(section, "fit", "antithetic", False),
        workers=_int(section, "fit", "workers", 1),
        timing=_bool(section, "fit", "timing", True),
        init_scale=_float(section, "fit", "init-scale", 0.1),
    )


def _parse_sweep(raw: dict) -> SweepConfig:
    section = _table(raw, "sweep")
    mesh_n = _int_list(section, "sweep", "mesh-n", list(DEFAULT_MESH_SWEEP))
    if not mesh_n:
        raise ValueError("sweep.mesh-n: must not be empty")
    return SweepConfig(
        mesh_n=mesh_n,
        n_samples=_int_list(section, "sweep", "n-samples", []),
        workers=_int(section, "sweep", "workers", 1),
    )


def _parse_seeds(raw: dict) -> SeedConfig:
    section = _table(raw, "seeds")
    return SeedConfig(
        data=_int(section, "seeds", "data", 0, minimum=0),
        init=_int(section, "seeds", "init", 1, minimum=0),
        mc=_int(section, "seeds", "mc", 2, minimum=0),
    )


def build_config(raw: dict) -> ExperimentConfig:
    """Validate a raw (merged) config dict."""
    raw = _normalize_keys(raw)
    experiment = _table(raw, "experiment")
    output_dir = experiment.get("output-dir", "results")
    if not isinstance(output_dir, str) or not output_dir:
        raise ValueError("experiment.output-dir: expected a non-empty string")
    return ExperimentConfig(
        dim=_int(experiment, "experiment", "dim", 10),
        output_dir=Path(output_dir).expanduser(),
        data=_parse_data(raw),
        fit=_parse_fit(raw),
        sweep=_parse_sweep(raw),
        seeds=_parse_seeds(raw),
    )


def config_to_dict(config: ExperimentConfig) -> dict:
    """Inverse of ``build_config`` (kebab-case keys, plain values)."""
    def section(obj) -> dict:
        return {
            name.replace("_", "-"): value
            for name, value in vars(obj).items()
        }

    return {
        "experiment": {"dim": config.dim, "output-dir": str(config.output_dir)},
        "data": section(config.data),
        "fit": section(config.fit),
        "sweep": section(config.sweep),
        "seeds": section(config.seeds),
    }


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def _load_raw_config(project_root: Path, explicit: Path | None) -> dict:
    raw: dict = {}
    for path in iter_config_paths(project_root, explicit):
        if not path.exists():
            if explicit is not None and path == Path(explicit).expanduser().resolve():
                raise ValueError(f"config file not found: {path}")
            continue
        try:
            loaded = load_config_file(path)
        except tomllib.TOMLDecodeError as e:
            raise ValueError(f"Invalid TOML in {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ValueError(f"Invalid JSON in {path}: {e}") from e
        raw = merge_dicts(raw, _normalize_keys(loaded))
    return raw


def load_config(
    project_root: Path,
    explicit: Path | None = None,
    overrides: dict | None = None,
) -> ExperimentConfig:
    """Load the experiment config.

    Precedence is:
    1. ``~/.config/nsde/config.toml`` (lowest)
    2. ``.config/nsde.toml`` under *project_root*
    3. ``--config`` path, else ``$NSDE_CONFIG_PATH``
    4. *overrides* (command-line flags, highest)
    """
    raw = _load_raw_config(project_root, explicit)
    if overrides:
        raw = merge_dicts(raw, _normalize_keys(overrides))
    return build_config(raw)
