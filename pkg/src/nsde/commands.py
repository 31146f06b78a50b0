"""
nsde.commands
Handlers for the generate, fit and sweep verbs.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

from nsde import experiment
from nsde.cli_parsers import CONFIG_OVERRIDES
from nsde.config import ExperimentConfig, load_config
from nsde.console import Colors, print_error

logger = logging.getLogger(__name__)

# Failures reported as "Error: ..." instead of a traceback.
DOMAIN_ERRORS = (ValueError, ArithmeticError, RuntimeError, OSError)


def collect_overrides(args) -> dict:
    """Nested config dict holding only the flags given on the command line."""
    overrides: dict = {}
    for dest, (section, key) in CONFIG_OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    return overrides


def _load(args) -> ExperimentConfig:
    explicit = Path(args.config) if getattr(args, "config", None) else None
    return load_config(Path.cwd(), explicit, collect_overrides(args))


def _output_dir(config: ExperimentConfig) -> Path:
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _report_written(paths: list[Path]) -> None:
    for path in paths:
        print(f"Wrote {path}")


def run_generate(args):
    """Simulate the dataset and write it with its ground truth."""
    try:
        config = _load(args)
        out_dir = _output_dir(config)
        dataset = experiment.generate_data(config)
        written = experiment.write_dataset(dataset, config, out_dir)
        if getattr(args, "trace", False):
            written += experiment.write_trace(dataset, config, out_dir)
    except DOMAIN_ERRORS as e:
        print_error(str(e))
        return 1
    _report_written(written)
    return 0


def run_fit(args):
    """Fit the model to the dataset regenerated from the data seed."""
    try:
        config = _load(args)
        out_dir = _output_dir(config)
        dataset = experiment.generate_data(config)
        result = experiment.run_fit(config, dataset)
        written = experiment.write_fit_outputs(result, config, out_dir)
    except DOMAIN_ERRORS as e:
        print_error(str(e))
        return 1
    _report_written(written)
    if result.aborted:
        print(f"{Colors.yellow('⚠')} fit aborted at {result.aborted}")
        return 1
    if result.history:
        final = result.history[-1].report
        print(
            f"{Colors.green('✓')} free energy {final.total:.6g} "
            f"(kl {final.kl:.6g}, nll {final.nll:.6g}) after {config.fit.n_iters} iterations"
        )
    return 0


def run_sweep(args):
    """Fit every sweep point and write sweep.csv."""
    which = getattr(args, "sweep", "mesh")
    try:
        config = _load(args)
        out_dir = _output_dir(config)
        dataset, sample_pool = experiment.sweep_datasets(config, which)
        out_path = out_dir / "sweep.csv"
        result = experiment.run_sweep(
            config, dataset, which, out_path, sample_pool=sample_pool
        )
    except DOMAIN_ERRORS as e:
        print_error(str(e))
        return 1
    print(f"Wrote {out_path}")
    for var in ("mesh_n", "n_samples"):
        for value, total in result.final_totals(var).items():
            shown = math.log(total) if total > 0 else math.nan
            print(f"  {var}={value}: final log free energy {shown:.6g}")
    for var, value, message in result.failures:
        print(f"{Colors.yellow('⚠')} {var}={value}: {message}")
    return 1 if result.failures else 0
