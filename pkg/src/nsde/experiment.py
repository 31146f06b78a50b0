"""
nsde/experiment.py
Synthetic-data experiment: data generation, fitting and parameter sweeps.

Ground truth is dX = act(A X) dt + dW, X_0 = 0, with A_ij ~ N(0, 1) drawn
from the data seed, and observations y = X_1 + noise_scale * eps.  The fit
model uses the same drift family with sigma = I and a constant variational
drift b~ = beta.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nsde.config import ExperimentConfig, config_to_dict
from nsde.fields import (
    ACTIVATIONS,
    VectorField,
    activation_drift,
    constant_drift,
    field_to_dict,
    identity_diffusion,
    join_theta,
    params_to_dict,
)
from nsde.filelock import append_csv_rows, atomic_write_text
from nsde.paths import (
    TimeMesh,
    csv_block,
    derive_seed,
    iter_wiener_increments,
    make_rng,
    sample_wiener,
)
from nsde.solver import latent_problem, sde_solve, solve_terminal_batch
from nsde.user_config import dump_toml
from nsde.variational import (
    BetaMode,
    FitConfig,
    FitResult,
    FreeEnergyObjective,
    ModelFields,
    gaussian_observation,
    gd_fit,
    write_history_csv,
)

logger = logging.getLogger(__name__)

SWEEP_HEADER = "sweep_var,value,iter,log_free_energy"

# stream indices under the data seed
_PATH_STREAM = 1
_NOISE_STREAM = 2
_HELDOUT_PATH_STREAM = 3
_HELDOUT_NOISE_STREAM = 4
# stream index under the Monte-Carlo seed
_SCORE_STREAM = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    y: np.ndarray
    a_true: np.ndarray
    activation: str
    mesh_n: int

    @property
    def dim(self) -> int:
        return self.y.shape[1]

    @property
    def n_samples(self) -> int:
        return self.y.shape[0]

    def head(self, n: int) -> Dataset:
        if n > self.n_samples:
            raise ValueError(f"dataset has {self.n_samples} samples, {n} requested")
        return Dataset(self.y[:n], self.a_true, self.activation, self.mesh_n)

    def to_csv(self) -> str:
        header = ",".join(f"y_{i + 1}" for i in range(self.dim))
        return csv_block(header, self.y)


def ground_truth_drift(config: ExperimentConfig) -> np.ndarray:
    d = config.dim
    if config.data.zero_ground_truth:
        return np.zeros((d, d))
    return make_rng(config.seeds.data).standard_normal((d, d))


def _simulate(
    config: ExperimentConfig, n: int, path_stream: int, noise_stream: int
) -> Dataset:
    d = config.dim
    a_true = ground_truth_drift(config)
    act = ACTIVATIONS[config.data.activation].fn
    mesh_n = config.fine_mesh_n()
    mesh = TimeMesh.uniform(mesh_n)
    x1 = solve_terminal_batch(
        drift=lambda z, t: act(z @ a_true.T),
        dispersion=np.eye(d),
        z0=np.zeros(d),
        mesh=mesh,
        increments=iter_wiener_increments(
            mesh, d, n, derive_seed(config.seeds.data, path_stream)
        ),
    )
    eps = make_rng(derive_seed(config.seeds.data, noise_stream)).standard_normal((n, d))
    logger.info("simulated %d observations on a %d-step mesh", n, mesh_n)
    return Dataset(
        y=x1 + config.data.noise_scale * eps,
        a_true=a_true,
        activation=config.data.activation,
        mesh_n=mesh_n,
    )


def generate_data(config: ExperimentConfig, n_samples: int | None = None) -> Dataset:
    """Simulate observations on a mesh finer than every fit mesh."""
    n = config.data.n_samples if n_samples is None else n_samples
    return _simulate(config, n, _PATH_STREAM, _NOISE_STREAM)


def generate_heldout(config: ExperimentConfig, n_samples: int | None = None) -> Dataset:
    """A second draw from the same ground truth, independent of ``generate_data``."""
    n = config.data.n_samples if n_samples is None else n_samples
    return _simulate(config, n, _HELDOUT_PATH_STREAM, _HELDOUT_NOISE_STREAM)


def model_fields(config: ExperimentConfig) -> ModelFields:
    d = config.dim
    return ModelFields(
        b=activation_drift(d, config.data.activation),
        sigma=identity_diffusion(d),
        b_tilde=constant_drift(d),
    )


def write_dataset(dataset: Dataset, config: ExperimentConfig, out_dir: Path) -> list[Path]:
    b = activation_drift(dataset.dim, dataset.activation)
    truth = params_to_dict(b, b.params(dataset.a_true.ravel()))
    truth["mesh_n"] = dataset.mesh_n
    paths = [out_dir / "dataset.csv", out_dir / "ground_truth.json", out_dir / "config.toml"]
    atomic_write_text(paths[0], dataset.to_csv())
    atomic_write_text(paths[1], json.dumps(truth, indent=2) + "\n")
    atomic_write_text(paths[2], dump_toml(config_to_dict(config)))
    return paths


def write_trace(dataset: Dataset, config: ExperimentConfig, out_dir: Path) -> list[Path]:
    """One ground-truth noise path and its trajectory, for debugging."""
    d = dataset.dim
    mesh = TimeMesh.uniform(dataset.mesh_n)
    b = activation_drift(d, dataset.activation)
    sigma = identity_diffusion(d)
    no_shift = VectorField(kind="zero", in_dim=d, out_shape=(d,))
    noise = sample_wiener(mesh, d, config.seeds.data)
    theta = join_theta(b, sigma, b.params(dataset.a_true.ravel()))
    problem = latent_problem(b, sigma, no_shift, theta, no_shift.zero_params())
    trajectory = sde_solve(problem, mesh, noise)
    paths = [out_dir / "trace_noise.csv", out_dir / "trace_trajectory.csv"]
    atomic_write_text(paths[0], noise.to_csv())
    atomic_write_text(paths[1], trajectory.to_csv())
    return paths


def run_fit(
    config: ExperimentConfig, dataset: Dataset, mesh_n: int | None = None
) -> FitResult:
    """Gradient-descent fit of (A, beta) to *dataset*."""
    model = model_fields(config)
    fit = config.fit
    objective = FreeEnergyObjective(
        model=model,
        obs=gaussian_observation(config.data.noise_scale),
        data=dataset.y,
        beta_mode=BetaMode(fit.beta_mode),
    )
    theta = join_theta(
        model.b, model.sigma, model.b.init_params(config.seeds.init, scale=fit.init_scale)
    )
    fit_config = FitConfig(
        step_size=fit.step_size,
        n_iters=fit.n_iters,
        n_paths=fit.n_mc_paths,
        mesh=TimeMesh.uniform(mesh_n or fit.mesh_n),
        seed_policy=fit.seed_policy,
        engine=fit.engine,
        seed=config.seeds.mc,
        workers=fit.workers,
        timing=fit.timing,
        antithetic=fit.antithetic,
    )
    logger.info(
        "fitting %d observations, mesh %d, engine %s",
        dataset.n_samples,
        fit_config.mesh.n_steps,
        fit_config.engine.value,
    )
    return gd_fit(theta, np.zeros(objective.n_beta), objective, fit_config)


def write_fit_outputs(result: FitResult, config: ExperimentConfig, out_dir: Path) -> list[Path]:
    model = model_fields(config)
    params = {
        "model": params_to_dict(model.b, model.b.params(result.theta)),
        "variational": {
            "field": field_to_dict(model.b_tilde),
            "beta_mode": config.fit.beta_mode,
            "params": [float(v) for v in result.beta],
        },
        "aborted": result.aborted,
    }
    paths = [out_dir / "history.csv", out_dir / "params.json"]
    write_history_csv(result, paths[0])
    atomic_write_text(paths[1], json.dumps(params, indent=2) + "\n")
    return paths


# -- sweeps -------------------------------------------------------------------


def _log_or_nan(value: float) -> float:
    return math.log(value) if value > 0 else math.nan


def shared_beta(config: ExperimentConfig, beta: np.ndarray) -> np.ndarray:
    """Collapse per-observation variational parameters to their mean block."""
    if BetaMode(config.fit.beta_mode) is BetaMode.SHARED:
        return beta
    k = model_fields(config).b_tilde.n_params
    return beta.reshape(-1, k).mean(axis=0)


def score_history(
    config: ExperimentConfig,
    heldout: Dataset,
    result: FitResult,
    mesh_n: int | None = None,
) -> np.ndarray:
    """Per-observation free energy of every recorded iterate on *heldout*.

    All iterates are scored with the same Monte-Carlo seed so that curves
    from different sweep points are compared on common noise.
    """
    fit = config.fit
    objective = FreeEnergyObjective(
        model=model_fields(config),
        obs=gaussian_observation(config.data.noise_scale),
        data=heldout.y,
        beta_mode=BetaMode.SHARED,
    )
    mesh = TimeMesh.uniform(mesh_n or fit.mesh_n)
    seed = derive_seed(config.seeds.mc, _SCORE_STREAM)
    scores = np.empty(len(result.history))
    for i, record in enumerate(result.history):
        _, _, report = objective.estimate(
            record.theta,
            shared_beta(config, record.beta),
            mesh,
            fit.n_mc_paths,
            seed,
            fit.engine,
            need_grad=False,
            antithetic=fit.antithetic,
            workers=fit.workers,
        )
        scores[i] = report.total
    return scores


@dataclass(frozen=True, eq=False)
class SweepPoint:
    var: str
    value: int
    fit: FitResult
    scores: np.ndarray

    def rows(self) -> str:
        lines = [
            f"{self.var},{self.value},{record.iteration},{_log_or_nan(score):.17g}"
            for record, score in zip(self.fit.history, self.scores)
        ]
        return "".join(line + "\n" for line in lines)


@dataclass
class SweepResult:
    points: list[SweepPoint] = field(default_factory=list)
    failures: list[tuple[str, int, str]] = field(default_factory=list)

    def final_totals(self, sweep_var: str) -> dict[int, float]:
        """Held-out free energy of the last iterate, by sweep value."""
        return {
            point.value: float(point.scores[-1])
            for point in self.points
            if point.var == sweep_var and point.scores.size
        }

    def descends(self) -> bool:
        """Whether every point's training free energy ended below where it started."""
        return all(
            p.fit.totals[-1] < p.fit.totals[0] for p in self.points if len(p.fit.history) > 1
        )

    def mesh_refinement_gaps(self) -> tuple[float, float] | None:
        """(|F(m1) - F(m0)|, |F(m_last) - F(m_prev)|) over ascending mesh sizes."""
        finals = self.final_totals("mesh_n")
        if len(finals) < 4:
            return None
        values = [finals[m] for m in sorted(finals)]
        return abs(values[1] - values[0]), abs(values[-1] - values[-2])

    def sample_sizes_monotone(self, tol: float = 0.0) -> bool:
        """Whether the final free energy never rises (beyond *tol*) as n grows."""
        finals = self.final_totals("n_samples")
        values = [finals[n] for n in sorted(finals)]
        return all(b <= a + tol for a, b in zip(values, values[1:]))


def sweep_points(config: ExperimentConfig, which: str) -> list[tuple[str, int]]:
    if which not in ("mesh", "samples", "both"):
        raise ValueError(f"sweep must be mesh, samples or both, got {which!r}")
    points: list[tuple[str, int]] = []
    if which in ("mesh", "both"):
        points += [("mesh_n", n) for n in config.sweep.mesh_n]
    if which in ("samples", "both"):
        points += [("n_samples", n) for n in config.sample_sweep()]
    return points


def sweep_datasets(config: ExperimentConfig, which: str) -> tuple[Dataset, Dataset]:
    """The fit dataset and the pool sample-size points draw their rows from.

    The fit dataset is exactly what ``generate_data(config)`` returns, so a
    one-point mesh sweep reproduces ``run_fit``.  The pool is a larger draw
    only when the sample sweep asks for more rows than the fit dataset has.
    """
    dataset = generate_data(config)
    if which not in ("samples", "both"):
        return dataset, dataset
    largest = max(config.sample_sweep())
    if largest <= dataset.n_samples:
        return dataset, dataset
    return dataset, generate_data(config, largest)


def run_sweep(
    config: ExperimentConfig,
    dataset: Dataset,
    which: str,
    out_path: Path,
    *,
    sample_pool: Dataset | None = None,
    heldout: Dataset | None = None,
) -> SweepResult:
    """Fit every sweep point and append its curve to *out_path* in point order.

    Mesh points fit *dataset*; sample-size points fit the first n rows of
    *sample_pool* (default *dataset*).  Every recorded iterate is scored on
    *heldout* (default ``generate_heldout(config)``) and that score is the
    ``log_free_energy`` column.  A failing point is logged and skipped;
    rows already written stay.
    """
    points = sweep_points(config, which)
    pool_data = dataset if sample_pool is None else sample_pool
    heldout = generate_heldout(config) if heldout is None else heldout
    out_path.unlink(missing_ok=True)

    def run_point(point: tuple[str, int]) -> SweepPoint:
        var, value = point
        if var == "mesh_n":
            fit_result = run_fit(config, dataset, mesh_n=value)
            scores = score_history(config, heldout, fit_result, mesh_n=value)
        else:
            fit_result = run_fit(config, pool_data.head(value))
            scores = score_history(config, heldout, fit_result)
        return SweepPoint(var, value, fit_result, scores)

    result = SweepResult()
    with ThreadPoolExecutor(max_workers=config.sweep.workers) as pool:
        futures = [pool.submit(run_point, point) for point in points]
        for (var, value), future in zip(points, futures):
            try:
                point = future.result()
            except Exception as e:  # noqa: BLE001
                logger.error("sweep point %s=%d failed: %s", var, value, e)
                result.failures.append((var, value, str(e)))
                continue
            append_csv_rows(out_path, SWEEP_HEADER, point.rows())
            result.points.append(point)
            if point.fit.aborted:
                result.failures.append((var, value, point.fit.aborted))
    return result
