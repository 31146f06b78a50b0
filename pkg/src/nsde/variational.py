"""
nsde/variational.py
Variational free energy of a neural SDE, its Monte-Carlo gradient and
plain gradient-descent fitting.

The posterior over Wiener paths is W shifted by a deterministic drift
b~(y, t; beta).  For one observation y the free energy is

    F(theta, beta; y) = 1/2 int_0^1 |b~(y,t;beta)|^2 dt + E[-log p(y | X_1)]

with X the Euler solution of dX = (b(X,t;theta) + b~(y,t;beta)) dt + sigma dW.
Gradients of the expectation come from either engine:

- ``Engine.PATHWISE``: augmented sensitivity SDE (nsde.sensitivity)
- ``Engine.EULER_BACKPROP``: reverse sweep through the Euler tape (nsde.backprop)

Both see identical seeds, so their estimates agree up to summation order.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from nsde.backprop import euler_backward, euler_forward
from nsde.fields import DimensionError, FieldLike, as_values
from nsde.filelock import atomic_write_text
from nsde.paths import NoisePath, TimeMesh, csv_block, derive_seed, path_seeds, sample_wiener
from nsde.sensitivity import build_augmented, pathwise_gradients
from nsde.solver import DivergenceError, latent_problem, sde_solve

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = (
    "iter",
    "kl",
    "nll",
    "total",
    "grad_norm_theta",
    "grad_norm_beta",
    "wall_ms",
)


class Engine(Enum):
    PATHWISE = "pathwise"
    EULER_BACKPROP = "euler_backprop"


class SeedPolicy(Enum):
    """Noise across iterations: reused (common random numbers) or redrawn."""

    FIXED = "fixed"
    FRESH = "fresh"


class BetaMode(Enum):
    SHARED = "shared"
    PER_OBSERVATION = "per_observation"


@dataclass(frozen=True)
class ObservationModel:
    """log p(y | x) and its x-gradient.

    Both functions accept a single observation (d,) or a stack (m, d) and
    then return one value (or gradient row) per observation.
    """

    log_lik: Callable[[np.ndarray, np.ndarray], np.ndarray | float]
    grad_x_log_lik: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = "custom"


def gaussian_observation(scale: float = 1.0) -> ObservationModel:
    """p(y | x) = N(y; x, scale^2 I)."""
    if scale <= 0:
        raise ValueError(f"observation scale must be positive, got {scale}")
    var = scale * scale

    def log_lik(y, x):
        r = np.asarray(y, dtype=float) - x
        d = r.shape[-1]
        return -0.5 * np.sum(r * r, axis=-1) / var - 0.5 * d * math.log(2 * math.pi * var)

    def grad_x_log_lik(y, x):
        return (np.asarray(y, dtype=float) - x) / var

    return ObservationModel(log_lik, grad_x_log_lik, name=f"gaussian({scale:g})")


@dataclass(frozen=True, eq=False)
class ModelFields:
    """Generative fields b and sigma, the variational drift b~ and X_0."""

    b: FieldLike
    sigma: FieldLike
    b_tilde: FieldLike
    x0: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.b.in_dim

    @property
    def n_theta(self) -> int:
        return self.b.n_params + self.sigma.n_params

    @property
    def noise_dim(self) -> int:
        return self.sigma.out_shape[1]


@dataclass(frozen=True)
class FreeEnergyReport:
    """Free-energy estimate in nats.

    For a dataset, ``kl``, ``nll`` and ``total`` are per-observation means;
    ``total_summed`` is the sum over the ``n_observations`` observations.
    ``nll_std_err`` is 0 when fewer than two independent estimates exist.
    """

    kl: float
    nll: float
    nll_std_err: float
    n_paths: int
    engine: Engine
    n_observations: int = 1

    def __post_init__(self) -> None:
        if self.kl < 0:
            raise ValueError(f"kl must be non-negative, got {self.kl}")

    @property
    def total(self) -> float:
        return self.kl + self.nll

    @property
    def total_summed(self) -> float:
        return self.total * self.n_observations


# -- KL term ------------------------------------------------------------------


def _kl_input(b_tilde: FieldLike, y) -> np.ndarray:
    if y is None:
        return np.zeros(b_tilde.in_dim)
    return np.asarray(y, dtype=float)


def kl_term(b_tilde: FieldLike, beta, y, mesh: TimeMesh) -> float:
    """1/2 sum_i h_{i+1} |b~(y, t_i; beta)|^2 (left-endpoint rule)."""
    y_in = _kl_input(b_tilde, y)
    total = 0.0
    for t, h in zip(mesh.knots[:-1], mesh.steps):
        u = b_tilde.eval(y_in, float(t), beta)
        total += h * float(u @ u)
    return 0.5 * total


def kl_gradient(b_tilde: FieldLike, beta, y, mesh: TimeMesh) -> np.ndarray:
    y_in = _kl_input(b_tilde, y)
    grad = np.zeros(as_values(beta).size)
    for t, h in zip(mesh.knots[:-1], mesh.steps):
        u = b_tilde.eval(y_in, float(t), beta)
        grad += h * (b_tilde.jac_params(y_in, float(t), beta).T @ u)
    return grad


# -- per-path terms -----------------------------------------------------------


@dataclass(frozen=True)
class _Group:
    """Observations that share one latent path (same beta and b~ input)."""

    ys: np.ndarray
    y_in: np.ndarray
    beta_slice: slice


@dataclass
class _PathTerms:
    nll: float
    grad_theta: np.ndarray
    grad_beta: np.ndarray


def _group_terms(
    model: ModelFields,
    obs: ObservationModel,
    group: _Group,
    theta,
    beta: np.ndarray,
    mesh: TimeMesh,
    noise: NoisePath,
    engine: Engine,
    need_grad: bool,
) -> tuple[float, np.ndarray, np.ndarray]:
    beta_g = beta[group.beta_slice]
    empty = np.zeros(0)
    if not need_grad:
        problem = latent_problem(
            model.b, model.sigma, model.b_tilde, theta, beta_g, y=group.y_in, x0=model.x0
        )
        x1 = sde_solve(problem, mesh, noise).terminal
        return -float(np.sum(obs.log_lik(group.ys, x1))), empty, empty
    if engine is Engine.PATHWISE:
        aug = build_augmented(
            model.b, model.sigma, model.b_tilde, theta, beta_g, y=group.y_in, x0=model.x0
        )
        x1, jb, jt = pathwise_gradients(aug, mesh, noise)
        cos = -np.sum(np.atleast_2d(obs.grad_x_log_lik(group.ys, x1)), axis=0)
        g_theta, g_beta = jt.T @ cos, jb.T @ cos
    else:
        tape = euler_forward(
            model.b,
            model.sigma,
            model.b_tilde,
            theta,
            beta_g,
            group.y_in,
            model.x0,
            mesh,
            noise,
        )
        x1 = tape.terminal
        cos = -np.sum(np.atleast_2d(obs.grad_x_log_lik(group.ys, x1)), axis=0)
        g_theta, g_beta = euler_backward(tape, cos)
    return -float(np.sum(obs.log_lik(group.ys, x1))), g_theta, g_beta


# -- objective ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FreeEnergyObjective:
    """Per-observation mean free energy of a dataset {y_j}.

    ``beta_mode=SHARED`` uses one beta for every observation; when b~ also
    ignores its input all observations share the latent paths.
    ``PER_OBSERVATION`` stores beta as n_obs stacked blocks of size k.
    """

    model: ModelFields
    obs: ObservationModel
    data: np.ndarray
    beta_mode: BetaMode = BetaMode.SHARED
    _groups: tuple[_Group, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if data.shape[1] != self.model.dim or data.shape[0] < 1:
            raise DimensionError(
                f"observations must have shape (n, {self.model.dim}), got {data.shape}"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "beta_mode", BetaMode(self.beta_mode))
        object.__setattr__(self, "_groups", self._make_groups(data))

    @classmethod
    def single(cls, model: ModelFields, obs: ObservationModel, y) -> FreeEnergyObjective:
        return cls(model=model, obs=obs, data=np.atleast_2d(np.asarray(y, dtype=float)))

    @property
    def n_observations(self) -> int:
        return self.data.shape[0]

    @property
    def n_beta(self) -> int:
        k = self.model.b_tilde.n_params
        if self.beta_mode is BetaMode.PER_OBSERVATION:
            return k * self.n_observations
        return k

    @property
    def shares_paths(self) -> bool:
        uses_input = getattr(self.model.b_tilde, "uses_input", True)
        return self.beta_mode is BetaMode.SHARED and not uses_input

    def _make_groups(self, data: np.ndarray) -> tuple[_Group, ...]:
        k = self.model.b_tilde.n_params
        if self.shares_paths:
            return (_Group(data, data[0], slice(0, k)),)
        groups = []
        for j, y in enumerate(data):
            if self.beta_mode is BetaMode.SHARED:
                beta_slice = slice(0, k)
            else:
                beta_slice = slice(j * k, (j + 1) * k)
            groups.append(_Group(y[None, :], y, beta_slice))
        return tuple(groups)

    def _kl_and_grad(self, beta: np.ndarray, mesh: TimeMesh) -> tuple[float, np.ndarray]:
        b_tilde = self.model.b_tilde
        total = 0.0
        grad = np.zeros(beta.size)
        for group in self._groups:
            weight = group.ys.shape[0]
            beta_g = beta[group.beta_slice]
            total += weight * kl_term(b_tilde, beta_g, group.y_in, mesh)
            grad[group.beta_slice] += weight * kl_gradient(b_tilde, beta_g, group.y_in, mesh)
        n = self.n_observations
        return total / n, grad / n

    def _seed_terms(
        self,
        seed: int,
        theta,
        beta: np.ndarray,
        mesh: TimeMesh,
        engine: Engine,
        need_grad: bool,
        antithetic: bool,
    ) -> _PathTerms:
        noise = sample_wiener(mesh, self.model.noise_dim, seed)
        noises = (noise, noise.negated()) if antithetic else (noise,)
        nll = 0.0
        g_theta = np.zeros(self.model.n_theta)
        g_beta = np.zeros(beta.size)
        try:
            for path in noises:
                for group in self._groups:
                    value, gt, gb = _group_terms(
                        self.model, self.obs, group, theta, beta, mesh, path, engine, need_grad
                    )
                    nll += value
                    if need_grad:
                        g_theta += gt
                        g_beta[group.beta_slice] += gb
        except DivergenceError as e:
            raise e.with_seed(seed) from e
        scale = len(noises) * self.n_observations
        return _PathTerms(nll / scale, g_theta / scale, g_beta / scale)

    def estimate(
        self,
        theta,
        beta,
        mesh: TimeMesh,
        n_paths: int,
        seed: int,
        engine: Engine = Engine.PATHWISE,
        *,
        need_grad: bool = True,
        antithetic: bool = False,
        workers: int = 1,
    ) -> tuple[np.ndarray, np.ndarray, FreeEnergyReport]:
        """Monte-Carlo free energy (and gradient) over *n_paths* seeded paths.

        Per-seed results are reduced in seed order whatever the worker count.
        With *antithetic* every seed contributes the pair (W, -W) and the
        standard error is taken over pair means.
        """
        if n_paths < 1:
            raise ValueError(f"n_paths must be >= 1, got {n_paths}")
        engine = Engine(engine)
        beta = as_values(beta)
        if beta.size != self.n_beta:
            raise DimensionError(f"beta must have {self.n_beta} entries, got {beta.size}")
        if as_values(theta).size != self.model.n_theta:
            raise DimensionError(
                f"theta must have {self.model.n_theta} entries, got {as_values(theta).size}"
            )
        seeds = path_seeds(seed, n_paths)

        def run(s: int) -> _PathTerms:
            return self._seed_terms(s, theta, beta, mesh, engine, need_grad, antithetic)

        if workers > 1 and n_paths > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                terms = list(pool.map(run, seeds))
        else:
            terms = [run(s) for s in seeds]

        values = np.array([term.nll for term in terms])
        std_err = float(values.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
        kl, kl_grad = self._kl_and_grad(beta, mesh)
        report = FreeEnergyReport(
            kl=kl,
            nll=float(values.mean()),
            nll_std_err=std_err,
            n_paths=n_paths * (2 if antithetic else 1),
            engine=engine,
            n_observations=self.n_observations,
        )
        if not need_grad:
            return np.zeros(self.model.n_theta), np.zeros(beta.size), report
        grad_theta = np.mean([term.grad_theta for term in terms], axis=0)
        grad_beta = np.mean([term.grad_beta for term in terms], axis=0) + kl_grad
        return grad_theta, grad_beta, report


# -- single-observation entry points ---------------------------------------------


def free_energy(
    theta,
    beta,
    model: ModelFields,
    obs_model: ObservationModel,
    y,
    mesh: TimeMesh,
    n_paths: int,
    seed: int,
    engine: Engine = Engine.PATHWISE,
    *,
    antithetic: bool = False,
    workers: int = 1,
) -> FreeEnergyReport:
    objective = FreeEnergyObjective.single(model, obs_model, y)
    _, _, report = objective.estimate(
        theta,
        beta,
        mesh,
        n_paths,
        seed,
        engine,
        need_grad=False,
        antithetic=antithetic,
        workers=workers,
    )
    return report


def grad_free_energy(
    theta,
    beta,
    model: ModelFields,
    obs_model: ObservationModel,
    y,
    mesh: TimeMesh,
    n_paths: int,
    seed: int,
    engine: Engine = Engine.PATHWISE,
    *,
    antithetic: bool = False,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray, FreeEnergyReport]:
    """(grad_theta, grad_beta, report) on common random numbers."""
    objective = FreeEnergyObjective.single(model, obs_model, y)
    return objective.estimate(
        theta,
        beta,
        mesh,
        n_paths,
        seed,
        engine,
        need_grad=True,
        antithetic=antithetic,
        workers=workers,
    )


# -- gradient descent ---------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    step_size: float
    n_iters: int
    n_paths: int
    mesh: TimeMesh
    seed_policy: SeedPolicy = SeedPolicy.FIXED
    engine: Engine = Engine.PATHWISE
    seed: int = 0
    workers: int = 1
    timing: bool = True
    antithetic: bool = False

    def __post_init__(self) -> None:
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.n_iters < 0:
            raise ValueError(f"n_iters must be >= 0, got {self.n_iters}")
        if self.n_paths < 1:
            raise ValueError(f"n_paths must be >= 1, got {self.n_paths}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        object.__setattr__(self, "seed_policy", SeedPolicy(self.seed_policy))
        object.__setattr__(self, "engine", Engine(self.engine))

    def iteration_seed(self, iteration: int) -> int:
        if self.seed_policy is SeedPolicy.FIXED:
            return self.seed
        return derive_seed(self.seed, iteration)


@dataclass(frozen=True, eq=False)
class IterationRecord:
    iteration: int
    report: FreeEnergyReport
    grad_norm_theta: float
    grad_norm_beta: float
    wall_ms: float
    theta: np.ndarray
    beta: np.ndarray

    def row(self) -> list[float]:
        return [
            self.iteration,
            self.report.kl,
            self.report.nll,
            self.report.total,
            self.grad_norm_theta,
            self.grad_norm_beta,
            self.wall_ms,
        ]


@dataclass
class FitResult:
    theta: np.ndarray
    beta: np.ndarray
    history: list[IterationRecord] = field(default_factory=list)
    aborted: str | None = None

    @property
    def totals(self) -> np.ndarray:
        return np.array([record.report.total for record in self.history])

    def history_csv(self) -> str:
        rows = np.array([record.row() for record in self.history], dtype=float)
        return csv_block(",".join(HISTORY_COLUMNS), rows.reshape(-1, len(HISTORY_COLUMNS)))


def gd_fit(
    init_theta,
    init_beta,
    objective: FreeEnergyObjective,
    config: FitConfig,
) -> FitResult:
    """Vanilla gradient descent on (theta, beta) with one constant step size.

    Records ``n_iters + 1`` evaluations (the initial point included).  A
    divergence stops the loop and leaves the history collected so far with
    ``aborted`` describing the failure.
    """
    theta = as_values(init_theta).copy()
    beta = as_values(init_beta).copy()
    result = FitResult(theta=theta.copy(), beta=beta.copy())
    for iteration in range(config.n_iters + 1):
        started = time.perf_counter()
        try:
            grad_theta, grad_beta, report = objective.estimate(
                theta,
                beta,
                config.mesh,
                config.n_paths,
                config.iteration_seed(iteration),
                config.engine,
                antithetic=config.antithetic,
                workers=config.workers,
            )
        except DivergenceError as e:
            result.aborted = f"iteration {iteration}: {e}"
            logger.warning("fit aborted at %s", result.aborted)
            break
        wall_ms = (time.perf_counter() - started) * 1000.0 if config.timing else 0.0
        result.history.append(
            IterationRecord(
                iteration=iteration,
                report=report,
                grad_norm_theta=float(np.linalg.norm(grad_theta)),
                grad_norm_beta=float(np.linalg.norm(grad_beta)),
                wall_ms=wall_ms,
                theta=theta.copy(),
                beta=beta.copy(),
            )
        )
        result.theta, result.beta = theta.copy(), beta.copy()
        logger.debug("iter %d: free energy %.6g", iteration, report.total)
        if iteration == config.n_iters:
            break
        theta = theta - config.step_size * grad_theta
        beta = beta - config.step_size * grad_beta
    return result


def write_history_csv(result: FitResult, path: Path) -> None:
    atomic_write_text(Path(path), result.history_csv())
