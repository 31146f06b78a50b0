"""
nsde/solver.py
Fixed-mesh Euler-Maruyama integration of Ito SDEs driven by supplied noise.

``sde_solve(problem, mesh, noise)`` is the black-box solve primitive that
both gradient engines and the oracles call.  Noise is always an argument:
evaluating different parameters on the same Wiener path is what the
gradient checks rely on.  Another scheme can replace this one without
changing the (problem, mesh, noise) signature.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from nsde.fields import FieldLike, split_theta
from nsde.paths import NoisePath, TimeMesh, csv_block

logger = logging.getLogger(__name__)

DriftFn = Callable[[np.ndarray, float], np.ndarray]
DispersionFn = Callable[[np.ndarray, float], np.ndarray]


class DivergenceError(RuntimeError):
    """Raised when a state becomes NaN or infinite during integration."""

    def __init__(self, step: int, time: float, seed: int | None = None):
        self.step = step
        self.time = time
        self.seed = seed
        message = f"solution diverged at step {step} (t={time:.6g})"
        if seed is not None:
            message += f" on path seed {seed}"
        super().__init__(message)

    def with_seed(self, seed: int | None) -> DivergenceError:
        return DivergenceError(self.step, self.time, seed)


@dataclass(frozen=True, eq=False)
class SdeProblem:
    """dZ = f(Z, t) dt + g(Z, t) dW on [t0, t1], Z_{t0} = z0.

    ``noise_dim`` is the number of columns of g; it may differ from ``dim``.
    """

    dim: int
    drift: DriftFn
    dispersion: DispersionFn
    z0: np.ndarray
    noise_dim: int
    t0: float = 0.0
    t1: float = 1.0

    def __post_init__(self) -> None:
        z0 = np.array(self.z0, dtype=float).reshape(-1)
        if z0.size != self.dim:
            raise ValueError(f"z0 has {z0.size} entries, problem dimension is {self.dim}")
        if not 0.0 <= self.t0 <= self.t1 <= 1.0:
            raise ValueError(f"need 0 <= t0 <= t1 <= 1, got [{self.t0}, {self.t1}]")
        if self.noise_dim < 1:
            raise ValueError(f"noise_dim must be >= 1, got {self.noise_dim}")
        object.__setattr__(self, "z0", z0)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States at the mesh knots inside [t0, t1]; states[0] = z0."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self) -> None:
        if self.states.shape[0] != self.times.size:
            raise ValueError("trajectory length does not match its time grid")

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self) -> str:
        """Rows ``t, z_1..z_m``."""
        m = self.states.shape[1]
        header = ",".join(["t"] + [f"z_{i + 1}" for i in range(m)])
        return csv_block(header, np.column_stack([self.times, self.states]))


def _knot_range(problem: SdeProblem, mesh: TimeMesh) -> tuple[int, int]:
    start = mesh.index_of(problem.t0)
    stop = mesh.index_of(problem.t1)
    return start, stop


def sde_solve(problem: SdeProblem, mesh: TimeMesh, noise: NoisePath) -> Trajectory:
    """Euler-Maruyama: z_{i+1} = z_i + h f(z_i, t_i) + g(z_i, t_i) dW_{i+1}."""
    if noise.dim != problem.noise_dim:
        raise ValueError(
            f"noise has dimension {noise.dim}, dispersion has {problem.noise_dim} columns"
        )
    noise.check_mesh(mesh)
    start, stop = _knot_range(problem, mesh)
    knots, steps, dws = mesh.knots, mesh.steps, noise.increments

    states = np.empty((stop - start + 1, problem.dim))
    z = problem.z0.copy()
    states[0] = z
    expected = (problem.dim, problem.noise_dim)
    for row, i in enumerate(range(start, stop), start=1):
        t = knots[i]
        f = problem.drift(z, t)
        g = problem.dispersion(z, t)
        if g.shape != expected:
            raise ValueError(f"dispersion returned shape {g.shape}, expected {expected}")
        z = z + steps[i] * f + g @ dws[i]
        if not np.all(np.isfinite(z)):
            logger.debug("non-finite state after step %d", i + 1)
            raise DivergenceError(step=i + 1, time=float(knots[i + 1]))
        states[row] = z
    return Trajectory(times=knots[start : stop + 1].copy(), states=states)


def latent_problem(
    b: FieldLike,
    sigma: FieldLike,
    b_tilde: FieldLike,
    theta,
    beta,
    y=None,
    x0=None,
) -> SdeProblem:
    """The SDE of X^{theta,beta}: drift b(x,t;theta) + b~(y,t;beta), dispersion sigma.

    *theta* holds the drift parameters followed by the diffusion parameters
    (see ``fields.join_theta``).
    """
    d = b.in_dim
    theta_b, theta_s = split_theta(b, sigma, theta)
    y_in = np.zeros(b_tilde.in_dim) if y is None else np.asarray(y, dtype=float)
    x_start = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)

    def drift(x: np.ndarray, t: float) -> np.ndarray:
        return b.eval(x, t, theta_b) + b_tilde.eval(y_in, t, beta)

    def dispersion(x: np.ndarray, t: float) -> np.ndarray:
        return sigma.eval(x, t, theta_s)

    return SdeProblem(
        dim=d,
        drift=drift,
        dispersion=dispersion,
        z0=x_start,
        noise_dim=sigma.out_shape[1],
    )


def solve_terminal_batch(
    drift: Callable[[np.ndarray, float], np.ndarray],
    dispersion: Callable[[np.ndarray, float], np.ndarray] | np.ndarray,
    z0: np.ndarray,
    mesh: TimeMesh,
    increments: Iterable[np.ndarray],
) -> np.ndarray:
    """Vectorized Euler-Maruyama over a batch of paths; returns terminal states.

    *drift* maps states (P, m) to (P, m).  *dispersion* is either a constant
    (m, d) matrix or a callable returning (P, m, d).  *increments* yields one
    (P, d) block per mesh step.
    """
    z = np.array(z0, dtype=float)
    n_blocks = 0
    for i, dw in enumerate(increments):
        if i >= mesh.n_steps:
            raise ValueError("more increment blocks than mesh steps")
        n_blocks += 1
        t = mesh.knots[i]
        if z.ndim == 1:
            z = np.broadcast_to(z, (dw.shape[0], z.size)).copy()
        if callable(dispersion):
            noise_term = np.einsum("pmd,pd->pm", dispersion(z, t), dw)
        else:
            noise_term = dw @ np.asarray(dispersion).T
        z = z + mesh.steps[i] * drift(z, t) + noise_term
        if not np.all(np.isfinite(z)):
            raise DivergenceError(step=i + 1, time=float(mesh.knots[i + 1]))
    if n_blocks != mesh.n_steps:
        raise ValueError("fewer increment blocks than mesh steps")
    return z
