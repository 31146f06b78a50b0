"""
nsde/oracle.py
Closed-form references: linear Gaussian diffusions and the Föllmer drift.

A linear SDE dX = A_t X dt + C_t dW has a Gaussian terminal law

    m = Phi_{0,1} x0,    Sigma = int_0^1 Phi_{t,1} C_t C_t^T Phi_{t,1}^T dt

where Phi solves dPhi_{s,t}/dt = A_t Phi_{s,t}, Phi_{s,s} = I.  For a
Gaussian target N(m, Sigma) with invertible Sigma the Föllmer drift
d/dx log Q_{1-t} f(x), f = q / phi_d, is affine in x; the Monte-Carlo
ratio estimator of the same drift converges to it at rate n^{-1/2}.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm

from nsde.fields import DimensionError
from nsde.paths import NoisePath, TimeMesh, iter_wiener_increments, make_rng
from nsde.solver import SdeProblem, sde_solve, solve_terminal_batch

logger = logging.getLogger(__name__)

SYMMETRY_TOLERANCE = 1e-12
EIGENVALUE_FLOOR = -1e-10
DEFAULT_PANELS = 2**12
FOLLMER_T_MAX = 1.0 - 1e-6


class SingularCovarianceError(ValueError):
    """Raised when a formula needs Sigma^{-1} and Sigma is singular."""


class DriftUnderflowError(ArithmeticError):
    """Raised when the Monte-Carlo Föllmer denominator underflows."""


@dataclass(frozen=True, eq=False)
class GaussianLaw:
    """N(mean, cov) on R^d."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = mean.size
        if mean.ndim != 1 or cov.shape != (d, d):
            raise DimensionError(f"mean {mean.shape} and cov {cov.shape} disagree")
        if np.max(np.abs(cov - cov.T)) > SYMMETRY_TOLERANCE:
            raise ValueError("covariance is not symmetric")
        if np.min(np.linalg.eigvalsh(cov)) < EIGENVALUE_FLOOR:
            raise ValueError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def precision(self) -> np.ndarray:
        eigenvalues = np.linalg.eigvalsh(self.cov)
        if eigenvalues[0] <= 1e-12 * max(1.0, eigenvalues[-1]):
            raise SingularCovarianceError(
                f"covariance is singular (smallest eigenvalue {eigenvalues[0]:.3g})"
            )
        return np.linalg.inv(self.cov)


# -- linear SDEs --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PiecewiseMatrix:
    """Right-continuous piecewise-constant matrix path on [0, 1].

    ``values[j]`` holds on [breaks[j], breaks[j+1]); the last piece also
    covers t = 1.
    """

    breaks: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        breaks = np.asarray(self.breaks, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or breaks.shape != (values.shape[0] + 1,):
            raise DimensionError("need K+1 breaks for K matrices of shape (K, r, c)")
        if breaks[0] != 0.0 or breaks[-1] != 1.0 or np.any(np.diff(breaks) <= 0):
            raise ValueError("breaks must increase strictly from 0 to 1")
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, matrix) -> PiecewiseMatrix:
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(np.array([0.0, 1.0]), matrix[None, :, :])

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    @property
    def is_constant(self) -> bool:
        return self.values.shape[0] == 1

    def at(self, t: float) -> np.ndarray:
        j = int(np.searchsorted(self.breaks, t, side="right")) - 1
        return self.values[min(max(j, 0), self.values.shape[0] - 1)]

    def pieces(self, s: float, t: float) -> list[tuple[float, float, np.ndarray]]:
        """(start, stop, matrix) for every piece overlapping [s, t], in time order."""
        out = []
        for j, matrix in enumerate(self.values):
            lo, hi = max(s, self.breaks[j]), min(t, self.breaks[j + 1])
            if hi > lo:
                out.append((lo, hi, matrix))
        return out


@dataclass(frozen=True, eq=False)
class LinearSdeSpec:
    """dX = A_t X dt + C_t dW, X_0 = x0."""

    a: PiecewiseMatrix
    c: PiecewiseMatrix
    x0: np.ndarray

    def __post_init__(self) -> None:
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        d = x0.size
        if self.a.shape != (d, d) or self.c.shape[0] != d:
            raise DimensionError(
                f"A {self.a.shape} and C {self.c.shape} do not fit x0 of size {d}"
            )
        object.__setattr__(self, "x0", x0)

    @classmethod
    def constant(cls, a, c, x0) -> LinearSdeSpec:
        return cls(PiecewiseMatrix.constant(a), PiecewiseMatrix.constant(c), x0)

    @property
    def dim(self) -> int:
        return self.x0.size

    @property
    def noise_dim(self) -> int:
        return self.c.shape[1]


def fundamental_matrix(spec: LinearSdeSpec, s: float, t: float) -> np.ndarray:
    """Phi_{s,t}: ordered product of exp(A_j dt_j) over the pieces of [s, t]."""
    if not 0.0 <= s <= t <= 1.0:
        raise ValueError(f"need 0 <= s <= t <= 1, got s={s}, t={t}")
    phi = np.eye(spec.dim)
    for lo, hi, matrix in spec.a.pieces(s, t):
        phi = expm(matrix * (hi - lo)) @ phi
    return phi


def _terminal_cov(spec: LinearSdeSpec, panels: int) -> np.ndarray:
    width = 1.0 / panels
    cov = np.zeros((spec.dim, spec.dim))
    for j in range(panels):
        t = (j + 0.5) * width
        phi_c = fundamental_matrix(spec, t, 1.0) @ spec.c.at(t)
        cov += width * (phi_c @ phi_c.T)
    return 0.5 * (cov + cov.T)


def terminal_law(spec: LinearSdeSpec, panels: int = DEFAULT_PANELS) -> GaussianLaw:
    """Law of X_1; the covariance integral uses the composite midpoint rule."""
    if panels < 1:
        raise ValueError(f"panels must be >= 1, got {panels}")
    mean = fundamental_matrix(spec, 0.0, 1.0) @ spec.x0
    return GaussianLaw(mean, _terminal_cov(spec, panels))


def quadrature_convergence_ratio(spec: LinearSdeSpec, panels: int = 64) -> float:
    """Error reduction of the covariance quadrature when panels double.

    Compares |S(n) - S(2n)| with |S(2n) - S(4n)|; ~4 for a second-order rule.
    Returns inf when the finer difference vanishes.
    """
    s1, s2, s4 = (_terminal_cov(spec, p) for p in (panels, 2 * panels, 4 * panels))
    coarse = np.max(np.abs(s1 - s2))
    fine = np.max(np.abs(s2 - s4))
    if fine == 0.0:
        return math.inf
    return float(coarse / fine)


def simulate_linear_terminal(
    spec: LinearSdeSpec, mesh: TimeMesh, n_paths: int, seed: int
) -> np.ndarray:
    """Euler-Maruyama terminal states of *n_paths* independent paths, shape (P, d)."""
    if spec.c.is_constant:
        dispersion = spec.c.values[0]
    else:
        def dispersion(z, t):
            return np.broadcast_to(spec.c.at(t), (z.shape[0],) + spec.c.shape)

    return solve_terminal_batch(
        drift=lambda z, t: z @ spec.a.at(t).T,
        dispersion=dispersion,
        z0=spec.x0,
        mesh=mesh,
        increments=iter_wiener_increments(mesh, spec.noise_dim, n_paths, seed),
    )


# -- Föllmer drift ------------------------------------------------------------


def follmer_affine_coefficients(target: GaussianLaw, t: float) -> tuple[np.ndarray, np.ndarray]:
    """(M, c) with Föllmer drift = M x + c at time t.

    With P = Sigma^{-1}, D = P - I and S = (t I + (1-t) P)^{-1}:
    M = (1-t) D S D - D and c = -((1-t) D S P - P) m.
    """
    precision = target.precision()
    d = target.dim
    eye = np.eye(d)
    delta = precision - eye
    s = np.linalg.inv(t * eye + (1.0 - t) * precision)
    coef_x = (1.0 - t) * delta @ s @ delta - delta
    coef_m = (1.0 - t) * delta @ s @ precision - precision
    return coef_x, -coef_m @ target.mean


def follmer_affine_drift(target: GaussianLaw, x, t: float) -> np.ndarray:
    coef_x, offset = follmer_affine_coefficients(target, t)
    return coef_x @ np.asarray(x, dtype=float) + offset


@dataclass(frozen=True)
class DensityRatio:
    """f: R^d -> R_+ and its gradient, both vectorized over rows of (n, d)."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]


def gaussian_density_ratio(target: GaussianLaw) -> DensityRatio:
    """f = q / phi_d for q = N(m, Sigma) and phi_d the standard normal density."""
    precision = target.precision()
    _, logdet = np.linalg.slogdet(target.cov)
    mean = target.mean

    def log_value(x: np.ndarray) -> np.ndarray:
        r = x - mean
        quad = np.einsum("ni,ij,nj->n", r, precision, r)
        return -0.5 * quad - 0.5 * logdet + 0.5 * np.sum(x * x, axis=1)

    def value(x):
        return np.exp(log_value(np.atleast_2d(x)))

    def grad(x):
        x = np.atleast_2d(x)
        score = x - (x - mean) @ precision
        return np.exp(log_value(x))[:, None] * score

    return DensityRatio(value, grad)


def constant_ratio(d: int) -> DensityRatio:
    """f == 1 (target equal to the standard normal)."""
    return DensityRatio(
        value=lambda x: np.ones(np.atleast_2d(x).shape[0]),
        grad=lambda x: np.zeros((np.atleast_2d(x).shape[0], d)),
    )


def follmer_mc_drift(f_hat: DensityRatio, x, t: float, n_mc: int, seed: int) -> np.ndarray:
    """sum_n grad f(x + sqrt(1-t) z_n) / sum_n f(x + sqrt(1-t) z_n), z_n ~ N(0, I).

    t is clamped to at most 1 - 1e-6.
    """
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    x = np.asarray(x, dtype=float)
    t = min(float(t), FOLLMER_T_MAX)
    z = make_rng(seed).standard_normal((n_mc, x.size))
    points = x + math.sqrt(1.0 - t) * z
    denominator = float(np.sum(f_hat.value(points)))
    if not math.isfinite(denominator) or denominator <= np.finfo(float).tiny:
        raise DriftUnderflowError(
            f"density-ratio sum {denominator!r} at t={t:.6g} cannot be divided by"
        )
    return np.sum(f_hat.grad(points), axis=0) / denominator


def follmer_sample(target: GaussianLaw, mesh: TimeMesh, noise: NoisePath) -> np.ndarray:
    """X_1 of the Föllmer SDE dX = drift dt + dW, X_0 = 0, Euler-solved on *noise*."""
    d = target.dim
    eye = np.eye(d)
    problem = SdeProblem(
        dim=d,
        drift=lambda x, t: follmer_affine_drift(target, x, t),
        dispersion=lambda x, t: eye,
        z0=np.zeros(d),
        noise_dim=d,
    )
    return sde_solve(problem, mesh, noise).terminal


def follmer_sample_batch(
    target: GaussianLaw, mesh: TimeMesh, n_paths: int, seed: int
) -> np.ndarray:
    """Vectorized ``follmer_sample`` over *n_paths* independent paths, shape (P, d)."""
    d = target.dim
    coefficients = {
        float(t): follmer_affine_coefficients(target, float(t)) for t in mesh.knots[:-1]
    }

    def drift(z: np.ndarray, t: float) -> np.ndarray:
        coef_x, offset = coefficients[float(t)]
        return z @ coef_x.T + offset

    return solve_terminal_batch(
        drift=drift,
        dispersion=np.eye(d),
        z0=np.zeros(d),
        mesh=mesh,
        increments=iter_wiener_increments(mesh, d, n_paths, seed),
    )


# -- conjugate toy model ------------------------------------------------------


def conjugate_neg_log_marginal(y) -> float:
    """-log p(y) for X_1 = W_1, y | X_1 ~ N(X_1, I), i.e. y ~ N(0, 2 I)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d = y.size
    return float(y @ y) / 4.0 + 0.5 * d * math.log(4.0 * math.pi)


def constant_drift_gap(d: int) -> float:
    """Free energy minus -log p(y) at the best constant drift beta = y/2."""
    return 0.5 * d * (1.0 - math.log(2.0))
