"""
nsde/sensitivity.py
Pathwise parameter sensitivities by forward differentiation of the SDE.

The latent state X and its Jacobians dX/dbeta (d x k) and dX/dtheta (d x n)
solve one augmented Ito system driven by the same d Wiener coordinates:

    dX       = (b + b~) dt                       + sigma dW
    dJ_beta  = (b_x J_beta + b~_beta) dt         + sum_l (sigma_l)_x J_beta dW^l
    dJ_theta = (b_x J_theta + [b_theta, 0]) dt   + sum_l ((sigma_l)_x J_theta + [0, (sigma_l)_theta]) dW^l

with X_0 = x0 and both Jacobians zero at t = 0.  The augmented system is
handed to ``solver.sde_solve`` as an ordinary SDE on R^(d + dk + dn).

Flattened layout (column-major): ``[x, vec(J_beta), vec(J_theta)]`` where
``vec`` stacks columns, so entry (i, j) of a block sits at offset j*d + i.
theta is ordered as drift parameters then diffusion parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from nsde.fields import (
    NON_SMOOTH_ACTIVATIONS,
    DimensionError,
    FieldLike,
    SmoothnessError,
    as_values,
    jacobian_sweeps,
    split_theta,
)
from nsde.paths import NoisePath, TimeMesh
from nsde.solver import SdeProblem, sde_solve

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AugmentedState:
    """Latent state with its parameter Jacobians."""

    x: np.ndarray
    jac_beta: np.ndarray
    jac_theta: np.ndarray

    @classmethod
    def initial(cls, x0, n_beta: int, n_theta: int) -> AugmentedState:
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        d = x0.size
        return cls(x0.copy(), np.zeros((d, n_beta)), np.zeros((d, n_theta)))

    @property
    def dim(self) -> int:
        return self.x.size

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.x, self.jac_beta.ravel(order="F"), self.jac_theta.ravel(order="F")]
        )

    @classmethod
    def unflatten(cls, z, d: int, n_beta: int, n_theta: int) -> AugmentedState:
        z = np.asarray(z, dtype=float)
        expected = d + d * n_beta + d * n_theta
        if z.shape != (expected,):
            raise DimensionError(f"augmented state needs {expected} entries, got {z.shape}")
        split = d + d * n_beta
        return cls(
            x=z[:d].copy(),
            jac_beta=z[d:split].reshape((d, n_beta), order="F"),
            jac_theta=z[split:].reshape((d, n_theta), order="F"),
        )


@dataclass(frozen=True, eq=False)
class AugmentedProblem(SdeProblem):
    """An SdeProblem whose state is a flattened AugmentedState."""

    state_dim: int = 0
    n_beta: int = 0
    n_theta: int = 0

    def unflatten(self, z) -> AugmentedState:
        return AugmentedState.unflatten(z, self.state_dim, self.n_beta, self.n_theta)


def _check_smooth(name: str, vector_field: FieldLike) -> None:
    activation = getattr(vector_field, "activation", None)
    if activation in NON_SMOOTH_ACTIVATIONS:
        raise SmoothnessError(
            f"{name} uses {activation!r}; pathwise derivatives need C2 fields "
            "with bounded derivatives"
        )


def _column_block(tensor: np.ndarray) -> np.ndarray:
    """Rows of the dispersion for a vec'd Jacobian block.

    *tensor* has shape (d, noise, cols) with entry [i, l, j] the coefficient
    of dW^l in d(J_ij); row j*d + i of the result holds that entry.
    """
    d, noise, cols = tensor.shape
    return tensor.transpose(2, 0, 1).reshape(cols * d, noise)


def build_augmented(
    b: FieldLike,
    sigma: FieldLike,
    b_tilde: FieldLike,
    theta,
    beta,
    y=None,
    x0=None,
    t0: float = 0.0,
    t1: float = 1.0,
) -> AugmentedProblem:
    """Augmented SDE for (X, dX/dbeta, dX/dtheta); see the module docstring."""
    for name, vector_field in (("b", b), ("sigma", sigma), ("b_tilde", b_tilde)):
        _check_smooth(name, vector_field)
    d = b.in_dim
    if b.out_shape != (d,) or sigma.out_shape != (d, d) or b_tilde.out_shape != (d,):
        raise DimensionError(
            f"fields disagree on the state dimension: b {b.out_shape}, "
            f"sigma {sigma.out_shape}, b_tilde {b_tilde.out_shape}"
        )
    theta_b, theta_s = split_theta(b, sigma, theta)
    beta = as_values(beta)
    n_b, n_s, k = theta_b.size, theta_s.size, beta.size
    n = n_b + n_s
    y_in = np.zeros(b_tilde.in_dim) if y is None else np.asarray(y, dtype=float)
    x_start = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)

    def drift(z: np.ndarray, t: float) -> np.ndarray:
        state = AugmentedState.unflatten(z, d, k, n)
        x = state.x
        f_x = b.eval(x, t, theta_b) + b_tilde.eval(y_in, t, beta)
        f_beta = b_tilde.jac_params(y_in, t, beta)
        f_theta = np.zeros((d, n))
        if b.state_dependent:
            bx = b.jac_x(x, t, theta_b)
            f_beta = f_beta + bx @ state.jac_beta
            f_theta += bx @ state.jac_theta
        if n_b:
            f_theta[:, :n_b] += b.jac_params(x, t, theta_b)
        return AugmentedState(f_x, f_beta, f_theta).flatten()

    def dispersion(z: np.ndarray, t: float) -> np.ndarray:
        state = AugmentedState.unflatten(z, d, k, n)
        x = state.x
        g_beta = np.zeros((d, d, k))
        g_theta = np.zeros((d, d, n))
        if sigma.state_dependent:
            sx = sigma.jac_x(x, t, theta_s)
            g_beta += np.einsum("ilj,jk->ilk", sx, state.jac_beta)
            g_theta += np.einsum("ilj,jk->ilk", sx, state.jac_theta)
        if n_s:
            g_theta[:, :, n_b:] += sigma.jac_params(x, t, theta_s)
        return np.vstack(
            [sigma.eval(x, t, theta_s), _column_block(g_beta), _column_block(g_theta)]
        )

    logger.debug("augmented system: d=%d k=%d n=%d (%d states)", d, k, n, d * (1 + k + n))
    return AugmentedProblem(
        dim=d * (1 + k + n),
        drift=drift,
        dispersion=dispersion,
        z0=AugmentedState.initial(x_start, k, n).flatten(),
        noise_dim=d,
        t0=t0,
        t1=t1,
        state_dim=d,
        n_beta=k,
        n_theta=n,
    )


def pathwise_gradients(
    aug: AugmentedProblem, mesh: TimeMesh, noise: NoisePath
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve the augmented system; return (X_1, dX_1/dbeta, dX_1/dtheta)."""
    terminal = aug.unflatten(sde_solve(aug, mesh, noise).terminal)
    return terminal.x, terminal.jac_beta, terminal.jac_theta


@dataclass(frozen=True)
class StepCost:
    """Per-step work of the augmented drift and dispersion.

    ``sweeps_x`` and ``sweeps_params`` count AD sweeps for the Jacobians in
    state and parameters; ``columns`` is the number of sensitivity columns
    (k + n) each pushed through b_x once per step.
    """

    sweeps_x: int
    sweeps_params: int
    columns: int

    @property
    def total_sweeps(self) -> int:
        return self.sweeps_x + self.sweeps_params


def pathwise_step_cost(
    d: int,
    n_beta: int,
    n_drift_params: int,
    n_diffusion_params: int = 0,
    drift_state_dependent: bool = True,
    diffusion_state_dependent: bool = False,
) -> StepCost:
    """Predicted Jacobian cost of one augmented step for fields of the given sizes."""
    sweeps_x = 0
    if drift_state_dependent:
        sweeps_x += jacobian_sweeps(d, d)
    if diffusion_state_dependent:
        sweeps_x += jacobian_sweeps(d, d * d)
    sweeps_params = jacobian_sweeps(n_beta, d)
    if n_drift_params:
        sweeps_params += jacobian_sweeps(n_drift_params, d)
    if n_diffusion_params:
        sweeps_params += jacobian_sweeps(n_diffusion_params, d * d)
    return StepCost(
        sweeps_x=sweeps_x,
        sweeps_params=sweeps_params,
        columns=n_beta + n_drift_params + n_diffusion_params,
    )
