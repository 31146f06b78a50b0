"""
nsde/backprop.py
Solve-then-differentiate: reverse-mode gradients through the Euler recursion.

The forward pass is ``solver.sde_solve`` on ``latent_problem`` with every
state kept on an ``EulerTape``.  ``euler_backward`` sweeps the tape in
reverse with the adjoint

    a_i = (I + h b_x + sum_l (sigma_l)_x dW^l)^T a_{i+1},   a_N = dL/dX_N

and accumulates per-step parameter gradients on the way.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from nsde.fields import DimensionError, FieldLike, as_values, split_theta
from nsde.paths import NoisePath, TimeMesh
from nsde.solver import latent_problem, sde_solve

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepJacobians:
    bx: np.ndarray | None
    b_theta: np.ndarray | None
    b_tilde_beta: np.ndarray
    sx: np.ndarray | None
    s_theta: np.ndarray | None


@dataclass(frozen=True, eq=False)
class EulerTape:
    """Everything the reverse sweep needs; states[i] is X at mesh knot i."""

    mesh: TimeMesh
    noise: NoisePath
    states: np.ndarray
    b: FieldLike
    sigma: FieldLike
    b_tilde: FieldLike
    theta: np.ndarray
    beta: np.ndarray
    y: np.ndarray
    jacobians: list[StepJacobians] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def step_jacobians(self, i: int) -> StepJacobians:
        if self.jacobians:
            return self.jacobians[i]
        return _step_jacobians(self, i)


def _step_jacobians(tape: EulerTape, i: int) -> StepJacobians:
    x, t = tape.states[i], float(tape.mesh.knots[i])
    theta_b, theta_s = split_theta(tape.b, tape.sigma, tape.theta)
    b, sigma = tape.b, tape.sigma
    return StepJacobians(
        bx=b.jac_x(x, t, theta_b) if b.state_dependent else None,
        b_theta=b.jac_params(x, t, theta_b) if theta_b.size else None,
        b_tilde_beta=tape.b_tilde.jac_params(tape.y, t, tape.beta),
        sx=sigma.jac_x(x, t, theta_s) if sigma.state_dependent else None,
        s_theta=sigma.jac_params(x, t, theta_s) if theta_s.size else None,
    )


def euler_forward(
    b: FieldLike,
    sigma: FieldLike,
    b_tilde: FieldLike,
    theta,
    beta,
    y,
    x0,
    mesh: TimeMesh,
    noise: NoisePath,
    cache_jacobians: bool = False,
) -> EulerTape:
    """Run the Euler recursion and record the full state path."""
    problem = latent_problem(b, sigma, b_tilde, theta, beta, y=y, x0=x0)
    trajectory = sde_solve(problem, mesh, noise)
    y_in = np.zeros(b_tilde.in_dim) if y is None else np.asarray(y, dtype=float)
    tape = EulerTape(
        mesh=mesh,
        noise=noise,
        states=trajectory.states,
        b=b,
        sigma=sigma,
        b_tilde=b_tilde,
        theta=as_values(theta).copy(),
        beta=as_values(beta).copy(),
        y=y_in,
    )
    if cache_jacobians:
        tape.jacobians.extend(_step_jacobians(tape, i) for i in range(tape.n_steps))
    return tape


def euler_backward(
    tape: EulerTape, terminal_cosensitivity
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (d/dtheta, d/dbeta) of a scalar loss with dL/dX_N = cosensitivity."""
    a = np.asarray(terminal_cosensitivity, dtype=float)
    d = tape.states.shape[1]
    if a.shape != (d,):
        raise DimensionError(f"cosensitivity must have shape ({d},), got {a.shape}")
    n_b = tape.b.n_params
    grad_theta = np.zeros(tape.theta.size)
    grad_beta = np.zeros(tape.beta.size)
    steps, dws = tape.mesh.steps, tape.noise.increments
    for i in reversed(range(tape.n_steps)):
        h, dw = steps[i], dws[i]
        jac = tape.step_jacobians(i)
        grad_beta += h * (jac.b_tilde_beta.T @ a)
        if jac.b_theta is not None:
            grad_theta[:n_b] += h * (jac.b_theta.T @ a)
        if jac.s_theta is not None:
            grad_theta[n_b:] += np.einsum("ilp,l,i->p", jac.s_theta, dw, a)
        back = a.copy()
        if jac.bx is not None:
            back += h * (jac.bx.T @ a)
        if jac.sx is not None:
            back += np.einsum("ilj,l,i->j", jac.sx, dw, a)
        a = back
    return grad_theta, grad_beta
