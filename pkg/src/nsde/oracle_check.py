"""
nsde/oracle_check.py
Acceptance battery: gradient engines, solver and oracles against closed forms.

Every check is deterministic given its seeds.  ``--full`` runs the
acceptance-scale sizes; the default sizes finish in seconds.
"""

from __future__ import annotations

import logging
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from nsde import experiment
from nsde.backprop import euler_backward, euler_forward
from nsde.config import build_config
from nsde.console import Colors
from nsde.fields import (
    ACTIVATIONS,
    CountingField,
    EvalCounter,
    VectorField,
    activation_drift,
    constant_drift,
    identity_diffusion,
    join_theta,
)
from nsde.oracle import (
    GaussianLaw,
    LinearSdeSpec,
    conjugate_neg_log_marginal,
    follmer_affine_drift,
    follmer_mc_drift,
    follmer_sample_batch,
    gaussian_density_ratio,
    simulate_linear_terminal,
    terminal_law,
)
from nsde.paths import TimeMesh, make_rng, sample_wiener
from nsde.sensitivity import build_augmented, pathwise_gradients, pathwise_step_cost
from nsde.solver import solve_terminal_batch
from nsde.variational import (
    Engine,
    FitConfig,
    FreeEnergyObjective,
    ModelFields,
    gaussian_observation,
    gd_fit,
    kl_term,
)

logger = logging.getLogger(__name__)

# per-observation nats of Monte-Carlo slack between neighbouring sample sizes
SAMPLE_SWEEP_TOL = 0.05


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class Sizes:
    equivalence_trials: int
    fd_trials: int
    fd_steps: int
    fd_dim: int
    law_steps: int
    law_paths: int
    follmer_steps: int
    follmer_paths: int
    mc_sizes: tuple[int, ...]
    mc_repeats: int
    conjugate_paths: int
    strong_paths: int
    sweep_iters: int


QUICK = Sizes(
    equivalence_trials=4,
    fd_trials=3,
    fd_steps=64,
    fd_dim=3,
    law_steps=2**8,
    law_paths=20_000,
    follmer_steps=2**7,
    follmer_paths=20_000,
    mc_sizes=(10**2, 10**3, 10**4),
    mc_repeats=16,
    conjugate_paths=200,
    strong_paths=500,
    sweep_iters=0,
)
FULL = Sizes(
    equivalence_trials=20,
    fd_trials=20,
    fd_steps=2**10,
    fd_dim=4,
    law_steps=2**12,
    law_paths=100_000,
    follmer_steps=2**10,
    follmer_paths=100_000,
    mc_sizes=(10**2, 10**3, 10**4, 10**5),
    mc_repeats=32,
    conjugate_paths=10_000,
    strong_paths=1000,
    sweep_iters=200,
)


def relative_error(actual, expected) -> float:
    """max |actual - expected| relative to the largest |expected| entry."""
    actual = np.asarray(actual, dtype=float)
    expected = np.asarray(expected, dtype=float)
    scale = max(float(np.max(np.abs(expected), initial=0.0)), 1e-300)
    return float(np.max(np.abs(actual - expected), initial=0.0)) / scale


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


# -- random models ------------------------------------------------------------


def random_model(rng: np.random.Generator, d: int):
    """Random smooth (b, sigma, b_tilde) with parameters and an observation."""
    activation = str(rng.choice(list(ACTIVATIONS)))
    if rng.random() < 0.5:
        b = activation_drift(d, activation)
    else:
        b = VectorField(
            kind="mlp",
            in_dim=d,
            out_shape=(d,),
            activation=activation,
            hidden=3,
            time_input=bool(rng.random() < 0.5),
        )
    if rng.random() < 0.5:
        sigma = identity_diffusion(d)
    else:
        sigma = VectorField(kind="diagonal", in_dim=d, out_shape=(d, d))
    if rng.random() < 0.5:
        b_tilde = constant_drift(d)
    else:
        b_tilde = VectorField(kind="time_affine", in_dim=d, out_shape=(d,))
    theta_b = 0.5 * rng.standard_normal(b.n_params)
    theta_s = 1.0 + 0.2 * rng.standard_normal(sigma.n_params)
    theta = join_theta(b, sigma, theta_b, theta_s)
    beta = rng.standard_normal(b_tilde.n_params)
    y = rng.standard_normal(d)
    return b, sigma, b_tilde, theta, beta, y


def _engine_gradients(b, sigma, b_tilde, theta, beta, y, mesh, noise):
    obs = gaussian_observation()
    aug = build_augmented(b, sigma, b_tilde, theta, beta, y=y)
    x1, jb, jt = pathwise_gradients(aug, mesh, noise)
    cos = -obs.grad_x_log_lik(y, x1)
    tape = euler_forward(b, sigma, b_tilde, theta, beta, y, None, mesh, noise)
    g_theta, g_beta = euler_backward(tape, -obs.grad_x_log_lik(y, tape.terminal))
    return (jt.T @ cos, jb.T @ cos), (g_theta, g_beta)


# -- checks -------------------------------------------------------------------


def check_engine_equivalence(sizes: Sizes) -> CheckResult:
    rng = make_rng(101)
    worst = 0.0
    for trial in range(sizes.equivalence_trials):
        d = int(rng.integers(1, 11))
        n_steps = (32, 256)[trial % 2]
        b, sigma, b_tilde, theta, beta, y = random_model(rng, d)
        mesh = TimeMesh.uniform(n_steps)
        noise = sample_wiener(mesh, d, 1000 + trial)
        (pt, pb), (bt, bb) = _engine_gradients(b, sigma, b_tilde, theta, beta, y, mesh, noise)
        worst = max(worst, relative_error(pt, bt), relative_error(pb, bb))
    return CheckResult("engine equivalence", worst <= 1e-8, f"max rel err {worst:.2e}")


def _central_difference(fn, x: np.ndarray, step: float) -> np.ndarray:
    """Columns d fn / d x_i; a scalar fn gives a 1-D result."""
    columns = [(fn(x + step * e) - fn(x - step * e)) / (2 * step) for e in np.eye(x.size)]
    return np.column_stack(columns) if np.ndim(columns[0]) else np.array(columns)


def finite_difference_errors(
    d: int, n_steps: int, seed: int, rng: np.random.Generator, step: float = 1e-4
) -> tuple[float, float]:
    """Worst relative errors of (pathwise Jacobians, backprop loss gradients).

    Both engines are compared with central differences taken on the same
    noise path; the backprop loss is -log N(y; X_1, I).
    """
    mesh = TimeMesh.uniform(n_steps)
    b, sigma, b_tilde = activation_drift(d), identity_diffusion(d), constant_drift(d)
    obs = gaussian_observation()
    theta = 0.5 * rng.standard_normal(b.n_params)
    beta = rng.standard_normal(d)
    y = rng.standard_normal(d)
    noise = sample_wiener(mesh, d, seed)

    def x1(th, be):
        return pathwise_gradients(build_augmented(b, sigma, b_tilde, th, be), mesh, noise)[0]

    def loss(th, be):
        tape = euler_forward(b, sigma, b_tilde, th, be, y, None, mesh, noise)
        return -float(obs.log_lik(y, tape.terminal))

    _, jb, jt = pathwise_gradients(build_augmented(b, sigma, b_tilde, theta, beta), mesh, noise)
    pathwise = max(
        relative_error(jt, _central_difference(lambda th: x1(th, beta), theta, step)),
        relative_error(jb, _central_difference(lambda be: x1(theta, be), beta, step)),
    )
    tape = euler_forward(b, sigma, b_tilde, theta, beta, y, None, mesh, noise)
    g_theta, g_beta = euler_backward(tape, -obs.grad_x_log_lik(y, tape.terminal))
    backprop = max(
        relative_error(g_theta, _central_difference(lambda th: loss(th, beta), theta, step)),
        relative_error(g_beta, _central_difference(lambda be: loss(theta, be), beta, step)),
    )
    return pathwise, backprop


def check_finite_differences(sizes: Sizes) -> CheckResult:
    """Both engines against same-noise central differences."""
    rng = make_rng(202)
    worst_pathwise = worst_backprop = 0.0
    for trial in range(sizes.fd_trials):
        pathwise, backprop = finite_difference_errors(
            sizes.fd_dim, sizes.fd_steps, 2000 + trial, rng
        )
        worst_pathwise = max(worst_pathwise, pathwise)
        worst_backprop = max(worst_backprop, backprop)
    return CheckResult(
        "finite differences",
        max(worst_pathwise, worst_backprop) <= 1e-3,
        f"max rel err pathwise {worst_pathwise:.2e}, backprop {worst_backprop:.2e}",
    )


def check_linear_law(sizes: Sizes) -> CheckResult:
    rng = make_rng(303)
    d = 4
    a = 0.5 * rng.standard_normal((d, d))
    c = np.eye(d) + 0.3 * rng.standard_normal((d, d))
    spec = LinearSdeSpec.constant(a, c, rng.standard_normal(d))
    law = terminal_law(spec)
    samples = simulate_linear_terminal(spec, TimeMesh.uniform(sizes.law_steps), sizes.law_paths, 7)
    n = samples.shape[0]
    mean_z = np.abs(samples.mean(axis=0) - law.mean) / np.sqrt(np.diag(law.cov) / n)
    centered = samples - samples.mean(axis=0)
    products = centered[:, :, None] * centered[:, None, :]
    cov_se = products.std(axis=0, ddof=1) / math.sqrt(n)
    cov_z = np.abs(products.mean(axis=0) - law.cov) / cov_se
    worst_z = float(max(mean_z.max(), cov_z.max()))
    scalar = terminal_law(LinearSdeSpec.constant([[1.0]], [[1.0]], [0.0]))
    exact = (math.exp(2.0) - 1.0) / 2.0
    scalar_err = abs(scalar.cov[0, 0] - exact) / exact
    # 4 standard errors: 20 moments are compared at once
    passed = worst_z <= 4.0 and scalar_err <= 1e-6
    return CheckResult(
        "linear SDE law",
        passed,
        f"max |z| {worst_z:.2f}, scalar Sigma rel err {scalar_err:.1e}",
    )


def check_follmer(sizes: Sizes) -> CheckResult:
    target = GaussianLaw([1.0], [[4.0]])
    mesh = TimeMesh.uniform(sizes.follmer_steps)
    samples = follmer_sample_batch(target, mesh, sizes.follmer_paths, 11)[:, 0]
    n = samples.size
    mean_z = abs(samples.mean() - 1.0) / math.sqrt(4.0 / n)
    var_se = math.sqrt(2.0 / (n - 1)) * 4.0
    # Euler bias on the variance is O(h); 20 h covers it at these meshes
    var_ok = abs(samples.var(ddof=1) - 4.0) <= 3 * var_se + 20.0 / sizes.follmer_steps
    f_hat = gaussian_density_ratio(target)
    exact = follmer_affine_drift(target, [0.3], 0.4)
    errors = [
        math.sqrt(
            np.mean(
                [
                    (follmer_mc_drift(f_hat, [0.3], 0.4, n_mc, seed)[0] - exact[0]) ** 2
                    for seed in range(sizes.mc_repeats)
                ]
            )
        )
        for n_mc in sizes.mc_sizes
    ]
    slope = loglog_slope(sizes.mc_sizes, errors)
    passed = mean_z <= 3.0 and var_ok and -0.65 <= slope <= -0.35
    return CheckResult(
        "Föllmer sampling",
        passed,
        f"mean |z| {mean_z:.2f}, var {samples.var(ddof=1):.4f}, MC slope {slope:.3f}",
    )


def check_kl_identities(sizes: Sizes) -> CheckResult:
    beta = np.array([0.3, -1.2, 2.0])
    constant = kl_term(constant_drift(3), beta, None, TimeMesh.uniform(7))
    ramp = VectorField(kind="time_affine", in_dim=1, out_shape=(1,))
    linear = kl_term(ramp, [0.0, 1.0], None, TimeMesh.uniform(1024))
    const_err = abs(constant - 0.5 * beta @ beta)
    passed = const_err <= 1e-12 and abs(linear - 1.0 / 6.0) <= 1e-3
    return CheckResult("KL identities", passed, f"const err {const_err:.1e}, ramp {linear:.6f}")


def check_conjugate_optimum(sizes: Sizes) -> CheckResult:
    d = 2
    y = np.array([1.0, -0.6])
    model = ModelFields(
        b=VectorField(kind="zero", in_dim=d, out_shape=(d,)),
        sigma=identity_diffusion(d),
        b_tilde=constant_drift(d),
    )
    objective = FreeEnergyObjective.single(model, gaussian_observation(), y)
    config = FitConfig(
        step_size=0.5,
        n_iters=60,
        n_paths=sizes.conjugate_paths,
        mesh=TimeMesh.uniform(16),
        seed=5,
        antithetic=True,
    )
    result = gd_fit(np.zeros(0), np.zeros(d), objective, config)
    beta_err = float(np.max(np.abs(result.beta - y / 2)))
    report = result.history[-1].report
    bound = conjugate_neg_log_marginal(y)
    upper = report.total >= bound - 3 * report.nll_std_err
    return CheckResult(
        "conjugate optimum",
        beta_err <= 1e-3 and upper,
        f"|beta - y/2| {beta_err:.1e}, F {report.total:.4f} vs -log p(y) {bound:.4f}",
    )


def strong_order_slope(n_paths: int, seed: int = 13) -> float:
    """RMS-error slope of Euler-Maruyama for dX = aX dt + cX dW on shared paths."""
    a, c = 0.5, 1.0
    fine = 2**8
    dw = math.sqrt(1.0 / fine) * make_rng(seed).standard_normal((n_paths, fine))
    exact = np.exp((a - 0.5 * c * c) + c * dw.sum(axis=1))
    hs, errors = [], []
    for n_steps in (2**4, 2**5, 2**6, 2**7, 2**8):
        coarse = dw.reshape(n_paths, n_steps, fine // n_steps).sum(axis=2)
        x1 = solve_terminal_batch(
            drift=lambda z, t: a * z,
            dispersion=lambda z, t: c * z[:, :, None],
            z0=np.ones(1),
            mesh=TimeMesh.uniform(n_steps),
            increments=(coarse[:, i, None] for i in range(n_steps)),
        )[:, 0]
        hs.append(1.0 / n_steps)
        errors.append(math.sqrt(np.mean((x1 - exact) ** 2)))
    return loglog_slope(hs, errors)


def check_strong_order(sizes: Sizes) -> CheckResult:
    slope = strong_order_slope(sizes.strong_paths)
    return CheckResult("strong order", 0.4 <= slope <= 0.6, f"slope {slope:.3f}")


def check_counters(sizes: Sizes) -> CheckResult:
    d, n_steps = 3, 16
    counts = []
    for mesh_n in (n_steps, 2 * n_steps, 3 * n_steps):
        counter = EvalCounter()
        b = CountingField(activation_drift(d), counter)
        sigma = CountingField(identity_diffusion(d), counter)
        b_tilde = CountingField(constant_drift(d), counter)
        mesh = TimeMesh.uniform(mesh_n)
        tape = euler_forward(
            b, sigma, b_tilde, np.full(d * d, 0.1), np.zeros(d), None, None, mesh,
            sample_wiener(mesh, d, 3),
        )
        euler_backward(tape, np.ones(d))
        counts.append(counter.evals + counter.jac_x_calls + counter.jac_params_calls)
    linear = counts[2] - counts[1] == counts[1] - counts[0] > 0

    counter = EvalCounter()
    b = CountingField(activation_drift(d), counter)
    sigma = CountingField(identity_diffusion(d), counter)
    b_tilde = CountingField(constant_drift(d), counter)
    mesh = TimeMesh.uniform(n_steps)
    aug = build_augmented(b, sigma, b_tilde, np.full(d * d, 0.1), np.zeros(d))
    pathwise_gradients(aug, mesh, sample_wiener(mesh, d, 3))
    cost = pathwise_step_cost(d, d, d * d)
    exact = (
        counter.sweeps["x"] == n_steps * cost.sweeps_x
        and counter.sweeps["params"] == n_steps * cost.sweeps_params
    )
    return CheckResult(
        "complexity counters",
        linear and exact,
        f"backprop evals {counts}, pathwise sweeps {counter.total_sweeps}",
    )


def check_sweep_properties(sizes: Sizes) -> CheckResult:
    """Default-configuration mesh and sample sweeps, scored on held-out data."""
    if not sizes.sweep_iters:
        return CheckResult("sweep properties", True, "skipped (use --full)")
    config = build_config({"fit": {"n-iters": sizes.sweep_iters, "timing": False}})
    dataset, pool = experiment.sweep_datasets(config, "both")
    with tempfile.TemporaryDirectory() as tmp:
        result = experiment.run_sweep(
            config, dataset, "both", Path(tmp) / "sweep.csv", sample_pool=pool
        )
    if result.failures:
        var, value, message = result.failures[0]
        return CheckResult("sweep properties", False, f"{var}={value} failed: {message}")
    gaps = result.mesh_refinement_gaps()
    refines = gaps is not None and gaps[1] < gaps[0]
    descends = result.descends()
    monotone = result.sample_sizes_monotone(tol=SAMPLE_SWEEP_TOL)
    shown = "n/a" if gaps is None else f"{gaps[0]:.3g} -> {gaps[1]:.3g}"
    return CheckResult(
        "sweep properties",
        descends and refines and monotone,
        f"descends {descends}, mesh gap {shown}, monotone in n {monotone}",
    )


CHECKS: tuple[Callable[[Sizes], CheckResult], ...] = (
    check_engine_equivalence,
    check_finite_differences,
    check_linear_law,
    check_follmer,
    check_kl_identities,
    check_conjugate_optimum,
    check_strong_order,
    check_counters,
    check_sweep_properties,
)


def run_checks(full: bool = False) -> list[CheckResult]:
    sizes = FULL if full else QUICK
    results = []
    for check in CHECKS:
        try:
            result = check(sizes)
        except (ArithmeticError, ValueError, RuntimeError) as e:
            result = CheckResult(check.__name__.removeprefix("check_"), False, f"error: {e}")
        logger.info("%s: %s (%s)", result.name, result.passed, result.detail)
        results.append(result)
    return results


def run(args) -> int:
    """Run the battery and print a pass/fail table."""
    results = run_checks(full=getattr(args, "full", False))
    width = max(len(r.name) for r in results)
    for r in results:
        mark = Colors.green("✓") if r.passed else Colors.red("✗")
        print(f"  {mark} {r.name.ljust(width)}  {r.detail}")
    failed = sum(not r.passed for r in results)
    if failed:
        print(Colors.red(f"{failed} of {len(results)} checks failed"))
        return 1
    print(Colors.green(f"all {len(results)} checks passed"))
    return 0
