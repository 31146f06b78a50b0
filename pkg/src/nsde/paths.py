"""
nsde/paths.py
Time meshes, Wiener-path sampling and drift-shifted (Girsanov) paths.

Provides:

- TimeMesh: strictly increasing grid 0 = t_0 < ... < t_N = 1
- NoisePath: per-step Gaussian increments of one sampled Wiener path
- DriftShift: deterministic drift u(t) added to a path
- sample_wiener(): reproducible path sampling from a 64-bit seed
- shift_path(): Z = int u ds + W with left-endpoint quadrature
- iter_wiener_increments(): batched increments for vectorized Monte Carlo
- path_seeds(): disjoint per-path seeds derived from one seed
- derive_seed(): one seed per indexed stream (fresh seeds per iteration)

Increments are the canonical representation; path values are their
cumulative sums.  Randomness comes from numpy's counter-based ``Philox``
bit generator and its ``standard_normal`` (ziggurat) transform, so equal
seeds give bit-identical paths on every platform numpy supports.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

MESH_SUM_TOLERANCE = 1e-12
_SEED_LIMIT = 2**64


class MeshError(ValueError):
    """Raised when a time mesh violates its invariants."""


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < _SEED_LIMIT:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def make_rng(seed: int) -> np.random.Generator:
    """Return the documented generator for *seed*: Philox-4x64 keyed by the seed."""
    return np.random.Generator(np.random.Philox(_check_seed(seed)))


def path_seeds(seed: int, n: int) -> list[int]:
    """Derive *n* distinct 64-bit seeds from *seed* (fixed order)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    state = np.random.SeedSequence(_check_seed(seed)).generate_state(n, dtype=np.uint64)
    return [int(s) for s in state]


def derive_seed(seed: int, index: int) -> int:
    """A 64-bit seed for stream *index* of *seed* (e.g. one per GD iteration)."""
    state = np.random.SeedSequence([_check_seed(seed), int(index)]).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0])


@dataclass(frozen=True)
class TimeMesh:
    """A strictly increasing grid on [0, 1]."""

    knots: np.ndarray

    def __post_init__(self) -> None:
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2:
            raise MeshError("mesh needs at least two knots")
        if not np.all(np.isfinite(knots)):
            raise MeshError("mesh knots must be finite")
        if knots[0] != 0.0 or knots[-1] != 1.0:
            raise MeshError(
                f"mesh must start at 0 and end at 1, got [{knots[0]}, {knots[-1]}]"
            )
        steps = np.diff(knots)
        if np.any(steps <= 0.0):
            bad = int(np.argmin(steps))
            raise MeshError(f"mesh knots must be strictly increasing (step {bad + 1})")
        if abs(steps.sum() - 1.0) > MESH_SUM_TOLERANCE:
            raise MeshError("mesh steps do not sum to 1")
        object.__setattr__(self, "knots", _readonly(knots))
        object.__setattr__(self, "_steps", _readonly(steps))

    @classmethod
    def uniform(cls, n: int) -> TimeMesh:
        """Uniform mesh with *n* steps of size 1/n."""
        if n < 1:
            raise MeshError(f"mesh needs at least one step, got {n}")
        return cls(np.linspace(0.0, 1.0, n + 1))

    @classmethod
    def from_step(cls, h: float) -> TimeMesh:
        """Uniform mesh with step *h*; 1/h must be an integer."""
        n = round(1.0 / h)
        if n < 1 or abs(n * h - 1.0) > 1e-9:
            raise MeshError(f"1/h must be a positive integer, got h={h}")
        return cls.uniform(n)

    @property
    def steps(self) -> np.ndarray:
        return self._steps  # type: ignore[attr-defined]

    @property
    def n_steps(self) -> int:
        return self.knots.size - 1

    def index_of(self, t: float) -> int:
        """Return the index of knot *t* (within 1e-12)."""
        idx = int(np.searchsorted(self.knots, t - MESH_SUM_TOLERANCE))
        if idx >= self.knots.size or abs(self.knots[idx] - t) > MESH_SUM_TOLERANCE:
            raise MeshError(f"time {t} is not a mesh knot")
        return idx

    def coarsened(self) -> TimeMesh:
        """Mesh keeping every other knot (requires an even number of steps)."""
        if self.n_steps % 2:
            raise MeshError("cannot coarsen a mesh with an odd number of steps")
        return TimeMesh(self.knots[::2])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TimeMesh):
            return NotImplemented
        return np.array_equal(self.knots, other.knots)

    def __hash__(self) -> int:
        return hash(self.knots.tobytes())


@dataclass(frozen=True)
class NoisePath:
    """Raw Wiener increments on a mesh; row i has covariance h_{i+1} * I."""

    dim: int
    increments: np.ndarray
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"noise dimension must be >= 1, got {self.dim}")
        increments = np.asarray(self.increments, dtype=float)
        if increments.ndim != 2 or increments.shape[1] != self.dim:
            raise ValueError(
                f"increments must have shape (N, {self.dim}), got {increments.shape}"
            )
        object.__setattr__(self, "increments", _readonly(increments))

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    def values(self) -> np.ndarray:
        """Path values W_{t_0}, ..., W_{t_N} with W_0 = 0."""
        out = np.zeros((self.n_steps + 1, self.dim))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out

    def terminal(self) -> np.ndarray:
        return self.values()[-1]

    def coarsen(self) -> NoisePath:
        """Sum increments over consecutive pairs (the same path on a coarser mesh)."""
        if self.n_steps % 2:
            raise MeshError("cannot coarsen a path with an odd number of steps")
        paired = self.increments[0::2] + self.increments[1::2]
        return NoisePath(dim=self.dim, increments=paired, seed=self.seed)

    def negated(self) -> NoisePath:
        """Antithetic partner -W (same law)."""
        return NoisePath(dim=self.dim, increments=-self.increments, seed=self.seed)

    def check_mesh(self, mesh: TimeMesh) -> None:
        if mesh.n_steps != self.n_steps:
            raise MeshError(
                f"noise path has {self.n_steps} steps but mesh has {mesh.n_steps}"
            )

    def to_csv(self) -> str:
        """One increment vector per row, header ``dw_1..dw_d``."""
        header = ",".join(f"dw_{i + 1}" for i in range(self.dim))
        return csv_block(header, self.increments)


def csv_block(header: str, rows: np.ndarray) -> str:
    buf = io.StringIO()
    np.savetxt(buf, rows, fmt="%.17g", delimiter=",", header=header, comments="")
    return buf.getvalue()


def sample_wiener(mesh: TimeMesh, dim: int, seed: int) -> NoisePath:
    """Sample the increments of a *dim*-dimensional Wiener path on *mesh*."""
    if not isinstance(mesh, TimeMesh):
        raise MeshError("sample_wiener needs a TimeMesh")
    if dim < 1:
        raise ValueError(f"noise dimension must be >= 1, got {dim}")
    rng = make_rng(seed)
    z = rng.standard_normal((mesh.n_steps, dim))
    increments = np.sqrt(mesh.steps)[:, None] * z
    return NoisePath(dim=dim, increments=increments, seed=int(seed))


def iter_wiener_increments(
    mesh: TimeMesh, dim: int, n_paths: int, seed: int
) -> Iterator[np.ndarray]:
    """Yield per-step increment blocks of shape (n_paths, dim).

    Streams a batch of independent paths without materialising all N steps.
    Reproducible for equal (mesh, dim, n_paths, seed); the stream is not the
    same as stacking ``sample_wiener`` calls.
    """
    rng = make_rng(seed)
    for h in mesh.steps:
        yield np.sqrt(h) * rng.standard_normal((n_paths, dim))


@dataclass(frozen=True)
class DriftShift:
    """A deterministic drift u: t -> R^d."""

    u: Callable[[float], np.ndarray]
    dim: int | None = None

    @classmethod
    def constant(cls, value) -> DriftShift:
        value = _readonly(np.atleast_1d(value))
        return cls(u=lambda _t: value, dim=value.size)

    @classmethod
    def from_field(cls, vector_field, params, y=None) -> DriftShift:
        """Wrap a drift field b~(y, t; beta) that ignores the state."""
        y_in = np.zeros(vector_field.in_dim) if y is None else np.asarray(y, float)
        return cls(
            u=lambda t: vector_field.eval(y_in, t, params),
            dim=vector_field.out_size,
        )

    def __call__(self, t: float) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.u(t), dtype=float))

    def __add__(self, other: DriftShift) -> DriftShift:
        if not isinstance(other, DriftShift):
            return NotImplemented
        return DriftShift(u=lambda t: self(t) + other(t), dim=self.dim or other.dim)


def shift_path(path: NoisePath, shift: DriftShift, mesh: TimeMesh) -> NoisePath:
    """Add int_{t_i}^{t_{i+1}} u ds ~ h_{i+1} u(t_i) to every increment."""
    path.check_mesh(mesh)
    drift = np.empty_like(path.increments)
    for i, t in enumerate(mesh.knots[:-1]):
        value = shift(t)
        if value.shape != (path.dim,):
            raise ValueError(
                f"drift shift has shape {value.shape}, path dimension is {path.dim}"
            )
        drift[i] = value
    return NoisePath(
        dim=path.dim,
        increments=path.increments + mesh.steps[:, None] * drift,
        seed=path.seed,
    )
