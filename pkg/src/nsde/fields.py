"""
nsde/fields.py
Parametric drift and diffusion fields with closed-form Jacobians.

Architectures (``VectorField.kind``):

- zero:                x -> 0                          (no params)
- constant:            x -> c                          (drift or matrix diffusion)
- time_affine:         x -> c + t g                     (state ignored)
- piecewise_constant:  x -> c_j for t in segment j      (state ignored)
- affine:              x -> A x + c
- linear:              x -> A x
- activation_linear:   x -> act(A x)
- mlp:                 x -> W2 act(W1 [x; t] + b1) + b2 (one hidden layer)
- identity:            x -> I_d                          (diffusion, no params)
- diagonal:            x -> diag(theta)                  (diffusion)

Diffusion fields return d x d matrices.  Their Jacobians carry the output
indices first: ``jac_x`` has shape (d, d, d) with entry [i, l, j] equal to
d sigma_{il} / d x_j, so ``jac[:, l, :]`` is the Jacobian of column l.
Matrix parameters are stored row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    """Raised when array shapes do not match a field's declared dimensions."""


class SmoothnessError(ValueError):
    """Raised for activations that break the Lipschitz-Jacobian requirement."""


class _Activation(NamedTuple):
    fn: object
    deriv: object


def _tanh_deriv(z: np.ndarray) -> np.ndarray:
    return 1.0 - np.tanh(z) ** 2


def _sigmoid_deriv(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return s * (1.0 - s)


ACTIVATIONS: dict[str, _Activation] = {
    "sigmoid": _Activation(expit, _sigmoid_deriv),
    "tanh": _Activation(np.tanh, _tanh_deriv),
    "softplus": _Activation(lambda z: np.logaddexp(0.0, z), expit),
}
NON_SMOOTH_ACTIVATIONS = ("relu", "leaky_relu", "abs", "hardtanh")

DRIFT_KINDS = (
    "zero",
    "constant",
    "time_affine",
    "piecewise_constant",
    "affine",
    "linear",
    "activation_linear",
    "mlp",
)
DIFFUSION_KINDS = ("identity", "diagonal", "constant", "mlp")
STATE_FREE_KINDS = (
    "zero",
    "constant",
    "time_affine",
    "piecewise_constant",
    "identity",
    "diagonal",
)


class Segment(NamedTuple):
    """A named slice of a flat parameter vector."""

    name: str
    start: int
    stop: int
    shape: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat parameter values with a named segment layout."""

    values: np.ndarray
    layout: tuple[Segment, ...] = ()

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float, copy=True).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        layout = tuple(Segment(*seg) for seg in self.layout)
        if not layout and values.size:
            layout = (Segment("values", 0, values.size, (values.size,)),)
        position = 0
        for seg in layout:
            if seg.start != position or seg.stop < seg.start:
                raise DimensionError(f"segment {seg.name!r} breaks the layout")
            if math.prod(seg.shape) != seg.stop - seg.start:
                raise DimensionError(f"segment {seg.name!r} has inconsistent shape")
            position = seg.stop
        if position != values.size:
            raise DimensionError(
                f"layout covers {position} values, vector has {values.size}"
            )
        object.__setattr__(self, "layout", layout)

    def __len__(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.start : seg.stop].reshape(seg.shape)
        raise KeyError(name)


def as_values(params) -> np.ndarray:
    if isinstance(params, ParamVector):
        return params.values
    return np.asarray(params, dtype=float).reshape(-1)


class FieldLike(Protocol):
    in_dim: int
    out_shape: tuple[int, ...]

    @property
    def out_size(self) -> int: ...

    @property
    def n_params(self) -> int: ...

    @property
    def state_dependent(self) -> bool: ...

    def eval(self, x, t: float, params) -> np.ndarray: ...

    def jac_x(self, x, t: float, params) -> np.ndarray: ...

    def jac_params(self, x, t: float, params) -> np.ndarray: ...


@dataclass(frozen=True)
class VectorField:
    """A parametric map (x, t, params) -> R^out_shape."""

    kind: str
    in_dim: int
    out_shape: tuple[int, ...]
    activation: str | None = None
    hidden: int = 0
    time_input: bool = False
    segments: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "out_shape", tuple(int(s) for s in self.out_shape))
        if self.in_dim < 1:
            raise DimensionError(f"in_dim must be >= 1, got {self.in_dim}")
        if len(self.out_shape) not in (1, 2):
            raise DimensionError(f"out_shape must be (d,) or (d, d), got {self.out_shape}")
        allowed = DRIFT_KINDS if len(self.out_shape) == 1 else DIFFUSION_KINDS
        if self.kind not in allowed:
            raise ValueError(
                f"unknown architecture {self.kind!r} for output {self.out_shape}; "
                f"expected one of {', '.join(allowed)}"
            )
        if self.kind in ("activation_linear", "mlp"):
            if self.activation in NON_SMOOTH_ACTIVATIONS:
                raise SmoothnessError(
                    f"activation {self.activation!r} is not C2 with bounded derivatives"
                )
            if self.activation not in ACTIVATIONS:
                raise ValueError(
                    f"activation must be one of {', '.join(ACTIVATIONS)}, "
                    f"got {self.activation!r}"
                )
        if self.kind == "mlp" and self.hidden < 1:
            raise DimensionError("mlp needs hidden >= 1")
        if self.kind == "piecewise_constant" and self.segments < 1:
            raise DimensionError("piecewise_constant needs segments >= 1")
        square = ("affine", "linear", "activation_linear", "identity", "diagonal")
        if self.kind in square and self.out_shape[0] != self.in_dim:
            raise DimensionError(
                f"{self.kind} maps R^{self.in_dim} to R^{self.in_dim}, "
                f"got out_shape {self.out_shape}"
            )
        if len(self.out_shape) == 2 and self.out_shape[0] != self.out_shape[1]:
            raise DimensionError("diffusion fields must be square")

    # -- layout -------------------------------------------------------------

    @property
    def out_size(self) -> int:
        return math.prod(self.out_shape)

    @property
    def state_dependent(self) -> bool:
        return self.kind not in STATE_FREE_KINDS

    @property
    def uses_input(self) -> bool:
        """False when eval ignores its first argument entirely."""
        return self.state_dependent

    def _shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        d, o = self.in_dim, self.out_size
        match self.kind:
            case "constant":
                return [("c", self.out_shape)]
            case "time_affine":
                return [("c", (o,)), ("g", (o,))]
            case "piecewise_constant":
                return [("c", (self.segments, o))]
            case "affine":
                return [("A", (o, d)), ("c", (o,))]
            case "linear" | "activation_linear":
                return [("A", (o, d))]
            case "mlp":
                width = d + int(self.time_input)
                return [
                    ("W1", (self.hidden, width)),
                    ("b1", (self.hidden,)),
                    ("W2", (o, self.hidden)),
                    ("b2", (o,)),
                ]
            case "diagonal":
                return [("theta", (d,))]
            case _:
                return []

    def layout(self) -> tuple[Segment, ...]:
        segments = []
        start = 0
        for name, shape in self._shapes():
            stop = start + math.prod(shape)
            segments.append(Segment(name, start, stop, shape))
            start = stop
        return tuple(segments)

    @property
    def n_params(self) -> int:
        return sum(math.prod(shape) for _, shape in self._shapes())

    def params(self, values) -> ParamVector:
        """Wrap *values* with this field's layout."""
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size != self.n_params:
            raise DimensionError(
                f"{self.kind} field has {self.n_params} parameters, got {values.size}"
            )
        return ParamVector(values=values, layout=self.layout())

    def init_params(self, seed: int, scale: float = 1.0) -> ParamVector:
        """Random N(0, scale^2) parameters drawn from a Philox stream."""
        from nsde.paths import make_rng

        rng = make_rng(seed)
        return self.params(scale * rng.standard_normal(self.n_params))

    def zero_params(self) -> ParamVector:
        return self.params(np.zeros(self.n_params))

    # -- evaluation ---------------------------------------------------------

    def _check(self, x, params) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.in_dim,):
            raise DimensionError(f"expected x of shape ({self.in_dim},), got {x.shape}")
        theta = as_values(params)
        if theta.size != self.n_params:
            raise DimensionError(
                f"{self.kind} field has {self.n_params} parameters, got {theta.size}"
            )
        return x, theta

    def _split(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        parts = {}
        for seg in self.layout():
            parts[seg.name] = theta[seg.start : seg.stop].reshape(seg.shape)
        return parts

    def _segment_index(self, t: float) -> int:
        return min(int(math.floor(t * self.segments)), self.segments - 1)

    def _mlp_input(self, x: np.ndarray, t: float) -> np.ndarray:
        return np.append(x, t) if self.time_input else x

    def eval(self, x, t: float, params) -> np.ndarray:
        """Field value at (x, t)."""
        x, theta = self._check(x, params)
        p = self._split(theta)
        match self.kind:
            case "constant":
                out = p["c"].copy()
            case "time_affine":
                out = p["c"] + t * p["g"]
            case "piecewise_constant":
                out = p["c"][self._segment_index(t)].copy()
            case "affine":
                out = p["A"] @ x + p["c"]
            case "linear":
                out = p["A"] @ x
            case "activation_linear":
                out = ACTIVATIONS[self.activation].fn(p["A"] @ x)
            case "mlp":
                hidden = ACTIVATIONS[self.activation].fn(
                    p["W1"] @ self._mlp_input(x, t) + p["b1"]
                )
                out = p["W2"] @ hidden + p["b2"]
            case "zero":
                out = np.zeros(self.out_shape)
            case "identity":
                out = np.eye(self.in_dim)
            case "diagonal":
                out = np.diag(p["theta"])
        return np.asarray(out, dtype=float).reshape(self.out_shape)

    def jac_x(self, x, t: float, params) -> np.ndarray:
        """Jacobian of eval in x, shape out_shape + (in_dim,)."""
        x, theta = self._check(x, params)
        p = self._split(theta)
        d = self.in_dim
        match self.kind:
            case "affine" | "linear":
                jac = p["A"].copy()
            case "activation_linear":
                z = p["A"] @ x
                jac = ACTIVATIONS[self.activation].deriv(z)[:, None] * p["A"]
            case "mlp":
                z = p["W1"] @ self._mlp_input(x, t) + p["b1"]
                slope = ACTIVATIONS[self.activation].deriv(z)
                jac = (p["W2"] * slope) @ p["W1"][:, :d]
            case _:
                jac = np.zeros((self.out_size, d))
        return jac.reshape(self.out_shape + (d,))

    def jac_params(self, x, t: float, params) -> np.ndarray:
        """Jacobian of eval in params, shape out_shape + (n_params,)."""
        x, theta = self._check(x, params)
        p = self._split(theta)
        o = self.out_size
        match self.kind:
            case "constant":
                jac = np.eye(o)
            case "time_affine":
                jac = np.hstack([np.eye(o), t * np.eye(o)])
            case "piecewise_constant":
                jac = np.zeros((o, self.n_params))
                j = self._segment_index(t)
                jac[:, j * o : (j + 1) * o] = np.eye(o)
            case "affine":
                jac = np.hstack([np.kron(np.eye(o), x), np.eye(o)])
            case "linear":
                jac = np.kron(np.eye(o), x)
            case "activation_linear":
                slope = ACTIVATIONS[self.activation].deriv(p["A"] @ x)
                jac = slope[:, None] * np.kron(np.eye(o), x)
            case "mlp":
                jac = self._mlp_jac_params(x, t, p)
            case "diagonal":
                d = self.in_dim
                jac = np.zeros((d, d, d))
                jac[np.arange(d), np.arange(d), np.arange(d)] = 1.0
            case _:
                jac = np.zeros((o, 0))
        return jac.reshape(self.out_shape + (self.n_params,))

    def _mlp_jac_params(self, x, t, p) -> np.ndarray:
        u = self._mlp_input(x, t)
        z = p["W1"] @ u + p["b1"]
        act = ACTIVATIONS[self.activation]
        hidden = act.fn(z)
        back = p["W2"] * act.deriv(z)  # (out, hidden)
        o = self.out_size
        d_w1 = np.einsum("kh,j->khj", back, u).reshape(o, -1)
        d_w2 = np.kron(np.eye(o), hidden)
        return np.hstack([d_w1, back, d_w2, np.eye(o)])


# -- evaluation counting -------------------------------------------------------


@dataclass
class EvalCounter:
    """Call counts plus AD-sweep equivalents of the Jacobians requested.

    A Jacobian of a map R^a -> R^b costs min(a, b) forward- or reverse-mode
    sweeps; ``sweeps`` accumulates that cost per Jacobian kind.
    """

    evals: int = 0
    jac_x_calls: int = 0
    jac_params_calls: int = 0
    sweeps: dict[str, int] = field(default_factory=lambda: {"x": 0, "params": 0})

    def reset(self) -> None:
        self.evals = self.jac_x_calls = self.jac_params_calls = 0
        self.sweeps = {"x": 0, "params": 0}

    @property
    def total_sweeps(self) -> int:
        return self.sweeps["x"] + self.sweeps["params"]


def jacobian_sweeps(n_inputs: int, n_outputs: int) -> int:
    """AD sweeps needed for a dense Jacobian (forward or reverse, whichever is cheaper)."""
    return min(n_inputs, n_outputs)


class CountingField:
    """Delegates to a field and records every evaluation in ``counter``."""

    def __init__(self, inner: VectorField, counter: EvalCounter | None = None):
        self.inner = inner
        self.counter = counter if counter is not None else EvalCounter()

    def __getattr__(self, name: str):
        return getattr(self.inner, name)

    def eval(self, x, t: float, params) -> np.ndarray:
        self.counter.evals += 1
        return self.inner.eval(x, t, params)

    def jac_x(self, x, t: float, params) -> np.ndarray:
        self.counter.jac_x_calls += 1
        self.counter.sweeps["x"] += jacobian_sweeps(self.inner.in_dim, self.inner.out_size)
        return self.inner.jac_x(x, t, params)

    def jac_params(self, x, t: float, params) -> np.ndarray:
        self.counter.jac_params_calls += 1
        self.counter.sweeps["params"] += jacobian_sweeps(
            self.inner.n_params, self.inner.out_size
        )
        return self.inner.jac_params(x, t, params)


# -- convenience constructors --------------------------------------------------


def constant_drift(d: int) -> VectorField:
    return VectorField(kind="constant", in_dim=d, out_shape=(d,))


def identity_diffusion(d: int) -> VectorField:
    return VectorField(kind="identity", in_dim=d, out_shape=(d, d))


def activation_drift(d: int, activation: str = "sigmoid") -> VectorField:
    return VectorField(
        kind="activation_linear", in_dim=d, out_shape=(d,), activation=activation
    )


# -- model parameter vectors ---------------------------------------------------


def join_theta(b: FieldLike, sigma: FieldLike, theta_b, theta_sigma=()) -> ParamVector:
    """Model parameters theta = (drift params, diffusion params) in one vector."""
    values_b, values_s = as_values(theta_b), as_values(theta_sigma)
    if values_b.size != b.n_params or values_s.size != sigma.n_params:
        raise DimensionError(
            f"expected {b.n_params} drift and {sigma.n_params} diffusion parameters, "
            f"got {values_b.size} and {values_s.size}"
        )
    layout = [
        Segment(f"b.{seg.name}", seg.start, seg.stop, seg.shape) for seg in b.layout()
    ]
    layout += [
        Segment(f"sigma.{seg.name}", seg.start + b.n_params, seg.stop + b.n_params, seg.shape)
        for seg in sigma.layout()
    ]
    return ParamVector(values=np.concatenate([values_b, values_s]), layout=tuple(layout))


def split_theta(b: FieldLike, sigma: FieldLike, theta) -> tuple[np.ndarray, np.ndarray]:
    values = as_values(theta)
    if values.size != b.n_params + sigma.n_params:
        raise DimensionError(
            f"theta has {values.size} entries, fields need "
            f"{b.n_params} + {sigma.n_params}"
        )
    return values[: b.n_params], values[b.n_params :]


# -- JSON documents ------------------------------------------------------------


def field_to_dict(vector_field: VectorField) -> dict:
    return {
        "architecture": vector_field.kind,
        "in_dim": vector_field.in_dim,
        "out_shape": list(vector_field.out_shape),
        "activation": vector_field.activation,
        "hidden": vector_field.hidden,
        "time_input": vector_field.time_input,
        "segments": vector_field.segments,
    }


def field_from_dict(raw: dict) -> VectorField:
    if not isinstance(raw, dict):
        raise ValueError(f"field: expected an object, got {type(raw).__name__}")
    try:
        return VectorField(
            kind=raw["architecture"],
            in_dim=int(raw["in_dim"]),
            out_shape=tuple(raw["out_shape"]),
            activation=raw.get("activation"),
            hidden=int(raw.get("hidden", 0)),
            time_input=bool(raw.get("time_input", False)),
            segments=int(raw.get("segments", 1)),
        )
    except KeyError as e:
        raise ValueError(f"field: missing key {e.args[0]!r}") from e


def params_to_dict(vector_field: VectorField, params: ParamVector) -> dict:
    return {
        "field": field_to_dict(vector_field),
        "params": [float(v) for v in as_values(params)],
    }


def params_from_dict(raw: dict) -> tuple[VectorField, ParamVector]:
    vector_field = field_from_dict(raw.get("field"))
    return vector_field, vector_field.params(raw.get("params", []))
