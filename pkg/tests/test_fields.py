"""Tests for nsde.fields."""

import json

import numpy as np
import pytest

from nsde.fields import (
    ACTIVATIONS,
    CountingField,
    DimensionError,
    EvalCounter,
    ParamVector,
    Segment,
    SmoothnessError,
    VectorField,
    activation_drift,
    constant_drift,
    field_from_dict,
    field_to_dict,
    identity_diffusion,
    join_theta,
    params_from_dict,
    params_to_dict,
    split_theta,
)
from nsde.paths import make_rng

FD_STEP = 1e-4


def _fd_jac_x(f, x, t, p):
    cols = [
        (f.eval(x + FD_STEP * e, t, p) - f.eval(x - FD_STEP * e, t, p)) / (2 * FD_STEP)
        for e in np.eye(x.size)
    ]
    return np.stack(cols, axis=-1)


def _fd_jac_params(f, x, t, p):
    cols = [
        (f.eval(x, t, p + FD_STEP * e) - f.eval(x, t, p - FD_STEP * e)) / (2 * FD_STEP)
        for e in np.eye(p.size)
    ]
    return np.stack(cols, axis=-1) if cols else np.zeros(f.out_shape + (0,))


def _rel_err(actual, expected):
    scale = max(np.max(np.abs(expected), initial=0.0), 1e-12)
    return np.max(np.abs(actual - expected), initial=0.0) / scale


ARCHITECTURES = [
    VectorField(kind="zero", in_dim=3, out_shape=(3,)),
    VectorField(kind="constant", in_dim=3, out_shape=(3,)),
    VectorField(kind="time_affine", in_dim=3, out_shape=(3,)),
    VectorField(kind="piecewise_constant", in_dim=3, out_shape=(3,), segments=4),
    VectorField(kind="affine", in_dim=3, out_shape=(3,)),
    VectorField(kind="linear", in_dim=3, out_shape=(3,)),
    VectorField(kind="activation_linear", in_dim=3, out_shape=(3,), activation="sigmoid"),
    VectorField(kind="activation_linear", in_dim=3, out_shape=(3,), activation="tanh"),
    VectorField(kind="activation_linear", in_dim=3, out_shape=(3,), activation="softplus"),
    VectorField(kind="mlp", in_dim=3, out_shape=(3,), activation="tanh", hidden=4),
    VectorField(
        kind="mlp", in_dim=3, out_shape=(3,), activation="sigmoid", hidden=2, time_input=True
    ),
    VectorField(kind="identity", in_dim=3, out_shape=(3, 3)),
    VectorField(kind="diagonal", in_dim=3, out_shape=(3, 3)),
    VectorField(kind="constant", in_dim=3, out_shape=(3, 3)),
    VectorField(kind="mlp", in_dim=3, out_shape=(3, 3), activation="softplus", hidden=2),
]


class TestConstruction:
    def test_relu_rejected(self):
        with pytest.raises(SmoothnessError, match="relu"):
            VectorField(kind="activation_linear", in_dim=2, out_shape=(2,), activation="relu")

    def test_unknown_activation(self):
        with pytest.raises(ValueError, match="activation must be one of"):
            VectorField(kind="mlp", in_dim=2, out_shape=(2,), activation="gelu", hidden=2)

    def test_unknown_architecture(self):
        with pytest.raises(ValueError, match="unknown architecture"):
            VectorField(kind="conv", in_dim=2, out_shape=(2,))

    def test_diffusion_kind_checked_against_shape(self):
        with pytest.raises(ValueError, match="unknown architecture"):
            VectorField(kind="identity", in_dim=2, out_shape=(2,))

    def test_square_kinds_need_matching_dims(self):
        with pytest.raises(DimensionError):
            VectorField(kind="linear", in_dim=2, out_shape=(3,))

    def test_mlp_needs_hidden_units(self):
        with pytest.raises(DimensionError, match="hidden"):
            VectorField(kind="mlp", in_dim=2, out_shape=(2,), activation="tanh")

    @pytest.mark.parametrize(
        "field, expected",
        [
            (constant_drift(3), 3),
            (activation_drift(3), 9),
            (VectorField(kind="affine", in_dim=3, out_shape=(3,)), 12),
            (VectorField(kind="mlp", in_dim=3, out_shape=(3,), activation="tanh", hidden=4), 31),
            (identity_diffusion(3), 0),
            (VectorField(kind="diagonal", in_dim=3, out_shape=(3, 3)), 3),
        ],
    )
    def test_parameter_counts(self, field, expected):
        assert field.n_params == expected
        layout = field.layout()
        assert (layout[-1].stop if layout else 0) == expected


class TestParamVector:
    def test_default_layout_covers_values(self):
        p = ParamVector(values=[1.0, 2.0])
        assert p.layout == (Segment("values", 0, 2, (2,)),)
        assert len(p) == 2

    def test_segments_by_name(self):
        b = VectorField(kind="affine", in_dim=2, out_shape=(2,))
        p = b.params(np.arange(6.0))
        np.testing.assert_array_equal(p.segment("A"), [[0.0, 1.0], [2.0, 3.0]])
        np.testing.assert_array_equal(p.segment("c"), [4.0, 5.0])
        with pytest.raises(KeyError):
            p.segment("W1")

    def test_public_methods(self):
        methods = {
            name for name, value in vars(ParamVector).items()
            if callable(value) and not name.startswith("_")
        }
        assert methods == {"segment"}

    def test_gap_in_layout_rejected(self):
        with pytest.raises(DimensionError, match="breaks the layout"):
            ParamVector(values=np.zeros(3), layout=(Segment("a", 1, 3, (2,)),))

    def test_short_layout_rejected(self):
        with pytest.raises(DimensionError, match="covers 2"):
            ParamVector(values=np.zeros(3), layout=(Segment("a", 0, 2, (2,)),))

    def test_values_are_immutable(self):
        p = constant_drift(2).params([1.0, 2.0])
        with pytest.raises(ValueError):
            p.values[0] = 3.0

    def test_wrong_count(self):
        with pytest.raises(DimensionError, match="3 parameters"):
            constant_drift(3).params([1.0])

    def test_init_params_reproducible(self):
        b = activation_drift(3)
        np.testing.assert_array_equal(b.init_params(5).values, b.init_params(5).values)
        assert np.std(b.init_params(5, scale=0.1).values) < 0.5


class TestEval:
    def test_constant(self):
        beta = np.array([0.5, -1.0])
        assert np.array_equal(constant_drift(2).eval(np.ones(2), 0.3, beta), beta)

    def test_linear_identity(self):
        f = VectorField(kind="linear", in_dim=2, out_shape=(2,))
        np.testing.assert_array_equal(f.eval([1.0, 2.0], 0.0, np.eye(2).ravel()), [1.0, 2.0])

    def test_sigmoid_at_zero_matrix(self):
        f = activation_drift(4, "sigmoid")
        np.testing.assert_array_equal(f.eval(np.arange(4.0), 0.7, np.zeros(16)), np.full(4, 0.5))

    def test_identity_diffusion(self):
        np.testing.assert_array_equal(identity_diffusion(3).eval(np.zeros(3), 0.0, []), np.eye(3))

    def test_diagonal_diffusion(self):
        f = VectorField(kind="diagonal", in_dim=2, out_shape=(2, 2))
        np.testing.assert_array_equal(f.eval(np.zeros(2), 0.0, [2.0, 3.0]), np.diag([2.0, 3.0]))

    def test_time_affine(self):
        f = VectorField(kind="time_affine", in_dim=1, out_shape=(1,))
        assert f.eval([5.0], 0.25, [1.0, 2.0])[0] == pytest.approx(1.5)

    def test_piecewise_constant_segments(self):
        f = VectorField(kind="piecewise_constant", in_dim=1, out_shape=(1,), segments=2)
        assert f.eval([0.0], 0.0, [1.0, 2.0])[0] == 1.0
        assert f.eval([0.0], 0.5, [1.0, 2.0])[0] == 2.0
        assert f.eval([0.0], 1.0, [1.0, 2.0])[0] == 2.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError, match="shape"):
            activation_drift(3).eval(np.zeros(2), 0.0, np.zeros(9))
        with pytest.raises(DimensionError, match="parameters"):
            activation_drift(3).eval(np.zeros(3), 0.0, np.zeros(8))

    def test_time_free_fields_ignore_time(self, rng):
        f = VectorField(kind="mlp", in_dim=3, out_shape=(3,), activation="tanh", hidden=4)
        p = rng.standard_normal(f.n_params)
        x = rng.standard_normal(3)
        assert f.eval(x, 0.1, p).tobytes() == f.eval(x, 0.9, p).tobytes()

    def test_repeated_calls_are_bit_identical(self, rng):
        f = activation_drift(3, "softplus")
        p = rng.standard_normal(9)
        x = rng.standard_normal(3)
        assert f.eval(x, 0.0, p).tobytes() == f.eval(x, 0.0, p).tobytes()
        assert f.jac_params(x, 0.0, p).tobytes() == f.jac_params(x, 0.0, p).tobytes()


class TestJacobians:
    def test_constant_jacobians(self):
        f = constant_drift(3)
        np.testing.assert_array_equal(f.jac_x(np.ones(3), 0.0, np.ones(3)), np.zeros((3, 3)))
        np.testing.assert_array_equal(f.jac_params(np.ones(3), 0.0, np.ones(3)), np.eye(3))

    def test_linear_jacobians(self, rng):
        f = VectorField(kind="linear", in_dim=3, out_shape=(3,))
        a = rng.standard_normal((3, 3))
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(f.jac_x(x, 0.0, a.ravel()), a)
        jac = f.jac_params(x, 0.0, a.ravel())
        for i in range(3):
            np.testing.assert_array_equal(jac[i, 3 * i : 3 * i + 3], x)
            assert np.count_nonzero(jac[i]) == 3

    def test_jacobian_shapes(self):
        sigma = VectorField(kind="diagonal", in_dim=2, out_shape=(2, 2))
        assert sigma.jac_x(np.zeros(2), 0.0, [1.0, 1.0]).shape == (2, 2, 2)
        assert sigma.jac_params(np.zeros(2), 0.0, [1.0, 1.0]).shape == (2, 2, 2)
        assert identity_diffusion(2).jac_params(np.zeros(2), 0.0, []).shape == (2, 2, 0)

    @pytest.mark.parametrize(
        "field", ARCHITECTURES, ids=[f"{f.kind}-{f.activation}-{len(f.out_shape)}" for f in ARCHITECTURES]
    )
    def test_finite_difference_agreement(self, field):
        rng = make_rng(17)
        for _ in range(100):
            x = rng.standard_normal(field.in_dim)
            p = rng.standard_normal(field.n_params)
            t = float(rng.uniform(0.05, 0.95))
            jx = field.jac_x(x, t, p)
            jp = field.jac_params(x, t, p)
            assert jx.shape == field.out_shape + (field.in_dim,)
            assert jp.shape == field.out_shape + (field.n_params,)
            assert _rel_err(jx, _fd_jac_x(field, x, t, p)) <= 1e-5
            assert _rel_err(jp, _fd_jac_params(field, x, t, p)) <= 1e-5

    def test_activation_derivatives(self):
        z = np.linspace(-3, 3, 13)
        for act in ACTIVATIONS.values():
            fd = (act.fn(z + 1e-6) - act.fn(z - 1e-6)) / 2e-6
            np.testing.assert_allclose(act.deriv(z), fd, rtol=1e-6, atol=1e-9)


class TestCountingField:
    def test_counts_calls_and_sweeps(self):
        counter = EvalCounter()
        f = CountingField(activation_drift(3), counter)
        p = np.zeros(9)
        f.eval(np.zeros(3), 0.0, p)
        f.jac_x(np.zeros(3), 0.0, p)
        f.jac_params(np.zeros(3), 0.0, p)
        assert (counter.evals, counter.jac_x_calls, counter.jac_params_calls) == (1, 1, 1)
        # min(3, 3) sweeps for jac_x, min(9, 3) for jac_params
        assert counter.sweeps == {"x": 3, "params": 3}
        assert counter.total_sweeps == 6

    def test_delegates_attributes(self):
        f = CountingField(activation_drift(3))
        assert f.n_params == 9
        assert f.state_dependent

    def test_reset(self):
        counter = EvalCounter(evals=4, sweeps={"x": 2, "params": 1})
        counter.reset()
        assert counter.evals == 0
        assert counter.total_sweeps == 0


class TestTheta:
    def test_join_and_split(self):
        b = activation_drift(2)
        sigma = VectorField(kind="diagonal", in_dim=2, out_shape=(2, 2))
        theta = join_theta(b, sigma, np.arange(4.0), [7.0, 8.0])
        assert [seg.name for seg in theta.layout] == ["b.A", "sigma.theta"]
        np.testing.assert_array_equal(theta.segment("sigma.theta"), [7.0, 8.0])
        theta_b, theta_s = split_theta(b, sigma, theta)
        np.testing.assert_array_equal(theta_b, np.arange(4.0))
        np.testing.assert_array_equal(theta_s, [7.0, 8.0])

    def test_join_with_parameter_free_diffusion(self):
        theta = join_theta(activation_drift(2), identity_diffusion(2), np.ones(4))
        assert len(theta) == 4

    def test_wrong_sizes(self):
        with pytest.raises(DimensionError):
            join_theta(activation_drift(2), identity_diffusion(2), np.ones(3))
        with pytest.raises(DimensionError):
            split_theta(activation_drift(2), identity_diffusion(2), np.ones(5))


class TestJson:
    def test_field_round_trip(self):
        f = VectorField(kind="mlp", in_dim=2, out_shape=(2,), activation="tanh", hidden=3)
        assert field_from_dict(json.loads(json.dumps(field_to_dict(f)))) == f

    def test_params_document(self):
        f = activation_drift(2, "softplus")
        doc = params_to_dict(f, f.params([1.0, 2.0, 3.0, 4.0]))
        assert doc["field"]["architecture"] == "activation_linear"
        assert doc["field"]["activation"] == "softplus"
        restored_field, restored = params_from_dict(json.loads(json.dumps(doc)))
        assert restored_field == f
        np.testing.assert_array_equal(restored.values, [1.0, 2.0, 3.0, 4.0])

    def test_missing_key(self):
        with pytest.raises(ValueError, match="missing key 'in_dim'"):
            field_from_dict({"architecture": "constant", "out_shape": [2]})
