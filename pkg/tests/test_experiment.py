"""Tests for nsde.experiment."""

import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import numpy as np
import pytest

from nsde import experiment
from nsde.config import build_config, config_to_dict
from nsde.experiment import (
    SWEEP_HEADER,
    SweepPoint,
    SweepResult,
    generate_data,
    generate_heldout,
    ground_truth_drift,
    model_fields,
    run_fit,
    run_sweep,
    score_history,
    shared_beta,
    sweep_datasets,
    sweep_points,
    write_dataset,
    write_fit_outputs,
    write_trace,
)
from nsde.oracle_check import SAMPLE_SWEEP_TOL
from nsde.variational import HISTORY_COLUMNS, Engine, FitResult, FreeEnergyReport, IterationRecord


def small_config(**sections):
    raw = {
        "experiment": {"dim": 2},
        "data": {"n-samples": 6, "fine-factor": 2},
        "fit": {"mesh-n": 4, "n-iters": 2, "n-mc-paths": 2, "timing": False},
        "sweep": {"mesh-n": [2, 4], "n-samples": [2, 3]},
    }
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    return build_config(raw)


class TestGenerateData:
    def test_shapes(self):
        config = small_config()
        dataset = generate_data(config)
        assert dataset.y.shape == (6, 2)
        assert dataset.a_true.shape == (2, 2)
        assert dataset.mesh_n == config.fine_mesh_n() == 8

    def test_deterministic(self):
        config = small_config()
        np.testing.assert_array_equal(generate_data(config).y, generate_data(config).y)

    def test_data_seed_changes_the_draw(self):
        first = generate_data(small_config())
        second = generate_data(small_config(seeds={"data": 7}))
        assert not np.array_equal(first.y, second.y)
        assert not np.array_equal(first.a_true, second.a_true)

    def test_single_sample(self):
        assert generate_data(small_config(), n_samples=1).y.shape == (1, 2)

    def test_zero_ground_truth_mean(self):
        """A = 0 makes the drift sigmoid(0) = 1/2, so y ~ N(1/2, 1 + noise^2)."""
        n = 4000
        config = small_config(data={"zero-ground-truth": True, "n-samples": n})
        dataset = generate_data(config)
        np.testing.assert_array_equal(dataset.a_true, np.zeros((2, 2)))
        std_err = math.sqrt(2.0 / n)
        assert np.all(np.abs(dataset.y.mean(axis=0) - 0.5) <= 4 * std_err)

    def test_ground_truth_is_seeded(self):
        config = small_config(experiment={"dim": 3})
        np.testing.assert_array_equal(ground_truth_drift(config), ground_truth_drift(config))

    def test_head(self):
        dataset = generate_data(small_config())
        np.testing.assert_array_equal(dataset.head(3).y, dataset.y[:3])
        with pytest.raises(ValueError, match="6 samples, 7 requested"):
            dataset.head(7)


class TestWriteOutputs:
    def test_write_dataset(self, tmp_path: Path):
        config = small_config()
        dataset = generate_data(config)
        paths = write_dataset(dataset, config, tmp_path)

        assert [p.name for p in paths] == ["dataset.csv", "ground_truth.json", "config.toml"]
        lines = (tmp_path / "dataset.csv").read_text().splitlines()
        assert lines[0] == "y_1,y_2"
        assert len(lines) == 7
        np.testing.assert_array_equal(
            np.loadtxt(tmp_path / "dataset.csv", delimiter=",", skiprows=1), dataset.y
        )

        truth = json.loads((tmp_path / "ground_truth.json").read_text())
        assert truth["field"]["architecture"] == "activation_linear"
        assert truth["params"] == dataset.a_true.ravel().tolist()
        assert truth["mesh_n"] == 8

        saved = build_config(tomllib.loads((tmp_path / "config.toml").read_text()))
        assert config_to_dict(saved) == config_to_dict(config)

    def test_write_trace(self, tmp_path: Path):
        config = small_config()
        dataset = generate_data(config)
        write_trace(dataset, config, tmp_path)

        noise = (tmp_path / "trace_noise.csv").read_text().splitlines()
        trajectory = (tmp_path / "trace_trajectory.csv").read_text().splitlines()
        assert noise[0] == "dw_1,dw_2"
        assert len(noise) == 1 + dataset.mesh_n
        assert trajectory[0] == "t,z_1,z_2"
        assert len(trajectory) == 2 + dataset.mesh_n

    def test_write_fit_outputs(self, tmp_path: Path):
        config = small_config()
        result = run_fit(config, generate_data(config))
        write_fit_outputs(result, config, tmp_path)

        lines = (tmp_path / "history.csv").read_text().splitlines()
        assert lines[0] == ",".join(HISTORY_COLUMNS)
        assert len(lines) == 1 + 3
        params = json.loads((tmp_path / "params.json").read_text())
        assert len(params["model"]["params"]) == 4
        assert params["variational"]["field"]["architecture"] == "constant"
        assert params["variational"]["params"] == result.beta.tolist()
        assert params["aborted"] is None


class TestRunFit:
    def test_history_and_shapes(self):
        config = small_config()
        result = run_fit(config, generate_data(config))
        assert len(result.history) == 3
        assert result.theta.shape == (4,)
        assert result.beta.shape == (2,)
        assert result.aborted is None
        assert all(record.wall_ms == 0 for record in result.history)

    def test_model_fields(self):
        model = model_fields(small_config(experiment={"dim": 3}))
        assert model.b.n_params == 9
        assert model.sigma.n_params == 0
        assert model.b_tilde.n_params == 3

    def test_per_observation_beta(self):
        config = small_config(fit={"beta-mode": "per_observation"})
        result = run_fit(config, generate_data(config))
        assert result.beta.shape == (12,)

    def test_mesh_override(self):
        config = small_config()
        dataset = generate_data(config)
        assert not np.allclose(
            run_fit(config, dataset, mesh_n=2).totals, run_fit(config, dataset).totals
        )

    def test_engines_are_interchangeable(self):
        dataset = generate_data(small_config())
        pathwise = run_fit(small_config(fit={"engine": Engine.PATHWISE.value}), dataset)
        backprop = run_fit(small_config(fit={"engine": Engine.EULER_BACKPROP.value}), dataset)
        np.testing.assert_allclose(pathwise.totals, backprop.totals, rtol=1e-6)
        np.testing.assert_allclose(pathwise.theta, backprop.theta, rtol=1e-6, atol=1e-12)
        np.testing.assert_allclose(pathwise.beta, backprop.beta, rtol=1e-6, atol=1e-12)

    def test_deterministic_with_timing_off(self, tmp_path: Path):
        config = small_config()
        dataset = generate_data(config)
        write_fit_outputs(run_fit(config, dataset), config, tmp_path / "a")
        write_fit_outputs(run_fit(config, dataset), config, tmp_path / "b")
        assert (tmp_path / "a" / "history.csv").read_bytes() == (
            tmp_path / "b" / "history.csv"
        ).read_bytes()


class TestHeldout:
    def test_independent_of_training_draw(self):
        config = small_config()
        train, heldout = generate_data(config), generate_heldout(config)
        np.testing.assert_array_equal(train.a_true, heldout.a_true)
        assert heldout.y.shape == train.y.shape
        assert not np.array_equal(train.y, heldout.y)

    def test_score_history_is_common_across_fits(self):
        """Identical iterates from two fits get identical scores."""
        config = small_config()
        heldout = generate_heldout(config)
        first = run_fit(config, generate_data(config))
        second = run_fit(config, generate_data(config, n_samples=3))
        a = score_history(config, heldout, first)
        b = score_history(config, heldout, second)
        assert a.shape == b.shape == (3,)
        assert a[0] == b[0]
        assert a[-1] != b[-1]

    def test_per_observation_beta_is_averaged(self):
        config = small_config(fit={"beta-mode": "per_observation"})
        beta = np.arange(12, dtype=float)
        np.testing.assert_array_equal(shared_beta(config, beta), [5.0, 6.0])
        result = run_fit(config, generate_data(config))
        scores = score_history(config, generate_heldout(config), result)
        assert np.all(np.isfinite(scores))


def make_point(var, value, totals, scores):
    history = [
        IterationRecord(
            i,
            FreeEnergyReport(kl=0.0, nll=t, nll_std_err=0.0, n_paths=1, engine=Engine.PATHWISE),
            0.0,
            0.0,
            0.0,
            np.zeros(0),
            np.zeros(1),
        )
        for i, t in enumerate(totals)
    ]
    return SweepPoint(var, value, FitResult(np.zeros(0), np.zeros(1), history), np.array(scores))


class TestSweepResult:
    def test_rows_log_nan_for_non_positive_score(self):
        point = make_point("mesh_n", 4, [1.0, 0.5], [math.e, -1.0])
        assert point.rows() == "mesh_n,4,0,1\nmesh_n,4,1,nan\n"

    def test_final_totals_are_heldout_scores(self):
        result = SweepResult([make_point("n_samples", 4, [3.0, 2.0], [5.0, 4.5])])
        assert result.final_totals("n_samples") == {4: 4.5}
        assert result.final_totals("mesh_n") == {}

    def test_descends(self):
        assert SweepResult([make_point("mesh_n", 4, [3.0, 2.0], [1.0, 1.0])]).descends()
        assert not SweepResult([make_point("mesh_n", 4, [3.0, 3.5], [1.0, 1.0])]).descends()

    def test_mesh_refinement_gaps(self):
        finals = {4: 10.0, 8: 9.0, 16: 8.8, 32: 8.75}
        result = SweepResult(
            [make_point("mesh_n", m, [1.0], [f]) for m, f in reversed(finals.items())]
        )
        assert result.mesh_refinement_gaps() == pytest.approx((1.0, 0.05))
        assert SweepResult(result.points[:3]).mesh_refinement_gaps() is None

    def test_sample_sizes_monotone(self):
        finals = [(4, 9.0), (10, 8.0), (100, 8.02)]
        points = [make_point("n_samples", n, [1.0], [f]) for n, f in finals]
        assert not SweepResult(points).sample_sizes_monotone()
        assert SweepResult(points).sample_sizes_monotone(tol=0.05)


class TestSweep:
    def test_sweep_points(self):
        config = small_config()
        assert sweep_points(config, "mesh") == [("mesh_n", 2), ("mesh_n", 4)]
        assert sweep_points(config, "samples") == [("n_samples", 2), ("n_samples", 3)]
        assert len(sweep_points(config, "both")) == 4
        with pytest.raises(ValueError, match="mesh, samples or both"):
            sweep_points(config, "grid")

    def test_sweep_datasets_keep_the_fit_draw(self):
        config = small_config(sweep={"n-samples": [2, 10]})
        dataset, pool = sweep_datasets(config, "both")
        np.testing.assert_array_equal(dataset.y, generate_data(config).y)
        assert pool.n_samples == 10
        dataset, pool = sweep_datasets(config, "mesh")
        assert pool is dataset

    def test_single_mesh_point_matches_run_fit(self, tmp_path: Path):
        config = small_config(sweep={"mesh-n": [4], "n-samples": [2, 10]})
        dataset, pool = sweep_datasets(config, "both")
        result = run_sweep(config, dataset, "both", tmp_path / "sweep.csv", sample_pool=pool)
        mesh_point = result.points[0]
        assert (mesh_point.var, mesh_point.value) == ("mesh_n", 4)
        np.testing.assert_array_equal(
            mesh_point.fit.totals, run_fit(config, generate_data(config)).totals
        )

    def test_run_sweep_writes_every_point_in_order(self, tmp_path: Path):
        config = small_config()
        dataset = generate_data(config)
        out_path = tmp_path / "sweep.csv"
        result = run_sweep(config, dataset, "both", out_path)

        lines = out_path.read_text().splitlines()
        assert lines[0] == SWEEP_HEADER
        keys = [tuple(line.split(",")[:2]) for line in lines[1:]]
        expected = [("mesh_n", "2"), ("mesh_n", "4"), ("n_samples", "2"), ("n_samples", "3")]
        assert keys == [key for key in expected for _ in range(3)]
        assert [line.split(",")[2] for line in lines[1:4]] == ["0", "1", "2"]
        assert not result.failures
        assert set(result.final_totals("mesh_n")) == {2, 4}
        assert set(result.final_totals("n_samples")) == {2, 3}

    def test_rows_score_on_heldout_data(self, tmp_path: Path):
        config = small_config()
        heldout = generate_heldout(config)
        out_path = tmp_path / "sweep.csv"
        result = run_sweep(config, generate_data(config), "samples", out_path, heldout=heldout)

        point = result.points[0]
        expected = score_history(config, heldout, point.fit)
        np.testing.assert_array_equal(point.scores, expected)
        first = out_path.read_text().splitlines()[1]
        assert float(first.split(",")[3]) == pytest.approx(math.log(expected[0]))

    def test_concurrent_sweep_matches_serial(self, tmp_path: Path):
        dataset = generate_data(small_config())
        run_sweep(small_config(), dataset, "mesh", tmp_path / "serial.csv")
        run_sweep(small_config(sweep={"workers": 2}), dataset, "mesh", tmp_path / "pool.csv")
        assert (tmp_path / "serial.csv").read_bytes() == (tmp_path / "pool.csv").read_bytes()

    def test_failing_point_is_skipped(self, tmp_path: Path, monkeypatch):
        original = experiment.run_fit

        def flaky(config, dataset, mesh_n=None):
            if mesh_n == 2:
                raise FloatingPointError("overflow")
            return original(config, dataset, mesh_n=mesh_n)

        monkeypatch.setattr(experiment, "run_fit", flaky)
        config = small_config()
        out_path = tmp_path / "sweep.csv"
        result = run_sweep(config, generate_data(config), "mesh", out_path)

        assert result.failures == [("mesh_n", 2, "overflow")]
        body = out_path.read_text().splitlines()[1:]
        assert len(body) == 3
        assert all(line.startswith("mesh_n,4,") for line in body)

    def test_rerun_replaces_previous_file(self, tmp_path: Path):
        config = small_config()
        dataset = generate_data(config)
        out_path = tmp_path / "sweep.csv"
        run_sweep(config, dataset, "mesh", out_path)
        first = out_path.read_bytes()
        run_sweep(config, dataset, "mesh", out_path)
        assert out_path.read_bytes() == first


@pytest.mark.slow
class TestDeskScaleSweep:
    """d = 10, n = 1000, 200 iterations: the default configuration."""

    def test_qualitative_sweep_properties(self, tmp_path: Path):
        config = build_config({"fit": {"timing": False}})
        assert config.sweep.mesh_n == [4, 8, 16, 32, 64]
        assert config.sample_sweep() == [4, 10, 100, 1000]
        dataset, pool = sweep_datasets(config, "both")
        result = run_sweep(config, dataset, "both", tmp_path / "sweep.csv", sample_pool=pool)

        assert not result.failures
        assert result.descends()
        coarse_gap, fine_gap = result.mesh_refinement_gaps()
        assert fine_gap < coarse_gap
        assert result.sample_sizes_monotone(tol=SAMPLE_SWEEP_TOL)
