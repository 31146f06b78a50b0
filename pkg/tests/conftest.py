"""Shared fixtures for nsde tests."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Make the src/ directory importable without installing the package.
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from nsde.console import Colors  # noqa: E402
from nsde.paths import TimeMesh, sample_wiener  # noqa: E402


@pytest.fixture(autouse=True)
def _isolate_user_config_home(monkeypatch, tmp_path_factory):
    """Keep tests deterministic by isolating user-level nsde config paths."""
    config_home = tmp_path_factory.mktemp("nsde-config-home")
    monkeypatch.setenv("NSDE_CONFIG_HOME", str(config_home))
    monkeypatch.delenv("NSDE_CONFIG_PATH", raising=False)


@pytest.fixture(autouse=True)
def _plain_colors():
    """Colored output is a process-wide switch; start every test without it."""
    Colors.disable()
    yield
    Colors.disable()


@pytest.fixture()
def mesh16() -> TimeMesh:
    return TimeMesh.uniform(16)


@pytest.fixture()
def noise16(mesh16):
    """A 3-dimensional Wiener path on the 16-step mesh."""
    return sample_wiener(mesh16, 3, seed=42)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture()
def small_project(tmp_path: Path, monkeypatch) -> Path:
    """A working directory with a tiny, fast experiment config."""
    project = tmp_path / "project"
    (project / ".config").mkdir(parents=True)
    (project / ".config" / "nsde.toml").write_text(
        "[experiment]\n"
        "dim = 2\n"
        'output-dir = "out"\n'
        "\n"
        "[data]\n"
        "n-samples = 8\n"
        "fine-factor = 2\n"
        "\n"
        "[fit]\n"
        "mesh-n = 4\n"
        "n-iters = 2\n"
        "n-mc-paths = 2\n"
        "timing = false\n"
        "\n"
        "[sweep]\n"
        "mesh-n = [2, 4]\n"
        "n-samples = [2, 4]\n",
        encoding="utf-8",
    )
    monkeypatch.chdir(project)
    return project
