import pytest

from app.config import settings
from app.services.engine import DiffusionModel, JumpModel, TimeGrid, simulate_paths
from app.services.regression import RegressionBasis


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Keep run history and artifacts inside the test's tmp dir."""
    monkeypatch.setattr(settings, "database_url", f"sqlite:///{tmp_path / 'history.db'}")
    monkeypatch.setattr(settings, "output_dir", str(tmp_path / "out"))
    monkeypatch.setattr(settings, "threads", 1)
    yield


@pytest.fixture
def grid():
    return TimeGrid(T=1.0, N=8)


@pytest.fixture
def no_jumps():
    return JumpModel(intensity=0.0)


@pytest.fixture
def point_jumps():
    return JumpModel(intensity=1.0, mark_dist="point", params={"value": 1.0})


@pytest.fixture
def brownian():
    return DiffusionModel.from_expressions(0.0, "0", "1")


@pytest.fixture
def basis():
    return RegressionBasis(degree=2)


@pytest.fixture
def bundle(grid, no_jumps, brownian):
    return simulate_paths(grid, no_jumps, brownian, n_paths=2000, seed=11)


@pytest.fixture
def jump_bundle(grid, point_jumps, brownian):
    return simulate_paths(grid, point_jumps, brownian, n_paths=2000, seed=5)
