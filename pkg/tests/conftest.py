import numpy as np
import pytest

from advdeblur import cnn, fixtures
from advdeblur.experiment import kernel_size_sweep, load_spec, run_grid
from advdeblur.imaging import Kernel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_kernel(rng, size=3):
    return Kernel(rng.uniform(0.05, 1.0, (size, size)))


@pytest.fixture(scope="session")
def trained_cnn():
    """CNN trained on the shipped training pairs with the default recipe."""
    cfg, trace = cnn.train(cnn.init_config(1, seed=0), fixtures.training_pairs(), epochs=30, seed=0)
    return cfg, trace


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory, trained_cnn):
    root = tmp_path_factory.mktemp("fixtures")
    fixtures.write_fixtures(root, trained_cnn[0])
    return root


def _grid(fixture_dir, name, threads):
    spec = load_spec(fixture_dir / "fixture.spec")
    spec.output_dir = fixture_dir / "out" / name
    return run_grid(spec, threads=threads)


@pytest.fixture(scope="session")
def grid_report(fixture_dir):
    """Full fixture grid, one worker."""
    return _grid(fixture_dir, "grid_t1", 1)


@pytest.fixture(scope="session")
def grid_report_threads8(fixture_dir, grid_report):
    """Same grid again with eight workers."""
    return _grid(fixture_dir, "grid_t8", 8)


@pytest.fixture(scope="session")
def sweep_report(fixture_dir):
    spec = load_spec(fixture_dir / "sweep.spec")
    spec.output_dir = fixture_dir / "out" / "sweep"
    return kernel_size_sweep(spec, (1, 11, 17, 25))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: runs full fixture grids (minutes)")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
