import numpy as np
import pytest

from qnlslab.spectral import Grid, SpectralField


def band_limited(grid, seed=0, cutoff=0.25, components=1, real=False, mean_free=False):
    """Random trigonometric polynomial with modes |k_j| <= cutoff * n_j / 2."""
    rng = np.random.default_rng(seed)
    shape = (components,) + grid.shape
    spec = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    spec = spec * grid.cutoff_mask(cutoff)
    if mean_free:
        spec[(slice(None),) + (0,) * grid.dim] = 0.0
    vals = np.fft.ifftn(spec, axes=tuple(range(1, grid.dim + 1)))
    vals = vals / np.max(np.abs(vals))
    if real:
        vals = vals.real
    return SpectralField(grid, vals)


@pytest.fixture
def line():
    return Grid.cube(1, 128, 8 * np.pi)


@pytest.fixture
def plane():
    return Grid.cube(2, 32, 4 * np.pi)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""
    lines = request.config.stash[ACCEPTANCE]

    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
