import math
import os

import numpy as np
import pytest

from qnlslab.models import builtin_model
from qnlslab.solver import (ContinuationError, SmallnessWarning, SolverParams, StabilityError,
                            difference_run, resolve_threads, run, step,
                            viscosity_continuation, write_trajectory)
from qnlslab.spectral import Grid, SpectralField, read_checkpoint, sobolev_norm

from conftest import band_limited

FREE = builtin_model("free", 1)
QUAD = builtin_model("toy-quadratic", 1)


def gaussian(grid, amplitude=1.0, width=1.0):
    return SpectralField.from_function(grid, lambda *x: amplitude * np.exp(-sum(c * c for c in x) / (2 * width ** 2)))


@pytest.mark.parametrize("positive", [2, 1])
def test_plane_wave_is_exact(positive):
    grid = Grid.cube(2, 32, 4.0)
    xi = (3 * np.pi / 4.0, 2 * np.pi / 4.0)
    wave = SpectralField.from_function(grid, lambda x, y: np.exp(1j * (xi[0] * x + xi[1] * y)))
    model = builtin_model("free", 2, positive_count=positive)
    dt = 0.01
    q = xi[0] ** 2 + (1 if positive == 2 else -1) * xi[1] ** 2
    out = step(wave, model, SolverParams(dt=dt, T=dt, dealias=False))
    assert np.max(np.abs(out.values - np.exp(-1j * q * dt) * wave.values)) < 1e-13


def test_viscosity_damps_each_mode():
    grid = Grid.cube(1, 64, 5.0)
    phi = band_limited(grid, seed=1, cutoff=0.6)
    eps, dt = 1e-3, 0.01
    out = step(phi, FREE, SolverParams(epsilon=eps, dt=dt, T=dt, dealias=False))
    xi = grid.frequency(0)
    ratio = np.abs(out.spectrum()[0]) / np.maximum(np.abs(phi.spectrum()[0]), 1e-300)
    keep = np.abs(phi.spectrum()[0]) > 1e-8
    assert np.allclose(ratio[keep], np.exp(-eps * xi[keep] ** 4 * dt), rtol=1e-10)


@pytest.mark.parametrize("scheme", [1, 2])
def test_self_convergence_order(scheme):
    grid = Grid.cube(1, 128, 8 * np.pi)
    phi = gaussian(grid, 1e-3)
    finals = [run(QUAD, phi, SolverParams(dt=dt, T=1.0, scheme=scheme, checkpoint_stride=1000)).final
              for dt in (2e-2, 1e-2, 5e-3)]
    d1 = sobolev_norm(finals[0] - finals[1], 3)
    d2 = sobolev_norm(finals[1] - finals[2], 3)
    assert math.log2(d1 / d2) >= scheme - 0.2


def test_zero_data_gives_zero_trajectory():
    grid = Grid.cube(1, 32, 4.0)
    traj = run(QUAD, SpectralField.zeros(grid), SolverParams(dt=0.01, T=0.1))
    assert all(np.all(f.values == 0) for f in traj.fields)
    assert np.all(traj.diagnostics["L2"] == 0)


def test_free_gaussian_matches_closed_form():
    grid = Grid.cube(1, 1024, 40 * np.pi)
    traj = run(FREE, gaussian(grid), SolverParams(dt=1e-3, T=1.0, checkpoint_stride=1000))
    x = grid.axes[0]
    t = traj.times[-1]
    exact = (1 + 2j * t) ** -0.5 * np.exp(-x ** 2 / (2 * (1 + 2j * t)))
    err = sobolev_norm(traj.final - SpectralField(grid, exact))
    assert err < 1e-6


def test_free_flow_conserves_L2():
    grid = Grid.cube(1, 128, 8.0)
    traj = run(FREE, band_limited(grid, seed=2), SolverParams(dt=0.01, T=1.0, checkpoint_stride=10))
    l2 = traj.diagnostics["L2"]
    assert np.max(np.abs(l2 - l2[0])) < 1e-12 * l2[0]


def test_dissipation_is_monotone():
    grid = Grid.cube(1, 64, 6.0)
    traj = run(FREE, band_limited(grid, seed=3, cutoff=0.6),
               SolverParams(epsilon=1e-2, dt=0.01, T=0.5, checkpoint_stride=5))
    for s in (0.0, 1.0, 3.0):
        norms = [sobolev_norm(f, s) for f in traj.fields]
        assert all(b <= a * (1 + 1e-13) for a, b in zip(norms, norms[1:]))


def test_small_data_norm_stays_bounded():
    for n in (128, 256):
        grid = Grid.cube(1, n, 8 * np.pi)
        traj = run(QUAD, gaussian(grid, 1e-2), SolverParams(dt=1e-2, T=1.0, checkpoint_stride=10))
        hs = traj.diagnostics["H4"]
        assert np.max(hs) <= 2 * hs[0]


def test_runs_are_bit_identical():
    grid = Grid.cube(1, 64, 8.0)
    phi = gaussian(grid, 0.05)
    p = SolverParams(dt=0.01, T=0.2, checkpoint_stride=5)
    a, b = run(QUAD, phi, p), run(QUAD, phi, p)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a.fields, b.fields))


def test_checkpoint_times_and_stride():
    grid = Grid.cube(1, 32, 4.0)
    traj = run(QUAD, gaussian(grid, 0.01), SolverParams(dt=0.01, T=0.25, checkpoint_stride=10))
    assert np.allclose(traj.times, [0.0, 0.1, 0.2, 0.25])


def test_write_trajectory(tmp_path):
    grid = Grid.cube(1, 32, 4.0)
    traj = run(QUAD, gaussian(grid, 0.01), SolverParams(dt=0.01, T=0.05, checkpoint_stride=5))
    recs = write_trajectory(traj, tmp_path)
    assert [r["file"] for r in recs] == ["checkpoint_00000.qnls", "checkpoint_00001.qnls"]
    f, t = read_checkpoint(tmp_path / recs[1]["file"])
    assert t == pytest.approx(0.05) and np.allclose(f.values, traj.final.values, atol=1e-6)


def test_stability_guard_reports_growth():
    grid = Grid.cube(1, 128, 8 * np.pi)
    with pytest.raises(StabilityError) as info:
        run(QUAD, gaussian(grid, 5.0), SolverParams(dt=0.05, T=1.0))
    assert info.value.norm_after > 10 * info.value.norm_before


def test_smallness_warning():
    grid = Grid.cube(1, 32, 4.0)
    with pytest.warns(SmallnessWarning):
        run(QUAD, gaussian(grid, 0.5), SolverParams(dt=0.01, T=0.01, smallness=1e-3))


@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(T=-1.0), dict(epsilon=-1.0), dict(scheme=3),
                                dict(checkpoint_stride=0), dict(dt=0.3, T=1.0)])
def test_params_validation(kw):
    with pytest.raises(ValueError):
        SolverParams(**kw)


def test_continuation_free_closed_form():
    grid = Grid.cube(1, 64, 6.0)
    phi = gaussian(grid)
    p = SolverParams(epsilon=1e-3, dt=0.01, T=0.5, checkpoint_stride=50)
    res = viscosity_continuation(FREE, phi, p, halvings=2, s_prime=3.0, workers=1)
    assert res.epsilons == [1e-3, 5e-4, 2.5e-4]
    xi = grid.frequency(0)
    hat = phi.spectrum() * grid.dealias_mask
    for (e, d) in zip(res.epsilons, res.distances):
        damp = np.exp(-e * xi ** 4 * p.T) - np.exp(-e / 2 * xi ** 4 * p.T)
        oracle = sobolev_norm(SpectralField.from_spectrum(grid, hat * damp), 3.0)
        assert d == pytest.approx(oracle, rel=1e-8)


def test_continuation_duplicate_inviscid_runs_coincide():
    grid = Grid.cube(1, 64, 6.0)
    res = viscosity_continuation(QUAD, gaussian(grid, 0.01), SolverParams(dt=0.01, T=0.1),
                                 halvings=2, workers=2)
    assert res.distances == [0.0, 0.0]
    assert len(res.table().times) == 2


def test_continuation_small_data_decreases():
    grid = Grid.cube(1, 128, 8 * np.pi)
    res = viscosity_continuation(QUAD, gaussian(grid, 1e-2), SolverParams(epsilon=1e-3, dt=1e-2, T=1.0),
                                 halvings=3)
    d = res.distances
    assert all(b < a for a, b in zip(d, d[1:]))


def test_continuation_rejects_few_halvings_and_reports_failures():
    grid = Grid.cube(1, 128, 8 * np.pi)
    with pytest.raises(ValueError):
        viscosity_continuation(FREE, gaussian(grid), SolverParams(), halvings=1)
    with pytest.raises(ContinuationError) as info:
        viscosity_continuation(QUAD, gaussian(grid, 5.0), SolverParams(epsilon=1e-6, dt=0.05, T=1.0),
                               halvings=2)
    assert not info.value.partial.complete


def test_difference_of_identical_data_is_zero():
    grid = Grid.cube(1, 64, 8.0)
    phi = gaussian(grid, 0.01)
    out = difference_run(QUAD, phi, phi, SolverParams(dt=0.01, T=0.1))
    for name in out.channels:
        assert np.all(out[name] == 0)


def test_difference_in_free_flow_is_isometric():
    grid = Grid.cube(1, 128, 8 * np.pi)
    phi = gaussian(grid)
    out = difference_run(FREE, phi, phi + gaussian(grid, 1e-6, 2.0), SolverParams(dt=0.01, T=1.0, checkpoint_stride=10))
    for name in ("v_L2", "v_H1/2"):
        drift = np.max(np.abs(out[name] - out[name][0]))
        # v is a difference of O(1) fields, so round-off is relative to 1, not to |v|
        assert drift < 1e-10 and drift < 1e-8 * out[name][0]


def test_difference_stays_controlled_for_small_data():
    grid = Grid.cube(1, 128, 8 * np.pi)
    phi = gaussian(grid, 1e-2)
    out = difference_run(QUAD, phi, phi + gaussian(grid, 1e-6), SolverParams(dt=0.01, T=1.0, checkpoint_stride=10))
    assert np.max(out["v_H1/2"]) < 2 * out["v_H1/2"][0]


def test_resolve_threads_respects_cap(monkeypatch):
    monkeypatch.setenv("QNLS_THREADS", "1")
    assert resolve_threads(8) == 1
    monkeypatch.delenv("QNLS_THREADS")
    assert resolve_threads(3) == 3
    assert resolve_threads() == (os.cpu_count() or 1)
