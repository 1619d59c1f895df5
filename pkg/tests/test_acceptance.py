"""Acceptance criteria at their stated tolerances.

Each test records exactly one PASS/FAIL line (collected in the terminal
summary) and fails when its criterion is not met, including its time budget.
"""
import math
import time

import numpy as np
import pytest

from qnlslab.functionals import (bootstrap_monitor, good_term_W, good_term_Y,
                                 momentum_identity_residual)
from qnlslab.lemmas import SUITES, run_suite
from qnlslab.models import builtin_model
from qnlslab.solver import SolverParams, difference_run, run, viscosity_continuation
from qnlslab.spectral import Grid, SpectralField, sobolev_norm

QUAD1 = builtin_model("toy-quadratic", 1)
CUBIC2 = builtin_model("toy-cubic", 2)


def gaussian(grid, amplitude=1.0, width=1.0):
    return SpectralField.from_function(
        grid, lambda *x: amplitude * np.exp(-sum(c * c for c in x) / (2 * width ** 2)))


def test_operator_identities(verdict):
    start = time.perf_counter()
    reports = [run_suite(name, count=100, n=256, seed=0) for name, s in SUITES.items()
               if s.identity]
    elapsed = time.perf_counter() - start
    worst = max(r.max_ratio for r in reports)
    parts = sorted(p for r in reports for p in r.part_max())
    ok = worst <= 1e-6 and all(r.passed for r in reports) and elapsed < 10
    verdict(1, ok, f"identities {parts} max rel error {worst:.2e} <= 1e-6, "
                   f"100 samples n=256, {elapsed:.1f} s < 10 s")


def test_linear_solver_exactness(verdict):
    start = time.perf_counter()
    free = builtin_model("free", 1)
    grid = Grid.cube(1, 128, math.pi)
    xi = 5.0
    wave = SpectralField.from_function(grid, lambda x: np.exp(1j * xi * x))
    traj = run(free, wave, SolverParams(dt=1e-2, T=1.0, checkpoint_stride=100))
    exact = np.exp(1j * (xi * grid.axes[0] - xi ** 2 * 1.0))
    plane_err = sobolev_norm(traj.final - SpectralField(grid, exact))

    grid = Grid.cube(1, 1024, 40 * math.pi)
    traj = run(free, gaussian(grid), SolverParams(dt=1e-3, T=1.0, checkpoint_stride=1000))
    t = traj.times[-1]
    x = grid.axes[0]
    exact = SpectralField(grid, (1 + 2j * t) ** -0.5 * np.exp(-x ** 2 / (2 * (1 + 2j * t))))
    gauss_err = sobolev_norm(traj.final - exact) / sobolev_norm(exact)
    elapsed = time.perf_counter() - start
    ok = plane_err < 1e-10 and gauss_err < 1e-6 and elapsed < 30
    verdict(2, ok, f"plane wave L2 error {plane_err:.2e} < 1e-10, Gaussian relative L2 error "
                   f"{gauss_err:.2e} < 1e-6, {elapsed:.1f} s < 30 s")


def test_momentum_residual_convergence(verdict):
    start = time.perf_counter()
    dt_ratios, n_ratios = [], []
    for eps in (0.0, 1e-3):
        for alpha in (0, 1, 2):
            res = []
            for dt in (2e-3, 1e-3):
                grid = Grid.cube(1, 256, 8 * math.pi)
                traj = run(QUAD1, gaussian(grid, 1e-3),
                           SolverParams(epsilon=eps, dt=dt, T=0.2, checkpoint_stride=1))
                res.append(np.max(momentum_identity_residual(traj, (alpha,), 0)["residual"]))
            dt_ratios.append(res[0] / res[1])
            # dt = 1e-4 puts the temporal error well below the spatial one
            res = []
            for n in (64, 128):
                grid = Grid.cube(1, n, 8 * math.pi)
                traj = run(QUAD1, gaussian(grid, 1e-3),
                           SolverParams(epsilon=eps, dt=1e-4, T=0.02, checkpoint_stride=1))
                res.append(np.max(momentum_identity_residual(traj, (alpha,), 0)["residual"]))
            n_ratios.append(res[0] / res[1])
    elapsed = time.perf_counter() - start
    ok = min(dt_ratios) >= 1.8 and min(n_ratios) >= 4 and elapsed < 120
    verdict(3, ok, f"residual drop per dt halving min {min(dt_ratios):.2f} >= 1.8, per n "
                   f"doubling min {min(n_ratios):.1f} >= 4 (|alpha| <= 2, eps in {{0, 1e-3}}), "
                   f"{elapsed:.1f} s < 120 s")


def test_good_term_sandwiches(verdict):
    start = time.perf_counter()
    grid = Grid.cube(1, 256, 8 * math.pi)
    traj = run(QUAD1, gaussian(grid, 1e-2, 2.0),
               SolverParams(dt=1e-2, T=1.0, checkpoint_stride=10))
    out = good_term_Y(traj, 5)
    Y, low, slack = out["Y"], out["Y_top"], out["tH_sup"]
    gap_y = max(np.max(low - Y), np.max(Y - slack - low))

    grid = Grid.cube(2, 128, 8 * math.pi)
    traj = run(CUBIC2, gaussian(grid, 1e-2, 2.0),
               SolverParams(dt=1e-2, T=1.0, checkpoint_stride=10))
    out = good_term_W(traj, 4)
    W, low, slack = out["W"], out["W_top"], out["tH4_sup"]
    gap_w = max(np.max(low - W), np.max(W - slack - low))
    elapsed = time.perf_counter() - start
    ok = gap_y <= 1e-9 and gap_w <= 1e-9 and elapsed < 180
    verdict(4, ok, f"worst sandwich violation Y {gap_y:.2e}, W {gap_w:.2e} <= 1e-9 "
                   f"(d=1 quadratic, d=2 n=128^2 cubic), {elapsed:.1f} s < 180 s")


def test_bootstrap_boundedness(verdict):
    start = time.perf_counter()
    amps = (1e-2, 1e-3, 1e-4)
    sup = {}
    for n in (256, 512):
        grid = Grid.cube(1, n, 20 * math.pi)
        for a in amps:
            traj = run(QUAD1, gaussian(grid, a, 4.0),
                       SolverParams(dt=1e-2, T=1.0, checkpoint_stride=10))
            sup[n, a] = bootstrap_monitor(traj, s1=5, s2=3).metadata["sup_ratio"]
    coarse = [sup[256, a] for a in amps]
    fine = [sup[512, a] for a in amps]
    bounded = max(coarse + fine) <= 2.0
    monotone = all(b <= a for a, b in zip(fine, fine[1:])) and all(r >= 1.0 for r in fine)
    drift = max(abs(f / c - 1) for f, c in zip(fine, coarse))
    quad_time = time.perf_counter() - start

    start = time.perf_counter()
    grid = Grid.cube(2, 128, 8 * math.pi)
    traj = run(CUBIC2, gaussian(grid, 1e-2, 2.0),
               SolverParams(dt=1e-2, T=1.0, checkpoint_stride=10))
    cubic = bootstrap_monitor(traj, s3=4).metadata["sup_ratio"]
    cubic_time = time.perf_counter() - start
    ok = (bounded and monotone and drift <= 0.10 and quad_time < 300 and cubic <= 2.0
          and cubic_time < 600)
    verdict(5, ok, f"quadratic sup ratios {', '.join(f'{r:.5f}' for r in fine)} <= 2 for "
                   f"amplitudes 1e-2..1e-4, non-increasing, resolution drift {drift:.1e} <= 0.10, "
                   f"{quad_time:.1f} s < 300 s; cubic d=2 s3=4 sup ratio {cubic:.5f} <= 2, "
                   f"{cubic_time:.1f} s < 600 s")


def test_viscosity_cauchy(verdict):
    start = time.perf_counter()
    grid = Grid.cube(1, 256, 8 * math.pi)
    res = viscosity_continuation(QUAD1, gaussian(grid, 1e-2),
                                 SolverParams(epsilon=1e-3, dt=1e-3, T=1.0, checkpoint_stride=100),
                                 halvings=3, s_prime=3.0, workers=1)
    d = res.distances
    elapsed = time.perf_counter() - start
    decreasing = all(b < a for a, b in zip(d, d[1:]))
    final = d[-1] / d[-2]
    ok = (np.allclose(res.epsilons, [1e-3, 5e-4, 2.5e-4, 1.25e-4]) and decreasing
          and final <= 0.7 and elapsed < 300)
    verdict(6, ok, f"H^3 distances {', '.join(f'{v:.3e}' for v in d)} strictly decreasing, "
                   f"final ratio {final:.3f} <= 0.7, {elapsed:.1f} s < 300 s")


def test_inequality_suites(verdict):
    start = time.perf_counter()
    reports = [run_suite(name, count=100, n=128, seed=0, doubling=True)
               for name, s in SUITES.items() if not s.identity]
    elapsed = time.perf_counter() - start
    factors = {r.lemma_id: r.stability_factor for r in reports}
    finite = all(math.isfinite(r.max_ratio) for r in reports)
    stable = all(f is not None and abs(f - 1) <= 0.10 for f in factors.values())
    worst = max(factors.values(), key=lambda f: abs(f - 1))
    ok = finite and stable and all(r.passed for r in reports) and elapsed < 300
    verdict(7, ok, f"{len(reports)} inequality suites finite, worst stability factor "
                   f"{worst:.4f} within 10% for n 128 -> 256, {elapsed:.1f} s < 300 s")


def test_uniqueness_diagnostic(verdict):
    start = time.perf_counter()
    grid = Grid.cube(1, 256, 8 * math.pi)
    a = gaussian(grid, 1e-2)
    bump = SpectralField.from_function(grid, lambda x: np.exp(-x ** 2 / 2) * (1 + 1j * x))
    bump = bump.dealiased()
    bump = bump * (1e-6 / sobolev_norm(bump, 0.5))
    series = difference_run(QUAD1, a, a + bump,
                            SolverParams(dt=1e-3, T=1.0, checkpoint_stride=10), 3)
    v = series["v_H1/2"]
    growth = float(np.max(v) / v[0])
    elapsed = time.perf_counter() - start
    ok = v[0] == pytest.approx(1e-6, rel=1e-9) and growth <= 2.0 and elapsed < 120
    verdict(8, ok, f"sup ||v(t)||/||v(0)|| in H^1/2 = {growth:.6f} <= 2 on [0,1] "
                   f"(final {v[-1] / v[0]:.6f}), "
                   f"{elapsed:.1f} s < 120 s")
