import math
import warnings

import numpy as np
import pytest
from scipy import integrate, special

from qnlslab.diagnostics import DiagnosticSeries
from qnlslab.functionals import (IndexConstraintError, bootstrap_monitor, cubic_weight_integral,
                                 good_term_W, good_term_Y, master_X, momentum_density,
                                 momentum_identity_residual, momentum_identity_terms,
                                 weighted_momentum_ledger, weighted_norm_evolution)
from qnlslab.models import builtin_model
from qnlslab.solver import SolverParams, Trajectory, run
from qnlslab.spectral import Grid, SpectralField, sobolev_norm

from conftest import band_limited

FREE1 = builtin_model("free", 1)
QUAD1 = builtin_model("toy-quadratic", 1)


def stationary(field, times, model=None):
    """A trajectory that holds ``field`` fixed at every checkpoint."""
    model = model or builtin_model("free", field.grid.dim)
    dt = times[1] - times[0]
    return Trajectory(field.grid, list(times), [field] * len(times),
                      DiagnosticSeries.on_times(times), SolverParams(dt=dt, T=times[-1]), model)


def gaussian(grid, amplitude=1.0, width=1.0):
    return SpectralField.from_function(
        grid, lambda *x: amplitude * np.exp(-sum(c * c for c in x) / (2 * width ** 2)))


def spectral_d(values, grid, axis, order):
    """1D spectral derivative along ``axis`` computed with plain numpy."""
    xi = np.fft.fftfreq(grid.n[axis], d=grid.spacing[axis]) * 2 * np.pi
    shape = [1] * values.ndim
    shape[axis] = -1
    return np.fft.ifft(np.fft.fft(values, axis=axis) * ((1j * xi) ** order).reshape(shape), axis=axis)


# --- momentum density ------------------------------------------------------------

def test_momentum_density_of_real_field_is_zero():
    grid = Grid.cube(2, 16, 3.0)
    traj = stationary(band_limited(grid, seed=1, real=True), [0.0, 0.1, 0.2])
    assert np.max(np.abs(momentum_density(traj, (1, 1), 0, 0.1).values)) < 1e-12


def test_momentum_density_of_plane_wave():
    grid = Grid.cube(2, 16, np.pi)
    xi = (2.0, -3.0)
    wave = SpectralField.from_function(grid, lambda x, y: np.exp(1j * (xi[0] * x + xi[1] * y)))
    traj = stationary(wave, [0.0, 1.0, 2.0])
    alpha = (1, 2)
    dens = momentum_density(traj, alpha, 1, 2)
    expect = -xi[1] * xi[0] ** 2 * xi[1] ** 4
    assert np.allclose(dens.scalar, expect, rtol=1e-12)


def test_momentum_density_integral_matches_direct_quadrature():
    grid = Grid.cube(1, 64, 4.0)
    f = band_limited(grid, seed=3)
    traj = stationary(f, [0.0, 1.0, 2.0])
    pa = spectral_d(f.scalar, grid, 0, 2)
    dpa = spectral_d(f.scalar, grid, 0, 3)
    direct = grid.spacing[0] * np.sum(np.imag(pa * np.conj(dpa)))
    got = grid.spacing[0] * np.sum(momentum_density(traj, (2,), 0, 0).scalar)
    assert abs(got - direct) < 1e-10 * max(1.0, abs(direct))


def test_momentum_density_rejects_unknown_time():
    grid = Grid.cube(1, 16, 3.0)
    traj = stationary(band_limited(grid), [0.0, 0.5, 1.0])
    with pytest.raises(ValueError):
        momentum_density(traj, (0,), 0, 0.3)


# --- good terms -------------------------------------------------------------------

def test_Y_zero_trajectory():
    traj = stationary(SpectralField.zeros(Grid.cube(1, 64, 20.0)), [0.0, 0.5, 1.0])
    out = good_term_Y(traj, 4)
    assert np.all(out["Y"] == 0) and np.all(out["Y_top"] == 0)


def test_Y_of_stationary_field_is_linear_with_oracle_slope():
    grid = Grid.cube(1, 256, 8 * np.pi)
    f = gaussian(grid, 1.0, 1.5) * (1 + 0.5j)
    s1 = 3
    times = np.linspace(0.0, 1.0, 5)
    out = good_term_Y(stationary(f, times), s1)
    w = (1 + np.abs(grid.axes[0])) ** -2
    slope = grid.spacing[0] * np.sum(w * np.abs(f.scalar) ** 2)
    for j in range(1, s1 + 2):
        slope += grid.spacing[0] * np.sum(w * np.abs(spectral_d(f.scalar, grid, 0, j)) ** 2)
    assert np.allclose(out["Y"], slope * times, rtol=1e-10, atol=1e-12)


def test_Y_sandwich_and_monotonicity():
    grid = Grid.cube(1, 128, 8 * np.pi)
    traj = run(QUAD1, gaussian(grid, 1e-2, 2.0), SolverParams(dt=1e-2, T=1.0, checkpoint_stride=10))
    out = good_term_Y(traj, 4)
    Y, top, slack = out["Y"], out["Y_top"], out["tH_sup"]
    assert np.all(np.diff(Y) >= 0) and np.all(top <= Y + 1e-9)
    assert np.all(Y <= slack + top + 1e-9)


def test_W_rejects_one_dimension():
    with pytest.raises(ValueError):
        good_term_W(stationary(gaussian(Grid.cube(1, 32, 10.0)), [0.0, 1.0, 2.0]))


def test_W_zero_trajectory():
    traj = stationary(SpectralField.zeros(Grid.cube(2, 16, 10.0)), [0.0, 0.5, 1.0])
    assert np.all(good_term_W(traj, 3)["W"] == 0)


def test_W_of_separable_stationary_field():
    grid = Grid.cube(2, 48, 3 * np.pi)
    x, y = grid.axes
    a = np.exp(-x ** 2 / 2)
    b = np.exp(-y ** 2 / 3) * (1 + 0.3j * y)
    f = SpectralField(grid, np.outer(a, b))
    s3 = 2
    times = np.linspace(0.0, 2.0, 5)
    out = good_term_W(stationary(f, times), s3)

    def one_dim(u, axis, order, half_weight=False):
        g = Grid.cube(1, grid.n[axis], grid.half_width[axis])
        v = spectral_d(u, g, 0, order)
        if half_weight:
            xi = np.fft.fftfreq(g.n[0], d=g.spacing[0]) * 2 * np.pi
            v = np.fft.ifft(np.fft.fft(v) * (1 + xi ** 2) ** 0.25)
        return v

    h = grid.spacing[0]
    density = 0.0
    for k, (u, v) in enumerate(((a, b), (b, a))):
        # slice norms factor: ||F(x_k, .)||^2 = |u^(i)(x_k)|^2 * ||v^(j)||^2
        def vnorm(order, half=False):
            return h * np.sum(np.abs(one_dim(v, 0, order, half)) ** 2)
        S = sum(np.abs(one_dim(u, 0, bk)) ** 2 * vnorm(bo, True)
                for bk in range(s3) for bo in range(s3 - bk))
        P = sum(np.abs(one_dim(u, 0, ak + 1)) ** 2 * vnorm(ao)
                for ak in range(s3 + 1) for ao in range(s3 + 1 - ak))
        M = np.abs(u) ** 2 * vnorm(0)
        density += h * np.sum(S * (P + M))
    assert np.allclose(out["W"], density * times, rtol=1e-8)


def test_W_sandwich():
    grid = Grid.cube(2, 32, 3 * np.pi)
    model = builtin_model("toy-cubic", 2)
    traj = run(model, gaussian(grid, 1e-2, 1.5), SolverParams(dt=1e-2, T=0.2, checkpoint_stride=5))
    out = good_term_W(traj, 3)
    W, top, slack = out["W"], out["W_top"], out["tH4_sup"]
    assert np.all(np.diff(W) >= 0) and np.all(top <= W + 1e-9)
    assert np.all(W <= slack + top + 1e-9)


# --- master quantity ----------------------------------------------------------------

def test_X_zero_and_constraint():
    traj = stationary(SpectralField.zeros(Grid.cube(1, 32, 10.0)), [0.0, 1.0, 2.0])
    assert np.all(master_X(traj, 4, 2)["X"] == 0)
    with pytest.raises(IndexConstraintError):
        master_X(traj, 4, 3)


def test_X_sobolev_part_constant_in_free_flow():
    grid = Grid.cube(1, 256, 20 * np.pi)
    traj = run(FREE1, gaussian(grid, 1.0, 3.0), SolverParams(dt=1e-2, T=1.0, checkpoint_stride=20))
    sob = master_X(traj, 4, 2)["X_sobolev"]
    assert np.max(np.abs(sob - sob[0])) < 1e-10 * sob[0]


def test_X_of_gaussian_matches_quadrature():
    s1, s2 = 4, 2
    coarse = Grid.cube(1, 512, 20 * np.pi)
    traj = stationary(gaussian(coarse), [0.0, 1.0, 2.0])
    # |phi^|^2 = 2 pi exp(-xi^2)
    sob_oracle = integrate.quad(lambda k: (1 + k * k) ** (s1 + 0.5) * np.exp(-k * k), -np.inf, np.inf,
                                epsabs=1e-14, epsrel=1e-13)[0]
    assert master_X(traj, s1, s2)["X_sobolev"][0] == pytest.approx(sob_oracle, rel=1e-8)
    # d^b exp(-x^2/2) = (-1)^b He_b(x) exp(-x^2/2); the weight 1 + |x| has a kink at 0,
    # so the weighted part needs a fine grid to beat the O(h^2) kink error
    fine = Grid.cube(1, 2 ** 15, 8.0)
    traj = stationary(gaussian(fine), [0.0, 1.0, 2.0])
    wei_oracle = sum(2 * integrate.quad(
        lambda x, b=b: (1 + x) ** 4 * special.eval_hermitenorm(b, x) ** 2 * np.exp(-x * x),
        0, np.inf, epsabs=1e-14, epsrel=1e-13)[0] for b in range(s2 + 1))
    assert master_X(traj, s1, s2)["X_weighted"][0] == pytest.approx(wei_oracle, rel=1e-8)


# --- momentum identity -------------------------------------------------------------

@pytest.mark.parametrize("alpha", [0, 1])
def test_residual_of_free_plane_wave_is_round_off(alpha):
    grid = Grid.cube(1, 64, np.pi)
    wave = SpectralField.from_function(grid, lambda x: np.exp(3j * x))
    traj = run(FREE1, wave, SolverParams(dt=1e-2, T=0.1))
    res = momentum_identity_residual(traj, (alpha,), 0)
    # every exact term vanishes; round-off in the empty modes is amplified by up to
    # xi_max^(2|alpha|+3) with xi_max = 64 on the padded grid
    assert np.max(res["residual"]) < 1e-13 * 64.0 ** (2 * alpha + 3)


def test_free_identity_matches_direct_time_derivative():
    grid = Grid.cube(2, 32, 3.0)
    model = builtin_model("free", 2, positive_count=1)
    f = band_limited(grid, seed=5, cutoff=0.3)
    g0 = (1.0, -1.0)
    phi = f.values[0]
    phi_t = 1j * sum(g0[i] * spectral_d(spectral_d(phi, grid, i, 1), grid, i, 1) for i in range(2))
    for k in range(2):
        dk = spectral_d(phi, grid, k, 1)
        dk_t = spectral_d(phi_t, grid, k, 1)
        dP = np.imag(phi_t * np.conj(dk) + phi * np.conj(dk_t))
        terms = momentum_identity_terms(model, f.values, grid, (0, 0), k)
        assert np.max(np.abs(sum(terms.values()) - dP)) < 1e-10 * np.max(np.abs(dP))
        # constant-coefficient form of the same identity
        rhs = 0.0
        for i in range(2):
            di = spectral_d(phi, grid, i, 1)
            rhs = rhs - np.real(spectral_d(spectral_d(phi * g0[i] * np.conj(di), grid, k, 1), grid, i, 1))
            rhs = rhs + 2 * np.real(spectral_d(dk * g0[i] * np.conj(di), grid, i, 1))
        assert np.max(np.abs(rhs - dP)) < 1e-10 * np.max(np.abs(dP))
        assert terms["T3_h"].max() == terms["T4_N"].max() == terms["T5_N"].max() == 0


def test_residual_converges_in_dt():
    grid = Grid.cube(1, 256, 8 * np.pi)
    phi = gaussian(grid, 1e-3)
    out = []
    for dt in (2e-3, 1e-3):
        traj = run(QUAD1, phi, SolverParams(dt=dt, T=0.2, checkpoint_stride=1))
        out.append(np.max(momentum_identity_residual(traj, (2,), 0)["residual"]))
    assert out[0] / out[1] >= 1.8


def test_residual_includes_viscous_terms():
    grid = Grid.cube(1, 128, 8.0)
    traj = run(FREE1, gaussian(grid), SolverParams(epsilon=1e-2, dt=1e-3, T=0.02, checkpoint_stride=1))
    assert np.max(momentum_identity_residual(traj, (1,), 0)["residual"]) < 1e-5


def test_residual_needs_three_checkpoints():
    grid = Grid.cube(1, 16, 3.0)
    traj = stationary(band_limited(grid), [0.0, 1.0])
    with pytest.raises(ValueError):
        momentum_identity_residual(traj, (0,), 0)


# --- ledgers ------------------------------------------------------------------------

def test_ledger_of_zero_trajectory():
    traj = stationary(SpectralField.zeros(Grid.cube(1, 64, 20.0)), [0.0, 0.5, 1.0], QUAD1)
    led = weighted_momentum_ledger(traj, (1,), 0)
    assert all(v == 0 for v in led.identity.values())
    assert all(v == 0 for v in led.lhs.values()) and all(v == 0 for v in led.rhs.values())
    assert led.constant == 0.0


def test_free_ledger_reduces_to_boundary_and_good_terms():
    residuals = []
    for n in (512, 1024):
        grid = Grid.cube(1, n, 8 * np.pi)
        traj = run(FREE1, gaussian(grid, 1.0, 2.0), SolverParams(dt=1e-3, T=0.5, checkpoint_stride=10))
        led = weighted_momentum_ledger(traj, (1,), 0)
        for key in ("h_contamination", "sgn_h", "dh_term", "N_boundary", "N_bulk", "viscous"):
            assert led.identity[key] == 0.0
        assert all(np.isreal(v) for v in led.identity.values())
        residuals.append(abs(led.identity_residual))
    # the weight derivative has a kink at 0, so the discrete identity closes at O(h^2)
    assert residuals[0] / residuals[1] > 3.5
    assert residuals[1] < 2e-3 * abs(led.identity["good_term"])


def test_quadratic_ledger_constant_stable_under_refinement():
    consts = []
    for n in (128, 256):
        grid = Grid.cube(1, n, 8 * np.pi)
        traj = run(QUAD1, gaussian(grid, 1e-2, 2.0), SolverParams(dt=1e-2, T=1.0, checkpoint_stride=10))
        consts.append(weighted_momentum_ledger(traj, (2,), 0).constant)
    assert np.isfinite(consts[0]) and abs(consts[1] / consts[0] - 1) < 0.25


def test_cubic_weight_integral():
    grid = Grid.cube(2, 32, 3 * np.pi)
    zero = stationary(SpectralField.zeros(grid), [0.0, 1.0, 2.0])
    assert np.all(cubic_weight_integral(zero, (0, 0), 0, 0)[1] == 0)
    x, y = grid.axes
    a, b = np.exp(-x ** 2 / 2), np.exp(-y ** 2)
    f = SpectralField(grid, np.outer(a, b).astype(complex))
    traj = stationary(f, [0.0, 1.0, 2.0])
    xs, cum = cubic_weight_integral(traj, (1, 0), 0, 1.0)
    assert np.all(np.diff(cum) >= 0)
    total = sobolev_norm(SpectralField.from_spectrum(
        grid, f.spectrum() * 1j * grid.frequency(0) * (1 + grid.frequency(1) ** 2) ** 0.25))
    assert cum[-1] == pytest.approx(total ** 2, rel=1e-12)
    xi = np.fft.fftfreq(grid.n[1], d=grid.spacing[1]) * 2 * np.pi
    c = grid.spacing[1] * np.sum(np.abs(np.fft.ifft(np.fft.fft(b) * (1 + xi ** 2) ** 0.25)) ** 2)
    da = spectral_d(a, grid, 0, 1)
    assert np.allclose(cum, c * np.cumsum(np.abs(da) ** 2) * grid.spacing[0], rtol=1e-8, atol=1e-14)
    with pytest.raises(ValueError):
        cubic_weight_integral(stationary(gaussian(Grid.cube(1, 16, 9.0)), [0.0, 1.0, 2.0]), (0,), 0, 0)


def test_weighted_norm_of_free_gaussian():
    grid = Grid.cube(1, 1024, 40 * np.pi)
    traj = run(FREE1, gaussian(grid), SolverParams(dt=1e-2, T=1.0, checkpoint_stride=10))
    series, ledger = weighted_norm_evolution(traj, (0,), 0)
    t = np.asarray(series.times)
    # |phi(t)|^2 = a^{-1/2} exp(-x^2/a) with a = 1 + 4t^2, so ||x^2 phi||^2 = 3 sqrt(pi) a^2 / 4
    oracle = math.sqrt(3 * math.sqrt(math.pi) / 4) * (1 + 4 * t ** 2)
    assert np.allclose(series["x2_phi_beta"], oracle, rtol=1e-4)
    assert ledger.rhs["nonlinear"] == 0.0


def test_weighted_norm_trivial_cases():
    grid = Grid.cube(1, 64, 10.0)
    z = weighted_norm_evolution(stationary(SpectralField.zeros(grid), [0.0, 1.0, 2.0]), (1,), 0)[0]
    assert np.all(z["x2_phi_beta"] == 0)
    s = weighted_norm_evolution(stationary(gaussian(grid), [0.0, 1.0, 2.0]), (1,), 0)[0]
    assert np.all(s["x2_phi_beta"] == s["x2_phi_beta"][0])


# --- bootstrap -------------------------------------------------------------------------

def test_bootstrap_zero_data():
    traj = stationary(SpectralField.zeros(Grid.cube(1, 64, 20.0)), [0.0, 0.5, 1.0], QUAD1)
    out = bootstrap_monitor(traj)
    assert out.metadata["special_case"] == "zero-data" and np.all(out["ratio"] == 0)


def test_bootstrap_free_flow_decomposes():
    grid = Grid.cube(1, 256, 20 * np.pi)
    traj = run(FREE1, gaussian(grid, 1.0, 4.0), SolverParams(dt=1e-2, T=1.0, checkpoint_stride=10))
    out = bootstrap_monitor(traj, "quadratic", s1=4, s2=2)
    X = master_X(traj, 4, 2)
    Y = good_term_Y(traj, 4)
    t = np.asarray(traj.times)
    # only the weighted part of X and the good term move, and the good term is at most
    # t times the H^{s1+1} energy since the weight 1/<x>^2 is at most one
    h_next = sobolev_norm(traj.fields[0], 5) ** 2
    assert np.allclose(out["ratio"], (X["X"] + Y["Y"]) / X["X"][0], rtol=1e-12)
    bound = 1 + (X["X_weighted"] - X["X_weighted"][0] + t * h_next) / X["X"][0]
    assert np.all(out["ratio"] <= bound + 1e-12)


def test_bootstrap_class_mismatch():
    traj = stationary(gaussian(Grid.cube(1, 64, 20.0)), [0.0, 0.5, 1.0], QUAD1)
    with pytest.raises(ValueError):
        bootstrap_monitor(traj, "cubic")
