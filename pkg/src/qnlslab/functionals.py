"""Functionals evaluated along trajectories.

Momentum densities, the weighted space-time quantities Y, W and their
top-order parts, the master quantity X, the residual of the momentum
identity, weighted estimate ledgers and the bootstrap monitor.

All functions read a trajectory through ``times``, ``fields``, ``model`` and
``params``; they never modify it.
"""
from __future__ import annotations

import math
import warnings
from typing import Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .diagnostics import DiagnosticSeries, EstimateLedger, default_s_indices
from .models import ModelProblem, metric_array, nonlinear_terms
from .spectral import (BoundaryMassWarning, Grid, MultiIndex, SpectralField,
                       boundary_mass_fraction, japanese, multi_indices, sobolev_norm)

__all__ = [
    "momentum_density", "good_term_Y", "good_term_W", "master_X",
    "momentum_identity_residual", "momentum_identity_terms", "nonlinearity_N",
    "weighted_momentum_ledger", "cubic_weight_integral", "weighted_norm_evolution",
    "bootstrap_monitor", "difference_good_terms", "IndexConstraintError",
]


class IndexConstraintError(ValueError):
    """Regularity indices violate the constraints of a functional."""


# ---------------------------------------------------------------------------
# helpers


class _Calculus:
    """Spectral derivatives of one field with cached spectra."""

    def __init__(self, grid: Grid, values: np.ndarray):
        self.grid = grid
        self.values = values
        self.axes = tuple(range(-grid.dim, 0))
        self.hat = np.fft.fftn(values, axes=self.axes)
        self._cache: dict = {}

    def symbol(self, orders: Sequence[int]) -> np.ndarray:
        out = np.ones(1, dtype=complex)
        for k, a in enumerate(orders):
            if a:
                out = out * (1j * self.grid.frequency(k)) ** a
        return out

    def d(self, orders: Sequence[int], extra: np.ndarray | None = None) -> np.ndarray:
        """d^orders of the field, optionally composed with an extra symbol (not cached)."""
        orders = tuple(int(a) for a in orders)
        if extra is not None:
            return np.fft.ifftn(self.hat * self.symbol(orders) * extra, axes=self.axes)
        if orders not in self._cache:
            if not any(orders):
                self._cache[orders] = self.values
            else:
                self._cache[orders] = np.fft.ifftn(self.hat * self.symbol(orders), axes=self.axes)
        return self._cache[orders]

    def dk(self, alpha: Sequence[int], k: int, times: int = 1) -> np.ndarray:
        orders = list(alpha)
        orders[k] += times
        return self.d(orders)


def _fft(a, grid):
    return np.fft.fftn(a, axes=tuple(range(-grid.dim, 0)))


def _ifft(a, grid):
    return np.fft.ifftn(a, axes=tuple(range(-grid.dim, 0)))


def _deriv(a: np.ndarray, grid: Grid, orders: Sequence[int]) -> np.ndarray:
    spec = _fft(a, grid)
    for k, n in enumerate(orders):
        if n:
            spec = spec * (1j * grid.frequency(k)) ** n
    return _ifft(spec, grid)


def _alpha_tuple(alpha, dim) -> tuple[int, ...]:
    if isinstance(alpha, MultiIndex):
        alpha = alpha.orders
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != dim:
        raise ValueError("multi-index dimension does not match the grid")
    return alpha


def _time_index(traj, t) -> int:
    if isinstance(t, (int, np.integer)) and not isinstance(t, bool):
        return int(t)
    times = np.asarray(traj.times)
    i = int(np.argmin(np.abs(times - float(t))))
    if abs(times[i] - float(t)) > 1e-9 * max(1.0, abs(float(t))):
        raise ValueError(f"time {t} is not a checkpoint time")
    return i


def _integral(density: np.ndarray, grid: Grid) -> float:
    return float(np.sum(density) * grid.cell_volume)


def _weight(grid: Grid, k: int) -> np.ndarray:
    return japanese(grid.coordinate(k))


def _profile_sq(values: np.ndarray, grid: Grid, k: int) -> np.ndarray:
    """||f(x_k, .)||^2 over the other axes, summed over components."""
    dens = np.sum(np.abs(values) ** 2, axis=0)
    others = tuple(i for i in range(grid.dim) if i != k)
    if not others:
        return dens
    h = float(np.prod([grid.spacing[i] for i in others]))
    return np.sum(dens, axis=others) * h


def _check_boundary(traj, fraction=1e-6, label=""):
    worst = max(boundary_mass_fraction(f) for f in traj.fields)
    if worst > fraction:
        warnings.warn(f"{label}boundary mass fraction {worst:.3g} exceeds {fraction:.1g}",
                      BoundaryMassWarning, stacklevel=3)
        return False
    return True


def _lambda_half(grid: Grid, k: int) -> np.ndarray:
    rest = sum((grid.frequency(i) ** 2 for i in range(grid.dim) if i != k), np.zeros(1))
    return (1.0 + rest) ** 0.25


# ---------------------------------------------------------------------------
# densities and good terms


def momentum_density(traj, alpha, k: int, t) -> SpectralField:
    """Im(phi_alpha * d_k conj(phi_alpha)) at checkpoint ``t`` (time or index)."""
    f = traj.fields[_time_index(traj, t)]
    alpha = _alpha_tuple(alpha, f.grid.dim)
    calc = _Calculus(f.grid, f.values)
    pa = calc.d(alpha)
    dpa = calc.dk(alpha, k)
    return SpectralField(f.grid, np.sum(np.imag(pa * np.conj(dpa)), axis=0))


def good_term_Y(traj, s1: int | None = None) -> DiagnosticSeries:
    """Channels ``Y``, ``Y_top`` (|alpha| = s1) and the sandwich slack ``tH_sup``.

    Y(t) = sum_k [ sum_{|alpha|<=s1} int_0^t int |d_k phi_alpha|^2/<x_k>^2
                   + int_0^t int |phi|^2/<x_k>^2 ].
    ``tH_sup`` is t * sup_{s<=t} ||phi(s)||^2_{H^{s1}}.
    """
    grid = traj.grid
    s1 = default_s_indices(grid.dim)["s1"] if s1 is None else int(s1)
    _check_boundary(traj, label="Y: ")
    alphas = multi_indices(grid.dim, s1)
    weights = [_weight(grid, k) ** -2 for k in range(grid.dim)]
    full, top, hs = [], [], []
    for f in traj.fields:
        calc = _Calculus(grid, f.values)
        tot = topv = 0.0
        for k in range(grid.dim):
            w = weights[k]
            tot += _integral(np.sum(np.abs(f.values) ** 2, axis=0) * w, grid)
            for a in alphas:
                v = _integral(np.sum(np.abs(calc.dk(a.orders, k)) ** 2, axis=0) * w, grid)
                tot += v
                if a.total == s1:
                    topv += v
        full.append(tot)
        top.append(topv)
        hs.append(sobolev_norm(f, s1) ** 2)
    t = np.asarray(traj.times)
    out = DiagnosticSeries.on_times(traj.times, s1=s1)
    out.add_channel("Y", cumulative_trapezoid(full, t, initial=0.0))
    out.add_channel("Y_top", cumulative_trapezoid(top, t, initial=0.0))
    out.add_channel("tH_sup", t * np.maximum.accumulate(hs))
    return out


def _W_densities(grid: Grid, values: np.ndarray, s3: int, use_gradient: bool = False):
    """Per-checkpoint integrands of W and of its top-order part."""
    calc = _Calculus(grid, values)
    betas = multi_indices(grid.dim, s3 - 1)
    alphas = multi_indices(grid.dim, s3)
    full = top = 0.0
    for k in range(grid.dim):
        hk = grid.spacing[k]
        lam = _lambda_half(grid, k)
        S = sum(_profile_sq(calc.d(b.orders, lam), grid, k) for b in betas)
        P_low = np.zeros_like(S)
        P_top = np.zeros_like(S)
        for a in alphas:
            if use_gradient:
                p = sum(_profile_sq(calc.dk(a.orders, j), grid, k) for j in range(grid.dim))
            else:
                p = _profile_sq(calc.dk(a.orders, k), grid, k)
            if a.total == s3:
                P_top += p
            else:
                P_low += p
        M = _profile_sq(values, grid, k)
        full += float(np.sum(S * (P_low + P_top + M)) * hk)
        top += float(np.sum(S * P_top) * hk)
    return full, top


def good_term_W(traj, s3: int | None = None, use_gradient: bool = False) -> DiagnosticSeries:
    """Channels ``W``, ``W_top`` (|alpha| = s3) and slack ``tH4_sup``.

    W(t) = sum_k sum_{|beta|<=s3-1} int_0^t int S_beta(x_k)
           [ sum_{|alpha|<=s3} P_alpha(x_k) + ||phi(x_k, .)||^2 ] dx_k ds,
    S_beta = ||Lambda_k^{1/2} phi_beta(x_k, .)||^2, P_alpha = ||d_k phi_alpha(x_k, .)||^2.
    ``use_gradient`` replaces d_k by the full gradient in the top-order part.
    """
    grid = traj.grid
    if grid.dim < 2:
        raise ValueError("W is defined for dimension >= 2 only")
    s3 = default_s_indices(grid.dim)["s3"] if s3 is None else int(s3)
    _check_boundary(traj, label="W: ")
    full, top, hs = [], [], []
    for f in traj.fields:
        a, b = _W_densities(grid, f.values, s3, use_gradient)
        full.append(a)
        top.append(b)
        hs.append(sobolev_norm(f, s3) ** 4)
    t = np.asarray(traj.times)
    out = DiagnosticSeries.on_times(traj.times, s3=s3)
    out.add_channel("W", cumulative_trapezoid(full, t, initial=0.0))
    out.add_channel("W_top", cumulative_trapezoid(top, t, initial=0.0))
    out.add_channel("tH4_sup", t * np.maximum.accumulate(hs))
    return out


def _weighted_group(grid: Grid, values: np.ndarray, s2: int, power: float = 2.0) -> float:
    """sum_k sum_{|beta|<=s2} ||<x_k>^power phi_beta||^2."""
    calc = _Calculus(grid, values)
    total = 0.0
    for k in range(grid.dim):
        w = _weight(grid, k) ** (2 * power)
        for b in multi_indices(grid.dim, s2):
            total += _integral(np.sum(np.abs(calc.d(b.orders)) ** 2, axis=0) * w, grid)
    return total


def master_X(traj, s1: int | None = None, s2: int | None = None) -> DiagnosticSeries:
    """X(t) = ||phi||^2_{H^{s1+1/2}} + sum_k sum_{|beta|<=s2} ||<x_k>^2 phi_beta||^2."""
    grid = traj.grid
    idx = default_s_indices(grid.dim)
    s1 = idx["s1"] if s1 is None else int(s1)
    s2 = idx["s2"] if s2 is None else int(s2)
    if s2 + 2 > s1 + 0.5:
        raise IndexConstraintError(f"need s2 + 2 <= s1 + 1/2, got s1={s1}, s2={s2}")
    _check_boundary(traj, label="X: ")
    sob, wei = [], []
    for f in traj.fields:
        sob.append(sobolev_norm(f, s1 + 0.5) ** 2)
        wei.append(_weighted_group(grid, f.values, s2))
    out = DiagnosticSeries.on_times(traj.times, s1=s1, s2=s2)
    out.add_channel("X", np.add(sob, wei))
    out.add_channel("X_sobolev", sob)
    out.add_channel("X_weighted", wei)
    return out


# ---------------------------------------------------------------------------
# momentum identity


def _pad_spectrum(hat: np.ndarray, grid: Grid, factor: int) -> tuple[Grid, np.ndarray]:
    """Zero-pad a spectrum to ``factor`` times the points; physical values preserved.

    The Nyquist mode of the coarse grid is dropped (dealiased states carry none).
    """
    if factor == 1:
        return grid, hat
    fine = grid.refined(factor)
    out = hat
    lead = hat.ndim - grid.dim
    for ax, (n, N) in enumerate(zip(grid.n, fine.n)):
        axis = lead + ax
        half = n // 2
        lo = np.take(out, np.arange(0, half), axis=axis)
        hi = np.take(out, np.arange(n - half + 1, n), axis=axis)
        shape = list(out.shape)
        shape[axis] = N - lo.shape[axis] - hi.shape[axis]
        out = np.concatenate([lo, np.zeros(shape, dtype=complex), hi], axis=axis)
    return fine, out * (fine.size / grid.size)


def _field_on(grid: Grid, values: np.ndarray, factor: int):
    fine, hat = _pad_spectrum(_fft(values, grid), grid, factor)
    return fine, _ifft(hat, fine)


def nonlinearity_N(model: ModelProblem, values: np.ndarray, grid: Grid, alpha) -> np.ndarray:
    """N for the differentiated equation i d_t phi_alpha + d_i(g^{ij} d_j phi_alpha) = N.

    Computed as d^alpha(F - Op(phi)) + d_i(g^{ij} d_j phi_alpha), with Op the
    full second-order operator of the model and no dealiasing.
    """
    alpha = _alpha_tuple(alpha, grid.dim)
    if model.is_linear:
        return np.zeros_like(values)
    spec = nonlinear_terms(model, values, grid, dealias=False, include_constant=True)
    calc = _Calculus(grid, values)
    sym = calc.symbol(alpha)
    z = np.stack([calc.d(MultiIndex.unit(grid.dim, j).orders) for j in range(grid.dim)])
    g = metric_array(model, values, z)
    g = g + model.metric.signature.matrix.reshape((grid.dim, grid.dim) + (1,) * grid.dim)
    out = -sym * spec
    for i in range(grid.dim):
        flux = sum(g[i, j] * calc.dk(alpha, j) for j in range(grid.dim))
        out = out + 1j * grid.frequency(i) * _fft(flux, grid)
    return _ifft(out, grid)


def momentum_identity_terms(model: ModelProblem, values: np.ndarray, grid: Grid, alpha,
                            k: int, epsilon: float = 0.0) -> dict[str, np.ndarray]:
    """Pointwise spatial terms of the momentum identity for one state.

    With P = Im(phi_alpha d_k conj phi_alpha) the identity reads
    d_t P = sum of the returned terms.  Products are evaluated on ``grid`` as
    given (pad beforehand for alias-free products).
    """
    alpha = _alpha_tuple(alpha, grid.dim)
    d = grid.dim
    calc = _Calculus(grid, values)
    pa = calc.d(alpha)
    dj = [calc.dk(alpha, j) for j in range(d)]
    dk = dj[k]
    z = np.stack([calc.d(MultiIndex.unit(d, j).orders) for j in range(d)])
    h = metric_array(model, values, z)
    g = h + model.metric.signature.matrix.reshape((d, d) + (1,) * d)
    unit_k = MultiIndex.unit(d, k).orders

    def dsum(arr, orders):
        return np.real(_deriv(arr, grid, orders))

    T1 = np.zeros(grid.shape)
    T2 = np.zeros(grid.shape)
    for i in range(d):
        gi = sum(g[i, j] * np.conj(dj[j]) for j in range(d))
        Q = np.sum(pa * gi, axis=0)
        orders = list(unit_k)
        orders[i] += 1
        T1 -= dsum(Q, orders)
        T2 += 2.0 * dsum(np.sum(dk * gi, axis=0), MultiIndex.unit(d, i).orders)
    terms = {"T1": T1, "T2": T2}
    if model.metric.vanishes:
        terms["T3_h"] = np.zeros(grid.shape)
    else:
        dh = np.real(_deriv(h, grid, unit_k))
        terms["T3_h"] = sum(np.real(np.sum(dj[i] * dh[i, j] * np.conj(dj[j]), axis=0))
                            for i in range(d) for j in range(d))
    N = nonlinearity_N(model, values, grid, alpha)
    if model.is_linear:
        terms["T4_N"] = np.zeros(grid.shape)
        terms["T5_N"] = np.zeros(grid.shape)
    else:
        terms["T4_N"] = dsum(np.sum(np.real(np.conj(pa) * N), axis=0), unit_k)
        terms["T5_N"] = -2.0 * np.sum(np.real(N * np.conj(dk)), axis=0)
    if epsilon:
        bih = grid.xi_squared ** 2
        b = calc.d(alpha, bih)
        bk = _deriv(b, grid, unit_k)
        terms["V"] = -epsilon * np.sum(np.imag(b * np.conj(dk) + pa * np.conj(bk)), axis=0)
    else:
        terms["V"] = np.zeros(grid.shape)
    return terms


def momentum_identity_residual(traj, alpha, k: int, pad: int = 2) -> DiagnosticSeries:
    """L^2 norm of the momentum-identity residual at interior checkpoints.

    The time derivative of P uses centered differences over neighbouring
    checkpoints; the spatial terms are evaluated on a grid refined by ``pad``
    so that products of dealiased states are exact.  Viscous terms enter when
    the run used epsilon > 0.  Channel ``residual`` covers the interior times.
    """
    grid = traj.grid
    if len(traj.times) < 3:
        raise ValueError("need at least three checkpoints")
    alpha = _alpha_tuple(alpha, grid.dim)
    eps = float(getattr(traj.params, "epsilon", 0.0))
    model = traj.model
    P, states = [], []
    fine = grid
    for f in traj.fields:
        fine, vals = _field_on(grid, f.values, pad)
        calc = _Calculus(fine, vals)
        pa = calc.d(alpha)
        P.append(np.sum(np.imag(pa * np.conj(calc.dk(alpha, k))), axis=0))
        states.append(vals)
    res, times = [], []
    for i in range(1, len(traj.times) - 1):
        vals = states[i]
        terms = momentum_identity_terms(model, vals, fine, alpha, k, eps)
        dPdt = (P[i + 1] - P[i - 1]) / (traj.times[i + 1] - traj.times[i - 1])
        r = -dPdt + sum(terms.values())
        res.append(math.sqrt(float(np.sum(r ** 2)) * fine.cell_volume))
        times.append(traj.times[i])
    out = DiagnosticSeries.on_times(times, alpha=alpha, k=k, pad=pad, epsilon=eps)
    out.add_channel("residual", res)
    return out


# ---------------------------------------------------------------------------
# weighted ledgers


def _time_integral(values, times) -> float:
    if len(times) < 2:
        return 0.0
    return float(trapezoid(values, times))


def weighted_momentum_ledger(traj, alpha, k: int, s2: int | None = None) -> EstimateLedger:
    """Terms of the momentum identity weighted by x_k/<x_k> and integrated over [0, T].

    ``identity`` entries hold the exact integrated identity (they sum to the
    integrated residual); ``lhs``/``rhs`` hold the good term and the majorant
    evaluated with measured norms (suprema over the run).
    """
    grid = traj.grid
    d = grid.dim
    alpha = _alpha_tuple(alpha, d)
    s1 = sum(alpha)
    s2 = default_s_indices(d)["s2"] if s2 is None else int(s2)
    model = traj.model
    eps = float(getattr(traj.params, "epsilon", 0.0))
    ok = _check_boundary(traj, label="ledger: ")
    x = grid.coordinate(k)
    w = x / japanese(x)
    w1 = japanese(x) ** -2
    w2 = -2.0 * np.sign(x) * japanese(x) ** -3
    g0kk = model.metric.signature.diagonal[k]
    unit_k = MultiIndex.unit(d, k).orders

    keys = ["good_term", "h_contamination", "sgn_g0", "sgn_h", "dh_term",
            "N_boundary", "N_bulk", "viscous"]
    series = {key: [] for key in keys}
    Pw, hs_half, phi_a, weighted1, weighted2, ydens = [], [], [], [], [], []
    for f in traj.fields:
        vals = f.values
        calc = _Calculus(grid, vals)
        pa = calc.d(alpha)
        dj = [calc.dk(alpha, j) for j in range(d)]
        dk = dj[k]
        z = np.stack([calc.d(MultiIndex.unit(d, j).orders) for j in range(d)])
        h = metric_array(model, vals, z)
        Pw.append(_integral(w * np.sum(np.imag(pa * np.conj(dk)), axis=0), grid))
        series["good_term"].append(2 * g0kk * _integral(w1 * np.sum(np.abs(dk) ** 2, axis=0), grid))
        hk = sum(h[k, j] * np.conj(dj[j]) for j in range(d))
        series["h_contamination"].append(
            -2.0 * _integral(w1 * np.sum(np.real(dk * hk), axis=0), grid))
        series["sgn_g0"].append(
            -g0kk * _integral(w2 * np.sum(np.real(pa * np.conj(dk)), axis=0), grid))
        series["sgn_h"].append(-_integral(w2 * np.sum(np.real(pa * hk), axis=0), grid))
        if model.metric.vanishes:
            series["dh_term"].append(0.0)
        else:
            dh = np.real(_deriv(h, grid, unit_k))
            series["dh_term"].append(_integral(w * sum(
                np.sum(np.real(dj[i] * dh[i, j] * np.conj(dj[j])), axis=0)
                for i in range(d) for j in range(d)), grid))
        if model.is_linear:
            series["N_boundary"].append(0.0)
            series["N_bulk"].append(0.0)
        else:
            N = nonlinearity_N(model, vals, grid, alpha)
            series["N_boundary"].append(-_integral(w1 * np.sum(np.real(np.conj(pa) * N), axis=0), grid))
            series["N_bulk"].append(-2.0 * _integral(w * np.sum(np.real(N * np.conj(dk)), axis=0), grid))
        if eps:
            b = calc.d(alpha, grid.xi_squared ** 2)
            bk = _deriv(b, grid, unit_k)
            series["viscous"].append(-eps * _integral(
                w * np.sum(np.imag(b * np.conj(dk) + pa * np.conj(bk)), axis=0), grid))
        else:
            series["viscous"].append(0.0)
        hs_half.append(sobolev_norm(f, s1 + 0.5))
        phi_a.append(math.sqrt(_integral(np.sum(np.abs(pa) ** 2, axis=0), grid)))
        weighted1.append(sum(math.sqrt(_weighted_group_single(grid, calc, i, b, 1.0))
                             for i in range(d) for b in multi_indices(d, s2)))
        weighted2.append(sum(math.sqrt(_weighted_group_single(grid, calc, i, b, 2.0))
                             for i in range(d) for b in multi_indices(d, s2)))
        ydens.append(sum(_integral(japanese(grid.coordinate(j)) ** -2
                                   * np.sum(np.abs(calc.dk(alpha, j)) ** 2, axis=0), grid)
                         for j in range(d)))

    t = np.asarray(traj.times)
    T = float(t[-1])
    ledger = EstimateLedger(f"weighted-momentum alpha={alpha} k={k}", advisory=not ok)
    identity = {"boundary_T": -Pw[-1], "boundary_0": Pw[0]}
    for key in keys:
        identity[key] = -_time_integral(series[key], t) if key == "good_term" \
            else _time_integral(series[key], t)
    ledger.identity = identity
    ledger.identity_residual = float(sum(identity.values()))

    Y = _time_integral(ydens, t)
    sup = max
    ledger.lhs["good_term"] = Y
    ledger.rhs["initial_energy"] = hs_half[0] ** 2
    ledger.rhs["energy"] = (1 + T) * sup(hs_half) ** 2
    ledger.rhs["weighted1_cross"] = math.sqrt(T) * sup(weighted1) * sup(phi_a) * math.sqrt(Y)
    ledger.rhs["weighted2_Y"] = sup(weighted2) * Y
    ledger.rhs["cubic_energy"] = T * sup(hs_half) ** 3
    ledger.rhs["phi_alpha_cross"] = math.sqrt(T) * sup(phi_a) * math.sqrt(Y)
    if not ok:
        ledger.notes.append("boundary mass above threshold; ledger is advisory")
    return ledger


def _weighted_group_single(grid, calc, k, beta, power) -> float:
    w = japanese(grid.coordinate(k)) ** (2 * power)
    return _integral(np.sum(np.abs(calc.d(beta.orders)) ** 2, axis=0) * w, grid)


def cubic_weight_integral(traj, beta, k: int, t) -> tuple[np.ndarray, np.ndarray]:
    """x_k grid and the cumulative integral of ||Lambda_k^{1/2} phi_beta(y_k, .)||^2 from the left edge."""
    f = traj.fields[_time_index(traj, t)]
    grid = f.grid
    if grid.dim < 2:
        raise ValueError("the slice weight needs dimension >= 2")
    beta = _alpha_tuple(beta, grid.dim)
    calc = _Calculus(grid, f.values)
    S = _profile_sq(calc.d(beta, _lambda_half(grid, k)), grid, k)
    return grid.axes[k].copy(), np.cumsum(S) * grid.spacing[k]


def weighted_norm_evolution(traj, beta, k: int) -> tuple[DiagnosticSeries, EstimateLedger]:
    """Channel ||x_k^2 phi_beta|| with a ledger of the source terms bounding its growth."""
    grid = traj.grid
    d = grid.dim
    beta = _alpha_tuple(beta, d)
    model = traj.model
    ok = _check_boundary(traj, label="weighted norm: ")
    x = grid.coordinate(k)
    norm, xdk, xN, rest = [], [], [], []
    for f in traj.fields:
        vals = f.values
        calc = _Calculus(grid, vals)
        pb = calc.d(beta)
        norm.append(math.sqrt(_integral(np.sum(np.abs(x ** 2 * pb) ** 2, axis=0), grid)))
        xdk.append(math.sqrt(_integral(np.sum(np.abs(x * calc.dk(beta, k)) ** 2, axis=0), grid)))
        if model.is_linear:
            xN.append(0.0)
        else:
            N = nonlinearity_N(model, vals, grid, beta)
            xN.append(math.sqrt(_integral(np.sum(np.abs(x ** 2 * N) ** 2, axis=0), grid)))
        z = np.stack([calc.d(MultiIndex.unit(d, j).orders) for j in range(d)])
        h = metric_array(model, vals, z)
        gkk = model.metric.signature.diagonal[k] + h[k, k]
        src = 2 * gkk * pb
        if not model.metric.vanishes:
            for j in range(d):
                src = src + 2 * x * h[k, j] * calc.dk(beta, j) + 2 * x * h[j, k] * calc.dk(beta, j)
                src = src + 2 * x * np.real(_deriv(h[j, k], grid, MultiIndex.unit(d, j).orders)) * pb
        rest.append(math.sqrt(_integral(np.sum(np.abs(src) ** 2, axis=0), grid)))
    series = DiagnosticSeries.on_times(traj.times, beta=beta, k=k)
    series.add_channel("x2_phi_beta", norm)
    T = float(traj.times[-1])
    ledger = EstimateLedger(f"weighted-norm beta={beta} k={k}", advisory=not ok)
    ledger.lhs["final"] = norm[-1] ** 2
    ledger.rhs["initial"] = norm[0] ** 2
    ledger.rhs["transport"] = T * max(norm) * max(xdk)
    ledger.rhs["nonlinear"] = T * max(norm) * max(xN)
    ledger.rhs["metric_terms"] = T * max(norm) * max(rest)
    return series, ledger


# ---------------------------------------------------------------------------
# bootstrap and uniqueness


def bootstrap_monitor(traj, interaction_class: str | None = None, s1: int | None = None,
                      s2: int | None = None, s3: int | None = None,
                      ceiling: float = 2.0) -> DiagnosticSeries:
    """Ratio (X(t) + Y(t))/X(0), or (||phi||^2_{H^{s3+1/2}} + W(t))/||phi_0||^2_{H^{s3+1/2}}."""
    model = traj.model
    cls = interaction_class or model.interaction_class
    if cls != model.interaction_class:
        raise ValueError(f"model is of {model.interaction_class} class, not {cls}")
    grid = traj.grid
    idx = default_s_indices(grid.dim)
    if cls == "quadratic":
        s1 = idx["s1"] if s1 is None else int(s1)
        X = master_X(traj, s1, s2)
        Y = good_term_Y(traj, s1)
        num = X["X"] + Y["Y"]
        meta = {"class": cls, "s1": s1, "s2": X.metadata["s2"]}
    elif cls == "cubic":
        s3 = idx["s3"] if s3 is None else int(s3)
        W = good_term_W(traj, s3)
        num = np.array([sobolev_norm(f, s3 + 0.5) ** 2 for f in traj.fields]) + W["W"]
        meta = {"class": cls, "s3": s3}
    else:
        raise ValueError(f"unknown interaction class {cls!r}")
    out = DiagnosticSeries.on_times(traj.times, **meta, ceiling=ceiling)
    base = float(num[0])
    if base == 0.0:
        out.add_channel("ratio", np.zeros(len(num)))
        out.metadata["special_case"] = "zero-data"
        out.metadata["exceeds_ceiling"] = False
        return out
    ratio = np.asarray(num) / base
    out.add_channel("ratio", ratio)
    out.metadata["sup_ratio"] = float(np.max(ratio))
    out.metadata["exceeds_ceiling"] = bool(np.max(ratio) > ceiling)
    return out


def difference_good_terms(times: Sequence[float], diffs: Sequence[SpectralField],
                          s3: int | None = None) -> dict[str, np.ndarray]:
    """Y_v (any d) and W_v (d >= 2) for the difference of two runs."""
    grid = diffs[0].grid
    d = grid.dim
    t = np.asarray(times)
    ydens, wdens = [], []
    s3 = default_s_indices(d)["s3"] if s3 is None else int(s3)
    for v in diffs:
        calc = _Calculus(grid, v.values)
        dens = 0.0
        for k in range(d):
            w = japanese(grid.coordinate(k)) ** -2
            dens += _integral(w * np.sum(np.abs(calc.dk((0,) * d, k)) ** 2
                                         + np.abs(v.values) ** 2, axis=0), grid)
        ydens.append(dens)
        if d >= 2:
            tot = 0.0
            for k in range(d):
                lam = _lambda_half(grid, k)
                S = sum(_profile_sq(calc.d(b.orders, lam), grid, k) for b in multi_indices(d, s3 - 1))
                Pk = _profile_sq(calc.dk((0,) * d, k), grid, k) + _profile_sq(v.values, grid, k)
                tot += float(np.sum(S * Pk) * grid.spacing[k])
            wdens.append(tot)
    out = {"Y_v": cumulative_trapezoid(ydens, t, initial=0.0)}
    if d >= 2:
        out["W_v"] = cumulative_trapezoid(wdens, t, initial=0.0)
    return out
