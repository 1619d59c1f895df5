"""Integrating-factor time stepping for the viscous quasilinear equation.

The equation i phi_t + eps i Lap^2 phi + d_i(g^{ij} phi_j) = F is written as

    phi_t = L phi + N(phi),
    L  = Fourier multiplier exp-able exactly: -i sum_j g0^{jj} xi_j^2 - eps |xi|^4,
    N  = i (S_h(phi) - F(phi)),

with S_h the second-order operator built from h = g - g0.  Scheme 1 is Lie
splitting (exact linear flow, then one explicit Euler step of N).  Scheme 2
is Strang splitting with a second-order Runge-Kutta stage for N.
"""
from __future__ import annotations

import concurrent.futures
import functools
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diagnostics import DiagnosticSeries, default_s_indices
from .models import ModelProblem, nonlinear_terms
from .spectral import (BoundaryMassWarning, Grid, SpectralField, boundary_mass_fraction,
                       J_symbol, write_checkpoint)

__all__ = [
    "SolverParams", "Trajectory", "StabilityError", "NumericalError", "SmallnessWarning",
    "ContinuationMember", "ContinuationResult", "ContinuationError", "Stepper",
    "step", "run", "viscosity_continuation", "difference_run", "resolve_threads",
    "write_trajectory",
]


class StabilityError(RuntimeError):
    """A step increased the monitored Sobolev norm by more than the growth limit."""

    def __init__(self, message, time=None, norm_before=None, norm_after=None):
        super().__init__(message)
        self.time = time
        self.norm_before = norm_before
        self.norm_after = norm_after


class NumericalError(RuntimeError):
    """Non-finite values appeared during time stepping."""


class SmallnessWarning(UserWarning):
    """Initial data exceed the configured smallness threshold."""


class ContinuationError(RuntimeError):
    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class SolverParams:
    epsilon: float = 0.0
    dt: float = 1e-3
    T: float = 1.0
    scheme: int = 2
    dealias: bool = True
    checkpoint_stride: int = 1
    monitor_s: float | None = None
    growth_limit: float = 10.0
    smallness: float | None = None
    weighted: bool = False
    boundary_fraction: float = 1e-6

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.scheme not in (1, 2):
            raise ValueError("scheme must be 1 or 2")
        if self.checkpoint_stride < 1:
            raise ValueError("checkpoint_stride must be >= 1")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError(f"T = {self.T} is not an integer multiple of dt = {self.dt}")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class Trajectory:
    """Checkpointed solution history of one run."""

    grid: Grid
    times: list[float]
    fields: list[SpectralField]
    diagnostics: DiagnosticSeries
    params: SolverParams
    model: ModelProblem

    @property
    def checkpoints(self) -> list[tuple[float, SpectralField]]:
        return list(zip(self.times, self.fields))

    @property
    def final(self) -> SpectralField:
        return self.fields[-1]

    def __len__(self):
        return len(self.times)


def _monitor_s(model: ModelProblem, params: SolverParams) -> float:
    if params.monitor_s is not None:
        return float(params.monitor_s)
    idx = default_s_indices(model.dim)
    return float(idx["s1"] if model.interaction_class == "quadratic" else idx["s3"])


class Stepper:
    """Precomputed propagators for one (model, grid, params) combination."""

    def __init__(self, model: ModelProblem, grid: Grid, params: SolverParams):
        if model.dim != grid.dim:
            raise ValueError("model and grid dimensions differ")
        self.model, self.grid, self.params = model, grid, params
        xi = [grid.frequency(k) for k in range(grid.dim)]
        q = sum(gjj * xi[j] ** 2 for j, gjj in enumerate(model.metric.signature.diagonal))
        symbol = -1j * q - params.epsilon * grid.xi_squared ** 2
        self.full = np.exp(params.dt * symbol)
        self.half = np.exp(0.5 * params.dt * symbol)
        self.mask = grid.dealias_mask if params.dealias else None
        self.monitor = np.abs(J_symbol(_monitor_s(model, params)).evaluate(grid)) ** 2
        self.axes = tuple(range(-grid.dim, 0))

    def nonlinear(self, hat: np.ndarray) -> np.ndarray:
        values = np.fft.ifftn(hat, axes=self.axes)
        return 1j * nonlinear_terms(self.model, values, self.grid,
                                    dealias=self.params.dealias, hat=hat)

    def advance(self, hat: np.ndarray) -> np.ndarray:
        dt = self.params.dt
        if self.model.is_linear:
            return self.full * hat
        if self.params.scheme == 1:
            hat = self.full * hat
            return hat + dt * self.nonlinear(hat)
        hat = self.half * hat
        k1 = self.nonlinear(hat)
        k2 = self.nonlinear(hat + dt * k1)
        hat = hat + 0.5 * dt * (k1 + k2)
        return self.half * hat

    def monitor_norm(self, hat: np.ndarray) -> float:
        g = self.grid
        return float(np.sqrt(g.cell_volume / g.size * np.sum(self.monitor * np.abs(hat) ** 2)))


@functools.lru_cache(maxsize=32)
def _cached_stepper(model, grid, params):
    return Stepper(model, grid, params)


def _prepare(phi0: SpectralField, stepper: Stepper) -> np.ndarray:
    hat = phi0.spectrum()
    if stepper.mask is not None:
        hat = hat * stepper.mask
    return hat


def step(phi: SpectralField, model: ModelProblem, params: SolverParams) -> SpectralField:
    """Advance ``phi`` by one time step."""
    stepper = _cached_stepper(model, phi.grid, params)
    hat = _prepare(phi, stepper)
    before = stepper.monitor_norm(hat)
    new = stepper.advance(hat)
    _guard(stepper, before, new, 0.0)
    return SpectralField.from_spectrum(phi.grid, new)


def _guard(stepper: Stepper, before: float, hat: np.ndarray, time: float) -> float:
    if not np.all(np.isfinite(hat)):
        raise NumericalError(f"non-finite values at t = {time:.6g}")
    after = stepper.monitor_norm(hat)
    if before > 0 and after > stepper.params.growth_limit * before:
        raise StabilityError(
            f"H^{_monitor_s(stepper.model, stepper.params):g} norm grew from {before:.3e} "
            f"to {after:.3e} in one step at t = {time:.6g}", time, before, after)
    return after


def run(model: ModelProblem, phi0: SpectralField, params: SolverParams) -> Trajectory:
    """Integrate from t = 0 to ``params.T`` and keep every ``checkpoint_stride``-th state."""
    grid = phi0.grid
    stepper = _cached_stepper(model, grid, params)
    hat = _prepare(phi0, stepper)
    norm = stepper.monitor_norm(hat)
    s_mon = _monitor_s(model, params)
    if params.smallness is not None and norm > params.smallness:
        warnings.warn(f"initial H^{s_mon:g} norm {norm:.3g} exceeds the smallness threshold "
                      f"{params.smallness:.3g}", SmallnessWarning, stacklevel=2)

    start = SpectralField.from_spectrum(grid, hat) if stepper.mask is not None else phi0
    times, fields = [0.0], [start]
    l2 = [float(np.sqrt(grid.cell_volume / grid.size * np.sum(np.abs(hat) ** 2)))]
    hs = [norm]
    growth = 1.0
    warned = False
    for n in range(1, params.steps + 1):
        t = n * params.dt
        new = stepper.advance(hat)
        after = _guard(stepper, norm, new, t)
        if norm > 0:
            growth = max(growth, after / norm)
        hat, norm = new, after
        if n % params.checkpoint_stride == 0 or n == params.steps:
            f = SpectralField.from_spectrum(grid, hat)
            times.append(t)
            fields.append(f)
            l2.append(float(np.sqrt(grid.cell_volume / grid.size * np.sum(np.abs(hat) ** 2))))
            hs.append(norm)
            if params.weighted and not warned:
                frac = boundary_mass_fraction(f)
                if frac > params.boundary_fraction:
                    warnings.warn(f"boundary mass fraction {frac:.3g} at t = {t:.4g}",
                                  BoundaryMassWarning, stacklevel=2)
                    warned = True
    diag = DiagnosticSeries.on_times(times, monitor_s=s_mon, max_step_growth=growth)
    diag.add_channel("L2", l2)
    diag.add_channel(f"H{s_mon:g}", hs)
    return Trajectory(grid, times, fields, diag, params, model)


def resolve_threads(requested: int | None = None) -> int:
    """Worker count from the request, capped by ``QNLS_THREADS`` and the CPU count."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("QNLS_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, int(n))


@dataclass
class ContinuationMember:
    epsilon: float
    trajectory: Trajectory | None
    distance_to_next: float | None = None
    error: str | None = None


@dataclass
class ContinuationResult:
    members: list[ContinuationMember]
    s_prime: float
    complete: bool = True

    @property
    def epsilons(self) -> list[float]:
        return [m.epsilon for m in self.members]

    @property
    def distances(self) -> list[float]:
        return [m.distance_to_next for m in self.members if m.distance_to_next is not None]

    def table(self) -> DiagnosticSeries:
        """Distances indexed by member number (as the series "time")."""
        out = DiagnosticSeries(metadata={"s_prime": self.s_prime})
        for i, m in enumerate(self.members[:-1]):
            out.append(float(i), epsilon=m.epsilon, next_epsilon=self.members[i + 1].epsilon,
                       distance=np.nan if m.distance_to_next is None else m.distance_to_next)
        return out


def _hs_distance(a: SpectralField, b: SpectralField, s: float) -> float:
    from .spectral import sobolev_norm
    return sobolev_norm(a - b, s)


def viscosity_continuation(model: ModelProblem, phi0: SpectralField, params: SolverParams,
                           halvings: int, s_prime: float = 3.0,
                           workers: int | None = None) -> ContinuationResult:
    """Runs at eps, eps/2, ..., eps/2^halvings and distances between neighbours at T."""
    if halvings < 2:
        raise ValueError("halvings must be at least 2")
    eps = [params.epsilon / 2 ** i for i in range(halvings + 1)]
    members = [ContinuationMember(e, None) for e in eps]

    def work(e):
        return run(model, phi0, replace(params, epsilon=e))

    with concurrent.futures.ThreadPoolExecutor(max_workers=resolve_threads(workers)) as pool:
        futures = [pool.submit(work, e) for e in eps]
        failed = False
        for m, fut in zip(members, futures):
            try:
                m.trajectory = fut.result()
            except (StabilityError, NumericalError) as exc:
                m.error = str(exc)
                failed = True
    for a, b in zip(members, members[1:]):
        if a.trajectory is not None and b.trajectory is not None:
            a.distance_to_next = _hs_distance(a.trajectory.final, b.trajectory.final, s_prime)
    result = ContinuationResult(members, s_prime, complete=not failed)
    if failed:
        raise ContinuationError("a continuation member failed", result)
    return result


def difference_run(model: ModelProblem, phi0_a: SpectralField, phi0_b: SpectralField,
                   params: SolverParams, s3: int | None = None) -> DiagnosticSeries:
    """Norms and good terms of v = phi_a - phi_b along two runs."""
    from .functionals import difference_good_terms
    from .spectral import sobolev_norm

    ta = run(model, phi0_a, params)
    tb = run(model, phi0_b, params)
    diffs = [a - b for a, b in zip(ta.fields, tb.fields)]
    out = DiagnosticSeries.on_times(ta.times)
    out.add_channel("v_H1/2", [sobolev_norm(v, 0.5) for v in diffs])
    out.add_channel("v_L2", [sobolev_norm(v, 0.0) for v in diffs])
    for name, vals in difference_good_terms(ta.times, diffs, s3=s3).items():
        out.add_channel(name, vals)
    return out


def write_trajectory(traj: Trajectory, directory) -> list[dict]:
    """Write every checkpoint into ``directory``; returns file names and hashes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (t, f) in enumerate(traj.checkpoints):
        name = f"checkpoint_{i:05d}.qnls"
        digest = write_checkpoint(directory / name, f, t)
        records.append({"file": name, "time": t, "sha256": digest})
    return records
