"""Ensemble checks of commutator, product, BMO and weight inequalities.

Inequalities are checked as bounded ratios LHS/RHS over random band-limited
samples; no specific constant is asserted.  Exact identities are checked as
relative errors against a tolerance.  Every report carries the boundary mass
of its samples, since the periodic box only approximates the whole space.
"""
from __future__ import annotations

import concurrent.futures
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .solver import resolve_threads
from .spectral import (D_symbol, Dk_symbol, Grid, J_symbol, SpectralField, bmo_norm,
                       boundary_mass_fraction, hilbert_symbol, japanese, sobolev_norm,
                       write_checkpoint)

__all__ = [
    "EnsembleSpec", "LemmaReport", "ParameterError", "BoundaryMassError",
    "verify_commutator_L21", "verify_calderon", "verify_kato_ponce_fractional",
    "verify_commutator_L23", "verify_bmo_embedding", "verify_interpolation",
    "verify_halving", "verify_weight_lemma", "verify_Dhalf_x_identity",
    "verify_operator_identities", "verify_weight_derivative",
    "interpolation_dilation_study", "resolution_study", "SUITES", "run_suite",
    "lp_norm",
]

IDENTITY_TOLERANCE = 1e-6
_STREAMS = {"f": 0, "g": 1, "u": 2, "w": 3, "v": 4, "phi": 5}


class ParameterError(ValueError):
    """Lemma parameters outside their admissible range."""


class BoundaryMassError(ValueError):
    """Samples carry too much weighted mass near the box boundary."""


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class EnsembleSpec:
    """Seeded family of random band-limited fields.

    Fourier coefficients are i.i.d. complex Gaussians on the modes with
    ``low_cutoff <= max_j |k_j| / (n_j/2) <= cutoff``, where ``n`` is
    ``reference_n`` (default: the grid itself).  Keeping ``reference_n`` fixed
    while refining the grid samples the same trigonometric polynomials at a
    finer resolution.  ``window`` multiplies by exp(-|x|^2 / (2 window^2)).
    """

    count: int
    grid: Grid
    cutoff: float = 1.0 / 3.0
    amplitude: float = 1.0
    seed: int = 0
    window: float | None = None
    low_cutoff: float = 0.0
    decay: float = 0.0
    reference_n: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.count < 1:
            raise ParameterError("ensemble count must be positive")
        if not 0.0 < self.cutoff <= 2.0 / 3.0:
            raise ParameterError("cutoff must lie in (0, 2/3] of the Nyquist frequency")
        if not 0.0 <= self.low_cutoff < self.cutoff:
            raise ParameterError("low_cutoff must lie in [0, cutoff)")
        if self.window is not None and self.window <= 0:
            raise ParameterError("window width must be positive")
        if self.reference_n is not None:
            object.__setattr__(self, "reference_n", tuple(int(n) for n in self.reference_n))
            if len(self.reference_n) != self.grid.dim:
                raise ParameterError("reference_n must match the grid dimension")
            if any(n > m for n, m in zip(self.reference_n, self.grid.n)):
                raise ParameterError("reference grid must not be finer than the sampling grid")

    @property
    def ref_n(self) -> tuple[int, ...]:
        return self.reference_n or self.grid.n

    def refined(self, factor: int = 2) -> "EnsembleSpec":
        """Same fields sampled on a grid ``factor`` times finer."""
        return replace(self, grid=self.grid.refined(factor), reference_n=self.ref_n)

    def on_grid(self, grid: Grid) -> "EnsembleSpec":
        return replace(self, grid=grid, reference_n=None if self.reference_n is None
                       else self.reference_n[:grid.dim])

    def sample(self, index: int, stream: str = "f", real: bool = False,
               grid: Grid | None = None) -> SpectralField:
        """Deterministic sample ``index`` of the named stream."""
        grid = grid or self.grid
        ref_n = self.ref_n[:grid.dim] if grid.dim < self.grid.dim else self.ref_n
        rng = np.random.default_rng([self.seed, index, _STREAMS.get(stream, 99), grid.dim])
        kmax = [int(math.floor(self.cutoff * n / 2)) for n in ref_n]
        modes = [np.arange(-K, K + 1) for K in kmax]
        shape = tuple(len(m) for m in modes)
        coeff = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)
        mesh = np.meshgrid(*modes, indexing="ij")
        rel = np.max([np.abs(m) / (n / 2) for m, n in zip(mesh, ref_n)], axis=0)
        coeff[rel < self.low_cutoff] = 0.0
        if self.decay:
            coeff *= (1.0 + np.sqrt(sum(m ** 2 for m in mesh))) ** (-self.decay)
        coeff *= self.amplitude / math.sqrt(max(1, np.count_nonzero(coeff)))
        spectrum = np.zeros(grid.shape, dtype=complex)
        spectrum[np.ix_(*[m % n for m, n in zip(modes, grid.n)])] = coeff * grid.size
        values = np.fft.ifftn(spectrum)
        if real:
            values = values.real
        if self.window is not None:
            r2 = sum(np.meshgrid(*[a ** 2 for a in grid.axes], indexing="ij"))
            values = values * np.exp(-r2 / (2.0 * self.window ** 2))
        return SpectralField(grid, values)

    def to_dict(self) -> dict:
        return {"count": self.count, "n": list(self.grid.n), "half_width": list(self.grid.half_width),
                "cutoff": self.cutoff, "amplitude": self.amplitude, "seed": self.seed,
                "window": self.window, "low_cutoff": self.low_cutoff, "decay": self.decay,
                "reference_n": list(self.ref_n)}


# ---------------------------------------------------------------------------
# reports


@dataclass
class LemmaReport:
    """Per-sample sides of one inequality or identity and their statistics.

    For identities ``lhs`` holds the error norm and ``rhs`` the reference norm,
    so the ratio is a relative error compared against ``tolerance``.
    """

    lemma_id: str
    lhs: np.ndarray
    rhs: np.ndarray
    parts: list[str] = field(default_factory=list)
    kind: str = "inequality"
    tolerance: float | None = None
    parameters: dict = field(default_factory=dict)
    witness: dict = field(default_factory=dict)
    boundary_mass: float = 0.0
    stability_factor: float | None = None
    extras: dict = field(default_factory=dict)
    witness_field: SpectralField | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.lhs = np.asarray(self.lhs, dtype=float)
        self.rhs = np.asarray(self.rhs, dtype=float)
        if self.lhs.shape != self.rhs.shape:
            raise ValueError("lhs and rhs must have the same length")
        if not self.parts:
            self.parts = ["main"] * self.lhs.size

    @property
    def ratios(self) -> np.ndarray:
        """LHS/RHS; 0 where both vanish and inf where only the RHS vanishes."""
        with np.errstate(divide="ignore", invalid="ignore"):
            r = self.lhs / self.rhs
        r = np.where(self.rhs > 0, r, np.where(self.lhs > 0, np.inf, 0.0))
        return r

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.ratios)) if self.ratios.size else 0.0

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.ratios)) if self.ratios.size else 0.0

    def quantiles(self, qs=(0.5, 0.9, 0.99)) -> dict[str, float]:
        if not self.ratios.size:
            return {f"q{q:g}": 0.0 for q in qs}
        return {f"q{q:g}": float(np.quantile(self.ratios, q)) for q in qs}

    def part_max(self) -> dict[str, float]:
        r = self.ratios
        return {p: float(np.max(r[[i for i, q in enumerate(self.parts) if q == p]]))
                for p in dict.fromkeys(self.parts)}

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.ratios)))

    @property
    def passed(self) -> bool:
        if not self.finite:
            return False
        if self.kind == "identity":
            return self.max_ratio <= (self.tolerance or IDENTITY_TOLERANCE)
        return True

    def stable(self, tolerance: float = 0.1) -> bool | None:
        if self.stability_factor is None:
            return None
        return abs(self.stability_factor - 1.0) < tolerance

    def to_dict(self) -> dict:
        return {
            "lemma": self.lemma_id, "kind": self.kind, "tolerance": self.tolerance,
            "samples": int(self.lhs.size), "max_ratio": self.max_ratio,
            "mean_ratio": self.mean_ratio, "quantiles": self.quantiles(),
            "part_max": self.part_max(), "witness": self.witness,
            "boundary_mass": self.boundary_mass, "stability_factor": self.stability_factor,
            "passed": self.passed, "parameters": self.parameters, "extras": self.extras,
        }

    def to_ndjson(self, per_sample: bool = False) -> str:
        lines = [json.dumps(self.to_dict(), sort_keys=True, default=_jsonable)]
        if per_sample:
            for i, (a, b, p) in enumerate(zip(self.lhs, self.rhs, self.parts)):
                lines.append(json.dumps({"lemma": self.lemma_id, "sample": i, "part": p,
                                         "lhs": float(a), "rhs": float(b)}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        stab = "-" if self.stability_factor is None else f"{self.stability_factor:.4f}"
        status = "ok" if self.passed else "FAIL"
        return (f"{self.lemma_id:<24} {self.kind:<10} n={self.lhs.size:<5d} "
                f"max={self.max_ratio:.4e} mean={self.mean_ratio:.4e} "
                f"stability={stab} boundary={self.boundary_mass:.1e} {status}")

    def dump_witness(self, path) -> str | None:
        """Write the worst-case sample as a checkpoint; returns its sha256."""
        if self.witness_field is None:
            return None
        return write_checkpoint(path, self.witness_field, 0.0)


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    return str(obj)


def summary_table(reports: Sequence[LemmaReport]) -> str:
    return "\n".join(r.summary() for r in reports) + ("\n" if reports else "")


# ---------------------------------------------------------------------------
# numerics shared by the verifiers


def lp_norm(values: np.ndarray, grid: Grid, p: float) -> float:
    """Discrete L^p norm by the rectangle rule; components combine in the Euclidean norm."""
    a = np.asarray(values)
    if a.ndim == grid.dim + 1:
        a = np.sqrt(np.sum(np.abs(a) ** 2, axis=0))
    else:
        a = np.abs(a)
    if math.isinf(p):
        return float(np.max(a)) if a.size else 0.0
    return float((grid.cell_volume * np.sum(a ** p)) ** (1.0 / p))


def _mult(values: np.ndarray, grid: Grid, symbol: np.ndarray) -> np.ndarray:
    axes = tuple(range(-grid.dim, 0))
    return np.fft.ifftn(np.fft.fftn(values, axes=axes) * symbol, axes=axes)


def _grad(values: np.ndarray, grid: Grid) -> np.ndarray:
    return np.stack([_mult(values, grid, 1j * grid.frequency(k)) for k in range(grid.dim)])


def _evaluate(ens: EnsembleSpec, count: int, work: Callable[[int], tuple],
              workers: int | None = None) -> list:
    n = resolve_threads(workers)
    if n == 1:
        return [work(i) for i in range(count)]
    with concurrent.futures.ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(work, range(count)))


def _build(lemma_id: str, ens: EnsembleSpec, results: list, parameters: dict,
           kind: str = "inequality", tolerance: float | None = None) -> LemmaReport:
    """Assemble a report from per-sample lists of (part, lhs, rhs, witness, mass)."""
    lhs, rhs, parts, owners, mass = [], [], [], [], 0.0
    witnesses = {}
    for idx, entries in enumerate(results):
        for part, a, b, wf, bm in entries:
            lhs.append(a)
            rhs.append(b)
            parts.append(part)
            owners.append(idx)
            mass = max(mass, bm)
            witnesses.setdefault(idx, wf)
    report = LemmaReport(lemma_id, np.array(lhs), np.array(rhs), parts, kind, tolerance,
                         {**parameters, "ensemble": ens.to_dict()}, boundary_mass=mass)
    if report.lhs.size:
        worst = int(np.argmax(report.ratios))
        wf = witnesses[owners[worst]]
        report.witness = {"sample": owners[worst], "part": parts[worst], "seed": ens.seed,
                          "ratio": float(report.ratios[worst]),
                          "hash": wf.content_hash() if wf is not None else None}
        report.witness_field = wf
    return report


def _mass(*fields: SpectralField) -> float:
    return max(boundary_mass_fraction(f) for f in fields)


# ---------------------------------------------------------------------------
# commutator and product estimates


def verify_commutator_L21(ens: EnsembleSpec, s: float = 0.5, l: float = 0.5,
                          S: float | None = None, workers: int | None = None) -> LemmaReport:
    """Commutators of D^s with multiplication by g, against ||grad g||_{H^S}.

    Part ``derivative_j``: ||D^s(g d_j u) - g d_j D^s u|| <= c ||grad g||_{H^S} ||u||_{H^s}.
    Part ``fractional``:   ||D^s(g D^l u) - g D^{s+l} u|| <= c ||grad g||_{H^S} ||u||_{L^2}.
    """
    grid = ens.grid
    d = grid.dim
    if S is None:
        S = d / 2.0 + 0.5
    if not S > d / 2.0:
        raise ParameterError(f"S must exceed d/2 = {d / 2}")
    if s > 1.0 or s <= 0.0:
        raise ParameterError("s must lie in (0, 1]")
    if not math.isclose(s + l, 1.0, abs_tol=1e-12):
        raise ParameterError("s + l must equal 1")
    Ds = D_symbol(s).evaluate(grid)
    Dl = D_symbol(l).evaluate(grid)
    Dsl = D_symbol(s + l).evaluate(grid)

    def work(i):
        g = ens.sample(i, "g", real=True)
        u = ens.sample(i, "u")
        gv, uv = g.scalar, u.scalar
        grad_g = _grad(gv, grid)
        rhs_g = math.sqrt(sum(sobolev_norm(SpectralField(grid, grad_g[k], check=False), S)
                              ** 2 for k in range(d)))
        out = []
        u_hs = sobolev_norm(u, s)
        mass = _mass(g, u)
        Ds_u = _mult(uv, grid, Ds)
        for j in range(d):
            dj = 1j * grid.frequency(j)
            lhs_v = _mult(gv * _mult(uv, grid, dj), grid, Ds) - gv * _mult(Ds_u, grid, dj)
            out.append((f"derivative_{j + 1}", lp_norm(lhs_v, grid, 2), rhs_g * u_hs, g, mass))
        lhs_v = _mult(gv * _mult(uv, grid, Dl), grid, Ds) - gv * _mult(uv, grid, Dsl)
        out.append(("fractional", lp_norm(lhs_v, grid, 2), rhs_g * sobolev_norm(u), g, mass))
        return out

    return _build("commutator_L21", ens, _evaluate(ens, ens.count, work, workers),
                  {"s": s, "l": l, "S": S})


def verify_calderon(ens: EnsembleSpec, p: float = 2, workers: int | None = None) -> LemmaReport:
    """||[D, phi] f||_{L^p} <= C ||grad phi||_{L^inf} ||f||_{L^p} with real phi."""
    if p not in (2, 4):
        raise ParameterError("p must be 2 or 4")
    grid = ens.grid
    D1 = D_symbol(1.0).evaluate(grid)

    def work(i):
        phi = ens.sample(i, "g", real=True)
        f = ens.sample(i, "f")
        pv, fv = phi.scalar, f.scalar
        comm = _mult(pv * fv, grid, D1) - pv * _mult(fv, grid, D1)
        rhs = lp_norm(_grad(pv, grid), grid, math.inf) * lp_norm(fv, grid, p)
        return [("main", lp_norm(comm, grid, p), rhs, phi, _mass(phi, f))]

    return _build(f"calderon_p{p:g}", ens, _evaluate(ens, ens.count, work, workers), {"p": p})


def _check_exponents(r, p1, q1, p2, q2):
    if not 0.5 < r < math.inf:
        raise ParameterError("r must lie in (1/2, inf)")
    for name, v in (("p1", p1), ("q1", q1), ("p2", p2), ("q2", q2)):
        if not 1.0 < v <= math.inf:
            raise ParameterError(f"{name} must lie in (1, inf]")
    inv = 1.0 / r
    if not (math.isclose(inv, 1 / p1 + 1 / q1, abs_tol=1e-12)
            and math.isclose(inv, 1 / p2 + 1 / q2, abs_tol=1e-12)):
        raise ParameterError("exponents must satisfy 1/r = 1/p1 + 1/q1 = 1/p2 + 1/q2")


def verify_kato_ponce_fractional(ens: EnsembleSpec, s: float = 1.0,
                                 exponents: Sequence[float] = (2.0, 2.0, math.inf, math.inf, 2.0),
                                 workers: int | None = None) -> LemmaReport:
    """Fractional Leibniz rules for D^s(fg) (part ``D``) and J^s(fg) (part ``J``).

    ``exponents`` is (r, p1, q1, p2, q2); the right side is
    ||A f||_{p1} ||g||_{q1} + ||f||_{p2} ||A g||_{q2} with A = D^s or J^s.
    """
    r, p1, q1, p2, q2 = (float(e) for e in exponents)
    _check_exponents(r, p1, q1, p2, q2)
    grid = ens.grid
    d = grid.dim
    if not (s > max(0.0, d / r - d) or (s > 0 and float(s).is_integer() and int(s) % 2 == 0)):
        raise ParameterError("s must exceed max(0, d/r - d) or be an even integer")
    symbols = {"D": D_symbol(s).evaluate(grid), "J": J_symbol(s).evaluate(grid)}

    def work(i):
        f = ens.sample(i, "f")
        g = ens.sample(i, "g")
        fv, gv = f.scalar, g.scalar
        out = []
        for part, sym in symbols.items():
            lhs = lp_norm(_mult(fv * gv, grid, sym), grid, r)
            rhs = (lp_norm(_mult(fv, grid, sym), grid, p1) * lp_norm(gv, grid, q1)
                   + lp_norm(fv, grid, p2) * lp_norm(_mult(gv, grid, sym), grid, q2))
            out.append((part, lhs, rhs, f, _mass(f, g)))
        return out

    return _build("kato_ponce", ens, _evaluate(ens, ens.count, work, workers),
                  {"s": s, "exponents": [r, p1, q1, p2, q2]})


def verify_commutator_L23(ens: EnsembleSpec, s: float = 0.5, p: float = 2.0,
                          p1: float | None = None, p2: float | None = None,
                          workers: int | None = None) -> LemmaReport:
    """Fractional commutators with a multiplication operator.

    Part ``i``:  ||D^s(fg) - g D^s f||_{L^p} <= C ||f||_{L^p} ||D^s g||_{L^inf}, 0 < s < 1.
    Part ``ii``: ||J^s(fg) - f J^s g||_{L^p} <= C ||J^{s-1} grad f||_{L^p1} ||g||_{L^p2}.
    """
    if not 0.0 < s < 1.0:
        raise ParameterError("s must lie in (0, 1)")
    if not 1.0 < p < math.inf:
        raise ParameterError("p must lie in (1, inf)")
    p1 = 2.0 * p if p1 is None else float(p1)
    p2 = 2.0 * p if p2 is None else float(p2)
    if not (1.0 < p1 <= math.inf and 1.0 < p2 <= math.inf):
        raise ParameterError("p1 and p2 must lie in (1, inf]")
    if not math.isclose(1.0 / p, 1.0 / p1 + 1.0 / p2, abs_tol=1e-12):
        raise ParameterError("exponents must satisfy 1/p = 1/p1 + 1/p2")
    grid = ens.grid
    Ds = D_symbol(s).evaluate(grid)
    Js = J_symbol(s).evaluate(grid)
    Jm = J_symbol(s - 1.0).evaluate(grid)

    def work(i):
        f = ens.sample(i, "f")
        g = ens.sample(i, "g")
        fv, gv = f.scalar, g.scalar
        mass = _mass(f, g)
        c1 = _mult(fv * gv, grid, Ds) - gv * _mult(fv, grid, Ds)
        r1 = lp_norm(fv, grid, p) * lp_norm(_mult(gv, grid, Ds), grid, math.inf)
        c2 = _mult(fv * gv, grid, Js) - fv * _mult(gv, grid, Js)
        grad = np.stack([_mult(a, grid, Jm) for a in _grad(fv, grid)])
        r2 = lp_norm(grad, grid, p1) * lp_norm(gv, grid, p2)
        return [("i", lp_norm(c1, grid, p), r1, f, mass), ("ii", lp_norm(c2, grid, p), r2, f, mass)]

    return _build("commutator_L23", ens, _evaluate(ens, ens.count, work, workers),
                  {"s": s, "p": p, "p1": p1, "p2": p2})


# ---------------------------------------------------------------------------
# BMO estimates


def verify_bmo_embedding(ens: EnsembleSpec, depth: int = 6,
                         workers: int | None = None) -> LemmaReport:
    """||u||_BMO <= C ||u||_{homogeneous H^{d/2}}."""
    grid = ens.grid

    def work(i):
        u = ens.sample(i, "u")
        return [("main", bmo_norm(u, depth), sobolev_norm(u, grid.dim / 2.0, homogeneous=True),
                 u, _mass(u))]

    return _build("bmo_embedding", ens, _evaluate(ens, ens.count, work, workers), {"depth": depth})


def _interpolation_sides(f: SpectralField, depth: int) -> tuple[float, float]:
    grid = f.grid
    half = SpectralField(grid, _mult(f.values, grid, D_symbol(0.5).evaluate(grid)), check=False)
    grad = SpectralField(grid, _grad(f.scalar, grid), check=False)
    return bmo_norm(half, depth), math.sqrt(bmo_norm(f, depth) * bmo_norm(grad, depth))


def _weight_profile(grid: Grid, k: int = 0) -> SpectralField:
    """x_k/<x_k> tapered smoothly to zero before the box faces."""
    R = grid.half_width[k]

    def func(*x):
        xk = x[k]
        return xk / japanese(xk) * np.exp(-(xk / (0.75 * R)) ** 16)

    return SpectralField.from_function(grid, func)


def verify_interpolation(ens: EnsembleSpec, depth: int = 6,
                         workers: int | None = None) -> LemmaReport:
    """||D^{1/2} f||_BMO <= C ||f||_BMO^{1/2} ||grad f||_BMO^{1/2}.

    ``extras['weight_ratio']`` holds the ratio for the tapered weight x_1/<x_1>.
    """
    def work(i):
        f = ens.sample(i, "f")
        lhs, rhs = _interpolation_sides(f, depth)
        return [("main", lhs, rhs, f, _mass(f))]

    report = _build("interpolation", ens, _evaluate(ens, ens.count, work, workers),
                    {"depth": depth})
    wl, wr = _interpolation_sides(_weight_profile(ens.grid), depth)
    report.extras["weight_ratio"] = wl / wr
    return report


def interpolation_dilation_study(grid: Grid, lambdas: Sequence[float] = (1.0, 2.0, 4.0),
                                 width: float | None = None, depth: int = 6) -> dict[float, float]:
    """Interpolation ratio for f(lambda x) with f a fixed smooth bump."""
    width = width or grid.half_width[0] / 8.0
    out = {}
    for lam in lambdas:
        def func(*x, lam=lam):
            r2 = sum((lam * xi) ** 2 for xi in x)
            return np.exp(-r2 / (2 * width ** 2)) * (1.0 + 0.5 * lam * x[0] / width)
        lhs, rhs = _interpolation_sides(SpectralField.from_function(grid, func), depth)
        out[float(lam)] = lhs / rhs
    return out


# ---------------------------------------------------------------------------
# derivative halving


def halving_sides(u: SpectralField, w: SpectralField, v: np.ndarray, k: int = 0) -> tuple[float, float]:
    """Both sides of the halving estimate for given u, w and real profile v(x_k)."""
    grid = u.grid
    xk = grid.axes[k]
    hk = grid.spacing[k]
    V = cumulative_trapezoid(v, xk, initial=0.0)
    prod = w.scalar * _mult(u.scalar, grid, 1j * grid.frequency(k))
    others = tuple(i for i in range(grid.dim) if i != k)
    vol = float(np.prod([grid.spacing[i] for i in others])) if others else 1.0
    profile = np.sum(prod, axis=others) * vol if others else prod
    lhs = abs(np.sum(profile * V) * hk)
    Dk = Dk_symbol(k, 0.5).evaluate(grid)
    du = lp_norm(_mult(u.scalar, grid, Dk), grid, 2)
    dw = lp_norm(_mult(w.scalar, grid, Dk), grid, 2)
    v_l1 = float(np.sum(np.abs(v)) * hk)
    v_l2 = float(np.sqrt(np.sum(np.abs(v) ** 2) * hk))
    rhs = du * dw * v_l1 + du * lp_norm(w.scalar, grid, 2) * v_l2
    return float(lhs), float(rhs)


def verify_halving(ens: EnsembleSpec, k: int = 0, workers: int | None = None) -> LemmaReport:
    """Trading d_k on u for half derivatives, against a primitive of v(x_k)."""
    grid = ens.grid
    if grid.dim < 2:
        raise ParameterError("the halving estimate needs d >= 2")
    line = Grid((grid.n[k],), (grid.half_width[k],))
    line_ens = replace(ens, grid=line, reference_n=(ens.ref_n[k],))

    def work(i):
        u = ens.sample(i, "u")
        w = ens.sample(i, "w")
        v = line_ens.sample(i, "v", real=True).scalar.real
        lhs, rhs = halving_sides(u, w, v, k)
        return [("main", lhs, rhs, u, _mass(u, w))]

    return _build("halving", ens, _evaluate(ens, ens.count, work, workers), {"k": k})


# ---------------------------------------------------------------------------
# weighted moments


def weight_exponent(N: int, gamma: Sequence[int]) -> int:
    """Moment order M used on the right side: 2N(|gamma| + 1)."""
    return 2 * int(N) * (int(sum(gamma)) + 1)


def weight_lemma_sides(phi: SpectralField, N: int, gamma: Sequence[int]) -> dict[str, tuple[float, float]]:
    """Both sides of the two weighted moment bounds for one field.

    Right sides are A*B + A^{(2N+1)/(2N)} B^{(2N-1)/(2N)} with
    A = ||phi||_{H^{|gamma|+1}} and B = |||x|^M phi||_{L^2}.
    """
    grid = phi.grid
    order = int(sum(gamma))
    M = weight_exponent(N, gamma)
    r2 = sum(np.meshgrid(*[a ** 2 for a in grid.axes], indexing="ij"))
    x2N = r2 ** N
    sym = np.ones(grid.shape, dtype=complex)
    for j, g in enumerate(gamma):
        sym = sym * (1j * grid.frequency(j)) ** g
    dg = _mult(phi.scalar, grid, sym)
    js = _mult(phi.scalar, grid, J_symbol(order).evaluate(grid))
    lhs1 = float(np.sum(x2N * np.abs(dg) ** 2) * grid.cell_volume)
    lhs2 = float(np.sum(x2N * np.abs(js) ** 2) * grid.cell_volume)
    A = sobolev_norm(phi, order + 1)
    B = float(np.sqrt(np.sum(r2 ** M * np.abs(phi.scalar) ** 2) * grid.cell_volume))
    theta = (2 * N + 1) / (2 * N)
    rhs = A * B + A ** theta * B ** (2 - theta)
    return {"derivative": (lhs1, rhs), "bessel": (lhs2, rhs)}


def verify_weight_lemma(ens: EnsembleSpec, N: int = 1, gamma: Sequence[int] | None = None,
                        max_boundary_mass: float = 1e-6,
                        workers: int | None = None) -> LemmaReport:
    """Weighted moments of derivatives bounded by Sobolev norms and higher moments."""
    grid = ens.grid
    if N < 1:
        raise ParameterError("N must be a positive integer")
    gamma = tuple(gamma) if gamma is not None else (1,) + (0,) * (grid.dim - 1)
    if len(gamma) != grid.dim or any(g < 0 for g in gamma):
        raise ParameterError("gamma must be a non-negative multi-index of length d")
    M = weight_exponent(N, gamma)
    r2 = sum(np.meshgrid(*[a ** 2 for a in grid.axes], indexing="ij"))

    def work(i):
        phi = ens.sample(i, "phi")
        mass = boundary_mass_fraction(phi, r2 ** M)
        if mass > max_boundary_mass:
            raise BoundaryMassError(f"sample {i}: weighted boundary mass {mass:.3g} "
                                    f"exceeds {max_boundary_mass:.1g}")
        sides = weight_lemma_sides(phi, N, gamma)
        return [(part, a, b, phi, mass) for part, (a, b) in sides.items()]

    return _build("weight_lemma", ens, _evaluate(ens, ens.count, work, workers),
                  {"N": N, "gamma": list(gamma), "M": M})


# ---------------------------------------------------------------------------
# exact identities


def verify_Dhalf_x_identity(ens: EnsembleSpec, interior: float = 0.5,
                            tolerance: float = IDENTITY_TOLERANCE,
                            workers: int | None = None) -> LemmaReport:
    """[D^{1/2}, x] f = (1/2) H D^{-1/2} f, compared on |x| <= interior * R.

    Samples must be windowed and have no spectral mass near zero frequency
    (``low_cutoff > 0``), so x f is smooth across the box edge and D^{-1/2} f
    is well defined.
    """
    grid = ens.grid
    if grid.dim != 1:
        raise ParameterError("the identity is checked on one-dimensional grids")
    x = grid.axes[0]
    Dh = D_symbol(0.5).evaluate(grid)
    xi = np.abs(grid.frequency(0))
    inv = np.where(xi > 0, 1.0 / np.sqrt(np.where(xi > 0, xi, 1.0)), 0.0)
    H = hilbert_symbol(0).evaluate(grid)
    mask = np.abs(x) <= interior * grid.half_width[0]

    def work(i):
        f = ens.sample(i, "f")
        fv = f.scalar
        lhs = _mult(x * fv, grid, Dh) - x * _mult(fv, grid, Dh)
        rhs = 0.5 * _mult(fv, grid, H * inv)
        err = float(np.sqrt(np.sum(np.abs(lhs - rhs)[mask] ** 2)))
        ref = float(np.sqrt(np.sum(np.abs(rhs)[mask] ** 2)))
        return [("main", err, ref, f, _mass(f))]

    return _build("dhalf_x_identity", ens, _evaluate(ens, ens.count, work, workers),
                  {"interior": interior}, kind="identity", tolerance=tolerance)


def verify_operator_identities(ens: EnsembleSpec, s: float = 1.5,
                               tolerance: float = IDENTITY_TOLERANCE,
                               workers: int | None = None) -> LemmaReport:
    """H_k^2 = -I on mean-free fields, D^{1/2} D^{1/2} = D and J^s J^{-s} = I."""
    grid = ens.grid
    H = hilbert_symbol(0).evaluate(grid)
    Dh = D_symbol(0.5).evaluate(grid)
    D1 = D_symbol(1.0).evaluate(grid)
    Jp = J_symbol(s).evaluate(grid)
    Jm = J_symbol(-s).evaluate(grid)

    def rel(a, b):
        ref = lp_norm(b, grid, 2)
        return lp_norm(a - b, grid, 2), ref

    def work(i):
        f = ens.sample(i, "f")
        fv = f.scalar
        mass = _mass(f)
        mean_free = fv - fv.mean()
        out = []
        out.append(("hilbert_square", *rel(_mult(_mult(mean_free, grid, H), grid, H), -mean_free),
                    f, mass))
        out.append(("half_compose", *rel(_mult(_mult(fv, grid, Dh), grid, Dh), _mult(fv, grid, D1)),
                    f, mass))
        out.append(("bessel_inverse", *rel(_mult(_mult(fv, grid, Jp), grid, Jm), fv), f, mass))
        return out

    return _build("operator_identities", ens, _evaluate(ens, ens.count, work, workers),
                  {"s": s}, kind="identity", tolerance=tolerance)


def _weight(x):
    return x / japanese(x)


def verify_weight_derivative(points: Sequence[float] = (1.0, -3.0, 0.5, -0.25, 7.0, -12.0),
                             step: float = 1e-4,
                             tolerance: float = IDENTITY_TOLERANCE) -> LemmaReport:
    """Central-difference derivative of x/<x> against 1/<x>^2 away from x = 0."""
    pts = np.asarray(points, dtype=float)
    if np.any(np.abs(pts) <= step):
        raise ParameterError("points must stay away from the kink at x = 0")
    fd = (_weight(pts + step) - _weight(pts - step)) / (2.0 * step)
    exact = 1.0 / japanese(pts) ** 2
    report = LemmaReport("weight_derivative", np.abs(fd - exact), np.abs(exact),
                         [f"x={p:g}" for p in pts], "identity", tolerance,
                         {"points": pts.tolist(), "step": step})
    report.extras["derivative"] = {f"{p:g}": float(v) for p, v in zip(pts, fd)}
    worst = int(np.argmax(report.ratios))
    report.witness = {"part": report.parts[worst], "ratio": float(report.ratios[worst])}
    return report


# ---------------------------------------------------------------------------
# resolution study and suite registry


def resolution_study(verifier: Callable[..., LemmaReport], ens: EnsembleSpec,
                     **kwargs) -> tuple[LemmaReport, LemmaReport]:
    """Run on ``ens`` and on the same fields sampled twice as finely.

    The fine report's ``stability_factor`` is max ratio (fine) / max ratio (coarse).
    """
    coarse = verifier(ens, **kwargs)
    fine = verifier(ens.refined(), **kwargs)
    if coarse.max_ratio > 0:
        fine.stability_factor = fine.max_ratio / coarse.max_ratio
    elif fine.max_ratio == 0:
        fine.stability_factor = 1.0
    else:
        fine.stability_factor = math.inf
    coarse.stability_factor = fine.stability_factor
    return coarse, fine


def _line(n, R=8.0 * np.pi):
    return Grid.cube(1, n, R)


def _plane(n, R=8.0 * np.pi):
    return Grid.cube(2, n, R)


@dataclass(frozen=True)
class Suite:
    name: str
    verifier: Callable[..., LemmaReport]
    ensemble: Callable[[int, int, int], EnsembleSpec]
    kwargs: dict = field(default_factory=dict)
    identity: bool = False


def _generic(dim):
    def make(count, n, seed):
        grid = _line(n) if dim == 1 else _plane(n)
        return EnsembleSpec(count, grid, cutoff=1.0 / 3.0, seed=seed)
    return make


def _windowed(dim, width=3.0, low=0.0, cutoff=1.0 / 3.0):
    def make(count, n, seed):
        grid = _line(n) if dim == 1 else _plane(n)
        return EnsembleSpec(count, grid, cutoff=cutoff, seed=seed, window=width, low_cutoff=low)
    return make


SUITES: dict[str, Suite] = {
    "operator-identities": Suite("operator-identities", verify_operator_identities, _generic(1),
                                 identity=True),
    "dhalf-x": Suite("dhalf-x", verify_Dhalf_x_identity, _windowed(1, 3.5, 0.35, 0.5),
                     identity=True),
    "commutator-L21": Suite("commutator-L21", verify_commutator_L21, _generic(1)),
    "calderon-p2": Suite("calderon-p2", verify_calderon, _generic(1), {"p": 2}),
    "calderon-p4": Suite("calderon-p4", verify_calderon, _generic(1), {"p": 4}),
    "kato-ponce": Suite("kato-ponce", verify_kato_ponce_fractional, _generic(1)),
    "commutator-L23": Suite("commutator-L23", verify_commutator_L23, _generic(1)),
    "bmo-embedding": Suite("bmo-embedding", verify_bmo_embedding, _generic(1)),
    "interpolation": Suite("interpolation", verify_interpolation, _windowed(1, 6.0)),
    "halving": Suite("halving", verify_halving, _windowed(2, 4.0)),
    "weight-lemma": Suite("weight-lemma", verify_weight_lemma, _windowed(1, 3.0)),
}


def run_suite(name: str, count: int = 100, n: int = 128, seed: int = 0,
              doubling: bool = True, workers: int | None = None) -> LemmaReport:
    """Run a registered suite; with ``doubling`` the report carries its stability factor."""
    suite = SUITES[name]
    ens = suite.ensemble(count, n, seed)
    kwargs = dict(suite.kwargs, workers=workers)
    if doubling and not suite.identity:
        _, fine = resolution_study(suite.verifier, ens, **kwargs)
        return fine
    return suite.verifier(ens, **kwargs)
