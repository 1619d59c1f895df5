"""Periodic-grid fields and Fourier multiplier operators.

The whole space R^d is replaced by the periodic box [-R, R)^d sampled on a
uniform grid.  Frequencies follow xi = pi*k/R, so symbol formulas read the
same as their continuum counterparts.  Every operator here is a pointwise
product in frequency space.
"""
from __future__ import annotations

import functools
import hashlib
import struct
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Grid", "SpectralField", "Multiplier", "MultiIndex",
    "SymbolOverflowError", "SingularSymbolError", "BoundaryMassWarning",
    "apply_multiplier", "partial_derivative", "multi_derivative",
    "fractional_D", "fractional_J", "fractional_Dk", "lambda_k", "hilbert_k",
    "sobolev_norm", "bmo_norm", "weighted_L2_norm", "slice_L2_norm",
    "slice_L2_profile", "boundary_mass_fraction", "japanese",
    "multi_indices", "write_checkpoint", "read_checkpoint",
    "D_symbol", "J_symbol", "Dk_symbol", "Lambda_symbol", "hilbert_symbol",
    "derivative_symbol",
]

DEFAULT_HALF_WIDTH = 20.0 * np.pi
MAX_DERIVATIVE_ORDER = 16
MAX_SYMBOL_MAGNITUDE = 1e15
CHECKPOINT_MAGIC = b"QNLS"
CHECKPOINT_VERSION = 1


class SymbolOverflowError(ValueError):
    """Derivative order too high for the grid resolution."""


class SingularSymbolError(ValueError):
    """A multiplier produced non-finite values."""


class BoundaryMassWarning(UserWarning):
    """Weighted mass near the box boundary exceeds the configured fraction."""


def japanese(x):
    """Japanese bracket with the convention <x> = 1 + |x|."""
    return 1.0 + np.abs(x)


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on [-R, R)^d.

    ``n`` and ``half_width`` hold one entry per axis.
    """

    n: tuple[int, ...]
    half_width: tuple[float, ...]

    def __post_init__(self):
        n = tuple(int(v) for v in self.n)
        R = tuple(float(v) for v in self.half_width)
        if len(n) not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {len(n)}")
        if len(R) != len(n):
            raise ValueError("half_width needs one entry per axis")
        for v in n:
            if v < 8 or v % 2:
                raise ValueError(f"points per axis must be even and >= 8, got {v}")
        for v in R:
            if not v > 0 or not np.isfinite(v):
                raise ValueError(f"half width must be positive, got {v}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "half_width", R)

    @classmethod
    def cube(cls, dim: int, n: int, half_width: float = DEFAULT_HALF_WIDTH) -> "Grid":
        return cls((n,) * dim, (half_width,) * dim)

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(2.0 * R / n for n, R in zip(self.n, self.half_width))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def refined(self, factor: int = 2) -> "Grid":
        """Same box with ``factor`` times as many points per axis."""
        return Grid(tuple(factor * v for v in self.n), self.half_width)

    @functools.cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(-R + np.arange(n) * (2.0 * R / n)
                     for n, R in zip(self.n, self.half_width))

    @functools.cached_property
    def frequencies(self) -> tuple[np.ndarray, ...]:
        """Per-axis frequencies xi = pi*k/R in FFT order."""
        return tuple(np.fft.fftfreq(n, d=1.0 / n) * (np.pi / R)
                     for n, R in zip(self.n, self.half_width))

    @functools.cached_property
    def mode_numbers(self) -> tuple[np.ndarray, ...]:
        return tuple(np.fft.fftfreq(n, d=1.0 / n) for n in self.n)

    def coordinate(self, k: int) -> np.ndarray:
        """Coordinate x_k broadcast against the grid shape."""
        return _broadcast_axis(self.axes[k], k, self.dim)

    def frequency(self, k: int) -> np.ndarray:
        """Frequency xi_k broadcast against the grid shape."""
        return _broadcast_axis(self.frequencies[k], k, self.dim)

    @functools.cached_property
    def xi_squared(self) -> np.ndarray:
        return sum(self.frequency(k) ** 2 for k in range(self.dim))

    @functools.cached_property
    def dealias_mask(self) -> np.ndarray:
        """Boolean mask keeping modes with |k_j| < n_j/3 on every axis."""
        mask = np.ones(self.shape, dtype=bool)
        for k, (kk, n) in enumerate(zip(self.mode_numbers, self.n)):
            mask &= _broadcast_axis(np.abs(kk) < n / 3.0, k, self.dim)
        return mask

    def cutoff_mask(self, fraction: float, reference: "Grid | None" = None) -> np.ndarray:
        """Modes with |k_j| <= fraction * (reference Nyquist) on every axis."""
        ref = reference or self
        mask = np.ones(self.shape, dtype=bool)
        for k, kk in enumerate(self.mode_numbers):
            kmax = fraction * ref.n[k] / 2.0
            mask &= _broadcast_axis(np.abs(kk) <= kmax, k, self.dim)
        return mask


def _broadcast_axis(v: np.ndarray, k: int, dim: int) -> np.ndarray:
    shape = [1] * dim
    shape[k] = -1
    return np.reshape(v, shape)


def _fft(values: np.ndarray, dim: int) -> np.ndarray:
    return np.fft.fftn(values, axes=tuple(range(-dim, 0)))


def _ifft(values: np.ndarray, dim: int) -> np.ndarray:
    return np.fft.ifftn(values, axes=tuple(range(-dim, 0)))


# ---------------------------------------------------------------------------
# fields


class SpectralField:
    """Immutable complex field with ``m`` components on a periodic grid.

    Values are stored with a leading component axis, shape ``(m, *grid.shape)``.
    A plain ``grid.shape`` array is accepted and treated as ``m = 1``.
    """

    __slots__ = ("grid", "values", "__weakref__")

    def __init__(self, grid: Grid, values, *, check: bool = True):
        arr = np.asarray(values, dtype=complex)
        if arr.shape == grid.shape:
            arr = arr[np.newaxis]
        if arr.ndim != grid.dim + 1 or arr.shape[1:] != grid.shape:
            raise ValueError(f"values of shape {arr.shape} do not fit grid {grid.shape}")
        if check and not np.all(np.isfinite(arr)):
            raise ValueError("field values must be finite")
        if check:
            arr = np.array(arr, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("SpectralField is immutable")

    # construction -----------------------------------------------------
    @classmethod
    def zeros(cls, grid: Grid, components: int = 1) -> "SpectralField":
        return cls(grid, np.zeros((components,) + grid.shape, dtype=complex))

    @classmethod
    def from_function(cls, grid: Grid, func: Callable[..., np.ndarray]) -> "SpectralField":
        """Sample ``func(x_1, ..., x_d)`` on the grid."""
        mesh = np.meshgrid(*grid.axes, indexing="ij")
        return cls(grid, np.broadcast_to(func(*mesh), grid.shape))

    @classmethod
    def from_spectrum(cls, grid: Grid, spectrum) -> "SpectralField":
        return cls(grid, _ifft(np.asarray(spectrum, dtype=complex), grid.dim))

    # views --------------------------------------------------------------
    @property
    def components(self) -> int:
        return self.values.shape[0]

    @property
    def scalar(self) -> np.ndarray:
        """Values of a one-component field with the component axis dropped."""
        if self.components != 1:
            raise ValueError("field has more than one component")
        return self.values[0]

    def spectrum(self) -> np.ndarray:
        return _fft(self.values, self.grid.dim)

    def conj(self) -> "SpectralField":
        return SpectralField(self.grid, np.conj(self.values), check=False)

    @property
    def real(self) -> "SpectralField":
        return SpectralField(self.grid, self.values.real, check=False)

    @property
    def imag(self) -> "SpectralField":
        return SpectralField(self.grid, self.values.imag, check=False)

    def mean(self) -> np.ndarray:
        return self.values.reshape(self.components, -1).mean(axis=1)

    def dealiased(self) -> "SpectralField":
        return SpectralField.from_spectrum(self.grid, self.spectrum() * self.grid.dealias_mask)

    def content_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()

    # arithmetic -------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, SpectralField):
            if other.grid != self.grid:
                raise ValueError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return SpectralField(self.grid, self.values + self._coerce(other), check=False)

    __radd__ = __add__

    def __sub__(self, other):
        return SpectralField(self.grid, self.values - self._coerce(other), check=False)

    def __rsub__(self, other):
        return SpectralField(self.grid, self._coerce(other) - self.values, check=False)

    def __mul__(self, other):
        return SpectralField(self.grid, self.values * self._coerce(other), check=False)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return SpectralField(self.grid, self.values / self._coerce(other), check=False)

    def __neg__(self):
        return SpectralField(self.grid, -self.values, check=False)

    def __repr__(self):
        return f"SpectralField(grid={self.grid.shape}, components={self.components})"


# ---------------------------------------------------------------------------
# multipliers


@dataclass(frozen=True)
class Multiplier:
    """Fourier multiplier with an explicit value at the zero frequency.

    ``symbol`` receives the tuple of broadcast frequency arrays
    ``(xi_1, ..., xi_d)`` and returns the symbol on that mesh.
    ``zero_mode_value=None`` keeps whatever the symbol gives at xi = 0.
    """

    symbol: Callable[[tuple[np.ndarray, ...]], np.ndarray]
    zero_mode_value: complex | None = None
    name: str = "multiplier"

    def evaluate(self, grid: Grid) -> np.ndarray:
        return _evaluate_symbol(self, grid)

    def __mul__(self, other: "Multiplier") -> "Multiplier":
        a, b = self, other

        def symbol(xi):
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                return np.asarray(a.symbol(xi)) * np.asarray(b.symbol(xi))

        if a.zero_mode_value is None and b.zero_mode_value is None:
            zero = None
        else:
            za = a.zero_mode_value if a.zero_mode_value is not None else a.symbol(_zero_xi(1))
            zb = b.zero_mode_value if b.zero_mode_value is not None else b.symbol(_zero_xi(1))
            zero = complex(np.asarray(za).ravel()[0]) * complex(np.asarray(zb).ravel()[0])
        return Multiplier(symbol, zero, f"{a.name}*{b.name}")


def _zero_xi(dim):
    return tuple(np.zeros(1) for _ in range(dim))


@functools.lru_cache(maxsize=256)
def _evaluate_symbol(m: Multiplier, grid: Grid) -> np.ndarray:
    xi = tuple(grid.frequency(k) for k in range(grid.dim))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        sym = np.broadcast_to(np.asarray(m.symbol(xi), dtype=complex), grid.shape).copy()
    if m.zero_mode_value is not None:
        sym[(0,) * grid.dim] = m.zero_mode_value
    if not np.all(np.isfinite(sym)):
        raise SingularSymbolError(
            f"symbol {m.name!r} is not finite on the grid; give it a zero_mode_value")
    sym.flags.writeable = False
    return sym


@functools.lru_cache(maxsize=None)
def D_symbol(s: float) -> Multiplier:
    """|xi|^s with value 0 at the origin for every s, so D^0 removes the mean."""
    def symbol(xi):
        return sum(v ** 2 for v in xi) ** (s / 2.0)
    return Multiplier(symbol, 0.0, f"D^{s}")


@functools.lru_cache(maxsize=None)
def J_symbol(s: float) -> Multiplier:
    """(1 + |xi|^2)^{s/2}."""
    def symbol(xi):
        return (1.0 + sum(v ** 2 for v in xi)) ** (s / 2.0)
    return Multiplier(symbol, None, f"J^{s}")


@functools.lru_cache(maxsize=None)
def Dk_symbol(k: int, s: float) -> Multiplier:
    """|xi_k|^s, zero wherever xi_k = 0 (for s != 0)."""
    def symbol(xi):
        a = np.abs(xi[k])
        if s == 0:
            return np.ones_like(a)
        out = np.where(a > 0, a, 1.0) ** s
        return np.where(a > 0, out, 0.0)
    return Multiplier(symbol, 0.0 if s != 0 else 1.0, f"D_{k}^{s}")


@functools.lru_cache(maxsize=None)
def Lambda_symbol(k: int, s: float) -> Multiplier:
    """(1 + sum_{i != k} xi_i^2)^{s/2}; constant 1 in one dimension."""
    def symbol(xi):
        rest = sum((v ** 2 for i, v in enumerate(xi) if i != k), np.zeros(1))
        return (1.0 + rest) ** (s / 2.0)
    return Multiplier(symbol, None, f"Lambda_{k}^{s}")


@functools.lru_cache(maxsize=None)
def hilbert_symbol(k: int) -> Multiplier:
    """-i sgn(xi_k)."""
    def symbol(xi):
        return -1j * np.sign(xi[k])
    return Multiplier(symbol, 0.0, f"H_{k}")


@functools.lru_cache(maxsize=None)
def derivative_symbol(orders: tuple[int, ...]) -> Multiplier:
    """prod_j (i xi_j)^{alpha_j}."""
    def symbol(xi):
        out = np.ones(1, dtype=complex)
        for v, a in zip(xi, orders):
            if a:
                out = out * (1j * v) ** a
        return out
    return Multiplier(symbol, None, f"d^{orders}")


@dataclass(frozen=True, order=True)
class MultiIndex:
    """Multi-index alpha = (alpha_1, ..., alpha_d)."""

    orders: tuple[int, ...]

    def __post_init__(self):
        orders = tuple(int(a) for a in self.orders)
        if any(a < 0 for a in orders):
            raise ValueError("multi-index entries must be non-negative")
        object.__setattr__(self, "orders", orders)

    @property
    def total(self) -> int:
        return sum(self.orders)

    @property
    def dim(self) -> int:
        return len(self.orders)

    @classmethod
    def unit(cls, dim: int, k: int, times: int = 1) -> "MultiIndex":
        orders = [0] * dim
        orders[k] = times
        return cls(tuple(orders))

    def __add__(self, other: "MultiIndex") -> "MultiIndex":
        return MultiIndex(tuple(a + b for a, b in zip(self.orders, other.orders)))

    def __str__(self):
        return "a" + "".join(str(a) for a in self.orders)


def multi_indices(dim: int, max_total: int, min_total: int = 0) -> list[MultiIndex]:
    """All multi-indices with ``min_total <= |alpha| <= max_total``, sorted."""
    out = []

    def rec(prefix, remaining):
        if len(prefix) == dim:
            if sum(prefix) >= min_total:
                out.append(MultiIndex(tuple(prefix)))
            return
        for a in range(remaining + 1):
            rec(prefix + [a], remaining - a)

    rec([], max_total)
    return sorted(out, key=lambda a: (a.total, tuple(-v for v in a.orders)))


# ---------------------------------------------------------------------------
# operators


def apply_multiplier(f: SpectralField, m: Multiplier) -> SpectralField:
    sym = m.evaluate(f.grid)
    out = _ifft(f.spectrum() * sym, f.grid.dim)
    if not np.all(np.isfinite(out)):
        raise SingularSymbolError(f"non-finite output from symbol {m.name!r}")
    return SpectralField(f.grid, out, check=False)


def partial_derivative(f: SpectralField, k: int) -> SpectralField:
    """Spectral derivative along axis ``k`` (0-based)."""
    return apply_multiplier(f, derivative_symbol(MultiIndex.unit(f.grid.dim, k).orders))


def multi_derivative(f: SpectralField, alpha: MultiIndex | Sequence[int],
                     max_order: int = MAX_DERIVATIVE_ORDER,
                     max_symbol: float = MAX_SYMBOL_MAGNITUDE) -> SpectralField:
    """Apply prod_j (i xi_j)^{alpha_j}.

    Raises :class:`SymbolOverflowError` when ``|alpha|`` exceeds ``max_order``
    or when the largest symbol value on the grid exceeds ``max_symbol``.
    """
    alpha = alpha if isinstance(alpha, MultiIndex) else MultiIndex(tuple(alpha))
    if alpha.dim != f.grid.dim:
        raise ValueError("multi-index dimension does not match the grid")
    if alpha.total > max_order:
        raise SymbolOverflowError(f"|alpha| = {alpha.total} exceeds the cap {max_order}")
    if alpha.total == 0:
        return f
    peak = np.prod([np.max(np.abs(xi)) ** a for xi, a in zip(f.grid.frequencies, alpha.orders)])
    if peak > max_symbol:
        raise SymbolOverflowError(
            f"symbol magnitude {peak:.3g} for alpha={alpha.orders} exceeds {max_symbol:.3g}")
    return apply_multiplier(f, derivative_symbol(alpha.orders))


def fractional_D(f: SpectralField, s: float) -> SpectralField:
    return apply_multiplier(f, D_symbol(float(s)))


def fractional_J(f: SpectralField, s: float) -> SpectralField:
    return apply_multiplier(f, J_symbol(float(s)))


def fractional_Dk(f: SpectralField, k: int, s: float) -> SpectralField:
    return apply_multiplier(f, Dk_symbol(int(k), float(s)))


def lambda_k(f: SpectralField, k: int, s: float) -> SpectralField:
    return apply_multiplier(f, Lambda_symbol(int(k), float(s)))


def hilbert_k(f: SpectralField, k: int) -> SpectralField:
    return apply_multiplier(f, hilbert_symbol(int(k)))


# ---------------------------------------------------------------------------
# norms


def _spectral_l2(grid: Grid, spectrum: np.ndarray) -> float:
    return float(np.sqrt(grid.cell_volume / grid.size * np.sum(np.abs(spectrum) ** 2)))


def sobolev_norm(f: SpectralField, s: float = 0.0, homogeneous: bool = False) -> float:
    """||J^s f||_{L^2}, or ||D^s f||_{L^2} when ``homogeneous``."""
    grid = f.grid
    if s == 0 and not homogeneous:
        return float(np.sqrt(grid.cell_volume * np.sum(np.abs(f.values) ** 2)))
    sym = (D_symbol if homogeneous else J_symbol)(float(s)).evaluate(grid)
    return _spectral_l2(grid, f.spectrum() * sym)


def bmo_norm(f: SpectralField, depth: int = 6) -> float:
    """Dyadic BMO surrogate: max mean absolute deviation over dyadic cubes."""
    grid = f.grid
    vals = f.values
    best = 0.0
    for level in range(depth + 1):
        blocks = 2 ** level
        if any(n % blocks for n in grid.n):
            break
        shape = [f.components]
        for n in grid.n:
            shape += [blocks, n // blocks]
        v = vals.reshape(shape)
        inner = tuple(2 + 2 * j for j in range(grid.dim))
        mean = v.mean(axis=inner, keepdims=True)
        dev = np.sqrt(np.sum(np.abs(v - mean) ** 2, axis=0))
        best = max(best, float(np.max(dev.mean(axis=tuple(a - 1 for a in inner)))))
    return best


def boundary_mass_fraction(f: SpectralField, weight: np.ndarray | None = None,
                           edge: float = 0.05) -> float:
    """Share of (weighted) |f|^2 mass within ``edge*R`` of any box face."""
    grid = f.grid
    dens = np.sum(np.abs(f.values) ** 2, axis=0)
    if weight is not None:
        dens = dens * weight
    total = float(np.sum(dens))
    if total == 0.0:
        return 0.0
    near = np.zeros(grid.shape, dtype=bool)
    for k in range(grid.dim):
        R = grid.half_width[k]
        near |= np.abs(grid.coordinate(k)) >= (1.0 - edge) * R
    return float(np.sum(dens[near]) / total)


def weighted_L2_norm(f: SpectralField, k: int, p: float = 1.0,
                     boundary_fraction: float = 1e-6, edge: float = 0.05) -> float:
    """||<x_k>^p f||_{L^2}; warns if the weighted mass reaches the box edge."""
    if p < 0:
        raise ValueError("weight power must be non-negative")
    w = japanese(f.grid.coordinate(k)) ** (2.0 * p)
    frac = boundary_mass_fraction(f, w, edge)
    if frac > boundary_fraction:
        warnings.warn(f"boundary cells hold {frac:.3g} of the weighted mass "
                      f"(allowed {boundary_fraction:.1g})", BoundaryMassWarning, stacklevel=2)
    dens = np.sum(np.abs(f.values) ** 2, axis=0) * w
    return float(np.sqrt(f.grid.cell_volume * np.sum(dens)))


def slice_L2_profile(f: SpectralField, k: int) -> np.ndarray:
    """Hyperplane norms ||f(x_k, .)||_{L^2(R^{d-1})} for every grid value of x_k.

    In one dimension there is nothing to integrate and the profile is |f|.
    """
    grid = f.grid
    dens = np.sum(np.abs(f.values) ** 2, axis=0)
    others = tuple(i for i in range(grid.dim) if i != k)
    if others:
        h = np.prod([grid.spacing[i] for i in others])
        dens = np.sum(dens, axis=others) * h
    return np.sqrt(dens)


def slice_L2_norm(f: SpectralField, k: int, j: int) -> float:
    return float(slice_L2_profile(f, k)[j])


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, field: SpectralField, time: float) -> str:
    """Write a binary checkpoint and return the sha256 of the file bytes."""
    grid = field.grid
    d = grid.dim
    header = struct.pack(f"<4sII{d}I{d}dId", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, d,
                         *grid.n, *grid.half_width, field.components, float(time))
    payload = np.ascontiguousarray(field.values, dtype="<c8").tobytes()
    data = header + payload
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path) -> tuple[SpectralField, float]:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, version, d = struct.unpack_from("<4sII", data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    fmt = f"<4sII{d}I{d}dId"
    fields = struct.unpack_from(fmt, data, 0)
    n = fields[3:3 + d]
    R = fields[3 + d:3 + 2 * d]
    m, time = fields[3 + 2 * d], fields[4 + 2 * d]
    grid = Grid(tuple(n), tuple(R))
    offset = struct.calcsize(fmt)
    values = np.frombuffer(data, dtype="<c8", offset=offset).reshape((m,) + grid.shape)
    return SpectralField(grid, values.astype(complex)), float(time)
