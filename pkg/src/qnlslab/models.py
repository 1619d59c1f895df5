"""Quasilinear Schrodinger model problems.

A model is the equation

    i phi_t + d_i(g^{ij}(phi, conj phi) d_j phi) = F(phi, grad phi)      (divergence form)
    i phi_t + g^{ij}(phi, conj phi) d_i d_j phi = F(phi, grad phi)      (nondivergence form)

with g = g0 + h, g0 = diag(+1 x l, -1 x (d - l)).

Pointwise maps act on plain arrays with these layouts (P is the point shape):

    y      (m, *P)        field values
    z      (d, m, *P)     z[j] = d_j phi
    h      (d, d, *P)     real symmetric perturbation of g0
    h_y    (d, d, m, *P)  Wirtinger derivative of h in y (h_ybar likewise)
    F      (m, *P)
    F_y    (m, m, *P)     F_y[a, b] = dF_a/dy_b (F_ybar likewise)
    F_z    (m, d, m, *P)  F_z[a, j, b] = dF_a/dz_{j,b} (F_zbar likewise)

Wirtinger derivatives follow dF/dz = (dF/dRe z - i dF/dIm z)/2.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .spectral import Grid, SpectralField

__all__ = [
    "SignatureSpec", "MetricSpec", "NonlinearitySpec", "ModelProblem",
    "ModelRegistrationError", "evaluate_metric", "spatial_operator",
    "evaluate_F", "evaluate_F_derivatives", "builtin_model", "BUILTIN_MODELS",
    "model_from_expressions", "model_from_config", "gradient_array",
    "nonlinear_terms", "metric_array",
]

Array = np.ndarray


class ModelRegistrationError(ValueError):
    """A model definition failed one of the registration checks."""


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class SignatureSpec:
    """Diagonal constant metric g0 with ``positive_count`` entries equal to +1."""

    dim: int
    positive_count: int | None = None

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.dim}")
        ell = self.dim if self.positive_count is None else int(self.positive_count)
        if not 1 <= ell <= self.dim:
            raise ValueError(f"positive_count must lie in [1, {self.dim}], got {ell}")
        object.__setattr__(self, "positive_count", ell)

    @property
    def diagonal(self) -> np.ndarray:
        return np.array([1.0] * self.positive_count + [-1.0] * (self.dim - self.positive_count))

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.diagonal)

    @property
    def elliptic(self) -> bool:
        return self.positive_count == self.dim


@dataclass(frozen=True)
class MetricSpec:
    """Perturbation h of the constant metric and its complex derivatives.

    ``h(y, z)`` may ignore ``z``.  Metrics that read ``z`` set
    ``gradient_dependent`` and are only allowed in nondivergence form.
    """

    signature: SignatureSpec
    h: Callable[[Array, Array], Array]
    h_y: Callable[[Array, Array], Array]
    h_ybar: Callable[[Array, Array], Array]
    interaction_order: int
    gradient_dependent: bool = False
    vanishes: bool = False

    def __post_init__(self):
        if self.interaction_order not in (1, 2):
            raise ValueError("metric interaction order must be 1 or 2")


@dataclass(frozen=True)
class NonlinearitySpec:
    F: Callable[[Array, Array], Array]
    F_y: Callable[[Array, Array], Array]
    F_ybar: Callable[[Array, Array], Array]
    F_z: Callable[[Array, Array], Array]
    F_zbar: Callable[[Array, Array], Array]
    interaction_order: int
    vanishes: bool = False

    def __post_init__(self):
        if self.interaction_order not in (2, 3):
            raise ValueError("nonlinearity interaction order must be 2 or 3")


@dataclass(frozen=True)
class ModelProblem:
    """One equation instance; immutable and validated on construction.

    ``conjugate_coefficient`` optionally adds ``c(phi) * Laplacian(conj phi)`` to
    the second-order part (needed by the laser-pulse model, whose expansion
    produces that term).
    """

    name: str
    metric: MetricSpec
    nonlinearity: NonlinearitySpec
    form: str = "divergence"
    components: int = 1
    conjugate_coefficient: Callable[[Array], Array] | None = None
    description: str = ""
    parameters: Mapping[str, float] = field(default_factory=dict, hash=False, compare=False)
    validate: bool = True

    def __post_init__(self):
        if self.form not in ("divergence", "nondivergence"):
            raise ModelRegistrationError(f"unknown form {self.form!r}")
        if self.components < 1:
            raise ModelRegistrationError("components must be >= 1")
        if self.metric.interaction_order + 1 != self.nonlinearity.interaction_order:
            raise ModelRegistrationError(
                "metric order + 1 must equal nonlinearity order "
                f"(got {self.metric.interaction_order} and {self.nonlinearity.interaction_order})")
        if self.metric.gradient_dependent and self.form == "divergence":
            raise ModelRegistrationError("gradient-dependent metrics need the nondivergence form")
        if self.conjugate_coefficient is not None and self.form == "divergence":
            raise ModelRegistrationError("a conjugate second-order term needs the nondivergence form")
        if self.validate:
            check_model(self)

    @property
    def dim(self) -> int:
        return self.metric.signature.dim

    @property
    def interaction_class(self) -> str:
        return "quadratic" if self.metric.interaction_order == 1 else "cubic"

    @property
    def is_linear(self) -> bool:
        return (self.metric.vanishes and self.nonlinearity.vanishes
                and self.conjugate_coefficient is None)


# ---------------------------------------------------------------------------
# registration checks


def _random_point(rng, d, m, count, scale):
    y = scale * (rng.standard_normal((m, count)) + 1j * rng.standard_normal((m, count)))
    z = scale * (rng.standard_normal((d, m, count)) + 1j * rng.standard_normal((d, m, count)))
    return y, z


def _scaling_ratio(func, y, z):
    big = np.max(np.abs(func(y, z)))
    small = np.max(np.abs(func(0.5 * y, 0.5 * z)))
    if big == 0.0 and small == 0.0:
        return None
    if small == 0.0:
        return np.inf
    return big / small


def _wirtinger_fd(func, y, z, target: str, index, step):
    """Central-difference Wirtinger derivatives of ``func`` in one variable entry."""
    def bump(delta):
        yy, zz = y.copy(), z.copy()
        if target == "y":
            yy[index] += delta
        else:
            zz[index] += delta
        return func(yy, zz)

    d_re = (bump(step) - bump(-step)) / (2 * step)
    d_im = (bump(1j * step) - bump(-1j * step)) / (2 * step)
    return 0.5 * (d_re - 1j * d_im), 0.5 * (d_re + 1j * d_im)


def check_model(model: ModelProblem, seed: int = 1234, tol: float = 1e-6) -> None:
    """Symmetry, order-scaling and derivative-consistency checks.

    Raises :class:`ModelRegistrationError` on the first failure.
    """
    rng = np.random.default_rng(seed)
    d, m = model.dim, model.components
    met, non = model.metric, model.nonlinearity

    y, z = _random_point(rng, d, m, 16, 0.3)
    h = np.asarray(met.h(y, z))
    if h.shape != (d, d) + y.shape[1:]:
        raise ModelRegistrationError(f"h has shape {h.shape}, expected {(d, d) + y.shape[1:]}")
    if np.max(np.abs(np.imag(h))) > 1e-12 * (1 + np.max(np.abs(h))):
        raise ModelRegistrationError("h must be real valued")
    if np.max(np.abs(h - np.swapaxes(h, 0, 1))) > 1e-12 * (1 + np.max(np.abs(h))):
        raise ModelRegistrationError("h must be symmetric")
    zero_y, zero_z = np.zeros_like(y), np.zeros_like(z)
    if np.max(np.abs(met.h(zero_y, zero_z))) != 0 or np.max(np.abs(non.F(zero_y, zero_z))) != 0:
        raise ModelRegistrationError("h and F must vanish at the origin")

    # order scaling at amplitude 1e-3, halving within 20 percent
    ys, zs = _random_point(rng, d, m, 16, 1e-3)
    for label, func, order in (("h", met.h, met.interaction_order),
                               ("F", non.F, non.interaction_order)):
        ratio = _scaling_ratio(func, ys, zs)
        if ratio is not None and abs(ratio / 2.0 ** order - 1) > 0.2:
            raise ModelRegistrationError(
                f"{label} does not scale with order {order}: halving ratio {ratio:.4g}")

    # derivative consistency against central differences
    y, z = _random_point(rng, d, m, 4, 0.2)
    step = 1e-5
    checks = [("F_y/F_ybar", non.F, non.F_y, non.F_ybar, "y")]
    checks.append(("F_z/F_zbar", non.F, non.F_z, non.F_zbar, "z"))
    if not met.gradient_dependent:
        checks.append(("h_y/h_ybar", met.h, met.h_y, met.h_ybar, "y"))
    for label, func, dp, dm, target in checks:
        got_p = np.asarray(dp(y, z), dtype=complex)
        got_m = np.asarray(dm(y, z), dtype=complex)
        scale = np.max(np.abs(func(y, z))) / 0.2 + 1e-300
        shape = (m,) if target == "y" else (d, m)
        for idx in np.ndindex(*shape):
            fd_p, fd_m = _wirtinger_fd(func, y, z, target, idx, step)
            # registered derivative entries matching this variable
            if func is met.h:
                sel = (slice(None), slice(None), idx[0])
            elif target == "y":
                sel = (slice(None), idx[0])
            else:
                sel = (slice(None), idx[0], idx[1])
            exp_p = np.broadcast_to(got_p[sel], fd_p.shape)
            exp_m = np.broadcast_to(got_m[sel], fd_m.shape)
            err = max(np.max(np.abs(fd_p - exp_p)), np.max(np.abs(fd_m - exp_m)))
            if err > tol * max(scale, np.max(np.abs(exp_p)), np.max(np.abs(exp_m)), 1e-12):
                raise ModelRegistrationError(
                    f"{label} of model {model.name!r} disagrees with finite differences "
                    f"(error {err:.3g})")


# ---------------------------------------------------------------------------
# field-level evaluation


def gradient_array(values: Array, grid: Grid, hat: Array | None = None) -> Array:
    """Spectral gradient of an ``(m, *shape)`` array, returned as ``(d, m, *shape)``."""
    d = grid.dim
    axes = tuple(range(-d, 0))
    if hat is None:
        hat = np.fft.fftn(values, axes=axes)
    return np.stack([np.fft.ifftn(1j * grid.frequency(k) * hat, axes=axes) for k in range(d)])


def metric_array(model: ModelProblem, y: Array, z: Array | None = None) -> Array:
    """Pointwise h(y, z), shape ``(d, d, *P)``."""
    d = model.dim
    if model.metric.vanishes:
        return np.zeros((d, d) + y.shape[1:])
    if z is None:
        z = np.zeros((d,) + y.shape)
    return np.real(np.asarray(model.metric.h(y, z)))


def evaluate_metric(model: ModelProblem, phi: SpectralField) -> Array:
    """g^{ij} = g0^{ij} + h^{ij}(phi) on the grid, real array of shape ``(d, d, *grid.shape)``."""
    grid = phi.grid
    z = gradient_array(phi.values, grid) if model.metric.gradient_dependent else None
    h = metric_array(model, phi.values, z)
    g0 = model.metric.signature.matrix
    return g0.reshape(g0.shape + (1,) * grid.dim) + h


def nonlinear_terms(model: ModelProblem, values: Array, grid: Grid, dealias: bool = True,
                    include_constant: bool = False, include_F: bool = True,
                    hat: Array | None = None) -> Array:
    """Spectrum of the h-part of the second-order operator minus F.

    Returns the frequency-space array of ``S_h(phi) - F(phi)`` where ``S_h`` is
    the quasilinear operator with g replaced by h (and the conjugate
    second-order term when present).  With ``include_constant`` the g0 part
    is added.  Products are truncated by the 2/3 rule when ``dealias``.
    """
    d = grid.dim
    axes = tuple(range(-d, 0))
    if hat is None:
        hat = np.fft.fftn(values, axes=axes)
    xi = [grid.frequency(k) for k in range(d)]
    z = np.stack([np.fft.ifftn(1j * xi[k] * hat, axes=axes) for k in range(d)])
    out = np.zeros_like(hat)
    if not model.metric.vanishes:
        h = metric_array(model, values, z)
        if model.form == "divergence":
            for i in range(d):
                flux = np.einsum("j...,jm...->m...", h[i], z)
                out += 1j * xi[i] * np.fft.fftn(flux, axes=axes)
        else:
            acc = np.zeros_like(values)
            for i in range(d):
                for j in range(d):
                    if np.any(h[i, j]):
                        zij = np.fft.ifftn(-xi[i] * xi[j] * hat, axes=axes)
                        acc += h[i, j] * zij
            out += np.fft.fftn(acc, axes=axes)
    if model.conjugate_coefficient is not None:
        conj_hat = np.fft.fftn(np.conj(values), axes=axes)
        lap_conj = np.fft.ifftn(-grid.xi_squared * conj_hat, axes=axes)
        out += np.fft.fftn(model.conjugate_coefficient(values) * lap_conj, axes=axes)
    if include_F and not model.nonlinearity.vanishes:
        out -= np.fft.fftn(model.nonlinearity.F(values, z), axes=axes)
    if dealias:
        out *= grid.dealias_mask
    if include_constant:
        q = sum(gjj * xi[j] ** 2 for j, gjj in enumerate(model.metric.signature.diagonal))
        out -= q * hat
    return out


def spatial_operator(model: ModelProblem, phi: SpectralField, dealias: bool = True) -> SpectralField:
    """Full second-order term of the model, including the g0 part."""
    grid = phi.grid
    spec = nonlinear_terms(model, phi.values, grid, dealias=dealias,
                           include_constant=True, include_F=False)
    return SpectralField.from_spectrum(grid, spec)


def evaluate_F(model: ModelProblem, phi: SpectralField) -> SpectralField:
    z = gradient_array(phi.values, phi.grid)
    return SpectralField(phi.grid, model.nonlinearity.F(phi.values, z))


def evaluate_F_derivatives(model: ModelProblem, phi: SpectralField) -> dict[str, Array]:
    """Pointwise F_y, F_ybar, F_z, F_zbar as arrays (layouts in the module docstring)."""
    y = phi.values
    z = gradient_array(y, phi.grid)
    non = model.nonlinearity
    m, d = model.components, model.dim
    shapes = {"F_y": (m, m), "F_ybar": (m, m), "F_z": (m, d, m), "F_zbar": (m, d, m)}
    out = {}
    for name, shp in shapes.items():
        val = np.asarray(getattr(non, name)(y, z), dtype=complex)
        out[name] = np.broadcast_to(val, shp + y.shape[1:]).copy()
    return out


# ---------------------------------------------------------------------------
# built-in models


def _eye(d, shape, coefficient):
    """coefficient * delta_ij with shape (d, d, *shape)."""
    out = np.zeros((d, d) + shape, dtype=np.result_type(coefficient, float))
    for i in range(d):
        out[i, i] = coefficient
    return out


def _zero_metric(signature):
    d = signature.dim

    def h(y, z):
        return np.zeros((d, d) + y.shape[1:])

    def dh(y, z):
        return np.zeros((d, d) + y.shape, dtype=complex)

    return MetricSpec(signature, h, dh, dh, 1, vanishes=True)


def _zero_F(order):
    def F(y, z):
        return np.zeros(y.shape, dtype=complex)

    def Fy(y, z):
        return np.zeros((y.shape[0],) + y.shape, dtype=complex)

    def Fz(y, z):
        return np.zeros((y.shape[0],) + z.shape, dtype=complex)

    return NonlinearitySpec(F, Fy, Fy, Fz, Fz, order, vanishes=True)


def _free(dim, positive_count=None, **_):
    sig = SignatureSpec(dim, positive_count)
    return ModelProblem("free", _zero_metric(sig), _zero_F(2),
                        description="constant-coefficient flow, h = 0, F = 0")


def _toy_quadratic(dim, positive_count=None, **_):
    sig = SignatureSpec(dim, positive_count)
    d = dim

    def h(y, z):
        return _eye(d, y.shape[1:], y[0].real)

    def h_y(y, z):
        return _eye(d, y.shape, 0.5 + 0j * y)

    def F(y, z):
        return np.sum(z ** 2, axis=0)

    def F_y(y, z):
        return np.zeros((1,) + y.shape, dtype=complex)

    def F_z(y, z):
        return (2.0 * z)[np.newaxis]

    def F_zbar(y, z):
        return np.zeros((1,) + z.shape, dtype=complex)

    metric = MetricSpec(sig, h, h_y, h_y, 1)
    non = NonlinearitySpec(F, F_y, F_y, F_z, F_zbar, 2)
    return ModelProblem("toy-quadratic", metric, non,
                        description="h^{ij} = Re(phi) delta_ij, F = sum_j (d_j phi)^2")


def _toy_cubic(dim, positive_count=None, **_):
    sig = SignatureSpec(dim, positive_count)
    d = dim

    def h(y, z):
        return _eye(d, y.shape[1:], np.abs(y[0]) ** 2)

    def h_y(y, z):
        return _eye(d, y.shape, np.conj(y))

    def h_ybar(y, z):
        return _eye(d, y.shape, y + 0j)

    def F(y, z):
        return np.sum(np.abs(z) ** 2, axis=0) * z[0]

    def F_y(y, z):
        return np.zeros((1,) + y.shape, dtype=complex)

    def F_z(y, z):
        out = np.conj(z) * z[0]
        out[0] += np.sum(np.abs(z) ** 2, axis=0)
        return out[np.newaxis]

    def F_zbar(y, z):
        return (z * z[0])[np.newaxis]

    metric = MetricSpec(sig, h, h_y, h_ybar, 2)
    non = NonlinearitySpec(F, F_y, F_y, F_z, F_zbar, 3)
    return ModelProblem("toy-cubic", metric, non,
                        description="h^{ij} = |phi|^2 delta_ij, F = |grad phi|^2 d_1 phi")


@functools.lru_cache(maxsize=None)
def _laser_expansion_holds(kappa: float) -> bool:
    """Symbolic check that the nondivergence expansion reproduces the original model.

    Original: i u_t = -Lap u + 2 u H'(rho) Lap H(rho) - u G(rho), rho = |u|^2,
    with H(rho) = rho and G(rho) = kappa * rho, checked per axis.
    """
    import sympy as sp

    x = sp.Symbol("x", real=True)
    u = sp.Function("u")(x)
    ub = sp.Function("ub")(x)
    k = sp.nsimplify(kappa)
    rho = u * ub
    original = -sp.diff(u, x, 2) + 2 * u * sp.diff(rho, x, 2) - k * u * rho
    g = 1 - 2 * u * ub
    c = -2 * u ** 2
    F = 4 * u * sp.diff(u, x) * sp.diff(ub, x) - k * u ** 2 * ub
    expanded = F - g * sp.diff(u, x, 2) - c * sp.diff(ub, x, 2)
    return sp.simplify(sp.expand(original - expanded)) == 0


def _laser_pulse(dim, kappa=1.0, **_):
    """Self-channeling model with H(rho) = rho and potential G(rho) = kappa*rho."""
    if not _laser_expansion_holds(float(kappa)):
        raise ModelRegistrationError("nondivergence expansion of the laser-pulse model failed")
    sig = SignatureSpec(dim, dim)
    d = dim

    def h(y, z):
        return _eye(d, y.shape[1:], -2.0 * np.abs(y[0]) ** 2)

    def h_y(y, z):
        return _eye(d, y.shape, -2.0 * np.conj(y))

    def h_ybar(y, z):
        return _eye(d, y.shape, -2.0 * y + 0j)

    def F(y, z):
        return 4.0 * y * np.sum(np.abs(z) ** 2, axis=0) - kappa * y * np.abs(y) ** 2

    def F_y(y, z):
        return (4.0 * np.sum(np.abs(z) ** 2, axis=0) - 2.0 * kappa * np.abs(y) ** 2)[np.newaxis]

    def F_ybar(y, z):
        return (-kappa * y ** 2)[np.newaxis]

    def F_z(y, z):
        return (4.0 * y * np.conj(z))[np.newaxis]

    def F_zbar(y, z):
        return (4.0 * y * z)[np.newaxis]

    def conj_coeff(y):
        return -2.0 * y ** 2

    metric = MetricSpec(sig, h, h_y, h_ybar, 2)
    non = NonlinearitySpec(F, F_y, F_ybar, F_z, F_zbar, 3)
    return ModelProblem("dbhs", metric, non, form="nondivergence",
                        conjugate_coefficient=conj_coeff, parameters={"kappa": float(kappa)},
                        description="laser self-channeling model, H(rho) = rho, G(rho) = kappa*rho")


def _smcf_graph(dim, **_):
    """Graph skew mean curvature flow with Lambda = 1, written for the conjugate unknown.

    With phi = u_1 + i u_2 the flow reads i phi_t = a g^{ij} phi_ij.  The
    conjugate psi = conj(phi) then solves i psi_t + a g^{ij} psi_ij = 0, and the
    coefficients are unchanged under conjugation.
    """
    sig = SignatureSpec(dim, dim)
    d = dim

    def h(y, z):
        zz = z[:, 0]
        grad2 = np.sum(np.abs(zz) ** 2, axis=0)
        re2 = np.sum(zz.real ** 2, axis=0)
        amp = 1.0 / np.sqrt(1.0 + re2)
        gram = np.real(zz[:, np.newaxis] * np.conj(zz[np.newaxis, :]))
        g = _eye(d, grad2.shape, 1.0) - gram / (1.0 + grad2)
        return amp * g - _eye(d, grad2.shape, 1.0)

    def dh(y, z):
        return np.zeros((d, d) + y.shape, dtype=complex)

    metric = MetricSpec(sig, h, dh, dh, 2, gradient_dependent=True)
    return ModelProblem("smcf-graph", metric, _zero_F(3), form="nondivergence",
                        description="graph skew mean curvature flow with Lambda = 1")


BUILTIN_MODELS: dict[str, Callable[..., ModelProblem]] = {
    "free": _free,
    "toy-quadratic": _toy_quadratic,
    "toy-cubic": _toy_cubic,
    "dbhs": _laser_pulse,
    "smcf-graph": _smcf_graph,
}


@functools.lru_cache(maxsize=None)
def _cached_builtin(name, dim, positive_count, extra):
    return BUILTIN_MODELS[name](dim, positive_count=positive_count, **dict(extra))


def builtin_model(name: str, dim: int = 1, positive_count: int | None = None,
                  **params) -> ModelProblem:
    """Return a registered built-in model for dimension ``dim``."""
    if name not in BUILTIN_MODELS:
        raise KeyError(f"unknown model {name!r}; known: {sorted(BUILTIN_MODELS)}")
    return _cached_builtin(name, int(dim), positive_count, tuple(sorted(params.items())))


# ---------------------------------------------------------------------------
# expression schema


def _symbols(dim):
    import sympy as sp

    y, yb = sp.symbols("y yb")
    z = sp.symbols(f"z0:{dim}")
    zb = sp.symbols(f"zb0:{dim}")
    return sp, y, yb, z, zb


def _conj_expr(e, dim):
    """Complex conjugate of a polynomial in y, yb, z_j, zb_j."""
    sp, y, yb, z, zb = _symbols(dim)
    swap = {y: yb, yb: y}
    swap.update({a: b for a, b in zip(z, zb)})
    swap.update({b: a for a, b in zip(z, zb)})
    return sp.sympify(e).xreplace(swap).subs(sp.I, -sp.I)


def _parse(expr: str, dim: int):
    """Parse a polynomial expression into sympy with y, yb, z_j, zb_j independent.

    Names: ``phi``, ``dphi1`` .. ``dphi<d>``, functions ``re``, ``im``,
    ``conj`` and ``abs2`` (squared modulus).
    """
    sp, y, yb, z, zb = _symbols(dim)

    def conj(e):
        return _conj_expr(e, dim)

    local = {"phi": y, "re": lambda e: (e + conj(e)) / 2,
             "im": lambda e: (e - conj(e)) / (2 * sp.I), "conj": conj,
             "abs2": lambda e: e * conj(e), "I": sp.I}
    for j in range(dim):
        local[f"dphi{j + 1}"] = z[j]
    from sympy.parsing.sympy_parser import parse_expr

    try:
        out = sp.expand(parse_expr(str(expr), local_dict=local))
    except Exception as exc:  # noqa: BLE001 - sympy raises many types
        raise ModelRegistrationError(f"cannot parse expression {expr!r}: {exc}") from exc
    allowed = {y, yb, *z, *zb}
    if not out.free_symbols <= allowed:
        bad = sorted(str(s) for s in out.free_symbols - allowed)
        raise ModelRegistrationError(f"unknown names {bad} in expression {expr!r}")
    if not out.is_polynomial(*allowed):
        raise ModelRegistrationError(f"expression {expr!r} is not a polynomial")
    return out


def _lambdify(expr, dim):
    sp, y, yb, z, zb = _symbols(dim)
    f = sp.lambdify((y, yb, z, zb), expr, "numpy")

    def call(yv, zv):
        val = f(yv, np.conj(yv), list(zv), list(np.conj(zv)))
        return np.broadcast_to(np.asarray(val, dtype=complex), yv.shape).copy()

    return call


def model_from_expressions(name: str, dim: int, metric, nonlinearity: str,
                           metric_order: int, nonlinearity_order: int,
                           form: str = "divergence", positive_count: int | None = None) -> ModelProblem:
    """Build a scalar model from polynomial expressions.

    ``metric`` is either one expression (meaning expr * delta_ij) or a nested
    ``d x d`` list of expressions for h^{ij}.
    """
    sp, y, yb, z, zb = _symbols(dim)
    if isinstance(metric, str):
        entries = [[metric if i == j else "0" for j in range(dim)] for i in range(dim)]
    else:
        entries = [list(row) for row in metric]
        if len(entries) != dim or any(len(r) != dim for r in entries):
            raise ModelRegistrationError(f"metric must be a {dim}x{dim} table")
    h_exprs = [[_parse(e, dim) for e in row] for row in entries]
    F_expr = _parse(nonlinearity, dim)
    for row in h_exprs:
        for e in row:
            if sp.expand(e - _conj_expr(e, dim)) != 0:
                raise ModelRegistrationError(f"metric entry {e} is not real valued")

    h_fun = [[_lambdify(e, dim) for e in row] for row in h_exprs]
    hy_fun = [[_lambdify(sp.diff(e, y), dim) for e in row] for row in h_exprs]
    hyb_fun = [[_lambdify(sp.diff(e, yb), dim) for e in row] for row in h_exprs]
    F_fun = _lambdify(F_expr, dim)
    Fy_fun = _lambdify(sp.diff(F_expr, y), dim)
    Fyb_fun = _lambdify(sp.diff(F_expr, yb), dim)
    Fz_fun = [_lambdify(sp.diff(F_expr, z[j]), dim) for j in range(dim)]
    Fzb_fun = [_lambdify(sp.diff(F_expr, zb[j]), dim) for j in range(dim)]

    def h(yv, zv):
        return np.real(np.stack([np.stack([f(yv, zv)[0] for f in row]) for row in h_fun]))

    def table(funs):
        def inner(yv, zv):
            return np.stack([np.stack([f(yv, zv) for f in row]) for row in funs])
        return inner

    def F_y(yv, zv):
        return Fy_fun(yv, zv)[np.newaxis]

    def F_ybar(yv, zv):
        return Fyb_fun(yv, zv)[np.newaxis]

    def F_z(yv, zv):
        return np.stack([f(yv, zv) for f in Fz_fun])[np.newaxis]

    def F_zbar(yv, zv):
        return np.stack([f(yv, zv) for f in Fzb_fun])[np.newaxis]

    vanishing_h = all(e == 0 for row in h_exprs for e in row)
    met = MetricSpec(SignatureSpec(dim, positive_count), h, table(hy_fun), table(hyb_fun),
                     int(metric_order), vanishes=vanishing_h)
    non = NonlinearitySpec(F_fun, F_y, F_ybar, F_z, F_zbar, int(nonlinearity_order),
                           vanishes=(F_expr == 0))
    return ModelProblem(name, met, non, form=form, description="expression model")


def model_from_config(cfg: Mapping, dim: int, positive_count: int | None = None) -> ModelProblem:
    """Model from a scenario table: ``{"name": ...}`` or an inline expression definition."""
    if "metric" in cfg or "nonlinearity" in cfg:
        missing = [k for k in ("metric", "nonlinearity", "metric_order", "nonlinearity_order")
                   if k not in cfg]
        if missing:
            raise ModelRegistrationError(f"model.{missing[0]} is required for inline models")
        return model_from_expressions(cfg.get("name", "custom"), dim, cfg["metric"],
                                      cfg["nonlinearity"], cfg["metric_order"],
                                      cfg["nonlinearity_order"], cfg.get("form", "divergence"),
                                      positive_count)
    if "name" not in cfg:
        raise ModelRegistrationError("model.name is required")
    params = {k: v for k, v in cfg.items() if k not in ("name",)}
    return builtin_model(cfg["name"], dim, positive_count, **params)
