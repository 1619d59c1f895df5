"""Scenario files, run directories and the ``qnlslab`` command line.

Verbs: simulate, converge, verify-lemmas, report, diff-run.
Exit codes: 0 success, 2 validation, 3 numerical failure, 4 threshold breach.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib
import tomli_w

from .diagnostics import DiagnosticSeries, default_s_indices
from .functionals import (IndexConstraintError, bootstrap_monitor, good_term_W, good_term_Y,
                          master_X, momentum_identity_residual, weighted_momentum_ledger)
from .lemmas import SUITES, EnsembleSpec, run_suite, summary_table
from .models import BUILTIN_MODELS, ModelRegistrationError, model_from_config
from .solver import (ContinuationError, NumericalError, SolverParams, StabilityError,
                     difference_run, resolve_threads, run, viscosity_continuation,
                     write_trajectory)
from .spectral import Grid, SpectralField, sobolev_norm

__all__ = ["Scenario", "ScenarioError", "RunRecord", "TOLERANCE_PROFILES", "load_scenario",
           "build_initial_data", "git_blob_hash", "main",
           "EXIT_OK", "EXIT_VALIDATION", "EXIT_NUMERICAL", "EXIT_THRESHOLD"]

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_THRESHOLD = 0, 2, 3, 4
MANIFEST = "manifest.json"

TOLERANCE_PROFILES = {
    "default": {"identity": 1e-6, "bootstrap_ceiling": 2.0, "stability": 0.10,
                "difference_growth": 2.0},
    "strict": {"identity": 1e-8, "bootstrap_ceiling": 1.5, "stability": 0.05,
               "difference_growth": 1.5},
}

FAMILIES = ("gaussian", "plane-wave", "random-band-limited")
FUNCTIONALS = ("Y", "X", "W", "bootstrap", "residual", "ledger")


class ScenarioError(ValueError):
    """Invalid scenario; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ---------------------------------------------------------------------------
# scenario schema


def _int(value, name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ScenarioError(name, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ScenarioError(name, f"must be >= {minimum}")
    return int(value)


def _float(value, name, positive=False, nonnegative=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(name, f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ScenarioError(name, "must be finite")
    if positive and value <= 0:
        raise ScenarioError(name, "must be positive")
    if nonnegative and value < 0:
        raise ScenarioError(name, "must be non-negative")
    return value


def _per_axis(value, dim, name, conv):
    if isinstance(value, list):
        if len(value) != dim:
            raise ScenarioError(name, f"needs {dim} entries")
        return [conv(v, f"{name}[{i}]") for i, v in enumerate(value)]
    return [conv(value, name)] * dim


def _table(raw: Mapping, key: str) -> dict:
    value = raw.get(key, {})
    if not isinstance(value, Mapping):
        raise ScenarioError(key, "must be a table")
    return dict(value)


def _unknown(table: Mapping, allowed, prefix):
    for key in table:
        if key not in allowed:
            raise ScenarioError(f"{prefix}.{key}", "unknown key")


def _normalize(raw: Mapping) -> dict:
    """Validated scenario dictionary with every default filled in."""
    if not isinstance(raw, Mapping):
        raise ScenarioError("<root>", "scenario must be a table")
    _unknown(raw, ("model", "grid", "initial", "solver", "diagnostics", "output",
                   "converge", "diff", "lemmas"), "<root>")
    out: dict[str, Any] = {}

    grid = _table(raw, "grid")
    _unknown(grid, ("dim", "n", "half_width"), "grid")
    if "dim" not in grid:
        raise ScenarioError("grid.dim", "is required")
    dim = _int(grid["dim"], "grid.dim", 1)
    if dim > 3:
        raise ScenarioError("grid.dim", "must be 1, 2 or 3")
    if "n" not in grid:
        raise ScenarioError("grid.n", "is required")
    n = _per_axis(grid["n"], dim, "grid.n", lambda v, nm: _int(v, nm, 8))
    for i, v in enumerate(n):
        if v % 2:
            raise ScenarioError("grid.n", f"entry {i} must be even")
    hw = _per_axis(grid.get("half_width", 20.0 * math.pi), dim, "grid.half_width",
                   lambda v, nm: _float(v, nm, positive=True))
    out["grid"] = {"dim": dim, "n": n, "half_width": hw}

    model = _table(raw, "model")
    if not model:
        raise ScenarioError("model", "is required")
    if "metric" not in model and "nonlinearity" not in model:
        if "name" not in model:
            raise ScenarioError("model.name", "is required")
        if model["name"] not in BUILTIN_MODELS:
            raise ScenarioError("model.name", f"unknown model {model['name']!r}; "
                                f"known: {', '.join(sorted(BUILTIN_MODELS))}")
    if "positive_count" in model:
        pc = _int(model["positive_count"], "model.positive_count", 0)
        if pc > dim:
            raise ScenarioError("model.positive_count", "cannot exceed grid.dim")
    out["model"] = model

    init = _table(raw, "initial")
    _unknown(init, ("family", "amplitude", "width", "seed", "mode", "center", "wavenumber",
                    "cutoff", "window"), "initial")
    family = init.get("family", "gaussian")
    if family not in FAMILIES:
        raise ScenarioError("initial.family", f"must be one of {', '.join(FAMILIES)}")
    norm_init = {"family": family,
                 "amplitude": _float(init.get("amplitude", 1e-3), "initial.amplitude",
                                     nonnegative=True),
                 "width": _float(init.get("width", 1.0), "initial.width", positive=True),
                 "seed": _int(init.get("seed", 0), "initial.seed", 0)}
    if family == "plane-wave":
        norm_init["mode"] = _per_axis(init.get("mode", 1), dim, "initial.mode",
                                      lambda v, nm: _int(v, nm))
    if family == "gaussian":
        norm_init["center"] = _per_axis(init.get("center", 0.0), dim, "initial.center", _float)
        norm_init["wavenumber"] = _per_axis(init.get("wavenumber", 0.0), dim,
                                            "initial.wavenumber", _float)
    if family == "random-band-limited":
        cutoff = _float(init.get("cutoff", 1.0 / 3.0), "initial.cutoff", positive=True)
        if cutoff > 2.0 / 3.0:
            raise ScenarioError("initial.cutoff", "must not exceed 2/3")
        norm_init["cutoff"] = cutoff
        if "window" in init:
            norm_init["window"] = _float(init["window"], "initial.window", positive=True)
    out["initial"] = norm_init

    solver = _table(raw, "solver")
    _unknown(solver, ("epsilon", "dt", "T", "scheme", "dealias", "checkpoint_stride",
                      "smallness", "growth_limit"), "solver")
    norm_solver = {"epsilon": _float(solver.get("epsilon", 0.0), "solver.epsilon",
                                     nonnegative=True),
                   "dt": _float(solver.get("dt", 1e-3), "solver.dt", positive=True),
                   "T": _float(solver.get("T", 1.0), "solver.T", positive=True),
                   "scheme": _int(solver.get("scheme", 2), "solver.scheme"),
                   "dealias": solver.get("dealias", True),
                   "checkpoint_stride": _int(solver.get("checkpoint_stride", 10),
                                             "solver.checkpoint_stride", 1),
                   "growth_limit": _float(solver.get("growth_limit", 10.0),
                                          "solver.growth_limit", positive=True)}
    if norm_solver["scheme"] not in (1, 2):
        raise ScenarioError("solver.scheme", "must be 1 or 2")
    if not isinstance(norm_solver["dealias"], bool):
        raise ScenarioError("solver.dealias", "must be true or false")
    steps = norm_solver["T"] / norm_solver["dt"]
    if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
        raise ScenarioError("solver.T", "must be an integer multiple of solver.dt")
    if round(steps) < 2 * norm_solver["checkpoint_stride"]:
        raise ScenarioError("solver.checkpoint_stride", "leaves fewer than three checkpoints")
    if "smallness" in solver:
        norm_solver["smallness"] = _float(solver["smallness"], "solver.smallness", positive=True)
    out["solver"] = norm_solver

    diag = _table(raw, "diagnostics")
    _unknown(diag, ("functionals", "s1", "s2", "s3", "alpha", "axes"), "diagnostics")
    funcs = diag.get("functionals", ["Y", "bootstrap"])
    if not isinstance(funcs, list) or any(f not in FUNCTIONALS for f in funcs):
        raise ScenarioError("diagnostics.functionals",
                            f"must be a list drawn from {', '.join(FUNCTIONALS)}")
    if "W" in funcs and dim < 2:
        raise ScenarioError("diagnostics.functionals", "W needs grid.dim >= 2")
    idx = default_s_indices(dim)
    s = {key: _int(diag.get(key, idx[key]), f"diagnostics.{key}", 0) for key in ("s1", "s2", "s3")}
    if s["s2"] + 2 > s["s1"] + 0.5:
        raise ScenarioError("diagnostics.s2", "must satisfy s2 + 2 <= s1 + 1/2")
    alpha = diag.get("alpha", [[0] * dim])
    if not isinstance(alpha, list) or not alpha:
        raise ScenarioError("diagnostics.alpha", "must be a non-empty list of multi-indices")
    alphas = []
    for i, a in enumerate(alpha):
        a = a if isinstance(a, list) else [a]
        if len(a) != dim:
            raise ScenarioError(f"diagnostics.alpha[{i}]", f"needs {dim} entries")
        alphas.append([_int(v, f"diagnostics.alpha[{i}]", 0) for v in a])
    axes = diag.get("axes", list(range(dim)))
    if not isinstance(axes, list) or not axes:
        raise ScenarioError("diagnostics.axes", "must be a non-empty list of axes")
    for i, k in enumerate(axes):
        if _int(k, f"diagnostics.axes[{i}]", 0) >= dim:
            raise ScenarioError(f"diagnostics.axes[{i}]", f"axis must be below {dim}")
    out["diagnostics"] = {"functionals": list(funcs), **s, "alpha": alphas,
                          "axes": [int(k) for k in axes]}

    output = _table(raw, "output")
    _unknown(output, ("directory",), "output")
    directory = output.get("directory", "run")
    if not isinstance(directory, str) or not directory:
        raise ScenarioError("output.directory", "must be a non-empty string")
    out["output"] = {"directory": directory}

    conv = _table(raw, "converge")
    _unknown(conv, ("halvings", "s_prime"), "converge")
    out["converge"] = {"halvings": _int(conv.get("halvings", 3), "converge.halvings"),
                       "s_prime": _float(conv.get("s_prime", 3.0), "converge.s_prime",
                                         nonnegative=True)}
    if out["converge"]["halvings"] < 2:
        raise ScenarioError("converge.halvings", "must be at least 2")

    diff = _table(raw, "diff")
    _unknown(diff, ("perturbation", "width"), "diff")
    out["diff"] = {"perturbation": _float(diff.get("perturbation", 1e-6), "diff.perturbation",
                                          positive=True),
                   "width": _float(diff.get("width", 1.0), "diff.width", positive=True)}

    lem = _table(raw, "lemmas")
    _unknown(lem, ("suites", "count", "n"), "lemmas")
    suites = lem.get("suites", sorted(SUITES))
    if not isinstance(suites, list) or any(x not in SUITES for x in suites):
        raise ScenarioError("lemmas.suites", f"must be a list drawn from {', '.join(SUITES)}")
    out["lemmas"] = {"suites": list(suites), "count": _int(lem.get("count", 100), "lemmas.count", 1),
                     "n": _int(lem.get("n", 128), "lemmas.n", 8)}
    return out


@dataclass
class Scenario:
    """A validated, fully defaulted experiment description."""

    data: dict

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Scenario":
        return cls(_normalize(copy.deepcopy(dict(raw))))

    @classmethod
    def from_toml(cls, text: str) -> "Scenario":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ScenarioError("<file>", f"not valid TOML: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_file(cls, path) -> "Scenario":
        path = Path(path)
        if not path.is_file():
            raise ScenarioError("--config", f"no such file {str(path)!r}")
        return cls.from_toml(path.read_text())

    def to_toml(self) -> str:
        return tomli_w.dumps(self.data)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def hash(self) -> str:
        """Content hash of everything except the output location."""
        body = {k: v for k, v in self.data.items() if k != "output"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    @property
    def grid(self) -> Grid:
        g = self.data["grid"]
        return Grid(tuple(g["n"]), tuple(g["half_width"]))

    def model(self):
        cfg = dict(self.data["model"])
        pc = cfg.pop("positive_count", None)
        try:
            return model_from_config(cfg, self.data["grid"]["dim"], pc)
        except (ModelRegistrationError, KeyError, TypeError) as exc:
            raise ScenarioError("model", str(exc)) from exc

    def solver_params(self, **overrides) -> SolverParams:
        s = dict(self.data["solver"])
        s.update(overrides)
        try:
            return SolverParams(**s)
        except ValueError as exc:
            raise ScenarioError("solver", str(exc)) from exc

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "Scenario":
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["initial"]["seed"] = int(seed)
        if out is not None:
            data["output"]["directory"] = str(out)
        return Scenario.from_dict(data)


def load_scenario(path) -> Scenario:
    return Scenario.from_file(path)


def build_initial_data(scenario: Scenario) -> SpectralField:
    """Initial field of the scenario's family on its grid."""
    grid = scenario.grid
    init = scenario["initial"]
    amp, width = init["amplitude"], init["width"]
    fam = init["family"]
    if fam == "gaussian":
        c, k0 = init["center"], init["wavenumber"]

        def func(*x):
            r2 = sum((xi - ci) ** 2 for xi, ci in zip(x, c))
            phase = sum(ki * xi for ki, xi in zip(k0, x))
            return amp * np.exp(-r2 / (2.0 * width ** 2)) * np.exp(1j * phase)

        return SpectralField.from_function(grid, func)
    if fam == "plane-wave":
        xi = [math.pi * m / R for m, R in zip(init["mode"], grid.half_width)]
        return SpectralField.from_function(
            grid, lambda *x: amp * np.exp(1j * sum(a * b for a, b in zip(xi, x))))
    ens = EnsembleSpec(1, grid, cutoff=init["cutoff"], amplitude=amp, seed=init["seed"],
                       window=init.get("window"))
    return ens.sample(0)


# ---------------------------------------------------------------------------
# run directories


def git_blob_hash(data: bytes) -> str:
    """Content hash in the format git uses for blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunRecord:
    """Manifest of one command: scenario hash, output hashes, timing and summary."""

    command: str
    scenario_hash: str | None
    outputs: dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0
    summary: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None

    def add(self, directory: Path, name: str, content: str | bytes) -> None:
        data = content.encode() if isinstance(content, str) else content
        path = directory / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.outputs[name] = git_blob_hash(data)

    def add_existing(self, directory: Path, name: str) -> None:
        self.outputs[name] = git_blob_hash((directory / name).read_bytes())

    def to_dict(self) -> dict:
        return {"command": self.command, "scenario_hash": self.scenario_hash,
                "outputs": dict(sorted(self.outputs.items())), "wall_time": self.wall_time,
                "summary": self.summary, "status": self.status, "error": self.error}

    def write(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / MANIFEST).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True,
                                                     default=_jsonable) + "\n")

    @classmethod
    def read(cls, directory) -> "RunRecord":
        path = Path(directory) / MANIFEST
        if not path.is_file():
            raise ScenarioError("run", f"no manifest in {str(directory)!r}")
        d = json.loads(path.read_text())
        return cls(d["command"], d.get("scenario_hash"), d.get("outputs", {}),
                   d.get("wall_time", 0.0), d.get("summary", {}), d.get("status", "ok"),
                   d.get("error"))

    def verify(self, directory) -> list[str]:
        """Names of outputs whose bytes no longer match the recorded hash."""
        bad = []
        for name, digest in self.outputs.items():
            path = Path(directory) / name
            if not path.is_file() or git_blob_hash(path.read_bytes()) != digest:
                bad.append(name)
        return bad


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    return str(obj)


def _finite(value):
    return None if value is None or not math.isfinite(value) else float(value)


# ---------------------------------------------------------------------------
# commands


@dataclass
class Context:
    scenario: Scenario | None
    out: Path
    threads: int
    profile: dict
    seed: int | None
    extra: argparse.Namespace


def _exact_linear(model, phi0: SpectralField, eps: float, T: float) -> SpectralField:
    """Exact constant-coefficient flow of the linear part for time T."""
    grid = phi0.grid
    sig = model.metric.signature.diagonal
    sym = -1j * sum(sig[j] * grid.frequency(j) ** 2 for j in range(grid.dim)) - eps * grid.xi_squared ** 2
    return SpectralField.from_spectrum(grid, phi0.spectrum() * np.exp(T * sym))


def cmd_simulate(ctx: Context) -> int:
    sc = ctx.scenario
    record = RunRecord("simulate", sc.hash)
    start = time.perf_counter()
    model = sc.model()
    phi0 = build_initial_data(sc)
    params = sc.solver_params()
    diag_cfg = sc["diagnostics"]
    out = ctx.out
    out.mkdir(parents=True, exist_ok=True)
    record.add(out, "scenario.toml", sc.to_toml())
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            traj = run(model, phi0, params)
            series = traj.diagnostics
            summary: dict[str, Any] = {"final_L2": series["L2"][-1],
                                       "max_step_growth": series.metadata["max_step_growth"]}
            funcs = diag_cfg["functionals"]
            if "Y" in funcs:
                series = series.merge(good_term_Y(traj, diag_cfg["s1"]))
            if "X" in funcs:
                series = series.merge(master_X(traj, diag_cfg["s1"], diag_cfg["s2"]))
            if "W" in funcs:
                series = series.merge(good_term_W(traj, diag_cfg["s3"]))
            if "bootstrap" in funcs:
                boot = bootstrap_monitor(traj, s1=diag_cfg["s1"], s2=diag_cfg["s2"],
                                         s3=diag_cfg["s3"],
                                         ceiling=ctx.profile["bootstrap_ceiling"])
                series = series.merge(DiagnosticSeries(boot.times, {"bootstrap_ratio":
                                                                    boot.channels["ratio"]}))
                summary["bootstrap"] = {k: v for k, v in boot.metadata.items()}
            if "residual" in funcs:
                res_rows = []
                for a in diag_cfg["alpha"]:
                    for k in diag_cfg["axes"]:
                        r = momentum_identity_residual(traj, tuple(a), k)
                        res_rows.append({"alpha": a, "axis": k,
                                         "max_residual": float(np.max(r["residual"]))})
                        tag = "".join(map(str, a))
                        record.add(out, f"residual_a{tag}_k{k}.csv", r.to_csv())
                summary["residual"] = res_rows
            if "ledger" in funcs:
                ledgers = []
                for a in diag_cfg["alpha"]:
                    for k in diag_cfg["axes"]:
                        led = weighted_momentum_ledger(traj, tuple(a), k, diag_cfg["s2"])
                        tag = "".join(map(str, a))
                        record.add(out, f"ledger_a{tag}_k{k}.csv", led.to_csv())
                        record.add(out, f"ledger_a{tag}_k{k}.ndjson", led.to_ndjson())
                        ledgers.append({"alpha": a, "axis": k, "constant": _finite(led.constant),
                                        "identity_residual": led.identity_residual})
                summary["ledger"] = ledgers
            if model.is_linear:
                exact = _exact_linear(model, traj.fields[0], params.epsilon, params.T)
                ref = sobolev_norm(exact)
                err = sobolev_norm(traj.final - exact)
                summary["analytic_error"] = err / ref if ref > 0 else err
        summary["warnings"] = sorted({f"{w.category.__name__}: {w.message}" for w in caught})
    except (StabilityError, NumericalError) as exc:
        record.status, record.error = "failed", f"{type(exc).__name__}: {exc}"
        record.wall_time = time.perf_counter() - start
        record.write(out)
        print(f"simulate: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except IndexConstraintError as exc:
        raise ScenarioError("diagnostics", str(exc)) from exc
    for rec in write_trajectory(traj, out / "checkpoints"):
        record.add_existing(out, f"checkpoints/{rec['file']}")
    record.add(out, "diagnostics.csv", series.to_csv())
    record.add(out, "diagnostics.ndjson", series.to_ndjson())
    record.summary = summary
    record.wall_time = time.perf_counter() - start
    code = EXIT_OK
    boot = summary.get("bootstrap")
    if boot and boot.get("exceeds_ceiling"):
        record.status = "threshold"
        code = EXIT_THRESHOLD
    record.write(out)
    print(f"simulate: {len(traj)} checkpoints written to {out}")
    return code


def cmd_converge(ctx: Context) -> int:
    sc = ctx.scenario
    halvings = ctx.extra.halvings if ctx.extra.halvings is not None else sc["converge"]["halvings"]
    if halvings < 2:
        raise ScenarioError("converge.halvings", "must be at least 2")
    params = sc.solver_params()
    if params.epsilon <= 0:
        raise ScenarioError("solver.epsilon", "must be positive for a viscosity continuation")
    model = sc.model()
    phi0 = build_initial_data(sc)
    record = RunRecord("converge", sc.hash)
    start = time.perf_counter()
    out = ctx.out
    out.mkdir(parents=True, exist_ok=True)
    record.add(out, "scenario.toml", sc.to_toml())
    s_prime = sc["converge"]["s_prime"]
    try:
        result = viscosity_continuation(model, phi0, params, halvings, s_prime, ctx.threads)
    except ContinuationError as exc:
        record.status, record.error = "failed", str(exc)
        record.wall_time = time.perf_counter() - start
        record.write(out)
        print(f"converge: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    table = result.table()
    if model.is_linear:
        finals = [_exact_linear(model, result.members[0].trajectory.fields[0], e, params.T)
                  for e in result.epsilons]
        table.add_channel("closed_form", [sobolev_norm(a - b, s_prime)
                                          for a, b in zip(finals, finals[1:])])
    record.add(out, "convergence.csv", table.to_csv())
    d = result.distances
    ratios = [b / a if a > 0 else math.nan for a, b in zip(d, d[1:])]
    decreasing = all(b < a for a, b in zip(d, d[1:]))
    record.summary = {"epsilons": result.epsilons, "distances": d, "ratios": ratios,
                      "strictly_decreasing": decreasing}
    record.wall_time = time.perf_counter() - start
    code = EXIT_OK
    if not decreasing:
        record.status = "threshold"
        code = EXIT_THRESHOLD
    record.write(out)
    print(table.to_csv(), end="")
    return code


def cmd_verify_lemmas(ctx: Context) -> int:
    lem = ctx.scenario["lemmas"] if ctx.scenario else {"suites": sorted(SUITES), "count": 100,
                                                        "n": 128}
    suites = lem["suites"]
    if ctx.extra.suites is not None:
        suites = [s for s in ctx.extra.suites.split(",") if s.strip()]
        for s in suites:
            if s not in SUITES:
                raise ScenarioError("--suites", f"unknown suite {s!r}")
    count = ctx.extra.count or lem["count"]
    n = ctx.extra.n or lem["n"]
    seed = ctx.seed if ctx.seed is not None else 0
    record = RunRecord("verify-lemmas", ctx.scenario.hash if ctx.scenario else None)
    start = time.perf_counter()
    out = ctx.out
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for name in suites:
        rep = run_suite(name, count=count, n=n, seed=seed, workers=ctx.threads)
        if rep.kind == "identity":
            rep.tolerance = ctx.profile["identity"]
        reports.append(rep)
        wname = f"witnesses/{name}.qnls"
        (out / "witnesses").mkdir(exist_ok=True)
        if rep.dump_witness(out / wname) is not None:
            record.add_existing(out, wname)
    record.add(out, "lemmas.ndjson", "".join(r.to_ndjson() for r in reports))
    record.add(out, "lemmas.txt", summary_table(reports))
    failed = [r.lemma_id for r in reports if not r.passed]
    unstable = [r.lemma_id for r in reports
                if r.stability_factor is not None and not r.stable(ctx.profile["stability"])]
    record.summary = {"suites": suites, "failed": failed, "unstable": unstable, "seed": seed,
                      "count": count, "n": n}
    record.wall_time = time.perf_counter() - start
    code = EXIT_OK
    if failed:
        record.status = "threshold"
        code = EXIT_THRESHOLD
    record.write(out)
    print(summary_table(reports), end="")
    return code


def cmd_diff_run(ctx: Context) -> int:
    sc = ctx.scenario
    model = sc.model()
    grid = sc.grid
    phi0 = build_initial_data(sc)
    size, width = sc["diff"]["perturbation"], sc["diff"]["width"]

    def bump(*x):
        r2 = sum(xi ** 2 for xi in x)
        return np.exp(-r2 / (2 * width ** 2)) * (1.0 + 1j * x[0] / width)

    pert = SpectralField.from_function(grid, bump)
    if sc["solver"]["dealias"]:
        pert = pert.dealiased()
    pert = pert * (size / sobolev_norm(pert, 0.5))
    params = sc.solver_params()
    record = RunRecord("diff-run", sc.hash)
    start = time.perf_counter()
    out = ctx.out
    out.mkdir(parents=True, exist_ok=True)
    record.add(out, "scenario.toml", sc.to_toml())
    try:
        series = difference_run(model, phi0, phi0 + pert, params, sc["diagnostics"]["s3"])
    except (StabilityError, NumericalError) as exc:
        record.status, record.error = "failed", str(exc)
        record.write(out)
        print(f"diff-run: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    record.add(out, "difference.csv", series.to_csv())
    v = series["v_H1/2"]
    growth = float(np.max(v) / v[0])
    record.summary = {"v0_H1/2": float(v[0]), "max_growth": growth,
                      "limit": ctx.profile["difference_growth"]}
    record.wall_time = time.perf_counter() - start
    code = EXIT_OK
    if growth > ctx.profile["difference_growth"]:
        record.status = "threshold"
        code = EXIT_THRESHOLD
    record.write(out)
    print(f"diff-run: max ||v(t)||/||v(0)|| in H^1/2 = {growth:.6f}")
    return code


def _report_text(record: RunRecord, directory: Path) -> tuple[str, str]:
    lines = [f"run: {directory}", f"command: {record.command}", f"status: {record.status}",
             f"scenario: {record.scenario_hash}", f"wall time: {record.wall_time:.3f} s", ""]
    rows = [("section", "key", "value")]
    s = record.summary
    boot = s.get("bootstrap")
    if boot is not None:
        lines.append("bootstrap ratio")
        for k in ("class", "sup_ratio", "ceiling", "exceeds_ceiling", "special_case"):
            if k in boot:
                lines.append(f"  {k}: {boot[k]}")
                rows.append(("bootstrap", k, str(boot[k])))
        lines.append("")
    for led in s.get("ledger", []):
        lines.append(f"ledger alpha={led['alpha']} axis={led['axis']}: constant={led['constant']}")
        rows.append(("ledger", f"a{led['alpha']}_k{led['axis']}", str(led["constant"])))
    for res in s.get("residual", []):
        lines.append(f"residual alpha={res['alpha']} axis={res['axis']}: "
                     f"max={res['max_residual']:.4e}")
        rows.append(("residual", f"a{res['alpha']}_k{res['axis']}", repr(res["max_residual"])))
    for key in ("analytic_error", "final_L2", "max_growth", "distances", "ratios", "failed"):
        if key in s:
            lines.append(f"{key}: {s[key]}")
            rows.append(("summary", key, json.dumps(s[key], default=_jsonable)))
    diag = directory / "diagnostics.csv"
    if diag.is_file():
        series = DiagnosticSeries.from_csv(diag.read_text())
        lines += ["", "channels (plot-ready columns in diagnostics.csv):"]
        for name in series.channels:
            vals = series[name]
            lines.append(f"  {name}: first={vals[0]:.6e} last={vals[-1]:.6e} max={np.max(vals):.6e}")
            rows.append(("channel", name, repr(float(np.max(vals)))))
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return "\n".join(lines) + "\n", buf.getvalue()


def cmd_report(ctx: Context) -> int:
    directory = Path(ctx.extra.run_dir) if ctx.extra.run_dir else ctx.out
    record = RunRecord.read(directory)
    bad = record.verify(directory)
    if bad:
        print(f"report: hash mismatch for {', '.join(sorted(bad))}", file=sys.stderr)
        return EXIT_VALIDATION
    text, table = _report_text(record, directory)
    (directory / "report.txt").write_text(text)
    (directory / "report.csv").write_text(table)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "converge": cmd_converge,
            "verify-lemmas": cmd_verify_lemmas, "report": cmd_report, "diff-run": cmd_diff_run}
NEEDS_CONFIG = {"simulate", "converge", "diff-run"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario TOML file")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out", help="output directory (overrides output.directory)")
    common.add_argument("--threads", type=int, help="worker count (capped by QNLS_THREADS)")
    common.add_argument("--tolerance-profile", choices=sorted(TOLERANCE_PROFILES),
                        default="default")
    parser = argparse.ArgumentParser(prog="qnlslab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run one scenario")
    p = sub.add_parser("converge", parents=[common], help="viscosity continuation table")
    p.add_argument("--halvings", type=int)
    p = sub.add_parser("verify-lemmas", parents=[common], help="run inequality suites")
    p.add_argument("--suites", help="comma-separated suite names (empty string: none)")
    p.add_argument("--count", type=int)
    p.add_argument("--n", type=int)
    p = sub.add_parser("report", parents=[common], help="summarize a run directory")
    p.add_argument("run_dir", nargs="?")
    sub.add_parser("diff-run", parents=[common], help="difference of two nearby runs")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    try:
        scenario = None
        if args.config:
            scenario = Scenario.from_file(args.config).with_overrides(args.seed, args.out)
        elif args.command in NEEDS_CONFIG:
            raise ScenarioError("--config", f"required for {args.command}")
        if args.threads is not None and args.threads < 1:
            raise ScenarioError("--threads", "must be positive")
        out = Path(args.out) if args.out else Path(scenario["output"]["directory"]
                                                   if scenario else "run")
        ctx = Context(scenario, out, resolve_threads(args.threads),
                      TOLERANCE_PROFILES[args.tolerance_profile], args.seed, args)
        return COMMANDS[args.command](ctx)
    except ScenarioError as exc:
        print(f"{args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (StabilityError, NumericalError) as exc:
        print(f"{args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
