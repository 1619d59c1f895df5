"""Time series containers, estimate ledgers and their exporters."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

__all__ = ["DiagnosticSeries", "EstimateLedger", "default_s_indices"]


def default_s_indices(dim: int) -> dict[str, int]:
    """Smallest integer regularity indices allowed for dimension ``dim``.

    Quadratic pair: d/2 + 5/2 < s1, d/2 + 1 < s2 and s2 + 2 <= s1 + 1/2.
    Cubic index: s3 = ceil((d+2)/2) + 1.
    """
    s2 = math.floor(dim / 2 + 1) + 1
    s1 = max(math.ceil(dim / 2) + 3, s2 + 2)
    return {"s1": s1, "s2": s2, "s3": math.ceil((dim + 2) / 2) + 1}


def _plain(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    return value


@dataclass
class DiagnosticSeries:
    """Named channels sampled at a common list of times."""

    times: list[float] = field(default_factory=list)
    channels: dict[str, list[float]] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def on_times(cls, times: Iterable[float], **metadata) -> "DiagnosticSeries":
        return cls([float(t) for t in times], {}, dict(metadata))

    def add_channel(self, name: str, values: Iterable[float]) -> None:
        vals = [float(v) for v in values]
        if len(vals) != len(self.times):
            raise ValueError(f"channel {name!r} has {len(vals)} values for {len(self.times)} times")
        self.channels[name] = vals

    def append(self, time: float, **values: float) -> None:
        """Append one sample; every existing channel must receive a value."""
        if self.times and time <= self.times[-1]:
            raise ValueError("times must be strictly increasing")
        if self.channels and set(values) != set(self.channels):
            raise ValueError("append needs a value for every channel")
        self.times.append(float(time))
        for k, v in values.items():
            self.channels.setdefault(k, []).append(float(v))

    def merge(self, other: "DiagnosticSeries") -> "DiagnosticSeries":
        """Union of channels over identical times; labels merged in sorted order."""
        if not np.allclose(self.times, other.times, rtol=0, atol=1e-12):
            raise ValueError("cannot merge series sampled at different times")
        out = DiagnosticSeries(list(self.times), {}, {**self.metadata, **other.metadata})
        combined = {**self.channels, **other.channels}
        for name in sorted(combined):
            out.channels[name] = list(combined[name])
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return np.asarray(self.channels[name])

    def __contains__(self, name: str) -> bool:
        return name in self.channels

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(self.channels)
        meta = ";".join(f"{k}={_plain(v)}" for k, v in sorted(self.metadata.items()))
        if meta:
            buf.write(f"# {meta}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time"] + names)
        for i, t in enumerate(self.times):
            writer.writerow([repr(t)] + [repr(self.channels[n][i]) for n in names])
        return buf.getvalue()

    def to_ndjson(self) -> str:
        lines = []
        for i, t in enumerate(self.times):
            rec = {"time": t}
            rec.update({n: v[i] for n, v in self.channels.items()})
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_csv(cls, text: str) -> "DiagnosticSeries":
        meta = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                for part in line[1:].strip().split(";"):
                    if "=" in part:
                        k, v = part.split("=", 1)
                        meta[k.strip()] = v
            elif line.strip():
                rows.append(line)
        reader = list(csv.reader(rows))
        header, body = reader[0], reader[1:]
        out = cls([float(r[0]) for r in body], {}, meta)
        for j, name in enumerate(header[1:], start=1):
            out.channels[name] = [float(r[j]) for r in body]
        return out


@dataclass
class EstimateLedger:
    """Labeled terms of one inequality together with the measured constant."""

    name: str
    lhs: dict[str, float] = field(default_factory=dict)
    rhs: dict[str, float] = field(default_factory=dict)
    advisory: bool = False
    notes: list[str] = field(default_factory=list)
    identity: dict[str, float] = field(default_factory=dict)
    identity_residual: float | None = None

    @property
    def lhs_total(self) -> float:
        return float(sum(self.lhs.values()))

    @property
    def rhs_total(self) -> float:
        return float(sum(self.rhs.values()))

    @property
    def constant(self) -> float:
        """LHS/RHS, or 0 when both vanish and inf when only RHS vanishes."""
        lhs, rhs = self.lhs_total, self.rhs_total
        if rhs == 0.0:
            return 0.0 if lhs == 0.0 else math.inf
        return lhs / rhs

    def to_dict(self) -> dict:
        return {"name": self.name, "lhs": dict(self.lhs), "rhs": dict(self.rhs),
                "constant": self.constant, "advisory": self.advisory, "notes": list(self.notes),
                "identity": dict(self.identity), "identity_residual": self.identity_residual}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["side", "term", "value"])
        for side, terms in (("lhs", self.lhs), ("rhs", self.rhs)):
            for k, v in terms.items():
                writer.writerow([side, k, repr(float(v))])
        writer.writerow(["", "constant", repr(self.constant)])
        return buf.getvalue()

    def to_ndjson(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"
