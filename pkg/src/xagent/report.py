"""Run reports and sidecar artifact files.

A report is one JSON document per run: config echo, invariant check rows,
losses, per-layer mean-attention-distance values, probe trajectories, and
wall-clock timings. Serialization is key-sorted so identical runs produce
byte-identical documents apart from the timing block.

Heatmaps are plain-text grids: a header line ``rows cols min max`` followed
by row-major values, everything printed to 9 significant digits. Trajectory
files are column-named tables with one step per line.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .numerics import as_matrix

__all__ = [
    "InvariantResult",
    "RunReport",
    "emit_heatmap",
    "emit_trajectory",
    "read_heatmap",
    "read_trajectory",
]

_FMT = "%.9g"


@dataclass
class InvariantResult:
    name: str
    passed: bool
    measured: float
    tolerance: float


@dataclass
class RunReport:
    subcommand: str
    config: dict
    invariants: list = field(default_factory=list)
    losses: dict = field(default_factory=dict)
    mad: dict = field(default_factory=dict)
    probe: dict | None = None
    variants: list | None = None
    timings: dict = field(default_factory=dict)
    emitted_files: list = field(default_factory=list)

    def all_passed(self) -> bool:
        ok = all(inv.passed for inv in self.invariants)
        if self.variants is not None:
            ok = ok and all(v["invariants_passed"] for v in self.variants)
        return ok

    def to_dict(self) -> dict:
        data = asdict(self)
        data["invariants"] = [asdict(inv) for inv in self.invariants]
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def without_timings(self) -> dict:
        data = self.to_dict()
        data.pop("timings", None)
        return data

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        data = dict(data)
        data["invariants"] = [InvariantResult(**inv) for inv in data.get("invariants", [])]
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def emit_heatmap(weights, path) -> Path:
    """Write a matrix as a text grid with a ``rows cols min max`` header."""
    m = as_matrix(weights, "heatmap")
    path = Path(path)
    header = "%d %d %s %s" % (m.shape[0], m.shape[1], _FMT % m.min(), _FMT % m.max())
    lines = [header]
    lines.extend(" ".join(_FMT % v for v in row) for row in m)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_heatmap(path) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    head = lines[0].split()
    rows, cols = int(head[0]), int(head[1])
    values = [float(v) for line in lines[1:] for v in line.split()]
    if len(values) != rows * cols:
        raise ArgumentError(
            f"heatmap {path} declares {rows}x{cols} but holds {len(values)} values"
        )
    return np.array(values).reshape(rows, cols)


def emit_trajectory(columns: dict, path) -> Path:
    """Write named per-step series as a whitespace table with a header row."""
    names = list(columns)
    series = [np.asarray(columns[n], dtype=np.float64) for n in names]
    length = len(series[0])
    if any(len(s) != length for s in series):
        raise ArgumentError("trajectory columns must share a length")
    path = Path(path)
    lines = [" ".join(names)]
    for i in range(length):
        lines.append(" ".join(_FMT % s[i] for s in series))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_trajectory(path) -> dict:
    lines = Path(path).read_text().strip().splitlines()
    names = lines[0].split()
    rows = [[float(v) for v in line.split()] for line in lines[1:]]
    data = np.array(rows) if rows else np.zeros((0, len(names)))
    return {n: data[:, i] for i, n in enumerate(names)}
