"""Sampled time-domain records passed between simulation and analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np

if TYPE_CHECKING:
    from .excitation import ExcitationDesign


@dataclass
class SignalRecord:
    """Uniformly sampled input/output record.

    ``y`` is the measured output, ``y_true`` the noise-free output (simulation
    only) and ``x`` the state trajectory when one is available. ``design`` is
    the multisine design the input was synthesised from, if any.
    """

    t: np.ndarray
    u: np.ndarray
    y: Optional[np.ndarray] = None
    y_true: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None
    design: Optional["ExcitationDesign"] = field(default=None, repr=False)
    realisation: int = 0

    def __len__(self) -> int:
        return len(self.t)

    @property
    def fs(self) -> float:
        return 1.0 / (self.t[1] - self.t[0]) if len(self.t) > 1 else float("nan")

    def channels(self) -> dict[str, np.ndarray]:
        out = {"t": self.t, "u": self.u}
        for name in ("y", "y_true"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        return out


def write_csv(path: str | Path, columns: dict[str, np.ndarray]) -> Path:
    """Write equal-length 1-D arrays as CSV columns (full float precision)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    data = np.column_stack([np.asarray(columns[k], dtype=float) for k in names])
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in data:
            writer.writerow([repr(float(v)) for v in row])
    return path


def read_csv(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        names = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows, dtype=float).reshape(-1, len(names))
    return {name: data[:, i].copy() for i, name in enumerate(names)}
