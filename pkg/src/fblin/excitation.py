"""Random-phase multisine excitation, full or odd with detection lines.

Seeds
-----
All randomness is drawn from ``numpy.random.SeedSequence([seed, stream])``:
stream 0 chooses the odd detection lines (fixed for every realisation of a
spec), stream 1 draws phases. Realisation ``r`` of a spec with seed ``s``
uses phase seed ``s + r``, so the detection lines stay put while the phases
change.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .records import SignalRecord, write_csv

LINES_STREAM = 0
PHASE_STREAM = 1

# line classification codes, indexed by DFT bin 0..N/2
UNEXCITED = 0
EXCITED = 1
ODD_DETECTION = 2
EVEN_DETECTION = 3

LINE_NAMES = {
    UNEXCITED: "unexcited",
    EXCITED: "excited",
    ODD_DETECTION: "odd-detection",
    EVEN_DETECTION: "even-detection",
}


def stream_rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, *extra]))


@dataclass(frozen=True)
class MultisineSpec:
    """Flat-amplitude random-phase multisine definition.

    ``kind`` is ``"full"`` (every line in band excited) or ``"odd"`` (odd
    lines only, one of every ``group_size`` consecutive odd lines withheld as
    a detection line).
    """

    n_samples: int
    fs: float
    f_min: float
    f_max: float
    rms: float
    kind: str = "odd"
    group_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2 or self.n_samples % 2:
            raise ValueError(f"n_samples must be an even integer >= 2, got {self.n_samples}")
        if self.kind not in ("full", "odd"):
            raise ValueError(f"kind must be 'full' or 'odd', got {self.kind!r}")
        if not 0 < self.f_min <= self.f_max < self.fs / 2:
            raise ValueError(f"need 0 < f_min <= f_max < fs/2, got {self.f_min}, {self.f_max}, fs={self.fs}")
        if self.rms < 0:
            raise ValueError("rms must be non-negative")
        if self.kind == "odd" and self.group_size < 1:
            raise ValueError("group_size must be >= 1")

    @property
    def f_res(self) -> float:
        return self.fs / self.n_samples

    @property
    def period(self) -> float:
        return self.n_samples / self.fs

    def band_lines(self) -> np.ndarray:
        """DFT line indices q >= 1 whose frequency lies in [f_min, f_max]."""
        q = np.arange(1, self.n_samples // 2)
        f = q * self.f_res
        tol = 1e-9 * self.f_res
        return q[(f >= self.f_min - tol) & (f <= self.f_max + tol)]


@dataclass
class ExcitationDesign:
    spec: MultisineSpec
    lines: np.ndarray  # classification per bin 0..N/2
    phases: np.ndarray  # phase per bin, zero where not excited
    signal: np.ndarray  # one period
    phase_seed: int = 0

    @property
    def freq(self) -> np.ndarray:
        return np.arange(self.lines.size) * self.spec.f_res

    @property
    def excited(self) -> np.ndarray:
        return np.flatnonzero(self.lines == EXCITED)

    @property
    def odd_detection(self) -> np.ndarray:
        return np.flatnonzero(self.lines == ODD_DETECTION)

    @property
    def even_detection(self) -> np.ndarray:
        return np.flatnonzero(self.lines == EVEN_DETECTION)

    def metadata(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "phase_seed": self.phase_seed,
            "excited": self.excited.tolist(),
            "odd_detection": self.odd_detection.tolist(),
            "even_detection": self.even_detection.tolist(),
        }


def classify_lines(spec: MultisineSpec) -> np.ndarray:
    lines = np.full(spec.n_samples // 2 + 1, UNEXCITED, dtype=np.int8)
    band = spec.band_lines()
    if spec.kind == "full":
        if band.size == 0:
            raise ValueError("band contains no excitable line")
        lines[band] = EXCITED
        return lines
    odd = band[band % 2 == 1]
    if odd.size == 0:
        raise ValueError("band contains no odd line to excite")
    if spec.group_size > odd.size:
        raise ValueError(f"group_size {spec.group_size} exceeds the {odd.size} odd lines in band")
    lines[band[band % 2 == 0]] = EVEN_DETECTION
    lines[odd] = EXCITED
    if spec.group_size > 1:
        rng = stream_rng(spec.seed, LINES_STREAM)
        n_groups = odd.size // spec.group_size
        picks = rng.integers(spec.group_size, size=n_groups)
        withheld = odd[np.arange(n_groups) * spec.group_size + picks]
        lines[withheld] = ODD_DETECTION
    return lines


def design(spec: MultisineSpec, phase_seed: int | None = None) -> ExcitationDesign:
    """Synthesise one period of the multisine.

    Phases are uniform on [0, 2pi); the period is produced by an inverse real
    DFT and rescaled so its sample RMS equals ``spec.rms`` exactly.
    """
    phase_seed = spec.seed if phase_seed is None else int(phase_seed)
    lines = classify_lines(spec)
    excited = np.flatnonzero(lines == EXCITED)
    phases = np.zeros(lines.size)
    phases[excited] = stream_rng(phase_seed, PHASE_STREAM).uniform(0.0, 2 * np.pi, size=excited.size)
    spectrum = np.zeros(lines.size, dtype=complex)
    spectrum[excited] = np.exp(1j * phases[excited])
    signal = np.fft.irfft(spectrum, n=spec.n_samples)
    rms = np.sqrt(np.mean(signal**2))
    signal = signal * (spec.rms / rms) if spec.rms > 0 else np.zeros_like(signal)
    return ExcitationDesign(spec=spec, lines=lines, phases=phases, signal=signal, phase_seed=phase_seed)


def realisations(spec: MultisineSpec, count: int, periods: int) -> list[SignalRecord]:
    """``count`` phase realisations, each tiled over ``periods`` periods."""
    if count < 1 or periods < 1:
        raise ValueError("count and periods must both be >= 1")
    out = []
    for r in range(count):
        d = design(spec, phase_seed=spec.seed + r)
        u = np.tile(d.signal, periods)
        t = np.arange(u.size) / spec.fs
        out.append(SignalRecord(t=t, u=u, design=d, realisation=r))
    return out


def export(record: SignalRecord, path: str | Path) -> tuple[Path, Path]:
    """Write ``t, u`` as CSV and the design metadata as JSON next to it."""
    path = Path(path)
    csv_path = write_csv(path.with_suffix(".csv"), {"t": record.t, "u": record.u})
    meta = record.design.metadata() if record.design is not None else {}
    meta["realisation"] = record.realisation
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=2) + "\n")
    return csv_path, json_path
