"""Frequency-domain distortion analysis and time-domain error metrics.

All spectra are DFTs of whole steady-state periods, divided by the period
length ``N``. Levels are quoted in dB (20 log10 of magnitudes). For every
realisation the spectra of the retained periods are averaged; the spread
over periods gives the noise variance of that average.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .excitation import EVEN_DETECTION, EXCITED, ODD_DETECTION, ExcitationDesign
from .records import SignalRecord, read_csv, write_csv

TINY = 1e-300


def db(x) -> np.ndarray:
    return 20 * np.log10(np.abs(x) + TINY)


@dataclass
class SpectralEstimate:
    """Period-averaged spectra of ``R`` realisations on bins ``0..N/2``.

    ``y_var`` is the variance of the period average (sample variance over
    periods divided by the number of periods).
    """

    design: ExcitationDesign
    u: np.ndarray  # (R, F)
    y: np.ndarray  # (R, F)
    y_var: np.ndarray  # (R, F)
    periods: int

    @property
    def freq(self) -> np.ndarray:
        return self.design.freq

    @property
    def lines(self) -> np.ndarray:
        return self.design.lines

    @property
    def n_realisations(self) -> int:
        return self.y.shape[0]


def _periods(x: np.ndarray, n: int, discard: int) -> np.ndarray:
    if x.size % n:
        raise ValueError(f"record length {x.size} is not a whole number of periods of {n}")
    blocks = x.reshape(-1, n)[discard:]
    if blocks.shape[0] < 2:
        raise ValueError("need at least two retained periods to estimate the noise")
    return blocks


def spectra(records: Sequence[SignalRecord], discard: int = 1) -> SpectralEstimate:
    """Spectra of input and measured output, first ``discard`` periods dropped.

    All records must share one excitation spec (phases may differ).
    """
    if not records:
        raise ValueError("no records")
    base = records[0].design
    if base is None:
        raise ValueError("records carry no excitation design")
    n = base.spec.n_samples
    us, ys, vs = [], [], []
    p = 0
    for rec in records:
        if rec.design is None or rec.design.spec.n_samples != n or not np.array_equal(rec.design.lines, base.lines):
            raise ValueError("records do not share one excitation grid")
        ub = np.fft.rfft(_periods(rec.u, n, discard), axis=1) / n
        yb = np.fft.rfft(_periods(rec.y, n, discard), axis=1) / n
        p = yb.shape[0]
        us.append(ub.mean(axis=0))
        ys.append(yb.mean(axis=0))
        vs.append(np.var(yb, axis=0, ddof=1) / p)
    return SpectralEstimate(design=base, u=np.array(us), y=np.array(ys), y_var=np.array(vs), periods=p)


def bla(est: SpectralEstimate) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best linear approximation on the excited lines.

    Returns ``(freq, G, var_G)``: the realisation average of ``Y/U`` and the
    variance of that average (NaN with a single realisation).
    """
    idx = est.design.excited
    g_r = est.y[:, idx] / est.u[:, idx]
    g = g_r.mean(axis=0)
    r = g_r.shape[0]
    var = np.var(g_r, axis=0, ddof=1) / r if r > 1 else np.full(idx.size, np.nan)
    return est.freq[idx], g, var


@dataclass
class DistortionReport:
    """Output, detection-line and noise levels (linear magnitudes) per bin.

    ``output`` is the realisation-RMS magnitude of the averaged output
    spectrum; ``noise`` the realisation-RMS standard deviation of that
    average. ``lines`` holds the classification codes.
    """

    freq: np.ndarray
    lines: np.ndarray
    output: np.ndarray
    noise: np.ndarray
    meta: dict = field(default_factory=dict)

    def select(self, code: int) -> tuple[np.ndarray, np.ndarray]:
        idx = np.flatnonzero(self.lines == code)
        return self.freq[idx], self.output[idx]

    def peak_output(self) -> float:
        return float(self.output[self.lines == EXCITED].max())

    def resonance(self) -> float:
        """Frequency of the largest output on an excited line."""
        f, y = self.select(EXCITED)
        return float(f[np.argmax(y)])

    def band_level(self, code: int, centre: float, half_width: float = 0.5) -> float:
        """Largest level of class ``code`` within ``centre +- half_width``, in dB relative to the peak output."""
        f, y = self.select(code)
        mask = np.abs(f - centre) <= half_width
        if not mask.any():
            raise ValueError(f"no lines of class {code} within {centre} +- {half_width} Hz")
        return float(db(y[mask].max()) - db(self.peak_output()))

    def level_at(self, code: int, freq: float) -> float:
        """Absolute dB level of the class-``code`` line nearest ``freq``."""
        f, y = self.select(code)
        return float(db(y[np.argmin(np.abs(f - freq))]))

    def table(self) -> dict[str, np.ndarray]:
        """Per-bin dB table; NaN where a bin does not belong to the column's class."""
        out_db = db(self.output)
        cols = {"f": self.freq}
        for name, code in (("output_db", EXCITED), ("odd_db", ODD_DETECTION), ("even_db", EVEN_DETECTION)):
            cols[name] = np.where(self.lines == code, out_db, np.nan)
        cols["noise_db"] = db(self.noise)
        return cols

    def summary(self, centre: float | None = None) -> dict:
        """Resonance, peak output and detection levels near ``centre`` and ``2 * centre``.

        ``centre`` defaults to this report's own resonance; pass the open-loop
        resonance to compare bands across runs.
        """
        res = self.resonance() if centre is None else centre
        out = {"resonance_hz": self.resonance(), "peak_output_db": float(db(self.peak_output()))}
        for name, code in (("odd", ODD_DETECTION), ("even", EVEN_DETECTION)):
            for label, centre in (("resonance", res), ("second_harmonic", 2 * res)):
                try:
                    out[f"{name}_near_{label}_db"] = self.band_level(code, centre)
                except ValueError:
                    out[f"{name}_near_{label}_db"] = None
        return out

    @classmethod
    def read(cls, path: str | Path) -> "DistortionReport":
        """Rebuild a report from the CSV written by :meth:`write` (classes from the non-NaN columns)."""
        cols = read_csv(path)
        lines = np.zeros(cols["f"].size, dtype=np.int8)
        level = np.full(cols["f"].size, np.nan)
        for name, code in (("output_db", EXCITED), ("odd_db", ODD_DETECTION), ("even_db", EVEN_DETECTION)):
            mask = np.isfinite(cols[name])
            lines[mask] = code
            level[mask] = cols[name][mask]
        output = np.where(np.isfinite(level), 10 ** (level / 20), 0.0)
        return cls(freq=cols["f"], lines=lines, output=output, noise=10 ** (cols["noise_db"] / 20))

    def write(self, stem: str | Path, centre: float | None = None) -> tuple[Path, Path]:
        """``stem.csv`` with the per-bin table and ``stem.json`` with the summary."""
        stem = Path(stem)
        csv_path = write_csv(stem.with_suffix(".csv"), self.table())
        json_path = stem.with_suffix(".json")
        json_path.write_text(json.dumps({**self.meta, **self.summary(centre)}, indent=2) + "\n")
        return csv_path, json_path


def distortions(est: SpectralEstimate) -> DistortionReport:
    """Nonlinear distortion levels.

    Levels are not corrected for noise: a detection line at the noise floor
    simply reads as the floor.
    """
    output = np.sqrt(np.mean(np.abs(est.y) ** 2, axis=0))
    noise = np.sqrt(np.mean(est.y_var, axis=0))
    lines = est.lines.copy()
    lines[0] = 0
    return DistortionReport(freq=est.freq, lines=lines, output=output, noise=noise,
                            meta={"realisations": est.n_realisations, "periods": est.periods})


def compare_runs(before: DistortionReport, after: DistortionReport) -> dict:
    """Summary deltas between two analyses of the same excitation grid."""
    if not np.array_equal(before.lines, after.lines):
        raise ValueError("reports use different line grids")
    res = before.resonance()
    out = {
        "resonance_before_hz": res,
        "resonance_after_hz": after.resonance(),
        "lowest_line_hz": float(before.select(EXCITED)[0][0]),
        "lowest_line_gain_db": float(db(after.select(EXCITED)[1][0]) - db(before.select(EXCITED)[1][0])),
    }
    for name, code in (("odd", ODD_DETECTION), ("even", EVEN_DETECTION)):
        for label, centre in (("resonance", res), ("second_harmonic", 2 * res)):
            try:
                out[f"{name}_suppression_{label}_db"] = (
                    db(before.select(code)[1][np.abs(before.select(code)[0] - centre) <= 0.5].max())
                    - db(after.select(code)[1][np.abs(after.select(code)[0] - centre) <= 0.5].max())
                ).item()
            except ValueError:
                out[f"{name}_suppression_{label}_db"] = None
    return out


# ---------------------------------------------------------------------------
# time domain


def rms(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x)))


@dataclass(frozen=True)
class ErrorMetrics:
    """RMS levels of the measured output and the two error signals.

    Ratios are in percent of the measured-output RMS. ``mean_ukf`` is the
    mean estimation error with its standard error from batch means.
    """

    rms_y: float
    rms_mpc: float
    rms_ukf: float
    ratio_mpc_pct: float
    ratio_ukf_pct: float
    mean_ukf: float
    se_mean_ukf: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def error_metrics(records, discard: int = 1, batch: int | None = None) -> ErrorMetrics:
    """Error statistics of closed-loop records, first ``discard`` periods dropped.

    ``records`` are :class:`~fblin.plantsim.ClosedLoopRecord` objects. The
    period length in inner samples comes from the excitation design when
    present; ``batch`` (inner samples) overrides it and also sets the batch
    length for the standard error of the mean.
    """
    if not isinstance(records, (list, tuple)):
        records = [records]
    ys, em, eu, means = [], [], [], []
    for rec in records:
        if batch is not None:
            period = batch
        elif rec.design is not None:
            period = rec.design.spec.n_samples * rec.np_max
        else:
            raise ValueError("period length unknown; pass batch")
        start = discard * period
        if start >= rec.t.size:
            raise ValueError("nothing left after discarding the transient")
        ys.append(rec.y_meas[start:])
        em.append(rec.err_mpc[start:])
        ukf = rec.err_ukf[start:]
        eu.append(ukf)
        nb = ukf.size // period
        means.extend(ukf[: nb * period].reshape(nb, period).mean(axis=1))
    y, m, u = (np.concatenate(a) for a in (ys, em, eu))
    means = np.asarray(means)
    se = float(np.std(means, ddof=1) / np.sqrt(means.size)) if means.size > 1 else float("nan")
    ry = rms(y)
    return ErrorMetrics(rms_y=ry, rms_mpc=rms(m), rms_ukf=rms(u), ratio_mpc_pct=100 * rms(m) / ry,
                        ratio_ukf_pct=100 * rms(u) / ry, mean_ukf=float(np.mean(u)), se_mean_ukf=se)
