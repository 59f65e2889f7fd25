"""End-to-end scenarios: configuration, orchestration and summaries.

A scenario chains excitation design, open-loop runs, closed-loop runs and
analysis, writes every record and report under an output directory, and
collects scalar metrics in ``summary.json`` together with pass/fail results
for the thresholds listed in the config.

Randomness flows from ``ExperimentConfig.seed``: detection lines from
``(seed, 0)``, phases of realisation ``r`` from ``(seed + r, 1)`` and the
sensor noise of realisation ``r`` from ``(seed, 2, r)``. Each realisation is
therefore reproducible on its own, whatever order the runs happen in.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import analysis
from .errors import ConfigError, DivergenceError
from .estimator import UkfConfig
from .excitation import MultisineSpec, realisations
from .mpc import precompute_gains
from .plantsim import (ClosedLoopConfig, DuffingPlant, NoiseConfig, SurrogatePlant, run_linearised,
                       run_open_loop, run_open_loop_batch)
from .records import SignalRecord, write_csv
from .sigmodel import PolyNlssModel, load_model, resample, zero_quadratic

log = logging.getLogger(__name__)

CONFIG_SCHEMA = "fblin.experiment/1"
SCENARIOS = ("duffing-open", "duffing-linearised", "duffing-cubic-only", "duffing-extrapolation",
             "linear-world", "beam")
VARIANTS = ("full", "cubic-only", "linear")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PlantConfig:
    """``kind`` is ``"duffing"``, ``"surrogate"`` (linear part of ``model`` at ``ts`` plus
    delayed cubic feedback ``k_c``) or ``"model"`` (the controller's own model as the plant)."""

    kind: str = "duffing"
    m: float = 1.0
    c_l: float = 1.0
    k_l: float = 5e2
    k_q: float = 5e4
    k_c: float = 1e8
    substep: Optional[float] = None
    model: str = "beam_nlss"
    ts: Optional[float] = None


@dataclass
class ExcitationConfig:
    n_samples: int = 4000
    fs: float = 100.0
    f_min: float = 0.025
    f_max: float = 20.0
    rms: float = 0.12
    kind: str = "odd"
    group_size: int = 4


@dataclass
class SineConfig:
    freq: float = 2.0
    amplitude: float = 0.02
    duration: float = 20.0


@dataclass
class ControlConfig:
    ts_out: float = 0.01
    ts_in: float = 0.001
    q: float = 1e12
    r_delta: float = 1.0


@dataclass
class UkfSettings:
    r_cov: float = 1.13e-14
    q_scale: float = 0.05


@dataclass
class NoiseSettings:
    snr_db: float = 40.0
    sigma: Optional[float] = None


@dataclass
class ExperimentConfig:
    """Everything needed to rerun a scenario bit for bit."""

    scenario: str
    seed: int = 0
    model: str = "duffing_nlss"
    variant: str = "full"
    reference_variant: Optional[str] = None
    plant: PlantConfig = field(default_factory=PlantConfig)
    excitation: Optional[ExcitationConfig] = field(default_factory=ExcitationConfig)
    sine: Optional[SineConfig] = None
    control: ControlConfig = field(default_factory=ControlConfig)
    ukf: UkfSettings = field(default_factory=UkfSettings)
    noise: NoiseSettings = field(default_factory=NoiseSettings)
    realisations: int = 5
    periods: int = 3
    discard: int = 1
    closed_loop: bool = True
    full_scale: dict = field(default_factory=lambda: {"realisations": 10, "periods": 5})
    checks: dict = field(default_factory=dict)

    _nested = {"plant": PlantConfig, "excitation": ExcitationConfig, "sine": SineConfig,
               "control": ControlConfig, "ukf": UkfSettings, "noise": NoiseSettings}

    def to_dict(self) -> dict:
        doc = {"schema": CONFIG_SCHEMA}
        doc.update(asdict(self))
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        schema = doc.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "scenario" not in doc:
            raise ConfigError("config lacks a scenario")
        for key, sub in cls._nested.items():
            if doc.get(key) is not None:
                try:
                    doc[key] = sub(**doc[key])
                except TypeError as exc:
                    raise ConfigError(f"bad {key!r} section: {exc}") from exc
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    def scaled_up(self) -> "ExperimentConfig":
        """Copy with the full-scale realisation and period counts."""
        return replace(self, **{k: v for k, v in self.full_scale.items() if k in ("realisations", "periods")})

    def validate(self):
        """Cross-module consistency checks; raises :class:`ConfigError`."""
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        for v in (self.variant, self.reference_variant):
            if v is not None and v not in VARIANTS:
                raise ConfigError(f"unknown model variant {v!r}")
        if self.plant.kind not in ("duffing", "surrogate", "model"):
            raise ConfigError(f"unknown plant kind {self.plant.kind!r}")
        if self.excitation is None and self.sine is None:
            raise ConfigError("config needs an excitation or a sine section")
        if self.excitation is not None:
            if self.periods <= self.discard + 1:
                raise ConfigError("need at least two periods after discarding the transient")
            if self.realisations < 1:
                raise ConfigError("realisations must be >= 1")
            try:
                self.multisine()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        ClosedLoopConfig(self.control.ts_out, self.control.ts_in)
        fs_in = 1 / self.control.ts_out
        if self.closed_loop and self.excitation is not None and abs(self.excitation.fs - fs_in) > 1e-9 * fs_in:
            raise ConfigError("closed-loop runs need the excitation rate to equal 1/ts_out")
        if not (self.control.q > 0 and self.control.r_delta > 0):
            raise ConfigError("MPC weights must be positive")
        if not self.ukf.r_cov > 0 or self.ukf.q_scale < 0:
            raise ConfigError("UKF covariances must be positive")

    def multisine(self) -> MultisineSpec:
        e = self.excitation
        return MultisineSpec(n_samples=e.n_samples, fs=e.fs, f_min=e.f_min, f_max=e.f_max, rms=e.rms,
                             kind=e.kind, group_size=e.group_size, seed=self.seed)


def default_config(scenario: str) -> ExperimentConfig:
    """Desk-scale settings for each named scenario."""
    base = ExperimentConfig(scenario=scenario)
    if scenario == "duffing-open":
        return replace(base, closed_loop=False, checks={"open.odd_near_resonance_db": [-15, -5]})
    if scenario == "duffing-linearised":
        return replace(base, checks={
            "errors.ratio_mpc_pct": [0.02, 0.2],
            "errors.ratio_ukf_pct": [1.5, 6.0],
            "open.odd_near_resonance_db": [-15, -5],
            "closed.odd_near_resonance_db": [None, -35],
            "closed.odd_near_second_harmonic_db": [None, -35],
            "closed.even_near_resonance_db": [None, -35],
            "closed.even_near_second_harmonic_db": [None, -35],
        })
    if scenario == "duffing-cubic-only":
        return replace(base, variant="cubic-only", reference_variant="full", checks={
            "robustness.mpc_ratio_change": [0.5, 2.0],
            "robustness.ukf_ratio_change": [1.7, None],
            "robustness.even_suppression_resonance_db": [8, 25],
            "robustness.ukf_mean_over_se": [3, None],
        })
    if scenario == "duffing-extrapolation":
        return replace(base, excitation=replace(base.excitation, rms=0.22), checks={
            "errors.ratio_mpc_pct": [None, 0.1],
            "closed.odd_near_resonance_db": [None, -30],
            "closed.odd_near_second_harmonic_db": [None, -30],
            "closed.even_near_resonance_db": [None, -30],
            "closed.even_near_second_harmonic_db": [None, -30],
        })
    if scenario == "linear-world":
        return replace(base, variant="linear", plant=PlantConfig(kind="model"), realisations=1,
                       noise=NoiseSettings(snr_db=float("inf")), checks={
                           "linear.tracking_ratio": [None, 1e-8],
                           "linear.frf_max_dev_db": [None, 0.1],
                       })
    if scenario == "beam":
        return ExperimentConfig(
            scenario="beam", model="beam_nlss",
            plant=PlantConfig(kind="surrogate", model="beam_nlss", ts=1 / 4096, k_c=2e9),
            excitation=ExcitationConfig(n_samples=3280, fs=102.4, f_min=102.4 / 3280, f_max=45.0, rms=0.015),
            sine=SineConfig(freq=2.0, amplitude=0.02, duration=20.0),
            control=ControlConfig(ts_out=1 / 102.4, ts_in=1 / 512, q=3e8, r_delta=1.0),
            ukf=UkfSettings(r_cov=3.39e-15, q_scale=10.0),
            noise=NoiseSettings(sigma=float(np.sqrt(3.39e-15))),
            realisations=2, periods=3, full_scale={"realisations": 5, "periods": 4},
            checks={
                "sine.tracking_ratio_pct": [0.5, 3.0],
                "sine.u_peak_over_v_peak": [10, None],
                "compare.resonance_shift_hz": [None, 0.0],
                "compare.lowest_line_gain_db": [0.0, None],
            },
        )
    raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")


# ---------------------------------------------------------------------------
# building blocks


def build_plant(cfg: PlantConfig, model: PolyNlssModel, ts_in: float):
    if cfg.kind == "duffing":
        return DuffingPlant(m=cfg.m, c_l=cfg.c_l, k_l=cfg.k_l, k_q=cfg.k_q, k_c=cfg.k_c,
                            substep=cfg.substep if cfg.substep else ts_in / 10)
    if cfg.kind == "surrogate":
        linear = load_model(cfg.model).linear_part()
        ts = cfg.ts or linear.ts
        return SurrogatePlant(model=resample(linear, ts) if ts != linear.ts else linear, k_c=cfg.k_c)
    return SurrogatePlant(model=model, k_c=0.0)


def controller_model(cfg: ExperimentConfig, variant: str) -> PolyNlssModel:
    """Model used by MPC and UKF, at the inner rate."""
    model = load_model(cfg.model)
    if abs(model.ts - cfg.control.ts_in) > 1e-12 * cfg.control.ts_in:
        model = resample(model, cfg.control.ts_in)
    if variant == "cubic-only":
        model = zero_quadratic(model)
    elif variant == "linear":
        model = model.linear_part()
    return model


def _flatten(prefix: str, d: dict, out: dict):
    for k, v in d.items():
        out[f"{prefix}.{k}"] = v


@dataclass
class ScenarioResult:
    """Artifacts written, flat metric table and threshold outcomes."""

    scenario: str
    out_dir: Path
    artifacts: list[Path]
    metrics: dict[str, Any]
    checks: dict[str, dict]
    status: str = "ok"

    @property
    def passed(self) -> bool:
        return self.status == "ok" and all(c["passed"] for c in self.checks.values())

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "status": self.status,
            "metrics": self.metrics,
            "checks": self.checks,
            "passed": self.passed,
            "artifacts": sorted(str(p.relative_to(self.out_dir)) for p in self.artifacts),
        }


def evaluate_checks(metrics: dict, checks: dict) -> dict[str, dict]:
    out = {}
    for name, (lo, hi) in checks.items():
        value = metrics.get(name)
        ok = value is not None and np.isfinite(value)
        if ok and lo is not None:
            ok = value >= lo
        if ok and hi is not None:
            ok = value <= hi
        out[name] = {"value": value, "low": lo, "high": hi, "passed": bool(ok)}
    return out


class _Run:
    """Mutable state of one scenario execution."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.artifacts: list[Path] = []
        self.metrics: dict[str, Any] = {}

    def write(self, name: str, columns: dict) -> Path:
        p = write_csv(self.out / name, columns)
        self.artifacts.append(p)
        return p

    def report(self, name: str, rep: analysis.DistortionReport, centre: float | None = None):
        self.artifacts.extend(rep.write(self.out / name, centre))
        _flatten(name, rep.summary(centre), self.metrics)

    def noise(self) -> NoiseConfig:
        n = self.cfg.noise
        return NoiseConfig(snr_db=n.snr_db, seed=self.cfg.seed, sigma=n.sigma)

    def ukf(self, model) -> UkfConfig:
        return UkfConfig.scaled(model.n, self.cfg.ukf.r_cov, self.cfg.ukf.q_scale)

    def closed_loop(self, variant: str, excitation, noise: NoiseConfig, tag: str):
        cfg = self.cfg
        model = controller_model(cfg, variant)
        gains = precompute_gains(model, cfg.control.q, cfg.control.r_delta,
                                 ClosedLoopConfig(cfg.control.ts_out, cfg.control.ts_in).np_max)
        self.metrics[f"{tag}.model_hash"] = model.content_hash()
        self.metrics[f"{tag}.cond_w_max"] = float(gains.cond.max())
        records = []
        for rec in excitation:
            plant = build_plant(cfg.plant, model, cfg.control.ts_in)
            try:
                cl = run_linearised(plant, model, rec, gains, self.ukf(model), noise,
                                    ClosedLoopConfig(cfg.control.ts_out, cfg.control.ts_in))
            except DivergenceError as exc:
                raise DivergenceError(f"{cfg.scenario}/{tag} realisation {rec.realisation}: {exc.detail}", exc.index) from exc
            self.artifacts.append(cl.write_csv(self.out / f"{tag}_r{rec.realisation}.csv"))
            records.append(cl)
        return records


# ---------------------------------------------------------------------------
# pipelines


def _multisine_part(run: _Run):
    cfg = run.cfg
    spec = cfg.multisine()
    excitation = realisations(spec, cfg.realisations, cfg.periods)
    plant = build_plant(cfg.plant, controller_model(cfg, cfg.variant), cfg.control.ts_in)
    try:
        opens, noise = run_open_loop_batch(plant, excitation, run.noise())
    except DivergenceError as exc:
        raise DivergenceError(f"{cfg.scenario}/open: {exc.detail}", exc.index) from exc
    for rec in opens:
        run.write(f"open_r{rec.realisation}.csv", rec.channels())
    run.metrics["noise.sigma"] = noise.sigma if noise.sigma is not None else 0.0
    before = analysis.distortions(analysis.spectra(opens, cfg.discard))
    run.report("open", before)
    if not cfg.closed_loop:
        return
    closed = run.closed_loop(cfg.variant, excitation, noise, "closed")
    after = analysis.distortions(analysis.spectra([c.outer_record() for c in closed], cfg.discard))
    run.report("closed", after, centre=before.resonance())
    errs = analysis.error_metrics(closed, discard=cfg.discard)
    _flatten("errors", errs.to_dict(), run.metrics)
    delta = analysis.compare_runs(before, after)
    _flatten("compare", delta, run.metrics)
    run.metrics["compare.resonance_shift_hz"] = delta["resonance_after_hz"] - delta["resonance_before_hz"]
    if cfg.reference_variant:
        ref = run.closed_loop(cfg.reference_variant, excitation, noise, "reference")
        ref_errs = analysis.error_metrics(ref, discard=cfg.discard)
        _flatten("reference_errors", ref_errs.to_dict(), run.metrics)
        ref_after = analysis.distortions(analysis.spectra([c.outer_record() for c in ref], cfg.discard))
        run.report("reference_closed", ref_after, centre=before.resonance())
        run.metrics["robustness.mpc_ratio_change"] = errs.ratio_mpc_pct / ref_errs.ratio_mpc_pct
        run.metrics["robustness.ukf_ratio_change"] = errs.ratio_ukf_pct / ref_errs.ratio_ukf_pct
        run.metrics["robustness.ukf_mean_over_se"] = abs(errs.mean_ukf) / errs.se_mean_ukf
        run.metrics["robustness.even_suppression_resonance_db"] = delta["even_suppression_resonance_db"]


def _linear_world(run: _Run):
    """Noise-free exact-model loop: tracking error and inner-rate FRF against the model."""
    cfg = run.cfg
    spec = cfg.multisine()
    excitation = realisations(spec, cfg.realisations, cfg.periods)
    closed = run.closed_loop("linear", excitation, NoiseConfig(snr_db=float("inf")), "closed")
    model = controller_model(cfg, "linear")
    n_in = spec.n_samples * closed[0].np_max
    start = cfg.discard * n_in
    track, devs = [], []
    for cl, rec in zip(closed, excitation):
        e = cl.y_true[start:] - cl.y_ref[start:]
        track.append(analysis.rms(e) / analysis.rms(cl.y_true[start:]))
        v = np.fft.rfft(cl.v[start:].reshape(-1, n_in), axis=1).mean(axis=0)
        y = np.fft.rfft(cl.y_true[start:].reshape(-1, n_in), axis=1).mean(axis=0)
        idx = rec.design.excited
        g = y[idx] / v[idx]
        g_ref = model.frf(idx * spec.f_res)
        devs.append(np.abs(analysis.db(g) - analysis.db(g_ref)).max())
        run.write(f"frf_r{rec.realisation}.csv", {
            "f": idx * spec.f_res, "closed_db": analysis.db(g), "model_db": analysis.db(g_ref),
            "closed_phase": np.angle(g), "model_phase": np.angle(g_ref)})
    run.metrics["linear.tracking_ratio"] = float(max(track))
    run.metrics["linear.frf_max_dev_db"] = float(max(devs))


def _sine_part(run: _Run):
    cfg = run.cfg
    s = cfg.sine
    fs_out = 1 / cfg.control.ts_out
    k = np.arange(int(round(s.duration * fs_out)))
    v = s.amplitude * np.sin(2 * np.pi * s.freq * k / fs_out)
    rec = SignalRecord(t=k / fs_out, u=v)
    model = controller_model(cfg, cfg.variant)
    noise = run.noise()
    open_rec = run_open_loop(build_plant(cfg.plant, model, cfg.control.ts_in), rec, noise, fs=fs_out)
    run.write("sine_open.csv", open_rec.channels())
    run.metrics["sine.open_y_rms"] = analysis.rms(open_rec.y_true[k.size // 2:])
    cl = run.closed_loop(cfg.variant, [rec], noise, "sine_closed")[0]
    half = cl.t.size // 2
    err = cl.err_mpc[half:]
    run.metrics["sine.tracking_ratio_pct"] = 100 * analysis.rms(err) / analysis.rms(cl.y_meas[half:])
    run.metrics["sine.u_peak_over_v_peak"] = float(np.abs(cl.u[half:]).max() / s.amplitude)
    run.metrics["sine.closed_y_rms"] = analysis.rms(cl.y_true[half:])


def run_scenario(cfg: ExperimentConfig, out_dir: str | Path) -> ScenarioResult:
    """Execute ``cfg`` and write records, reports and ``summary.json`` under ``out_dir``.

    A divergence is re-raised with scenario context after a partial summary
    (``status = "diverged"``) has been written.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    run.artifacts.append(cfg.save(out / "config.json"))
    status = "ok"
    error = None
    try:
        if cfg.scenario == "linear-world":
            _linear_world(run)
        else:
            if cfg.sine is not None and cfg.closed_loop:
                _sine_part(run)
            if cfg.excitation is not None:
                _multisine_part(run)
    except DivergenceError as exc:
        status, error = "diverged", exc
        run.metrics["divergence.message"] = str(exc)
        run.metrics["divergence.index"] = exc.index
    result = ScenarioResult(scenario=cfg.scenario, out_dir=out, artifacts=run.artifacts,
                            metrics=run.metrics, checks=evaluate_checks(run.metrics, cfg.checks), status=status)
    summary_path = out / "summary.json"
    result.artifacts.append(summary_path)
    summary_path.write_text(json.dumps(result.summary(), indent=2, default=_json_default) + "\n")
    if error is not None:
        raise error
    return result


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
