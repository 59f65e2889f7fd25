"""Truth plants, sensor noise and the open/closed-loop runners.

Two plant families are supported:

* :class:`DuffingPlant`, a continuous-time mass-spring-damper with quadratic
  and cubic stiffness, integrated by classical RK4 at a fixed substep.
* :class:`SurrogatePlant`, a discrete PNLSS model run at its own (fast) rate
  with an optional cubic output feedback applied one plant sample late. This
  is the model-in-the-loop stand-in for the beam set-up, and with zero
  feedback it is simply "the model as the plant".

The closed loop runs at two rates. Every outer sample the outer input ``v``
produces ``np_max`` reference points; every inner sample the UKF is updated
with the measured output, the MPC computes the plant input, and that input is
held over the plant substeps until the next inner sample.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .errors import ConfigError, DivergenceError
from .estimator import UkfConfig, predict_kernel, update_kernel
from .excitation import stream_rng
from .mpc import MpcGainSet, disturbance_kernel, increment_kernel, precompute_gains, reference_kernel
from .records import SignalRecord, write_csv
from .sigmodel import (DIVERGENCE_FACTOR, DIVERGENCE_WARMUP, PolyNlssModel, bundled_model, monomials,
                       resample)

log = logging.getLogger(__name__)

NOISE_STREAM = 2

DUFFING = 0
DISCRETE = 1


# ---------------------------------------------------------------------------
# compiled plant kernels


@njit(cache=True)
def duffing_accel(y, yd, u, p):
    m, c_l, k_l, k_q, k_c = p[0], p[1], p[2], p[3], p[4]
    return (u - c_l * yd - k_l * y - k_q * y * y - k_c * y * y * y) / m


@njit(cache=True)
def duffing_rk4(state, u, p, h, nsub):
    y, yd = state[0], state[1]
    for _ in range(nsub):
        k1y = yd
        k1v = duffing_accel(y, yd, u, p)
        k2y = yd + 0.5 * h * k1v
        k2v = duffing_accel(y + 0.5 * h * k1y, yd + 0.5 * h * k1v, u, p)
        k3y = yd + 0.5 * h * k2v
        k3v = duffing_accel(y + 0.5 * h * k2y, yd + 0.5 * h * k2v, u, p)
        k4y = yd + h * k3v
        k4v = duffing_accel(y + h * k3y, yd + h * k3v, u, p)
        y += h / 6.0 * (k1y + 2 * k2y + 2 * k3y + k4y)
        yd += h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    state[0] = y
    state[1] = yd


@njit(cache=True)
def discrete_advance(state, u, k_fb, A, B, C, E, exps, nsub):
    """``state`` = [x, y_prev]; feedback ``-k_fb * y_prev**3`` enters with one sample delay."""
    n = A.shape[0]
    for _ in range(nsub):
        x = state[:n].copy()
        y = C @ x
        u_p = u - k_fb * state[n] ** 3
        x_next = A @ x + B * u_p
        if exps.shape[0] > 0:
            x_next += E @ monomials(y, exps)
        state[:n] = x_next
        state[n] = y


@njit(cache=True)
def plant_output(kind, state, C):
    if kind == DUFFING:
        return state[0]
    n = C.shape[0]
    y = 0.0
    for i in range(n):
        y += C[i] * state[i]
    return y


@njit(cache=True)
def plant_advance(kind, state, u, params, A, B, C, E, exps, h, nsub):
    if kind == DUFFING:
        duffing_rk4(state, u, params, h, nsub)
    else:
        discrete_advance(state, u, params[0], A, B, C, E, exps, nsub)


@njit(cache=True)
def _runaway(y, sumsq, k):
    if not np.isfinite(y):
        return True
    if k >= DIVERGENCE_WARMUP and sumsq > 0.0:
        return abs(y) > DIVERGENCE_FACTOR * np.sqrt(sumsq / k)
    return False


@njit(cache=True)
def open_loop_kernel(u, kind, params, A, B, C, E, exps, state, h, nsub, y_out):
    sumsq = 0.0
    for k in range(u.shape[0]):
        y = plant_output(kind, state, C)
        y_out[k] = y
        if _runaway(y, sumsq, k):
            return k
        sumsq += y * y
        plant_advance(kind, state, u[k], params, A, B, C, E, exps, h, nsub)
    return -1


@njit(cache=True)
def closed_loop_kernel(v, np_max, noise,
                       A, B, C, E, exps,
                       s_x, s_g, gains,
                       q_cov, r_cov, c_scale, wi, wc0, floor,
                       kind, params, pA, pB, pC, pE, pexps, pstate, h, nsub,
                       out_u, out_yt, out_ym, out_yref, out_yhat, out_xhat, out_np):
    n = A.shape[0]
    n_in = v.shape[0] * np_max
    mean = np.zeros(n)
    cov = q_cov.copy()
    x_prev = np.zeros(n)
    y_prev = 0.0
    u = 0.0
    x_ref = np.zeros(n)
    y_ref = np.zeros(np_max + 1)
    xbar = np.zeros(n + 1)
    repairs = 0
    sumsq = 0.0
    for j in range(n_in):
        k = j // np_max
        i = j - k * np_max
        yt = plant_output(kind, pstate, pC)
        if _runaway(yt, sumsq, j):
            return j, repairs
        sumsq += yt * yt
        ym = yt + noise[j]
        if j > 0:
            mean, cov, rep = predict_kernel(mean, cov, q_cov, A, B, C, E, exps, u, c_scale, wi, wc0, floor)
            repairs += rep
        mean, cov, innov, rep = update_kernel(mean, cov, C, r_cov, ym, floor)
        repairs += rep
        yhat = C @ mean
        if i == 0:
            x_ref = reference_kernel(A, B, C, x_ref, v[k], np_max, y_ref)
        n_p = np_max - i
        xbar[:n] = mean - x_prev
        xbar[n] = yhat
        refs = y_ref[i + 1:]
        dg = disturbance_kernel(exps, y_prev, yhat, refs, n_p)
        u = u + increment_kernel(s_x, s_g, gains, xbar, dg, refs, n_p)
        if not np.isfinite(u):
            return j, repairs
        out_u[j] = u
        out_yt[j] = yt
        out_ym[j] = ym
        out_yref[j] = y_ref[i]
        out_yhat[j] = yhat
        out_xhat[j] = mean
        out_np[j] = n_p
        x_prev = mean.copy()
        y_prev = yhat
        plant_advance(kind, pstate, u, params, pA, pB, pC, pE, pexps, h, nsub)
    return -1, repairs


# ---------------------------------------------------------------------------
# plants

_NO_ARR2 = np.zeros((1, 1))
_NO_ARR1 = np.zeros(1)
_NO_E = np.zeros((1, 0))
_NO_EXPS = np.zeros(0, dtype=np.int64)


def _substeps(dt: float, h: float) -> int:
    ratio = dt / h
    nsub = int(round(ratio))
    if nsub < 1 or abs(ratio - nsub) > 1e-9 * max(1.0, ratio):
        raise ConfigError(f"interval {dt} is not an integer multiple of the plant step {h}")
    return nsub


@dataclass
class DuffingPlant:
    """m y'' + c_l y' + k_l y + k_q y^2 + k_c y^3 = u, defaults from the simulation study."""

    m: float = 1.0
    c_l: float = 1.0
    k_l: float = 5e2
    k_q: float = 5e4
    k_c: float = 1e8
    substep: float = 1e-4
    state: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("mass must be positive")
        if not self.substep > 0:
            raise ValueError("substep must be positive")
        self.state = np.asarray(self.state, dtype=float).copy()

    def reset(self):
        self.state = np.zeros(2)

    @property
    def output(self) -> float:
        return float(self.state[0])

    def params(self) -> np.ndarray:
        return np.array([self.m, self.c_l, self.k_l, self.k_q, self.k_c])

    def linear_eigenvalues(self) -> np.ndarray:
        a = np.array([[0.0, 1.0], [-self.k_l / self.m, -self.c_l / self.m]])
        return np.linalg.eigvals(a)

    def natural_frequency(self) -> float:
        """Undamped natural frequency of the linear part in Hz."""
        return float(np.abs(self.linear_eigenvalues()[0]) / (2 * np.pi))

    def damping_ratio(self) -> float:
        lam = self.linear_eigenvalues()[0]
        return float(-lam.real / np.abs(lam))

    def energy(self) -> float:
        y, yd = self.state
        return 0.5 * self.m * yd**2 + 0.5 * self.k_l * y**2 + self.k_q * y**3 / 3 + self.k_c * y**4 / 4

    def kernel_spec(self):
        return DUFFING, self.params(), _NO_ARR2, _NO_ARR1, _NO_ARR1, _NO_E, _NO_EXPS, self.substep


@dataclass
class SurrogatePlant:
    """Discrete PNLSS plant with delayed cubic output feedback ``-k_c y(j-1)^3``.

    The plant steps at ``model.ts``; its state vector is ``[x, y_prev]``.
    """

    model: PolyNlssModel
    k_c: float = 0.0
    state: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.reset()

    @classmethod
    def beam(cls, ts_plant: float = 1 / 4096, k_c: float = 2e9) -> "SurrogatePlant":
        """Linear part of the bundled beam model at ``ts_plant`` plus cubic feedback."""
        linear = bundled_model("beam_nlss").linear_part()
        return cls(model=resample(linear, ts_plant), k_c=k_c)

    def reset(self):
        self.state = np.zeros(self.model.n + 1)

    @property
    def substep(self) -> float:
        return self.model.ts

    @property
    def output(self) -> float:
        return float(self.model.c_vec @ self.state[: self.model.n])

    def kernel_spec(self):
        a, b, c, e, exps = self.model.kernel_args()
        return DISCRETE, np.array([float(self.k_c)]), a, b, c, e, exps, self.model.ts


def plant_step(plant, u: float, dt: float) -> float:
    """Advance ``plant`` over ``dt`` with ``u`` held; return the output at the end."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    kind, params, a, b, c, e, exps, h = plant.kernel_spec()
    nsub = _substeps(dt, h)
    plant_advance(kind, plant.state, float(u), params, a, b, c, e, exps, h, nsub)
    y = plant_output(kind, plant.state, c)
    if not (np.isfinite(y) and np.all(np.isfinite(plant.state))):
        raise DivergenceError("plant state became non-finite", 0)
    return float(y)


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseConfig:
    """Additive white Gaussian output noise.

    The standard deviation is ``sigma`` when given, otherwise it follows from
    ``snr_db`` and the RMS of the noise-free signal. ``snr_db = inf`` means no
    noise.
    """

    snr_db: float = 40.0
    seed: int = 0
    sigma: Optional[float] = None

    @property
    def silent(self) -> bool:
        return self.sigma == 0.0 or (self.sigma is None and np.isinf(self.snr_db))

    def resolve_sigma(self, y_true: np.ndarray) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        if np.isinf(self.snr_db):
            return 0.0
        rms = np.sqrt(np.mean(np.square(y_true)))
        return float(rms / 10 ** (self.snr_db / 20))

    def frozen(self, y_true: np.ndarray) -> "NoiseConfig":
        """Copy with ``sigma`` fixed from ``y_true`` (used to carry open-loop noise into closed loop)."""
        return NoiseConfig(snr_db=self.snr_db, seed=self.seed, sigma=self.resolve_sigma(y_true))

    def samples(self, size: int, stream: int = 0) -> np.ndarray:
        if self.silent:
            return np.zeros(size)
        if self.sigma is None:
            raise ValueError("sigma unresolved; call frozen() or measure() with the noise-free signal")
        return self.sigma * stream_rng(self.seed, NOISE_STREAM, stream).standard_normal(size)


def measure(y_true: Sequence[float], noise: NoiseConfig, stream: int = 0) -> np.ndarray:
    """``y_true`` plus white Gaussian noise; ``stream`` selects an independent sequence."""
    y_true = np.asarray(y_true, dtype=float)
    if noise.silent:
        return y_true.copy()
    frozen = noise if noise.sigma is not None else noise.frozen(y_true)
    return y_true + frozen.samples(y_true.size, stream)


# ---------------------------------------------------------------------------
# runners


@dataclass(frozen=True)
class ClosedLoopConfig:
    """Outer and inner sample times; ``np_max = ts_out / ts_in`` must be an integer."""

    ts_out: float
    ts_in: float

    def __post_init__(self):
        if not (self.ts_out > 0 and self.ts_in > 0):
            raise ConfigError("sample times must be positive")
        ratio = self.ts_out / self.ts_in
        if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
            raise ConfigError(f"ts_out/ts_in = {ratio} is not a positive integer")

    @property
    def np_max(self) -> int:
        return int(round(self.ts_out / self.ts_in))


@dataclass
class ClosedLoopRecord:
    """Inner-rate log of a closed-loop run."""

    t: np.ndarray
    v: np.ndarray
    u: np.ndarray
    y_meas: np.ndarray
    y_true: np.ndarray
    y_ref: np.ndarray
    y_hat: np.ndarray
    x_hat: np.ndarray
    horizon: np.ndarray
    np_max: int
    ts_in: float
    ukf_repairs: int = 0
    design: object = field(default=None, repr=False)
    realisation: int = 0

    @property
    def err_mpc(self) -> np.ndarray:
        return self.y_hat - self.y_ref

    @property
    def err_ukf(self) -> np.ndarray:
        return self.y_hat - self.y_true

    def outer(self, channel: str = "y_meas") -> np.ndarray:
        """Channel sampled at the start of every outer sample."""
        return getattr(self, channel)[:: self.np_max]

    def outer_record(self) -> SignalRecord:
        """Outer-rate view (``u`` = outer input) for frequency-domain analysis."""
        return SignalRecord(t=self.outer("t"), u=self.outer("v"), y=self.outer("y_meas"),
                            y_true=self.outer("y_true"), design=self.design, realisation=self.realisation)

    def columns(self) -> dict[str, np.ndarray]:
        cols = {
            "t": self.t, "v": self.v, "u": self.u, "y_meas": self.y_meas, "y_true": self.y_true,
            "y_ref": self.y_ref, "y_hat": self.y_hat, "err_mpc": self.err_mpc, "err_ukf": self.err_ukf,
            "horizon": self.horizon.astype(float),
        }
        for i in range(self.x_hat.shape[1]):
            cols[f"x_hat{i + 1}"] = self.x_hat[:, i]
        return cols

    def write_csv(self, path):
        return write_csv(path, self.columns())


def _input_array(signal) -> tuple[np.ndarray, object, int]:
    if isinstance(signal, SignalRecord):
        return np.ascontiguousarray(signal.u, dtype=float), signal.design, signal.realisation
    return np.ascontiguousarray(signal, dtype=float).reshape(-1), None, 0


def simulate_plant(plant, u, dt: float) -> np.ndarray:
    """Noise-free output of ``plant`` from rest, ``u[k]`` held for ``dt``."""
    u = np.ascontiguousarray(u, dtype=float).reshape(-1)
    kind, params, a, b, c, e, exps, h = plant.kernel_spec()
    nsub = _substeps(dt, h)
    plant.reset()
    y = np.empty(u.size)
    status = open_loop_kernel(u, kind, params, a, b, c, e, exps, plant.state, h, nsub, y)
    if status >= 0:
        raise DivergenceError("open-loop plant simulation diverged", int(status))
    return y


def run_open_loop(plant, excitation, noise: NoiseConfig, fs: float | None = None) -> SignalRecord:
    """Drive ``plant`` (from rest) directly with the excitation.

    The output is logged at the excitation rate, at the start of each held
    input sample. Without a fixed ``noise.sigma`` the noise level follows from
    this record's own noise-free RMS.
    """
    u, design, r = _input_array(excitation)
    if fs is None:
        if design is None:
            raise ValueError("sampling frequency unknown: pass fs or a record with a design")
        fs = design.spec.fs
    y_true = simulate_plant(plant, u, 1.0 / fs)
    y = measure(y_true, noise, stream=r)
    t = np.arange(u.size) / fs
    return SignalRecord(t=t, u=u, y=y, y_true=y_true, design=design, realisation=r)


def run_open_loop_batch(plant, records: Sequence[SignalRecord], noise: NoiseConfig,
                        fs: float | None = None) -> tuple[list[SignalRecord], NoiseConfig]:
    """Open-loop runs of several realisations sharing one noise level.

    The noise standard deviation is fixed from the pooled noise-free output
    of all realisations (two passes). Returns the records and the frozen
    noise configuration for reuse in closed loop.
    """
    clean = [run_open_loop(plant, rec, NoiseConfig(snr_db=np.inf), fs) for rec in records]
    frozen = noise if noise.sigma is not None else noise.frozen(np.concatenate([c.y_true for c in clean]))
    for rec in clean:
        rec.y = measure(rec.y_true, frozen, stream=rec.realisation)
    return clean, frozen


def run_linearised(plant, model: PolyNlssModel, v_signal, gains: MpcGainSet | tuple[float, float],
                   ukf: UkfConfig, noise: NoiseConfig, config: ClosedLoopConfig) -> ClosedLoopRecord:
    """Closed-loop run of plant, UKF and linearising MPC from rest.

    ``v_signal`` is the outer input sampled at ``config.ts_out`` (array or
    :class:`SignalRecord`). ``gains`` is a precomputed gain set or a
    ``(q, r_delta)`` pair. If ``noise.sigma`` is unset the level is calibrated
    on a noise-free open-loop run of the same outer input.
    """
    if abs(model.ts - config.ts_in) > 1e-12 * config.ts_in:
        raise ConfigError(f"model sample time {model.ts} differs from ts_in {config.ts_in}")
    if ukf.n != model.n:
        raise ConfigError(f"UKF configured for n={ukf.n}, model has n={model.n}")
    np_max = config.np_max
    if not isinstance(gains, MpcGainSet):
        gains = precompute_gains(model, gains[0], gains[1], np_max)
    if gains.np_max != np_max or gains.model is not model and gains.model.content_hash() != model.content_hash():
        raise ConfigError("gain set does not match the model or the horizon")
    v, design, r = _input_array(v_signal)
    if not noise.silent and noise.sigma is None:
        noise = noise.frozen(simulate_plant(plant, v, config.ts_out))
    n_in = v.size * np_max
    noise_seq = noise.samples(n_in, stream=r)

    kind, params, pa, pb, pc, pe, pexps, h = plant.kernel_spec()
    nsub = _substeps(config.ts_in, h)
    plant.reset()
    a, b, c, e, exps = model.kernel_args()
    _, wc = ukf.weights()
    out = {name: np.zeros(n_in) for name in ("u", "yt", "ym", "yref", "yhat")}
    x_hat = np.zeros((n_in, model.n))
    horizon = np.zeros(n_in, dtype=np.int64)
    status, repairs = closed_loop_kernel(
        v, np_max, noise_seq, a, b, c, e, exps,
        gains.s_x, gains.s_g, gains.gains,
        np.ascontiguousarray(ukf.q_cov), float(ukf.r_cov), ukf.spread(), 1.0 / (2 * ukf.spread()), wc[0], ukf.floor,
        kind, params, pa, pb, pc, pe, pexps, plant.state, h, nsub,
        out["u"], out["yt"], out["ym"], out["yref"], out["yhat"], x_hat, horizon,
    )
    if status >= 0:
        raise DivergenceError("closed loop diverged", int(status))
    if repairs:
        log.warning("UKF covariance repaired %d times", repairs)
    t = np.arange(n_in) * config.ts_in
    return ClosedLoopRecord(
        t=t, v=np.repeat(v, np_max), u=out["u"], y_meas=out["ym"], y_true=out["yt"], y_ref=out["yref"],
        y_hat=out["yhat"], x_hat=x_hat, horizon=horizon, np_max=np_max, ts_in=config.ts_in,
        ukf_repairs=int(repairs), design=design, realisation=r,
    )
