"""Unscented Kalman filter for PNLSS models with additive noise.

Time update: scaled unscented transform (2n+1 sigma points) through the model
dynamics. Sigma points are propagated as deviations from the centre point,
with monomial increments expanded binomially, so that the huge negative centre
weight of small-alpha transforms does not cancel away the mean. Measurement
update: the output map is linear (y = C x), so the exact linear Kalman
correction is used.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .sigmodel import PolyNlssModel, monomial_increment, step_kernel

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-18


@njit(cache=True)
def chol_lower(P):
    """Cholesky factor of a PSD matrix; zero pivots allowed. Returns (L, ok)."""
    n = P.shape[0]
    L = np.zeros((n, n))
    scale = 0.0
    for i in range(n):
        scale = max(scale, abs(P[i, i]))
    tol = 1e-14 * scale
    for j in range(n):
        s = P[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s < -tol:
            return L, False
        if s <= 0.0:
            continue
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            t = P[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return L, True


@njit(cache=True)
def repair_cov(P, floor):
    """Symmetrise and floor the eigenvalues at ``floor``. Returns (P, repaired)."""
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if w.min() >= floor:
        return P, False
    w = np.maximum(w, floor)
    P = (V * w) @ V.T
    return 0.5 * (P + P.T), True


@njit(cache=True)
def predict_kernel(mean, cov, q_cov, A, B, C, E, exps, u, c_scale, wi, wc0, floor):
    n = mean.shape[0]
    repaired = False
    L, ok = chol_lower(c_scale * cov)
    if not ok:
        cov, _ = repair_cov(cov, floor)
        L, ok = chol_lower(c_scale * cov)
        repaired = True
    centre, y0 = step_kernel(A, B, C, E, exps, mean, u)
    dev = np.zeros((2 * n, n))
    has_nl = exps.shape[0] > 0
    for a in range(n):
        d = L[:, a].copy()
        cy = 0.0
        for i in range(n):
            cy += C[i] * d[i]
        ad = A @ d
        if has_nl:
            dz_plus = monomial_increment(y0, cy, exps)
            dz_minus = monomial_increment(y0, -cy, exps)
            dev[a] = ad + E @ dz_plus
            dev[n + a] = -ad + E @ dz_minus
        else:
            dev[a] = ad
            dev[n + a] = -ad
    shift = np.zeros(n)
    for r in range(2 * n):
        shift += dev[r]
    shift *= wi
    P = wc0 * np.outer(shift, shift) + q_cov
    for r in range(2 * n):
        dd = dev[r] - shift
        P += wi * np.outer(dd, dd)
    return centre + shift, 0.5 * (P + P.T), repaired


@njit(cache=True)
def update_kernel(mean, cov, C, r_cov, y, floor):
    pc = cov @ C
    s = 0.0
    for i in range(C.shape[0]):
        s += C[i] * pc[i]
    s += r_cov
    gain = pc / s
    innov = y - C @ mean
    mean = mean + gain * innov
    P = cov - np.outer(gain, pc)
    P, repaired = repair_cov(P, floor)
    return mean, P, innov, repaired


@dataclass
class UkfConfig:
    """Noise covariances and sigma-point parameters.

    ``q_cov`` is the additive process-noise covariance (state units),
    ``r_cov`` the measurement-noise variance (output units squared).
    """

    q_cov: np.ndarray
    r_cov: float
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    floor: float = EIG_FLOOR

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q_cov, dtype=float))
        if q.shape[0] != q.shape[1]:
            raise ValueError("q_cov must be square")
        if not np.allclose(q, q.T, rtol=0, atol=0):
            raise ValueError("q_cov must be symmetric")
        if np.linalg.eigvalsh(q).min() < -1e-12 * max(1.0, np.abs(q).max()):
            raise ValueError("q_cov must be positive semidefinite")
        if not self.r_cov > 0:
            raise ValueError("r_cov must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        self.q_cov = q

    @classmethod
    def scaled(cls, n: int, r_cov: float, q_scale: float, **kw) -> "UkfConfig":
        """Process noise ``q_scale * r_cov * I``, the parametrisation used for the tuned examples."""
        return cls(q_cov=q_scale * r_cov * np.eye(n), r_cov=r_cov, **kw)

    @property
    def n(self) -> int:
        return self.q_cov.shape[0]

    @property
    def lam(self) -> float:
        return self.alpha**2 * (self.n + self.kappa) - self.n

    def spread(self) -> float:
        """n + lambda, computed without cancellation."""
        return self.alpha**2 * (self.n + self.kappa)

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance weights for the 2n+1 sigma points (centre first)."""
        c = self.spread()
        wm = np.full(2 * self.n + 1, 1.0 / (2 * c))
        wc = wm.copy()
        wm[0] = self.lam / c
        wc[0] = wm[0] + 1 - self.alpha**2 + self.beta
        return wm, wc


@dataclass
class UkfState:
    mean: np.ndarray
    cov: np.ndarray
    prev_mean: np.ndarray
    repairs: int = 0
    innovation: float = field(default=0.0)


def init_state(cfg: UkfConfig) -> UkfState:
    n = cfg.n
    return UkfState(mean=np.zeros(n), cov=cfg.q_cov.copy(), prev_mean=np.zeros(n))


def predict(state: UkfState, cfg: UkfConfig, model: PolyNlssModel, u: float) -> UkfState:
    """Propagate mean and covariance one sample with the applied input ``u``."""
    _, wc = cfg.weights()
    mean, cov, repaired = predict_kernel(
        np.ascontiguousarray(state.mean),
        np.ascontiguousarray(state.cov),
        np.ascontiguousarray(cfg.q_cov),
        *model.kernel_args(),
        float(u),
        cfg.spread(),
        1.0 / (2 * cfg.spread()),
        wc[0],
        cfg.floor,
    )
    if repaired:
        log.warning("covariance not positive semidefinite before sigma-point draw; eigenvalues floored")
    return UkfState(mean=mean, cov=cov, prev_mean=state.mean.copy(), repairs=state.repairs + int(repaired))


def update(state: UkfState, cfg: UkfConfig, model: PolyNlssModel, y_meas: float) -> UkfState:
    """Linear Kalman correction with the measured output."""
    mean, cov, innov, repaired = update_kernel(
        np.ascontiguousarray(state.mean),
        np.ascontiguousarray(state.cov),
        np.ascontiguousarray(model.c_vec),
        float(cfg.r_cov),
        float(y_meas),
        cfg.floor,
    )
    if not np.isfinite(innov):
        raise FloatingPointError("non-finite innovation")
    return replace(state, mean=mean, cov=cov, repairs=state.repairs + int(repaired), innovation=float(innov))


def filtered_output(state: UkfState, model: PolyNlssModel) -> float:
    return float(model.c_vec @ state.mean)
