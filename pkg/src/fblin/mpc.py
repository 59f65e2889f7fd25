"""Internal-reference-tracking MPC with a dynamic prediction horizon.

The controller works on the velocity-form model (state ``[dx; y]``, input
``du``, disturbance ``dzeta``). Within one outer-loop sample the outer input
``v`` produces ``np_max`` reference points; the horizon then shrinks from
``np_max`` to 1 as they are consumed. The unconstrained quadratic cost has a
closed-form minimiser, so only the first row of ``W^-1 F`` is stored per
horizon and the online work is two short dot products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numba import njit

from .errors import ConditioningError
from .sigmodel import AugmentedModel, PolyNlssModel, augment, monomials

COND_LIMIT = 1e12


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def reference_kernel(A, B, C, x_ref, v, np_max, y_ref):
    """Fill ``y_ref[0..np_max]`` (index 0 = current point) and return the advanced x_ref."""
    y_ref[0] = C @ x_ref
    x = x_ref.copy()
    for m in range(1, np_max + 1):
        x = A @ x + B * v
        y_ref[m] = C @ x
    return x


@njit(cache=True)
def disturbance_kernel(exps, y_prev, y_now, refs, n_p):
    """Stacked monomial increments with future outputs replaced by references.

    ``refs[m]`` is the reference ``m + 1`` samples ahead; only the first
    ``n_p - 1`` entries are read.
    """
    s = exps.shape[0]
    out = np.zeros(s * n_p)
    if s == 0:
        return out
    z_now = monomials(y_now, exps)
    out[:s] = z_now - monomials(y_prev, exps)
    prev = z_now
    for m in range(1, n_p):
        z = monomials(refs[m - 1], exps)
        out[m * s : (m + 1) * s] = z - prev
        prev = z
    return out


@njit(cache=True)
def increment_kernel(s_x, s_g, gains, x_bar, dg, refs, n_p):
    """First element of the optimal increment sequence for horizon ``n_p``."""
    width = dg.shape[0]
    du = 0.0
    for m in range(n_p):
        r = -refs[m]
        for j in range(x_bar.shape[0]):
            r += s_x[m, j] * x_bar[j]
        for j in range(width):
            r += s_g[m, j] * dg[j]
        du -= gains[n_p - 1, m] * r
    return du


# ---------------------------------------------------------------------------
# offline matrices


def build_prediction(aug: AugmentedModel, n_p: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Condensed prediction matrices ``Y = S_x xbar + S_u dU + S_g dG``."""
    if n_p < 1:
        raise ValueError("horizon must be >= 1")
    nb = aug.n
    s = aug.e_bar.shape[1]
    s_x = np.zeros((n_p, nb))
    s_u = np.zeros((n_p, n_p))
    s_g = np.zeros((n_p, s * n_p))
    row = aug.c_bar.copy()  # C_bar A_bar^j
    mark_b = np.zeros(n_p)
    mark_e = np.zeros((n_p, s))
    for j in range(n_p):
        mark_b[j] = row @ aug.b_bar
        mark_e[j] = row @ aug.e_bar
        row = row @ aug.a_bar
        s_x[j] = row
    for i in range(n_p):
        for j in range(i + 1):
            s_u[i, j] = mark_b[i - j]
            s_g[i, j * s : (j + 1) * s] = mark_e[i - j]
    return s_x, s_u, s_g


def cost(s_x, s_u, s_g, q, r_delta, x_bar, dg, y_ref, du) -> float:
    """Tracking cost: q |Y - Y_ref|^2 + r_delta |dU|^2."""
    err = s_x @ x_bar + s_u @ du + s_g @ dg - y_ref
    return float(q * err @ err + r_delta * du @ du)


def optimal_sequence(s_x, s_u, s_g, q, r_delta, x_bar, dg, y_ref) -> np.ndarray:
    """Global minimiser of :func:`cost` over the whole increment sequence."""
    n_p = s_u.shape[0]
    w = 2 * (r_delta * np.eye(n_p) + q * s_u.T @ s_u)
    f = 2 * q * s_u.T
    return -np.linalg.solve(w, f @ (s_x @ x_bar + s_g @ dg - y_ref))


@dataclass(eq=False)
class MpcGainSet:
    """Prediction matrices at the longest horizon plus one gain row per horizon.

    Shorter-horizon prediction matrices are the leading blocks of the stored
    ones; ``gains[h - 1, :h]`` is the first row of ``W_h^-1 F_h``.
    """

    model: PolyNlssModel
    s_x: np.ndarray
    s_u: np.ndarray
    s_g: np.ndarray
    gains: np.ndarray
    q: float
    r_delta: float
    cond: np.ndarray

    @property
    def np_max(self) -> int:
        return self.s_x.shape[0]

    @property
    def ts_in(self) -> float:
        return self.model.ts

    def horizon(self, n_p: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not 1 <= n_p <= self.np_max:
            raise ValueError(f"horizon {n_p} outside 1..{self.np_max}")
        s = self.model.s
        return self.s_x[:n_p], self.s_u[:n_p, :n_p], self.s_g[:n_p, : s * n_p]

    def gain(self, n_p: int) -> np.ndarray:
        self.horizon(n_p)
        return self.gains[n_p - 1, :n_p]

    def to_document(self) -> dict:
        return {
            "q": self.q,
            "r_delta": self.r_delta,
            "ts_in": self.ts_in,
            "np_max": self.np_max,
            "S_x": self.s_x.tolist(),
            "S_u": self.s_u.tolist(),
            "S_g": self.s_g.tolist(),
            "gains": [self.gain(h).tolist() for h in range(1, self.np_max + 1)],
            "cond_W": self.cond.tolist(),
        }


def precompute_gains(model: PolyNlssModel, q: float, r_delta: float, np_max: int,
                     cond_limit: float = COND_LIMIT) -> MpcGainSet:
    """Offline part of the controller for every horizon 1..np_max.

    Raises
    ------
    ConditioningError
        If ``W`` of some horizon is not positive definite or its condition
        number exceeds ``cond_limit``.
    """
    if not (q > 0 and r_delta > 0):
        raise ValueError("weights q and r_delta must be positive")
    if np_max < 1:
        raise ValueError("np_max must be >= 1")
    s_x, s_u, s_g = build_prediction(augment(model), np_max)
    gains = np.zeros((np_max, np_max))
    conds = np.zeros(np_max)
    for h in range(1, np_max + 1):
        su = s_u[:h, :h]
        w = 2 * (r_delta * np.eye(h) + q * su.T @ su)
        conds[h - 1] = np.linalg.cond(w)
        if not conds[h - 1] <= cond_limit:
            raise ConditioningError(f"W condition number {conds[h - 1]:.3g} exceeds {cond_limit:.1g}", h)
        try:
            factor = scipy.linalg.cho_factor(w)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError("W is not positive definite", h) from exc
        gains[h - 1, :h] = scipy.linalg.cho_solve(factor, 2 * q * su.T)[0]
    return MpcGainSet(model=model, s_x=s_x, s_u=s_u, s_g=s_g, gains=gains, q=float(q),
                      r_delta=float(r_delta), cond=conds)


# ---------------------------------------------------------------------------
# online state


@dataclass
class ReferenceBuffer:
    """Persistent reference state plus the reference points of the current outer sample.

    ``y_ref[m]`` is the reference ``m`` inner samples after the start of the
    outer sample (``y_ref[0]`` is the point at its start). ``cursor`` counts
    inner samples already taken.
    """

    x_ref: np.ndarray
    y_ref: np.ndarray
    cursor: int = 0

    @classmethod
    def zeros(cls, n: int, np_max: int) -> "ReferenceBuffer":
        return cls(x_ref=np.zeros(n), y_ref=np.zeros(np_max + 1), cursor=np_max)

    @property
    def np_max(self) -> int:
        return self.y_ref.size - 1

    @property
    def remaining(self) -> int:
        return self.np_max - self.cursor

    def current(self) -> float:
        return float(self.y_ref[self.cursor])

    def future(self) -> np.ndarray:
        return self.y_ref[self.cursor + 1 :]


@dataclass
class ControllerState:
    u_prev: float = 0.0
    y_prev: float = 0.0
    x_prev: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def zeros(cls, n: int) -> "ControllerState":
        return cls(u_prev=0.0, y_prev=0.0, x_prev=np.zeros(n))


def make_reference(model: PolyNlssModel, buffer: ReferenceBuffer, v: float) -> ReferenceBuffer:
    """Generate the next ``np_max`` reference points from the linear part of ``model``.

    The nonlinear coefficients play no role. Mutates and returns ``buffer``.
    """
    a, b, c, _, _ = model.kernel_args()
    buffer.x_ref = reference_kernel(a, b, c, np.ascontiguousarray(buffer.x_ref), float(v), buffer.np_max, buffer.y_ref)
    buffer.cursor = 0
    return buffer


def estimate_disturbance(exponents, y_prev: float, y_now: float, refs, n_p: int) -> np.ndarray:
    """Estimated future monomial increments (length ``s * n_p``).

    ``refs`` holds the upcoming reference outputs, nearest first; at least
    ``n_p - 1`` are needed.
    """
    refs = np.ascontiguousarray(refs, dtype=float).reshape(-1)
    if refs.size < n_p - 1:
        raise ValueError(f"need {n_p - 1} references, got {refs.size}")
    exps = np.asarray(exponents, dtype=np.int64)
    return disturbance_kernel(exps, float(y_prev), float(y_now), refs, int(n_p))


def control_step(gains: MpcGainSet, ctrl: ControllerState, x_now, buffer: ReferenceBuffer) -> float:
    """Apply one receding-horizon step and return the plant input.

    ``x_now`` is the current state estimate. The augmented state is
    ``[x_now - ctrl.x_prev; C x_now]`` and the horizon is the number of
    reference points left in ``buffer``. Advances the buffer cursor and
    updates ``ctrl``.
    """
    n_p = buffer.remaining
    if not 1 <= n_p <= gains.np_max:
        raise ValueError(f"{n_p} references available but gains cover horizons 1..{gains.np_max}")
    model = gains.model
    x_now = np.asarray(x_now, dtype=float)
    y_now = float(model.c_vec @ x_now)
    x_bar = np.concatenate([x_now - ctrl.x_prev, [y_now]])
    refs = np.ascontiguousarray(buffer.future()[:n_p])
    dg = disturbance_kernel(model.exps_array, ctrl.y_prev, y_now, refs, n_p)
    du = increment_kernel(gains.s_x, gains.s_g, gains.gains, x_bar, dg, refs, n_p)
    u = ctrl.u_prev + du
    ctrl.u_prev, ctrl.y_prev, ctrl.x_prev = u, y_now, x_now.copy()
    buffer.cursor += 1
    return u


class LinearisingController:
    """Reference generator and MPC bundled for sample-by-sample use."""

    def __init__(self, model: PolyNlssModel, q: float, r_delta: float, np_max: int):
        self.model = model
        self.gains = precompute_gains(model, q, r_delta, np_max)
        self.reset()

    def reset(self):
        self.buffer = ReferenceBuffer.zeros(self.model.n, self.gains.np_max)
        self.state = ControllerState.zeros(self.model.n)

    def outer_sample(self, v: float):
        make_reference(self.model, self.buffer, v)

    def step(self, x_hat) -> float:
        return control_step(self.gains, self.state, x_hat, self.buffer)
