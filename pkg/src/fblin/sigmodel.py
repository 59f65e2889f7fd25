"""Polynomial nonlinear state-space (PNLSS) models with output-only monomials.

The model class is

    x(k+1) = A x(k) + B u(k) + E zeta(y(k))
    y(k)   = C x(k)

with ``zeta(y) = [y**p for p in exponents]``. The numerical kernels live in
module-level ``@njit`` functions so the closed-loop runner can call them from
compiled code; the public functions below wrap them with validation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import scipy.linalg
from numba import njit

from .errors import DivergenceError, ModelFormatError
from .records import SignalRecord

SCHEMA = "fblin.pnlss/1"
BUNDLED = ("duffing_nlss", "beam_nlss")

# |y| beyond this multiple of the running RMS of y counts as divergence
DIVERGENCE_FACTOR = 1e6
# samples before the runaway test is armed
DIVERGENCE_WARMUP = 100


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def monomials(y, exps):
    out = np.empty(exps.shape[0])
    for p in range(exps.shape[0]):
        out[p] = y ** exps[p]
    return out


@njit(cache=True)
def monomial_increment(y, d, exps):
    """zeta(y + d) - zeta(y), expanded binomially so small ``d`` keeps precision."""
    out = np.empty(exps.shape[0])
    for p in range(exps.shape[0]):
        deg = exps[p]
        acc = 0.0
        coef = 1.0
        dk = 1.0
        for k in range(1, deg + 1):
            coef = coef * (deg - k + 1) / k
            dk *= d
            acc += coef * y ** (deg - k) * dk
        out[p] = acc
    return out


@njit(cache=True)
def step_kernel(A, B, C, E, exps, x, u):
    y = 0.0
    for i in range(x.shape[0]):
        y += C[i] * x[i]
    z = monomials(y, exps)
    x_next = A @ x + B * u
    if exps.shape[0] > 0:
        x_next += E @ z
    return x_next, y


@njit(cache=True)
def simulate_kernel(A, B, C, E, exps, x0, u, y_out, x_out):
    """Iterate the model; returns -1 on success or the divergent sample index."""
    x = x0.copy()
    sumsq = 0.0
    for k in range(u.shape[0]):
        x_out[k] = x
        x, y = step_kernel(A, B, C, E, exps, x, u[k])
        y_out[k] = y
        if not np.isfinite(y) or not np.all(np.isfinite(x)):
            return k
        if k >= DIVERGENCE_WARMUP and sumsq > 0.0:
            if abs(y) > DIVERGENCE_FACTOR * np.sqrt(sumsq / k):
                return k
        sumsq += y * y
    return -1


# ---------------------------------------------------------------------------
# model types


@dataclass(frozen=True, eq=False)
class PolyNlssModel:
    """Discrete-time SISO PNLSS model.

    Exponents are put in canonical (strictly increasing) order on
    construction, with the columns of ``e_mat`` permuted to match.
    """

    a_mat: np.ndarray
    b_vec: np.ndarray
    c_vec: np.ndarray
    e_mat: np.ndarray
    exponents: tuple[int, ...]
    ts: float
    name: str = ""

    def __post_init__(self):
        a = np.array(self.a_mat, dtype=float, ndmin=2)
        n = a.shape[0]
        if a.shape != (n, n) or n < 1:
            raise ModelFormatError(f"A must be square, got shape {a.shape}")
        b = np.array(self.b_vec, dtype=float).reshape(-1)
        c = np.array(self.c_vec, dtype=float).reshape(-1)
        if b.shape != (n,):
            raise ModelFormatError(f"B must have {n} entries, got {b.size}")
        if c.shape != (n,):
            raise ModelFormatError(f"C must have {n} entries, got {c.size}")
        exps = [int(p) for p in self.exponents]
        if any(float(p) != float(q) for p, q in zip(exps, self.exponents)):
            raise ModelFormatError("exponents must be integers")
        s = len(exps)
        e = np.array(self.e_mat, dtype=float)
        if e.size == 0 and s == 0:
            e = np.zeros((n, 0))
        e = e.reshape(n, -1) if e.ndim == 1 and s == 1 else e
        if e.shape != (n, s):
            raise ModelFormatError(f"E must be {n}x{s}, got shape {e.shape}")
        if any(p < 1 for p in exps):
            raise ModelFormatError("exponents must be positive")
        if len(set(exps)) != s:
            raise ModelFormatError(f"duplicate exponents {exps}")
        order = np.argsort(exps, kind="stable")
        e = e[:, order]
        exps = tuple(exps[i] for i in order)
        ts = float(self.ts)
        if not ts > 0:
            raise ModelFormatError(f"sample time must be positive, got {ts}")
        for label, arr in (("A", a), ("B", b), ("C", c), ("E", e)):
            if not np.all(np.isfinite(arr)):
                raise ModelFormatError(f"non-finite entry in {label}")
            arr.setflags(write=False)
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b_vec", b)
        object.__setattr__(self, "c_vec", c)
        object.__setattr__(self, "e_mat", e)
        object.__setattr__(self, "exponents", exps)
        object.__setattr__(self, "ts", ts)

    @property
    def n(self) -> int:
        return self.a_mat.shape[0]

    @property
    def s(self) -> int:
        return len(self.exponents)

    @property
    def exps_array(self) -> np.ndarray:
        return np.asarray(self.exponents, dtype=np.int64)

    def kernel_args(self):
        """(A, B, C, E, exps) as contiguous arrays for the compiled kernels."""
        return (
            np.ascontiguousarray(self.a_mat),
            np.ascontiguousarray(self.b_vec),
            np.ascontiguousarray(self.c_vec),
            np.ascontiguousarray(self.e_mat),
            self.exps_array,
        )

    def linear_part(self) -> "PolyNlssModel":
        return replace(self, e_mat=np.zeros((self.n, self.s)))

    def frf(self, freqs: np.ndarray) -> np.ndarray:
        """Frequency response C (zI - A)^-1 B of the linear part at ``freqs`` (Hz)."""
        z = np.exp(2j * np.pi * np.asarray(freqs, dtype=float) * self.ts)
        eye = np.eye(self.n)
        return np.array([self.c_vec @ np.linalg.solve(zi * eye - self.a_mat, self.b_vec) for zi in np.atleast_1d(z)])

    def dc_gain(self) -> float:
        return float(self.c_vec @ np.linalg.solve(np.eye(self.n) - self.a_mat, self.b_vec))

    def content_hash(self) -> str:
        text = json.dumps(model_to_document(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class AugmentedModel:
    """Velocity-form model with state [dx; y], driven by du and dzeta."""

    a_bar: np.ndarray
    b_bar: np.ndarray
    e_bar: np.ndarray
    c_bar: np.ndarray

    @property
    def n(self) -> int:
        return self.a_bar.shape[0]


# ---------------------------------------------------------------------------
# operations


def eval_monomials(model: PolyNlssModel, y: float) -> np.ndarray:
    return monomials(float(y), model.exps_array)


def step(model: PolyNlssModel, x: Sequence[float], u: float) -> tuple[np.ndarray, float]:
    """One sample of the model. Returns ``(x_next, y)`` with ``y = C x``."""
    x = np.asarray(x, dtype=float).reshape(model.n)
    x_next, y = step_kernel(*model.kernel_args(), x, float(u))
    if not (np.isfinite(y) and np.all(np.isfinite(x_next))):
        raise DivergenceError("non-finite model state", 0)
    return x_next, y


def simulate(model: PolyNlssModel, u: Sequence[float], x0: Sequence[float] | None = None) -> SignalRecord:
    """Simulate ``len(u)`` samples from ``x0`` (zero by default).

    Raises
    ------
    DivergenceError
        If the state becomes non-finite or the output runs away (more than
        ``DIVERGENCE_FACTOR`` times the running RMS after a short warm-up).
    """
    u = np.ascontiguousarray(u, dtype=float).reshape(-1)
    if u.size < 1:
        raise ValueError("need at least one input sample")
    x0 = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float).reshape(model.n)
    y = np.empty(u.size)
    x = np.empty((u.size, model.n))
    status = simulate_kernel(*model.kernel_args(), x0, u, y, x)
    if status >= 0:
        raise DivergenceError("model simulation diverged", int(status))
    t = np.arange(u.size) * model.ts
    return SignalRecord(t=t, u=u, y=y, y_true=y, x=x)


def augment(model: PolyNlssModel) -> AugmentedModel:
    n, s = model.n, model.s
    a, b, c, e = model.a_mat, model.b_vec, model.c_vec, model.e_mat
    a_bar = np.zeros((n + 1, n + 1))
    a_bar[:n, :n] = a
    a_bar[n, :n] = c @ a
    a_bar[n, n] = 1.0
    b_bar = np.concatenate([b, [c @ b]])
    e_bar = np.vstack([e, (c @ e).reshape(1, s)])
    c_bar = np.zeros(n + 1)
    c_bar[n] = 1.0
    return AugmentedModel(a_bar=a_bar, b_bar=b_bar, e_bar=e_bar, c_bar=c_bar)


def resample(model: PolyNlssModel, ts_new: float) -> PolyNlssModel:
    """Re-discretise for a new sample time assuming u and zeta(y) are held.

    Integer multiples of the original sample time use the exact held-input
    recursion (A^m, sum A^j B, sum A^j E). Other ratios go through the matrix
    logarithm of the held-input transition matrix. The nonlinear term is only
    approximated: zeta(y) is frozen over the new, longer or shorter, interval.
    """
    ratio = ts_new / model.ts
    n, s = model.n, model.s
    m = int(round(ratio))
    if m >= 1 and abs(ratio - m) < 1e-12:
        a_pow = np.eye(n)
        acc = np.zeros((n, n))
        for _ in range(m):
            acc += a_pow
            a_pow = model.a_mat @ a_pow
        return replace(model, a_mat=a_pow, b_vec=acc @ model.b_vec, e_mat=acc @ model.e_mat, ts=ts_new)
    big = np.eye(n + 1 + s)
    big[:n, :n] = model.a_mat
    big[:n, n] = model.b_vec
    big[:n, n + 1 :] = model.e_mat
    gen = scipy.linalg.logm(big)
    if np.max(np.abs(np.imag(gen))) > 1e-9:
        raise ValueError("transition matrix has no real logarithm; cannot re-discretise")
    big_new = scipy.linalg.expm(np.real(gen) * ratio)
    return replace(
        model,
        a_mat=big_new[:n, :n],
        b_vec=big_new[:n, n],
        e_mat=big_new[:n, n + 1 :],
        ts=ts_new,
    )


def zero_quadratic(model: PolyNlssModel) -> PolyNlssModel:
    """Copy of ``model`` with the coefficients of the ``y**2`` monomial zeroed."""
    if 2 not in model.exponents:
        raise ValueError(f"model has no quadratic monomial (exponents {model.exponents})")
    e = model.e_mat.copy()
    e[:, model.exponents.index(2)] = 0.0
    return replace(model, e_mat=e)


# ---------------------------------------------------------------------------
# file format


def model_from_document(doc: Mapping[str, Any]) -> PolyNlssModel:
    schema = doc.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise ModelFormatError(f"unsupported schema {schema!r}")
    for key in ("n", "s", "ts", "exponents", "A", "B", "C", "E"):
        if key not in doc:
            raise ModelFormatError(f"missing field {key!r}")
    n, s = int(doc["n"]), int(doc["s"])
    sizes = {"A": n * n, "B": n, "C": n, "E": n * s}
    arrays = {}
    for key, size in sizes.items():
        arr = np.asarray(doc[key], dtype=float).reshape(-1)
        if arr.size != size:
            raise ModelFormatError(f"field {key!r} has {arr.size} entries, expected {size} for n={n}, s={s}")
        if not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"non-finite entry in {key!r}")
        arrays[key] = arr
    if len(doc["exponents"]) != s:
        raise ModelFormatError(f"{len(doc['exponents'])} exponents given for s={s}")
    return PolyNlssModel(
        a_mat=arrays["A"].reshape(n, n),
        b_vec=arrays["B"],
        c_vec=arrays["C"],
        e_mat=arrays["E"].reshape(n, s),
        exponents=tuple(doc["exponents"]),
        ts=float(doc["ts"]),
        name=str(doc.get("name", "")),
    )


def model_to_document(model: PolyNlssModel) -> dict[str, Any]:
    doc = {
        "schema": SCHEMA,
        "name": model.name,
        "n": model.n,
        "s": model.s,
        "ts": model.ts,
        "exponents": list(model.exponents),
        "A": model.a_mat.reshape(-1).tolist(),
        "B": model.b_vec.tolist(),
        "C": model.c_vec.tolist(),
        "E": model.e_mat.reshape(-1).tolist(),
    }
    return doc


def load_model(source: str | Path | Mapping[str, Any]) -> PolyNlssModel:
    """Load a model from a JSON file path, JSON text, a parsed document, or a bundled name."""
    if isinstance(source, Mapping):
        return model_from_document(source)
    text = str(source)
    if text in BUNDLED:
        return bundled_model(text)
    if text.lstrip().startswith("{"):
        return model_from_document(json.loads(text))
    return model_from_document(json.loads(Path(source).read_text()))


def save_model(model: PolyNlssModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_document(model), indent=2) + "\n")
    return path


def bundled_model(name: str) -> PolyNlssModel:
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled model {name!r}; choose from {BUNDLED}")
    text = resources.files("fblin").joinpath("data", f"{name}.json").read_text()
    return model_from_document(json.loads(text))
