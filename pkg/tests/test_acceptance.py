"""Acceptance gate: one pass/fail line per criterion, printed and collected in the terminal summary.

Scenario runs use the shipped configs unchanged (desk scale).
"""

import time
from pathlib import Path

import numpy as np
import pytest
import scipy.optimize
from conftest import ACCEPTANCE_LINES, random_model
from test_estimator import kalman_filter, noisy_linear_data, run_ukf

from fblin.errors import DivergenceError
from fblin.estimator import UkfConfig
from fblin.experiments import ExperimentConfig, run_scenario
from fblin.mpc import build_prediction, cost, optimal_sequence
from fblin.plantsim import DuffingPlant
from fblin.sigmodel import augment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
_RUNS: dict[str, object] = {}


def report(k: int, ok: bool, text: str) -> bool:
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {text}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    return ok


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    def run(name):
        if name not in _RUNS:
            cfg = ExperimentConfig.load(CONFIGS / f"{name}.json")
            t0 = time.perf_counter()
            try:
                res = run_scenario(cfg, tmp_path_factory.mktemp(name))
            except DivergenceError as exc:
                res = exc
            _RUNS[name] = (res, time.perf_counter() - t0)
        return _RUNS[name]

    return run


def test_criterion_01_prediction_matrices():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        m = random_model(rng, int(rng.integers(1, 5)), int(rng.integers(0, 4)))
        aug = augment(m)
        n_p = int(rng.integers(1, 16))
        s_x, s_u, s_g = build_prediction(aug, n_p)
        x = rng.standard_normal(aug.n)
        du = rng.standard_normal(n_p)
        dg = rng.standard_normal(m.s * n_p)
        y_fast = s_x @ x + s_u @ du + s_g @ dg
        xb = x.copy()
        for j in range(n_p):
            xb = aug.a_bar @ xb + aug.b_bar * du[j] + aug.e_bar @ dg[j * m.s : (j + 1) * m.s]
            worst = max(worst, abs(aug.c_bar @ xb - y_fast[j]))
    elapsed = time.perf_counter() - t0
    assert report(1, worst < 1e-10 and elapsed < 5, f"max abs error {worst:.2e} (< 1e-10), {elapsed:.2f} s (< 5 s)")


def test_criterion_02_closed_form_optimum():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst, violations = 0.0, 0
    for _ in range(50):
        m = random_model(rng, int(rng.integers(1, 5)), int(rng.integers(0, 4)))
        n_p = int(rng.integers(1, 11))
        q, r = 10 ** rng.uniform(-1, 2), 10 ** rng.uniform(-1, 1)
        s_x, s_u, s_g = build_prediction(augment(m), n_p)
        x = rng.standard_normal(m.n + 1)
        dg = rng.standard_normal(m.s * n_p)
        y_ref = rng.standard_normal(n_p)
        best = optimal_sequence(s_x, s_u, s_g, q, r, x, dg, y_ref)
        hess = 2 * q * s_u.T @ s_u + 2 * r * np.eye(n_p)

        def f(du):
            return cost(s_x, s_u, s_g, q, r, x, dg, y_ref, du)

        def grad(du):
            return 2 * q * s_u.T @ (s_x @ x + s_u @ du + s_g @ dg - y_ref) + 2 * r * du

        num = scipy.optimize.minimize(f, np.zeros(n_p), jac=grad, hess=lambda du: hess, method="trust-exact",
                                      options={"gtol": 1e-12}).x
        worst = max(worst, np.abs(best - num).max() / max(1.0, np.abs(best).max()))
        j0 = f(best)
        for _ in range(20):
            violations += f(best + 1e-4 * rng.standard_normal(n_p)) < j0
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and violations == 0 and elapsed < 30
    assert report(2, ok, f"max deviation {worst:.2e} (< 1e-8), {violations} perturbations below optimum, "
                         f"{elapsed:.2f} s (< 30 s)")


@pytest.mark.slow
def test_criterion_03_linear_world(scenario):
    res, _ = scenario("linear-world")
    m = res.metrics
    track, frf = m["linear.tracking_ratio"], m["linear.frf_max_dev_db"]
    ok = track < 1e-8 and frf < 0.1
    assert report(3, ok, f"tracking RMS ratio {track:.2e} (< 1e-8), FRF deviation {frf:.4f} dB (< 0.1 dB)")


@pytest.mark.slow
def test_criterion_04_duffing_performance(scenario):
    res, elapsed = scenario("duffing-linearised")
    mpc, ukf = res.metrics["errors.ratio_mpc_pct"], res.metrics["errors.ratio_ukf_pct"]
    ok = 0.02 <= mpc <= 0.2 and 1.5 <= ukf <= 6 and elapsed < 300
    assert report(4, ok, f"MPC {mpc:.4f}% in [0.02, 0.2], UKF {ukf:.2f}% in [1.5, 6], {elapsed:.0f} s (< 300 s)")


@pytest.mark.slow
def test_criterion_05_distortion_suppression(scenario):
    res, _ = scenario("duffing-linearised")
    m = res.metrics
    open_odd = m["open.odd_near_resonance_db"]
    bands = [m[f"closed.{c}_near_{b}_db"] for c in ("odd", "even") for b in ("resonance", "second_harmonic")]
    ok = -15 <= open_odd <= -5 and max(bands) <= -35
    assert report(5, ok, f"open-loop odd {open_odd:.1f} dB in [-15, -5]; closed-loop odd/even near 1x/2x "
                         f"resonance {', '.join(f'{b:.1f}' for b in bands)} dB (<= -35)")


@pytest.mark.slow
def test_criterion_06_unmodelled_quadratic(scenario):
    res, _ = scenario("duffing-cubic-only")
    m = res.metrics
    mpc, ukf = m["robustness.mpc_ratio_change"], m["robustness.ukf_ratio_change"]
    even, bias = m["robustness.even_suppression_resonance_db"], m["robustness.ukf_mean_over_se"]
    mpc_ok = 0.5 < mpc < 2
    ok = mpc_ok and ukf >= 1.7 and 8 <= even <= 25 and abs(bias) > 3
    assert report(6, ok, f"MPC ratio change {mpc:.2f}x (< 2x), UKF change {ukf:.2f}x (>= 1.7x), even suppression "
                         f"{even:.1f} dB in [8, 25], |mean|/SE {abs(bias):.0f} (> 3)")


@pytest.mark.slow
def test_criterion_07_extrapolation(scenario):
    res, _ = scenario("duffing-extrapolation")
    base, _ = scenario("duffing-linearised")
    m, b = res.metrics, base.metrics
    mpc = m["errors.ratio_mpc_pct"]
    keys = [f"closed.{c}_near_{x}_db" for c in ("odd", "even") for x in ("resonance", "second_harmonic")]
    bands = [m[k] for k in keys]
    amplification = float(np.mean([m[k] - b[k] for k in keys]))
    ok = res.status == "ok" and mpc <= 0.1 and max(bands) <= -30 and amplification > 0
    assert report(7, ok, f"stable, MPC {mpc:.4f}% (<= 0.1%), residuals {', '.join(f'{v:.1f}' for v in bands)} dB "
                         f"(<= -30), mean amplification vs 0.12 N run {amplification:+.1f} dB (> 0)")


@pytest.mark.slow
def test_criterion_08_beam_surrogate(scenario):
    res, _ = scenario("beam")
    if isinstance(res, DivergenceError):
        report(8, False, f"closed loop diverged at sample {res.index} ({res.detail}); tracking, input-peak, "
                         f"resonance and DC-line checks not reachable")
        pytest.fail(f"beam closed loop diverged: {res}")
    m = res.metrics
    track, peak = m["sine.tracking_ratio_pct"], m["sine.u_peak_over_v_peak"]
    shift, dc = m["compare.resonance_shift_hz"], m["compare.lowest_line_gain_db"]
    ok = 0.5 <= track <= 3 and peak > 10 and shift < 0 and dc > 0
    assert report(8, ok, f"sine error {track:.2f}% in [0.5, 3], |u|/|v| peak {peak:.1f} (> 10), resonance shift "
                         f"{shift:+.2f} Hz (< 0), DC line {dc:+.1f} dB (> 0)")


def test_criterion_09_duffing_linear_eigenstructure():
    plant = DuffingPlant()
    f, z = plant.natural_frequency(), 100 * plant.damping_ratio()
    ok = abs(f - 3.56) <= 0.01 and abs(z - 2.24) <= 0.05
    assert report(9, ok, f"natural frequency {f:.4f} Hz (3.56 +- 0.01), damping {z:.3f}% (2.24 +- 0.05)")


def test_criterion_10_ukf_equals_kalman(duffing_model):
    lin = duffing_model.linear_part()
    cfg = UkfConfig.scaled(2, 1.13e-14, 0.05)
    u, y = noisy_linear_data(lin, 1000, cfg.r_cov, cfg.q_cov, seed=10)
    m_kf, p_kf = kalman_filter(lin, cfg.q_cov, cfg.r_cov, u, y)
    m_ukf, p_ukf, _ = run_ukf(lin, cfg, u, y)
    dm = np.abs(m_ukf - m_kf).max() / np.abs(m_kf).max()
    dp = np.abs(p_ukf - p_kf).max() / np.abs(p_kf).max()
    assert report(10, dm < 1e-9 and dp < 1e-9, f"relative mean deviation {dm:.1e}, covariance {dp:.1e} (< 1e-9) "
                                                f"over 1000 steps")
