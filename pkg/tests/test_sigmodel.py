import json
from pathlib import Path

import numpy as np
import pytest
import scipy.signal
from conftest import random_model

from fblin.errors import DivergenceError, ModelFormatError
from fblin.records import read_csv
from fblin.sigmodel import (PolyNlssModel, augment, bundled_model, eval_monomials, load_model, model_to_document,
                            resample, save_model, simulate, step, zero_quadratic)

FIXTURES = Path(__file__).parent / "fixtures"


def scalar_model(exps):
    return PolyNlssModel(a_mat=[[0.5]], b_vec=[1.0], c_vec=[1.0], e_mat=np.zeros((1, len(exps))),
                         exponents=tuple(exps), ts=1.0)


@pytest.mark.parametrize("exps, y, expected", [
    ([2, 3], 2.0, [4.0, 8.0]),
    ([2, 3], 0.0, [0.0, 0.0]),
    ([3], -1.5, [-3.375]),
])
def test_eval_monomials(exps, y, expected):
    assert eval_monomials(scalar_model(exps), y) == pytest.approx(expected, abs=0)


def test_step_equilibrium(duffing_model):
    x_next, y = step(duffing_model, [0.0, 0.0], 0.0)
    assert y == 0.0 and np.all(x_next == 0.0)


def test_step_linear_reduction(duffing_model):
    lin = duffing_model.linear_part()
    x = np.array([0.3, -0.2])
    x_next, y = step(lin, x, 0.7)
    np.testing.assert_allclose(x_next, lin.a_mat @ x + lin.b_vec * 0.7, rtol=1e-15)


def test_step_duffing_hand_evaluation(duffing_model):
    # Duffing model entries typed in directly; x = [1e-3, 1e-3], u = 0
    y = 2.467e-3 * 1e-3 + 1.854e-2 * 1e-3
    x1 = 9.992e-1 * 1e-3 + 2.428e-2 * 1e-3 + 1.326e2 * y**2 + 2.598e5 * y**3
    x2 = -2.070e-2 * 1e-3 + 9.994e-1 * 1e-3 + 7.221 * y**2 - 4.306e4 * y**3
    x_next, y_model = step(duffing_model, [1e-3, 1e-3], 0.0)
    assert y_model == pytest.approx(y, rel=1e-14)
    np.testing.assert_allclose(x_next, [x1, x2], rtol=1e-13)


def test_simulate_single_sample(duffing_model):
    rec = simulate(duffing_model, [0.1], x0=[1e-3, -2e-3])
    x_next, y = step(duffing_model, [1e-3, -2e-3], 0.1)
    assert rec.y[0] == y and rec.x.shape == (1, 2)


def test_simulate_linear_matches_dlsim():
    rng = np.random.default_rng(3)
    for _ in range(5):
        m = random_model(rng, 3, 2).linear_part()
        u = rng.standard_normal(300)
        _, y_ref, _ = scipy.signal.dlsim((m.a_mat, m.b_vec[:, None], m.c_vec[None, :], [[0.0]], m.ts), u)
        np.testing.assert_allclose(simulate(m, u).y, y_ref[:, 0], rtol=1e-12, atol=1e-12)


def test_simulate_sine_gain_matches_frf(duffing_model):
    lin = duffing_model.linear_part()
    n, q = 4000, 12  # 3 Hz at 1 kHz, whole number of cycles per block
    k = np.arange(10 * n)
    u = np.sin(2 * np.pi * q * k / n)
    y = simulate(lin, u).y[-n:]
    gain = 2 * np.abs(np.fft.rfft(y)[q]) / n
    assert gain == pytest.approx(abs(lin.frf(q * 1000.0 / n)[0]), rel=1e-3)


def test_simulate_reproduces_frozen_fixture(duffing_model):
    cols = read_csv(FIXTURES / "duffing_validation.csv")
    np.testing.assert_allclose(simulate(duffing_model, cols["u"]).y, cols["y"], rtol=1e-12, atol=1e-18)


def test_simulate_reports_divergence_index():
    m = PolyNlssModel(a_mat=[[1.0]], b_vec=[1.0], c_vec=[1.0], e_mat=[[1.0]], exponents=(3,), ts=1.0)
    with pytest.raises(DivergenceError) as info:
        simulate(m, np.full(50, 1.0))
    assert 0 < info.value.index < 50


def test_augment_scalar_substitution():
    a, b, c, e = 0.7, 2.0, 3.0, 0.5
    m = PolyNlssModel(a_mat=[[a]], b_vec=[b], c_vec=[c], e_mat=[[e]], exponents=(2,), ts=1.0)
    aug = augment(m)
    np.testing.assert_array_equal(aug.a_bar, [[a, 0.0], [c * a, 1.0]])
    np.testing.assert_array_equal(aug.b_bar, [b, c * b])
    np.testing.assert_array_equal(aug.e_bar, [[e], [c * e]])
    np.testing.assert_array_equal(aug.c_bar, [0.0, 1.0])


def test_augment_identity_state_matrix():
    m = PolyNlssModel(a_mat=np.eye(3), b_vec=np.ones(3), c_vec=np.ones(3), e_mat=np.zeros((3, 0)),
                      exponents=(), ts=1.0)
    np.testing.assert_array_equal(augment(m).a_bar[3, :3], np.ones(3))


def test_augment_duffing(duffing_model):
    aug = augment(duffing_model)
    assert aug.a_bar.shape == (3, 3) and aug.a_bar[2, 2] == 1.0
    np.testing.assert_allclose(aug.a_bar[2, :2], duffing_model.c_vec @ duffing_model.a_mat, rtol=1e-15)
    x_bar = np.array([1.0, 2.0, 3.0])
    assert aug.c_bar @ x_bar == 3.0


def test_velocity_form_reproduces_simulation():
    rng = np.random.default_rng(11)
    for _ in range(10):
        m = random_model(rng, int(rng.integers(1, 5)), int(rng.integers(0, 4)), e_scale=0.02)
        u = 0.05 * rng.standard_normal(60)
        rec = simulate(m, u)
        aug = augment(m)
        z = np.array([eval_monomials(m, y) for y in rec.y])
        # start from k=1 so that x(k-1), u(k-1) exist
        xb = np.concatenate([rec.x[1] - rec.x[0], [rec.y[1]]])
        for k in range(1, u.size - 1):
            xb = aug.a_bar @ xb + aug.b_bar * (u[k] - u[k - 1]) + aug.e_bar @ (z[k] - z[k - 1])
            assert abs(aug.c_bar @ xb - rec.y[k + 1]) <= 1e-10 * max(1.0, np.abs(rec.y).max())


def test_monomial_order_is_canonical():
    rng = np.random.default_rng(5)
    a = 0.5 * np.eye(2)
    b, c = rng.standard_normal(2), rng.standard_normal(2)
    e = rng.standard_normal((2, 2))
    m1 = PolyNlssModel(a_mat=a, b_vec=b, c_vec=c, e_mat=e, exponents=(2, 3), ts=1.0)
    m2 = PolyNlssModel(a_mat=a, b_vec=b, c_vec=c, e_mat=e[:, ::-1], exponents=(3, 2), ts=1.0)
    assert m2.exponents == (2, 3)
    u = 0.1 * rng.standard_normal(100)
    np.testing.assert_array_equal(simulate(m1, u).y, simulate(m2, u).y)


def test_bundled_duffing_values(duffing_model):
    m = duffing_model
    assert (m.n, m.s, m.exponents, m.ts) == (2, 2, (2, 3), 1e-3)
    assert m.a_mat[0, 0] == 9.992e-1 and m.e_mat[0, 1] == 2.598e5


def test_bundled_beam_values(beam_model):
    m = beam_model
    assert (m.n, m.s, m.exponents, m.ts) == (4, 1, (3,), 1 / 1024)
    assert m.e_mat[3, 0] == -1.112e7 and m.a_mat[2, 0] == -4.9715e-4


def test_save_load_round_trip(tmp_path, beam_model):
    path = save_model(beam_model, tmp_path / "m.json")
    back = load_model(path)
    for attr in ("a_mat", "b_vec", "c_vec", "e_mat"):
        np.testing.assert_array_equal(getattr(back, attr), getattr(beam_model, attr))
    assert back.ts == beam_model.ts and back.content_hash() == beam_model.content_hash()
    assert load_model(path.read_text()).content_hash() == beam_model.content_hash()


@pytest.mark.parametrize("edit, message", [
    (lambda d: d.update(B=[1.0, 2.0, 3.0]), "B"),
    (lambda d: d.pop("C"), "missing"),
    (lambda d: d.update(A=[float("nan")] + d["A"][1:]), "non-finite"),
    (lambda d: d.update(exponents=[2]), "exponents"),
])
def test_malformed_documents(duffing_model, edit, message):
    doc = model_to_document(duffing_model)
    edit(doc)
    with pytest.raises(ModelFormatError, match=message):
        load_model(json.loads(json.dumps(doc)))


def test_zero_quadratic(duffing_model):
    m = zero_quadratic(duffing_model)
    np.testing.assert_array_equal(m.e_mat[:, 0], 0.0)
    np.testing.assert_array_equal(m.e_mat[:, 1], duffing_model.e_mat[:, 1])
    np.testing.assert_array_equal(m.a_mat, duffing_model.a_mat)
    np.testing.assert_array_equal(zero_quadratic(m).e_mat, m.e_mat)


def test_zero_quadratic_rejects_cubic_only(beam_model):
    with pytest.raises(ValueError):
        zero_quadratic(beam_model)


def test_resample_matches_zoh_of_continuous_system():
    ac = np.array([[0.0, 1.0], [-500.0, -1.0]])
    bc = np.array([[0.0], [1.0]])
    cc = np.array([[1.0, 0.0]])

    def zoh(ts):
        a, b, c, _, _ = scipy.signal.cont2discrete((ac, bc, cc, [[0.0]]), ts)
        return PolyNlssModel(a_mat=a, b_vec=b[:, 0], c_vec=c[0], e_mat=np.zeros((2, 0)), exponents=(), ts=ts)

    coarse = zoh(1e-3)
    for ts_new in (2e-3, 1e-3 / 3, 2.5e-4):
        got = resample(coarse, ts_new)
        ref = zoh(ts_new)
        np.testing.assert_allclose(got.a_mat, ref.a_mat, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(got.b_vec, ref.b_vec, rtol=1e-9, atol=1e-15)


def test_resample_integer_ratio_is_held_input_recursion(beam_model):
    m2 = resample(beam_model, 2 * beam_model.ts)
    x = np.array([1e-4, -2e-4, 3e-4, 1e-4])
    a, b, e = beam_model.a_mat, beam_model.b_vec, beam_model.e_mat[:, 0]
    z = 0.37
    expected = a @ (a @ x + b * 0.1 + e * z) + b * 0.1 + e * z
    np.testing.assert_allclose(m2.a_mat @ x + m2.b_vec * 0.1 + m2.e_mat[:, 0] * z, expected, rtol=1e-12)


def test_content_hash_changes_with_coefficients(duffing_model):
    assert duffing_model.content_hash() != zero_quadratic(duffing_model).content_hash()
