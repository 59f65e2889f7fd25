import json

import numpy as np
import pytest

from fblin.excitation import (EVEN_DETECTION, EXCITED, ODD_DETECTION, UNEXCITED, MultisineSpec, design, export,
                              realisations)
from fblin.records import read_csv

DUFFING_SPEC = MultisineSpec(n_samples=4000, fs=100.0, f_min=0.025, f_max=14.0, rms=0.12, kind="odd",
                             group_size=4, seed=3)


def test_zero_rms_gives_zero_signal():
    d = design(MultisineSpec(n_samples=64, fs=64.0, f_min=1.0, f_max=10.0, rms=0.0))
    assert np.all(d.signal == 0.0)


def test_duffing_design_withholds_one_line_per_group():
    d = design(DUFFING_SPEC)
    assert DUFFING_SPEC.f_res == pytest.approx(0.025)
    band = DUFFING_SPEC.band_lines()
    odd = band[band % 2 == 1]
    groups = odd[: (odd.size // 4) * 4].reshape(-1, 4)
    for g in groups:
        assert np.sum(d.lines[g] == ODD_DETECTION) == 1
        assert np.sum(d.lines[g] == EXCITED) == 3
    assert np.all(d.lines[band[band % 2 == 0]] == EVEN_DETECTION)
    assert d.lines[0] == UNEXCITED
    assert np.sqrt(np.mean(d.signal**2)) == pytest.approx(0.12, rel=1e-12)


@pytest.mark.parametrize("kind", ["odd", "full"])
def test_spectrum_of_generated_period(kind):
    spec = MultisineSpec(n_samples=2000, fs=200.0, f_min=0.5, f_max=40.0, rms=1.0, kind=kind, seed=9)
    d = design(spec)
    mag = np.abs(np.fft.rfft(d.signal))
    peak = mag.max()
    exc = d.excited
    assert np.ptp(mag[exc]) <= 1e-9 * mag[exc].mean()
    silent = np.flatnonzero(d.lines != EXCITED)
    assert mag[silent].max() <= 1e-12 * peak
    assert mag[0] <= 1e-12 * peak


def test_parseval_and_even_lines():
    d = design(DUFFING_SPEC)
    spec = np.fft.fft(d.signal)
    n = DUFFING_SPEC.n_samples
    assert np.sum(np.abs(spec) ** 2) == pytest.approx(n * n * np.mean(d.signal**2), rel=1e-9)
    mag = np.abs(spec[: n // 2 + 1])
    even = d.even_detection
    assert mag[even].max() < 1e-12 * mag.max()


def test_phases_are_uniform_in_range():
    d = design(DUFFING_SPEC)
    ph = d.phases[d.excited]
    assert ph.min() >= 0.0 and ph.max() < 2 * np.pi
    # crude uniformity check on ~210 phases
    counts, _ = np.histogram(ph, bins=4, range=(0, 2 * np.pi))
    assert counts.min() > 0.5 * ph.size / 4


def test_single_realisation_single_period():
    recs = realisations(DUFFING_SPEC, 1, 1)
    assert len(recs) == 1
    np.testing.assert_array_equal(recs[0].u, design(DUFFING_SPEC).signal)


def test_realisations_differ_in_phase_but_share_lines():
    r0, r1 = realisations(DUFFING_SPEC, 2, 2)
    assert not np.allclose(r0.design.phases, r1.design.phases)
    np.testing.assert_array_equal(r0.design.lines, r1.design.lines)
    assert (r0.realisation, r1.realisation) == (0, 1)


def test_tiled_record_is_periodic():
    rec = realisations(DUFFING_SPEC, 1, 5)[0]
    n = DUFFING_SPEC.n_samples
    assert rec.u.size == 5 * n
    blocks = rec.u.reshape(5, n)
    assert np.all(blocks == blocks[0])
    assert rec.t[1] == pytest.approx(1 / DUFFING_SPEC.fs)


def test_design_is_deterministic():
    a, b = design(DUFFING_SPEC), design(DUFFING_SPEC)
    assert a.signal.tobytes() == b.signal.tobytes()


@pytest.mark.parametrize("kwargs", [
    dict(n_samples=101, fs=100.0, f_min=1.0, f_max=10.0, rms=1.0),
    dict(n_samples=100, fs=100.0, f_min=10.0, f_max=60.0, rms=1.0),
    dict(n_samples=100, fs=100.0, f_min=1.0, f_max=10.0, rms=1.0, kind="sparse"),
])
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        MultisineSpec(**kwargs)


def test_band_without_lines_is_rejected():
    with pytest.raises(ValueError, match="no"):
        design(MultisineSpec(n_samples=100, fs=100.0, f_min=10.2, f_max=10.8, rms=1.0, kind="full"))


def test_group_size_larger_than_odd_lines():
    with pytest.raises(ValueError, match="group_size"):
        design(MultisineSpec(n_samples=100, fs=100.0, f_min=1.0, f_max=5.0, rms=1.0, group_size=10))


def test_export_writes_csv_and_metadata(tmp_path):
    rec = realisations(DUFFING_SPEC, 2, 2)[1]
    csv_path, json_path = export(rec, tmp_path / "exc")
    cols = read_csv(csv_path)
    np.testing.assert_array_equal(cols["u"], rec.u)
    meta = json.loads(json_path.read_text())
    assert meta["realisation"] == 1 and meta["phase_seed"] == DUFFING_SPEC.seed + 1
    assert meta["odd_detection"] == rec.design.odd_detection.tolist()
    assert meta["spec"]["n_samples"] == 4000
