import math

import numpy as np
import pytest

from hopmnoise import spectral
from hopmnoise import sensitivity as sn
from hopmnoise.analytic import transfer_ratio
from hopmnoise.pipeline import default_context

from oracles import FROZEN


@pytest.fixture(scope="module")
def ctx():
    return default_context()


def test_dc_zero_response(ctx):
    a = 1e-9
    r1 = sn.responsivity_at_zero(ctx, "dc", np.linspace(-a, a, 5))
    r2 = sn.responsivity_at_zero(ctx, "dc", np.linspace(-2 * a, 2 * a, 5))
    assert r2.r0 == pytest.approx(r1.r0, rel=0.01)
    assert not r1.nonlinear
    assert abs(r1.r0) == pytest.approx(FROZEN["budget"]["r0_dc"], rel=0.05)


def test_rf_zero_response(ctx):
    a = 2e-9
    r = sn.responsivity_at_zero(ctx, "rf", np.linspace(-a, a, 5))
    assert 0.0 in r.amplitudes
    # even-order tipping leaves a small offset, bounded by the linearity tolerance
    assert abs(r.intercept) < sn.NONLINEAR_TOL * abs(r.r0) * a
    assert r.r0 == pytest.approx(FROZEN["budget"]["r0_rf"], rel=0.05)


def test_nonlinearity_flag(ctx, caplog):
    big = 2e-7
    r = sn.responsivity_at_zero(ctx, "dc", np.linspace(-big, big, 5))
    assert r.nonlinear
    assert "nonlinear" in caplog.text


def test_linear_bound(ctx):
    bound = sn.linear_bound(ctx, "dc")
    assert 0 < bound < 1e-6
    fit = sn.responsivity_at_zero(ctx, "dc", np.linspace(-bound, bound, 5), warn=False)
    assert fit.residual_frac <= sn.NONLINEAR_TOL


def test_unknown_channel(ctx):
    with pytest.raises(ValueError):
        sn.responsivity_at_zero(ctx, "ac", [1e-9])


def test_tone_amplitudes():
    a = sn.tone_amplitudes([0.0, 300.0], 1.0, 300.0)
    assert a == pytest.approx([1.0, math.sqrt(2)])


@pytest.fixture(scope="module")
def dc_resp(ctx):
    return sn.responsivity_spectrum(ctx, "dc", [10, 100, 300, 1000, 3000], 3e-9,
                                    n_iterations=3, duration=1.0)


def test_ratio_anchor_and_lowpass(ctx, dc_resp):
    assert dc_resp.r_ratio[0] == 1.0
    assert dc_resp.freqs[0] == pytest.approx(10.0)
    expected = transfer_ratio(ctx.params, dc_resp.freqs) / transfer_ratio(ctx.params, dc_resp.freqs[:1])
    assert dc_resp.r_ratio == pytest.approx(expected, rel=0.1)
    i = list(dc_resp.freqs).index(300.0)
    assert dc_resp.r_ratio[i] == pytest.approx(0.5, abs=0.05)
    assert np.all(dc_resp.reliable)


def test_ratio_equals_direct(dc_resp):
    assert dc_resp.r_ratio == pytest.approx(dc_resp.r_ratio_direct, rel=0.05)


def test_anchor_r0_matches_static(ctx, dc_resp):
    assert abs(dc_resp.r0) == pytest.approx(FROZEN["budget"]["r0_dc"], rel=0.05)


def test_rf_ratio_spectrum(ctx):
    # rf tones have ~6x lower SNR than dc: drive near the linear bound
    resp = sn.responsivity_spectrum(ctx, "rf", [10, 300, 1000], 6e-9, n_iterations=4, duration=1.0)
    assert resp.r_ratio[1] == pytest.approx(0.5, abs=3 * resp.r_ratio_stderr[1] + 0.01)
    assert resp.r_ratio == pytest.approx(resp.r_ratio_direct, rel=0.1)


def test_short_record_anchor_warns(ctx, caplog):
    sn.responsivity_spectrum(ctx, "dc", [10, 100], 3e-9, n_iterations=1, duration=0.2)
    assert "bins above DC" in caplog.text


def _flat_resp(r0=2.0):
    f = np.array([10.0, 100.0, 1000.0])
    one = np.ones(3)
    return sn.Responsivity("dc", r0, f, one, one, one * 0, one * 100, one > 0, one)


def test_equivalent_noise_flat():
    spec = spectral.Spectrum(np.linspace(10, 1000, 50), np.full(50, 8.0))
    out = sn.equivalent_noise(spec, _flat_resp(2.0))
    assert np.allclose(out.s_b, 2.0)
    assert np.allclose(out.sqrt_s_b, math.sqrt(2.0))
    quarter = sn.equivalent_noise(spec, _flat_resp(4.0))
    assert np.allclose(quarter.s_b, out.s_b / 4)


def test_no_extrapolation():
    spec = spectral.Spectrum(np.linspace(1, 1000, 50), np.ones(50))
    with pytest.raises(ValueError):
        sn.equivalent_noise(spec, _flat_resp())
    cropped = sn.crop_to(spec, _flat_resp())
    assert cropped.freqs[0] >= 10.0 and cropped.freqs[-1] <= 1000.0
    sn.equivalent_noise(cropped, _flat_resp())


def test_interpolation_log_log():
    f = np.array([10.0, 1000.0])
    r = sn.Responsivity("dc", 1.0, f, np.array([1.0, 1e-4]), None, None, None, None, None)
    assert r.interpolate(100.0) == pytest.approx(1e-2)


def test_writers(tmp_path, dc_resp):
    sn.write_responsivity(tmp_path / "r.txt", dc_resp, {"config_hash": "x"})
    data = np.loadtxt(tmp_path / "r.txt")
    assert data.shape[0] == len(dc_resp.freqs)
    mns = sn.MagneticNoiseSpectrum("dc", np.array([1.0, 2.0]), np.array([4.0, 9.0]))
    sn.write_magnetic_noise(tmp_path / "m.txt", mns)
    text = (tmp_path / "m.txt").read_text()
    assert "T/sqrt(Hz)" in text
    assert np.loadtxt(tmp_path / "m.txt")[:, 1] == pytest.approx([2.0, 3.0])
