"""The reference computations still produce their frozen values."""

import math

import pytest

import oracles as o


def test_pure_antisqueezing():
    assert o.pure_antisqueezing(1.6) == pytest.approx(o.FROZEN["pure_antisqueezing_1p6db"], rel=1e-14)


def test_hann_overlap():
    assert o.window_bin_overlap() == pytest.approx(o.FROZEN["hann_bin_overlap"], rel=1e-10)


def test_ou_psd():
    assert o.ou_psd_single_sided(0.0, o.Q_SPN, o.GAMMA) == pytest.approx(o.FROZEN["ou_psd_0hz"], rel=1e-8)
    assert o.ou_psd_single_sided(240.0, o.Q_SPN, o.GAMMA) == pytest.approx(o.FROZEN["ou_psd_240hz"], rel=1e-8)


def test_pump_fixed_point():
    assert o.pump_fixed_point(1.0, 500.0, 100.0) == pytest.approx(o.FROZEN["pump_fixed_point"], rel=1e-9)


def test_phase_rate_average():
    amp, ph = o.phase_rate_average(math.radians(45))
    assert amp == pytest.approx(0.0, abs=1e-12)
    assert ph == pytest.approx(o.FROZEN["phase_rate_average_45"][1], rel=1e-12)


def test_lowpass_ratio():
    rate = o.GAMMA + o.PUMP_PEAK * o.DUTY
    assert o.lowpass_power_ratio(300, rate, 1.0) == pytest.approx(o.FROZEN["lowpass_ratio_300"], rel=1e-5)
    assert o.lowpass_power_ratio(1000, rate, 1.0) == pytest.approx(o.FROZEN["lowpass_ratio_1000"], rel=1e-5)


def test_detuned_phase():
    assert o.detuned_phase_shift(0.3, 1.0) == pytest.approx(o.FROZEN["detuned_phase_shift_0p3"], rel=1e-12)


def test_budget():
    got = o.operating_point_budget()
    for key, value in o.FROZEN["budget"].items():
        assert got[key] == pytest.approx(value, rel=1e-12), key
