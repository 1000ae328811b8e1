import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hopmnoise import spectral
from hopmnoise.noise_model import (FitError, NoiseBudget, decompose_budget, fit_joint,
                                   fit_noise_model, lorentzian, model_psd, synthetic_spectrum)

FREQS = np.arange(0.0, 20_000.0 + 1e-9, 10.0)
DW = 2 * math.pi * 300


def _fit(spec, xi2=1.0, xibar2=1.0, **kw):
    kw.setdefault("fmax", 10e3)
    return fit_noise_model(spec, xi2, xibar2, **kw)


def _inside(value, interval):
    return interval[0] <= value <= interval[1]


# -- model --------------------------------------------------------------------

def test_model_at_zero_and_linewidth():
    b = NoiseBudget(psn=1.0, spn=2.0, mba=0.5, delta_omega=DW, xi2=0.7, xibar2=2.0)
    assert model_psd(b, 0.0) == pytest.approx(0.7 + 2.0 + 1.0)
    assert model_psd(b, DW) == pytest.approx(0.7 + 3.0 / 2)
    assert model_psd(b, 1e12) == pytest.approx(0.7, rel=1e-9)


def test_model_flat_without_atoms():
    b = NoiseBudget(psn=1.3, spn=0.0, mba=0.0, delta_omega=DW, xi2=0.5)
    assert np.allclose(model_psd(b, np.linspace(0, 1e5, 50)), 0.65)


def test_model_rejects_negative_omega():
    with pytest.raises(ValueError):
        model_psd(NoiseBudget(1, 1, 1, DW), -1.0)
    with pytest.raises(ValueError):
        NoiseBudget(1, 1, 1, 0.0)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(1, 1e4),
       st.floats(0.1, 5), st.floats(1, 5))
def test_model_monotone(psn, spn, mba, dw, xi2, xibar2):
    b = NoiseBudget(psn, spn, mba, dw, xi2=xi2, xibar2=xibar2)
    vals = model_psd(b, np.geomspace(1e-3, 1e6, 200))
    assert np.all(np.diff(vals) <= 1e-12 * vals[:-1])


@given(st.floats(0.1, 5), st.floats(0, 5), st.floats(0, 5), st.floats(1, 4))
def test_scaling_with_squeezing(psn, spn, mba, xibar2):
    lo = model_psd(NoiseBudget(psn, spn, mba, DW, xibar2=1.0), 0.0)
    hi = model_psd(NoiseBudget(psn, spn, mba, DW, xibar2=xibar2), 0.0)
    assert hi - lo == pytest.approx((xibar2 - 1.0) * mba, abs=1e-12)
    assert model_psd(NoiseBudget(psn, spn, mba, DW, xi2=2.0), 1e12) == pytest.approx(2 * psn)


def test_lorentzian_half_power():
    assert lorentzian(DW, DW) == pytest.approx(0.5)


# -- fitting ------------------------------------------------------------------

def test_synthetic_recovery_and_decomposition():
    rng = np.random.default_rng(10)
    pol = NoiseBudget(psn=1.0, spn=2.0, mba=1.0, delta_omega=DW)
    unp = NoiseBudget(psn=1.0, spn=2.0, mba=0.0, delta_omega=DW)
    fp = _fit(synthetic_spectrum(pol, FREQS, 50, rng), level=0.95)
    fu = _fit(synthetic_spectrum(unp, FREQS, 50, rng), mode="unpolarized", level=0.95)
    assert _inside(1.0, fp.intervals["psn"])
    assert _inside(3.0, fp.intervals["atomic"])
    assert _inside(DW, fp.intervals["delta_omega"])
    assert _inside(2.0, fu.intervals["spn"])
    dec = decompose_budget(fu, fp)
    z = 1.96
    assert abs(dec.psn - 1.0) <= z * dec.sigma["psn"]
    assert abs(dec.spn - 2.0) <= z * dec.sigma["spn"]
    assert abs(dec.mba - 1.0) <= z * dec.sigma["mba"]


def test_flat_spectrum():
    rng = np.random.default_rng(11)
    spec = synthetic_spectrum(NoiseBudget(2.0, 0.0, 0.0, DW), FREQS, 50, rng)
    fit = _fit(spec, level=0.95)
    assert fit.psn == pytest.approx(2.0, rel=0.03)
    assert fit.intervals["atomic"][0] == 0.0
    assert fit.intervals["mba"][0] == 0.0
    assert fit.degenerate
    unp = _fit(spec, mode="unpolarized", level=0.95)
    assert unp.intervals["spn"][0] == 0.0


def test_masked_tone():
    rng = np.random.default_rng(12)
    b = NoiseBudget(psn=1.0, spn=1.5, mba=1.0, delta_omega=DW)
    clean = synthetic_spectrum(b, FREQS, 50, rng)
    toned = spectral.Spectrum(clean.freqs, clean.psd.copy(), 50, "none")
    toned.psd[np.abs(toned.freqs - 4000) <= 20] += 500.0
    ref = _fit(clean)
    masked = _fit(toned, mask=[(3950, 4050)])
    unmasked = _fit(toned)
    for name in ("psn", "atomic", "delta_omega"):
        assert abs(getattr(masked, name) - getattr(ref, name)) <= ref.sigma(name), name
    assert abs(unmasked.psn - ref.psn) > ref.sigma("psn")


def test_linear_and_log_parameterizations_agree():
    rng = np.random.default_rng(13)
    spec = synthetic_spectrum(NoiseBudget(1.0, 2.0, 1.0, DW), FREQS, 50, rng)
    a = _fit(spec, intervals=False, tol=1e-12)
    b = _fit(spec, intervals=False, tol=1e-12, param_space="log")
    for name in ("psn", "atomic", "delta_omega"):
        assert getattr(b, name) == pytest.approx(getattr(a, name), rel=1e-6)


def test_intervals_shrink_with_averages():
    widths = []
    for n in (20, 80):
        rng = np.random.default_rng(14)
        fit = _fit(synthetic_spectrum(NoiseBudget(1.0, 2.0, 1.0, DW), FREQS, n, rng))
        lo, hi = fit.intervals["atomic"]
        widths.append(hi - lo)
    assert widths[0] / widths[1] == pytest.approx(2.0, rel=0.25)


def test_hann_intervals_are_widened():
    rng = np.random.default_rng(15)
    spec = synthetic_spectrum(NoiseBudget(1.0, 2.0, 1.0, DW), FREQS, 50, rng)
    plain = _fit(spec)
    hann = _fit(spectral.Spectrum(spec.freqs, spec.psd, 50, "hann"))
    w = lambda f: f.intervals["psn"][1] - f.intervals["psn"][0]  # noqa: E731
    assert w(hann) / w(plain) == pytest.approx(math.sqrt(35 / 18), rel=0.05)


def test_polarized_with_known_spn():
    rng = np.random.default_rng(16)
    spec = synthetic_spectrum(NoiseBudget(1.0, 2.0, 1.0, DW, xibar2=2.0), FREQS, 50, rng)
    fit = _fit(spec, 1.0, 2.0, spn=2.0)
    assert fit.mba == pytest.approx((fit.atomic - 2.0) / 2.0)
    assert fit.atomic == pytest.approx(4.0, rel=0.1)


def test_too_few_points():
    spec = spectral.Spectrum(FREQS[:10], np.ones(10), 50, "none")
    with pytest.raises(ValueError):
        _fit(spec)


def test_bad_mode():
    spec = spectral.Spectrum(FREQS, np.ones(len(FREQS)), 50, "none")
    with pytest.raises(ValueError):
        _fit(spec, mode="mixed")


def test_rejects_non_finite_spectrum():
    spec = spectral.Spectrum(FREQS, np.full(len(FREQS), np.nan), 50, "none")
    with pytest.raises(ValueError):
        _fit(spec)


def test_non_convergence_is_explicit(monkeypatch):
    from hopmnoise import noise_model
    rng = np.random.default_rng(21)
    spec = synthetic_spectrum(NoiseBudget(1.0, 2.0, 1.0, DW), FREQS, 50, rng)
    real = noise_model._multistart
    monkeypatch.setattr(noise_model, "_multistart",
                        lambda *a, **k: (*real(*a, **k)[:2], False))
    with pytest.raises(FitError) as info:
        _fit(spec)
    assert "n_points" in info.value.diagnostics


def test_joint_fit_separates_spn_and_mba():
    rng = np.random.default_rng(17)
    truth = dict(psn=1.0, spn=2.0, mba=1.0, delta_omega=DW)
    specs = [synthetic_spectrum(NoiseBudget(**truth, xi2=x, xibar2=xb), FREQS, 50, rng)
             for x, xb in [(1.0, 1.0), (0.7, 2.0)]]
    fit = fit_joint(specs, [1.0, 0.7], [1.0, 2.0], fmax=10e3)
    assert fit.psn == pytest.approx(1.0, rel=0.05)
    assert fit.spn == pytest.approx(2.0, rel=0.25)
    assert fit.mba == pytest.approx(1.0, rel=0.4)
    assert fit.delta_omega == pytest.approx(DW, rel=0.1)
    with pytest.raises(ValueError):
        fit_joint(specs, [1.0, 1.0], [1.0, 1.0])


# -- decomposition --------------------------------------------------------------

def _pair(mba=1.0, seed=18, xibar2=1.0):
    rng = np.random.default_rng(seed)
    fp = _fit(synthetic_spectrum(NoiseBudget(1.0, 2.0, mba, DW, xibar2=xibar2), FREQS, 50, rng),
              1.0, xibar2, config_hash="h")
    fu = _fit(synthetic_spectrum(NoiseBudget(1.0, 2.0, 0.0, DW), FREQS, 50, rng), 1.0, xibar2,
              mode="unpolarized", config_hash="h")
    return fu, fp


def test_decomposition_checks():
    fu, fp = _pair()
    other = _fit(synthetic_spectrum(NoiseBudget(1.0, 2.0, 0.0, DW), FREQS, 50,
                                    np.random.default_rng(0)), mode="unpolarized",
                 config_hash="other")
    with pytest.raises(ValueError):
        decompose_budget(other, fp)
    with pytest.raises(ValueError):
        decompose_budget(fp, fu)


def test_negative_mba_clamped_with_warning():
    fu, fp = _pair(mba=0.0, seed=19)
    # force a negative excess by swapping roles of two unpolarized fits
    fu_big = _fit(synthetic_spectrum(NoiseBudget(1.0, 3.0, 0.0, DW), FREQS, 50,
                                     np.random.default_rng(1)), mode="unpolarized",
                  config_hash="h")
    with pytest.warns(RuntimeWarning):
        dec = decompose_budget(fu_big, fp)
    assert dec.mba == 0.0 and dec.mba_raw < 0 and dec.clamped


def test_decomposition_rows():
    fu, fp = _pair()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        dec = decompose_budget(fu, fp)
    names = [r["parameter"] for r in dec.report_rows()]
    assert names == ["psn", "spn", "mba", "mba_coefficient"]


def test_decomposition_ratio_with_antisqueezing():
    fu1, fp1 = _pair(seed=20, xibar2=1.0)
    fu2, fp2 = _pair(seed=20, xibar2=2.0)
    d1, d2 = decompose_budget(fu1, fp1), decompose_budget(fu2, fp2)
    ratio = d2.mba / d1.mba
    err = ratio * math.hypot(d1.sigma["mba"] / d1.mba, d2.sigma["mba"] / d2.mba)
    assert abs(ratio - 2.0) <= 2 * err
    assert d2.mba_coefficient == pytest.approx(d2.mba / 2.0)
