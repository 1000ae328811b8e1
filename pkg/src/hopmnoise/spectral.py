"""Single-sided PSD estimation, ensemble averaging and log-binned smoothing.

Convention: white noise of variance ``s**2`` sampled every ``dt`` has a flat
single-sided PSD of ``2 * s**2 * dt``, and ``sum(psd) * df`` equals the
(mean-removed) windowed power ``sum((w*x)**2) / sum(w**2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal

# Variance inflation of a sum of neighbouring periodogram bins relative to
# independent bins: 1 + 2*sum_k rho_k**2 over the window's DFT-coefficient
# correlations.  Hann: rho_1 = -2/3, rho_2 = 1/6.
BIN_OVERLAP = {"hann": 35.0 / 18.0, "boxcar": 1.0, "none": 1.0}


@dataclass
class Spectrum:
    freqs: np.ndarray
    psd: np.ndarray
    n_averages: int = 1
    window: str = "hann"
    enbw: float = 0.0
    bin_counts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.psd = np.asarray(self.psd, dtype=float)
        if self.freqs.shape != self.psd.shape:
            raise ValueError("freqs and psd must have the same shape")

    def __len__(self):
        return self.freqs.shape[0]

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0]) if len(self) > 1 else 0.0

    @property
    def bin_overlap(self) -> float:
        return BIN_OVERLAP.get(self.window, 1.0)

    def band(self, f_lo: float, f_hi: float) -> np.ndarray:
        return (self.freqs >= f_lo) & (self.freqs <= f_hi)


def _check_series(series, min_len=16) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.shape[0] < min_len:
        raise ValueError(f"need a 1-d series with at least {min_len} samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite samples")
    return x


def psd(series, dt: float, window: str = "hann", detrend: str | bool = "constant") -> Spectrum:
    """Whole-record single-sided periodogram."""
    x = _check_series(series)
    fs = 1.0 / dt
    freqs, p = signal.periodogram(x, fs=fs, window=window, detrend=detrend,
                                  return_onesided=True, scaling="density")
    w = signal.get_window(window, x.shape[0])
    enbw = fs * np.sum(w ** 2) / np.sum(w) ** 2
    return Spectrum(freqs=freqs, psd=p, n_averages=1, window=window, enbw=float(enbw))


def psd_segmented(series, dt: float, nperseg: int, window: str = "hann") -> Spectrum:
    """Average of non-overlapping segment periodograms of one long record."""
    x = _check_series(series)
    fs = 1.0 / dt
    freqs, p = signal.welch(x, fs=fs, window=window, nperseg=nperseg, noverlap=0,
                            detrend="constant", return_onesided=True, scaling="density")
    w = signal.get_window(window, nperseg)
    enbw = fs * np.sum(w ** 2) / np.sum(w) ** 2
    return Spectrum(freqs=freqs, psd=p, n_averages=x.shape[0] // nperseg,
                    window=window, enbw=float(enbw))


def average_spectra(spectra) -> Spectrum:
    spectra = list(spectra)
    if not spectra:
        raise ValueError("nothing to average")
    ref = spectra[0]
    for s in spectra[1:]:
        if s.freqs.shape != ref.freqs.shape or not np.array_equal(s.freqs, ref.freqs):
            raise ValueError("spectra have different frequency axes")
        if s.window != ref.window:
            raise ValueError("spectra use different windows")
    mean = np.mean(np.stack([s.psd for s in spectra]), axis=0)
    return Spectrum(freqs=ref.freqs.copy(), psd=mean,
                    n_averages=int(sum(s.n_averages for s in spectra)),
                    window=ref.window, enbw=ref.enbw)


def log_bin(spec: Spectrum, bins_per_decade: int = 20) -> Spectrum:
    """Mean PSD in logarithmically spaced bins, at each bin's geometric-mean
    frequency.  The DC bin and empty bins are dropped."""
    if bins_per_decade < 1:
        raise ValueError("bins_per_decade must be >= 1")
    pos = spec.freqs > 0
    f = spec.freqs[pos]
    p = spec.psd[pos]
    idx = np.floor(np.log10(f) * bins_per_decade + 1e-9).astype(np.int64)
    uniq, inv, counts = np.unique(idx, return_inverse=True, return_counts=True)
    p_mean = np.bincount(inv, weights=p) / counts
    f_geo = np.exp(np.bincount(inv, weights=np.log(f)) / counts)
    return Spectrum(freqs=f_geo, psd=p_mean, n_averages=spec.n_averages,
                    window=spec.window, enbw=spec.enbw, bin_counts=counts)


def band_power(spec: Spectrum, f_center: float, half_width_bins: int = 3) -> float:
    """Integrated power ``sum(psd) * df`` within a few bins of ``f_center``."""
    k = int(round(f_center / spec.df))
    lo = max(k - half_width_bins, 0)
    hi = min(k + half_width_bins + 1, len(spec))
    return float(np.sum(spec.psd[lo:hi]) * spec.df)


def scaled(spec: Spectrum, factor: float) -> Spectrum:
    return replace(spec, psd=spec.psd * factor)


def write_spectrum(path, spec: Spectrum, header: dict | None = None, units: str = "1/Hz"):
    from .io import write_columns
    meta = {"n_averages": spec.n_averages, "window": spec.window,
            "enbw_hz": f"{spec.enbw:.10g}"}
    meta.update(header or {})
    write_columns(path, {"freq_hz": spec.freqs, "psd": spec.psd},
                  units={"freq_hz": "Hz", "psd": units}, header=meta)
