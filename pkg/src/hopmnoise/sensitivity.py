"""Responsivity calibration and equivalent magnetic-noise spectra.

Two channels share one spin ensemble: ``dc`` reads changes of |B_dc| in the
Q quadrature, ``rf`` reads the amplitude of a pump-synchronous rf field
along x in the I quadrature.  The rf field phase is locked to the
calibrated demodulation phase so that its response lands in I.

The frequency dependence of the responsivity comes from the ratio of
demodulated tone powers, ``R(w)**2 / R(0)**2 = S(w) / S(0)``, with the
zero-frequency anchor taken at the lowest test tone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import spectral
from .analytic import rf_drive_phase
from .pipeline import SimContext, context_phase, map_jobs
from .probe_noise import ProbeParams
from .readout import demodulate, faraday_signal
from .spin_sim import FieldConfig, simulate

logger = logging.getLogger(__name__)

CHANNELS = ("dc", "rf")
QUADRATURE = {"dc": "Q", "rf": "I"}
NONLINEAR_TOL = 0.02
MIN_TONE_SNR = 10.0


def _check_channel(channel):
    if channel not in CHANNELS:
        raise ValueError(f"unknown channel {channel!r}")


def channel_fields(ctx: SimContext, channel: str, offset: float = 0.0,
                   tone_amp: float = 0.0, tone_freq: float = 0.0) -> FieldConfig:
    """Fields with a static offset and/or a slow tone on one channel.

    A negative rf offset is the same field with the phase flipped.
    """
    f = ctx.fields
    if channel == "dc":
        return replace(f, B_dc=f.B_dc + offset, dc_tone_amp=tone_amp, dc_tone_freq=tone_freq)
    phase = rf_drive_phase(context_phase(ctx))
    amp = f.B_rf_amp + offset
    if amp < 0:
        amp, phase = -amp, (phase + math.pi) % (2 * math.pi)
    return replace(f, B_rf_amp=amp, B_rf_phase=phase, rf_tone_amp=tone_amp,
                   rf_tone_freq=tone_freq)


def _demod(ctx: SimContext, fields: FieldConfig, probe: ProbeParams, duration: float,
           seed: int, stream: int, noisy: bool):
    traj = simulate(fields, ctx.params, probe, duration, ctx.dt, seed, stream=stream,
                    warmup=ctx.warmup, spin_noise=noisy, stokes_noise=noisy)
    raw = faraday_signal(traj, ctx.params.G, readout_noise=noisy)
    return demodulate(raw, ctx.params.omega_p, context_phase(ctx), ctx.decimation)


@dataclass
class ZeroResponse:
    channel: str
    r0: float
    r0_stderr: float
    intercept: float
    amplitudes: np.ndarray
    response: np.ndarray
    residual_frac: float
    nonlinear: bool


def _mean_response(args):
    ctx, channel, a, probe, duration, seed, stream, noisy = args
    iq = _demod(ctx, channel_fields(ctx, channel, a), probe, duration, seed, stream, noisy)
    return float(np.mean(iq.quadrature(QUADRATURE[channel])))


def responsivity_at_zero(ctx: SimContext, channel: str, amplitudes, probe: ProbeParams | None = None,
                         *, noisy: bool = False, n_seeds: int = 1, duration: float | None = None,
                         jobs: int = 1, warn: bool = True) -> ZeroResponse:
    """Linear fit of the mean quadrature against static field offsets.

    ``dc``: mean Q against a shift of |B_dc|.  ``rf``: mean I against the
    signed rf amplitude, measured relative to the zero-offset point.
    Noisy mode averages ``n_seeds`` records per amplitude (paired streams
    across amplitudes) and reports the slope's standard error.
    """
    _check_channel(channel)
    probe = ctx.probe("coherent") if probe is None else probe
    amps = np.asarray(sorted(set(float(a) for a in amplitudes) | {0.0}))
    if duration is None:
        duration = 20.0 / ctx.params.linewidth
    seeds = range(n_seeds) if noisy else [0]
    args = [(ctx, channel, a, probe, duration, ctx.seed, ctx.stream_offset + s, noisy)
            for a in amps for s in seeds]
    vals = np.array(map_jobs(_mean_response, args, jobs)).reshape(len(amps), len(seeds))
    y = vals.mean(axis=1)
    if channel == "rf":
        y = y - y[amps == 0.0][0]
    A = np.column_stack([amps, np.ones_like(amps)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    span = np.ptp(A @ coef)
    frac = float(np.max(np.abs(resid)) / span) if span > 0 else math.inf
    if noisy and len(seeds) > 1:
        # slope of each seed separately: spread gives the error of the mean slope
        per_seed = [np.polyfit(amps, vals[:, k], 1)[0] for k in range(len(seeds))]
        stderr = float(np.std(per_seed, ddof=1) / math.sqrt(len(seeds)))
    else:
        dof = max(len(amps) - 2, 1)
        s2 = float(resid @ resid) / dof
        stderr = math.sqrt(s2 / float(np.sum((amps - amps.mean()) ** 2)))
    nonlinear = frac > NONLINEAR_TOL
    if nonlinear and warn:
        logger.warning("%s responsivity fit is nonlinear: residual %.1f%% of span",
                       channel, 100 * frac)
    return ZeroResponse(channel, float(coef[0]), stderr, float(coef[1]), amps, y, frac, nonlinear)


def linear_bound(ctx: SimContext, channel: str, tol: float = NONLINEAR_TOL,
                 start: float | None = None, max_doublings: int = 20,
                 n_bisect: int = 4) -> float:
    """Largest amplitude ``a`` for which a noiseless 5-point fit over
    ``[-a, a]`` stays linear within ``tol`` of its span.

    Doubles from ``start`` until the test fails, then bisects the bracket
    (in log) ``n_bisect`` times.
    """
    _check_channel(channel)

    def linear(a):
        fit = responsivity_at_zero(ctx, channel, np.linspace(-a, a, 5), warn=False)
        return fit.residual_frac <= tol

    a = start or 1e-3 * ctx.params.linewidth / ctx.params.gamma
    if not linear(a):
        raise RuntimeError(f"{channel} response is nonlinear at the smallest amplitude tried")
    for _ in range(max_doublings):
        if not linear(2 * a):
            break
        a *= 2.0
    else:
        return a
    lo, hi = a, 2 * a
    for _ in range(n_bisect):
        mid = math.sqrt(lo * hi)
        lo, hi = (mid, hi) if linear(mid) else (lo, mid)
    return lo


@dataclass
class Responsivity:
    channel: str
    r0: float
    freqs: np.ndarray
    r_ratio: np.ndarray
    r_ratio_direct: np.ndarray
    r_ratio_stderr: np.ndarray
    snr: np.ndarray
    reliable: np.ndarray
    amplitudes: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def interpolate(self, f) -> np.ndarray:
        """log-log linear interpolation of ``r_ratio``; no extrapolation."""
        f = np.asarray(f, dtype=float)
        lo, hi = self.freqs[0], self.freqs[-1]
        if np.any(f < lo * (1 - 1e-9)) or np.any(f > hi * (1 + 1e-9)):
            raise ValueError(f"frequencies outside the measured range [{lo:g}, {hi:g}] Hz")
        return np.exp(np.interp(np.log(f), np.log(self.freqs), np.log(self.r_ratio)))


def _tone_job(args):
    ctx, channel, f, amp, probe, duration, seed, stream = args
    iq = _demod(ctx, channel_fields(ctx, channel, tone_amp=amp, tone_freq=f), probe,
                duration, seed, stream, True)
    y = iq.quadrature(QUADRATURE[channel])
    spec = spectral.psd(y, iq.dt_out)
    # direct transfer: single-bin DFT projection at the tone (rectangular)
    t = iq.times
    h = 2.0 * np.mean((y - y.mean()) * np.exp(-2j * math.pi * f * t)) / amp
    return spec.psd, spec.freqs, spec.enbw, h


def _jackknife_ratio_err(power: np.ndarray) -> np.ndarray:
    """Standard error of ``mean(power[i]) / mean(power[0])`` by leave-one-out."""
    n = power.shape[1]
    if n < 2:
        return np.full(power.shape[0], np.nan)
    total = power.sum(axis=1, keepdims=True)
    loo = (total - power) / (n - 1)
    r = loo / loo[0]
    return np.sqrt((n - 1) / n * np.sum((r - r.mean(axis=1, keepdims=True)) ** 2, axis=1))


def _bin_center(f: float, df: float) -> float:
    return max(1, int(round(f / df))) * df


def tone_amplitudes(freqs, base: float, knee_hz: float) -> np.ndarray:
    """Amplitude per test frequency keeping the spin excursion constant:
    the base value grows like the inverse low-pass magnitude."""
    freqs = np.asarray(freqs, dtype=float)
    return base * np.sqrt(1.0 + (freqs / knee_hz) ** 2)


def responsivity_spectrum(ctx: SimContext, channel: str, test_freqs, test_amplitude: float,
                          probe: ProbeParams | None = None, *, n_iterations: int = 10,
                          duration: float | None = None, r0: float | None = None,
                          scale_amplitude: bool = True, jobs: int = 1) -> Responsivity:
    """Tone-injection measurement of ``R(w)**2 / R(0)**2``.

    Each test frequency is moved to the nearest bin center of the record.
    The ratio method uses band power of the averaged Hann PSD above the
    local noise background; the direct estimator projects each record on
    the tone.  Both are normalized at the lowest test frequency.
    """
    _check_channel(channel)
    probe = ctx.probe("coherent") if probe is None else probe
    duration = ctx.duration if duration is None else duration
    n_out = int(round(duration / ctx.dt)) // ctx.decimation
    df = 1.0 / (n_out * ctx.dt * ctx.decimation)
    freqs = np.unique([_bin_center(f, df) for f in test_freqs])
    if freqs[0] / df < 10:
        logger.warning("anchor tone %g Hz is only %d bins above DC; its power is biased by "
                       "leakage, use longer records", freqs[0], round(freqs[0] / df))
    knee = ctx.params.linewidth / (2 * math.pi)
    amps = (tone_amplitudes(freqs, test_amplitude, knee) if scale_amplitude
            else np.full(freqs.shape, float(test_amplitude)))
    args = [(ctx, channel, f, a, probe, duration, ctx.seed, ctx.stream_offset + it)
            for f, a in zip(freqs, amps) for it in range(n_iterations)]
    res = map_jobs(_tone_job, args, jobs)

    half = 3
    # per record: tone band power above the mean of neighbouring bins, and
    # the single-bin projection; shapes (n_freqs, n_iterations)
    power = np.empty((len(freqs), n_iterations))
    noise = np.empty_like(power)
    h2 = np.empty_like(power)
    enbw = res[0][2]
    for i, (f, a) in enumerate(zip(freqs, amps)):
        for it in range(n_iterations):
            p, fr, _, h = res[i * n_iterations + it]
            spec = spectral.Spectrum(fr, p, 1, "hann", enbw)
            k = int(round(f / spec.df))
            side = np.r_[max(k - 15, 1):max(k - 5, 1), k + 6:min(k + 16, len(spec))]
            background = float(np.mean(spec.psd[side]))
            power[i, it] = (spectral.band_power(spec, f, half)
                            - background * spec.df * (2 * half + 1)) / a ** 2
            noise[i, it] = background * enbw / a ** 2
            h2[i, it] = abs(h) ** 2
    snr = power.mean(axis=1) / noise.mean(axis=1)
    ratio = np.clip(power.mean(axis=1), 0.0, None) / power[0].mean()
    direct_ratio = h2.mean(axis=1) / h2[0].mean()
    stderr = _jackknife_ratio_err(power)
    if r0 is None:
        # amplitude of the lowest tone, corrected for the one-pole roll-off
        r0 = math.sqrt(h2[0].mean() * (1.0 + (freqs[0] / knee) ** 2))
    reliable = snr >= MIN_TONE_SNR
    for f, s in zip(freqs[~reliable], snr[~reliable]):
        logger.warning("%s tone at %g Hz has SNR %.1f < %g; flagged", channel, f, s, MIN_TONE_SNR)
    return Responsivity(channel, float(r0), freqs, ratio, direct_ratio, stderr,
                        snr, reliable, amps,
                        diagnostics={"n_iterations": n_iterations, "df": df,
                                     "duration": duration})


@dataclass
class MagneticNoiseSpectrum:
    channel: str
    freqs: np.ndarray
    s_b: np.ndarray

    @property
    def sqrt_s_b(self) -> np.ndarray:
        return np.sqrt(self.s_b)


def equivalent_noise(noise_spec: spectral.Spectrum, resp: Responsivity) -> MagneticNoiseSpectrum:
    """``S_B(w) = S(w) / (r0**2 * r_ratio(w))`` on the spectrum's axis.

    Every spectrum frequency must lie inside the responsivity's measured
    range; crop the spectrum first (see :func:`crop_to`)."""
    r2 = resp.r0 ** 2 * resp.interpolate(noise_spec.freqs)
    return MagneticNoiseSpectrum(resp.channel, noise_spec.freqs.copy(), noise_spec.psd / r2)


def crop_to(spec: spectral.Spectrum, resp: Responsivity) -> spectral.Spectrum:
    keep = spec.band(resp.freqs[0], resp.freqs[-1])
    counts = None if spec.bin_counts is None else spec.bin_counts[keep]
    return replace(spec, freqs=spec.freqs[keep], psd=spec.psd[keep], bin_counts=counts)


def write_magnetic_noise(path, mns: MagneticNoiseSpectrum, header: dict | None = None):
    from .io import write_columns
    write_columns(path, {"freq_hz": mns.freqs, "sqrt_s_b": mns.sqrt_s_b},
                  units={"freq_hz": "Hz", "sqrt_s_b": "T/sqrt(Hz)"}, header=header)


def write_responsivity(path, resp: Responsivity, header: dict | None = None):
    from .io import write_columns
    meta = {"channel": resp.channel, "r0": f"{resp.r0:.10g}"}
    meta.update(header or {})
    write_columns(path, {"freq_hz": resp.freqs, "r_ratio": resp.r_ratio,
                         "r_ratio_direct": resp.r_ratio_direct,
                         "r_ratio_stderr": resp.r_ratio_stderr, "snr": resp.snr,
                         "amplitude": resp.amplitudes},
                  units={"freq_hz": "Hz", "amplitude": "T"}, header=meta)
