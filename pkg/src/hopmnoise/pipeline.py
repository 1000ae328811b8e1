"""Simulate -> read out -> demodulate -> average spectra -> fit.

:class:`SimContext` bundles everything a noise experiment needs.  Jobs are
independent ``(condition, iteration)`` pairs whose random streams are fixed
by their indices, so serial and parallel execution give identical numbers.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import spectral
from .noise_model import NoiseBudget, fit_noise_model
from .probe_noise import ProbeParams
from .readout import calibrate_demod_phase, demodulate, faraday_signal
from .spin_sim import TWO_PI, FieldConfig, SpinParams, default_dt, settling_time, simulate

CONDITIONS = ("coherent", "squeezed", "antisqueezed")
# "custom" takes xi2/xibar2 verbatim; used by sweeps
ALL_CONDITIONS = CONDITIONS + ("custom",)


def probe_for_condition(flux: float, squeezing_db: float, antisqueezing_db: float,
                        condition: str) -> ProbeParams:
    """Coherent light, S2-squeezed light, or the same state rotated so that
    S2 carries the antisqueezed quadrature."""
    sq = 10.0 ** (-squeezing_db / 10.0)
    asq = 10.0 ** (antisqueezing_db / 10.0)
    if condition == "coherent":
        return ProbeParams(flux, 1.0, 1.0)
    if condition == "squeezed":
        return ProbeParams(flux, sq, asq)
    if condition == "antisqueezed":
        return ProbeParams(flux, asq, sq)
    raise ValueError(f"unknown probe condition {condition!r}")


@dataclass(frozen=True)
class SimContext:
    fields: FieldConfig
    params: SpinParams
    photon_flux: float
    squeezing_db: float = 1.6
    antisqueezing_db: float = 3.0
    duration: float = 0.1
    dt_: float | None = None
    decimation_: int | None = None
    n_iterations: int = 50
    seed: int = 0
    warmup_: float | None = None
    fmin: float | None = None
    fmax: float | None = 10e3
    mask: tuple = ()
    bins_per_decade: int = 20
    paired: bool = True
    jobs: int = 1
    stream_offset: int = 0
    custom: tuple = (1.0, 1.0)

    @property
    def dt(self) -> float:
        return default_dt(self.params.omega_p) if self.dt_ is None else self.dt_

    @property
    def decimation(self) -> int:
        """Default lock-in boxcar: half a pump period."""
        if self.decimation_ is not None:
            return self.decimation_
        return max(1, int(round(math.pi / self.params.omega_p / self.dt)))

    @property
    def warmup(self) -> float:
        return settling_time(self.params) if self.warmup_ is None else self.warmup_

    def probe(self, condition: str) -> ProbeParams:
        if condition == "custom":
            return ProbeParams(self.photon_flux, *self.custom)
        return probe_for_condition(self.photon_flux, self.squeezing_db,
                                   self.antisqueezing_db, condition)

    def with_(self, **kw) -> "SimContext":
        return replace(self, **kw)

    def stream(self, condition_index: int, iteration: int) -> int:
        if self.paired:
            return self.stream_offset + iteration
        return self.stream_offset + condition_index * self.n_iterations + iteration


def noiseless(params: SpinParams) -> SpinParams:
    return replace(params, q=0.0)


@lru_cache(maxsize=256)
def calibrated_phase(fields: FieldConfig, params: SpinParams, flux: float, dt: float,
                     decimation: int) -> float:
    """Demodulation phase zeroing Q for a noiseless run at this operating point."""
    probe = ProbeParams(flux)
    periods = 40
    traj = simulate(fields, params, probe, periods * TWO_PI / params.omega_p, dt, 0,
                    warmup=settling_time(params, 20.0), spin_noise=False, stokes_noise=False)
    return calibrate_demod_phase(traj, params.G, params.omega_p, decimation)


def context_phase(ctx: SimContext) -> float:
    return calibrated_phase(ctx.fields, ctx.params, ctx.photon_flux, ctx.dt, ctx.decimation)


def run_iq(ctx: SimContext, probe: ProbeParams, polarized: bool, stream: int,
           phase: float | None = None, fields: FieldConfig | None = None, **sim_kw):
    """One seeded record, demodulated at the calibrated phase."""
    fields = ctx.fields if fields is None else fields
    params = ctx.params if polarized else replace(ctx.params, F_max=0.0)
    if phase is None:
        phase = context_phase(ctx)
    traj = simulate(fields, params, probe, ctx.duration, ctx.dt, ctx.seed, stream=stream,
                    warmup=ctx.warmup, **sim_kw)
    raw = faraday_signal(traj, ctx.params.G, readout_noise=sim_kw.get("stokes_noise", True))
    return demodulate(raw, ctx.params.omega_p, phase, ctx.decimation)


def _iteration_job(args):
    ctx, probe, polarized, stream, phase = args
    iq = run_iq(ctx, probe, polarized, stream, phase)
    sI = spectral.psd(iq.I, iq.dt_out)
    sQ = spectral.psd(iq.Q, iq.dt_out)
    return sI.psd, sQ.psd, sI.freqs, sI.enbw, float(iq.I.mean()), float(iq.Q.mean())


@dataclass
class ConditionSpectra:
    I: spectral.Spectrum
    Q: spectral.Spectrum
    carrier_I: float
    carrier_Q: float

    def __getitem__(self, quadrature):
        return getattr(self, quadrature)


def map_jobs(fn, jobs_args, n_workers: int):
    """Ordered map over independent jobs, serial or on a process pool."""
    if n_workers <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, jobs_args))


def _spectra_uncached(ctx: SimContext, probe: ProbeParams, polarized: bool,
                      condition_index: int) -> ConditionSpectra:
    phase = context_phase(ctx)
    args = [(ctx, probe, polarized, ctx.stream(condition_index, it), phase)
            for it in range(ctx.n_iterations)]
    results = map_jobs(_iteration_job, args, ctx.jobs)
    freqs, enbw = results[0][2], results[0][3]
    pI = [spectral.Spectrum(freqs, r[0], 1, "hann", enbw) for r in results]
    pQ = [spectral.Spectrum(freqs, r[1], 1, "hann", enbw) for r in results]
    return ConditionSpectra(I=spectral.average_spectra(pI), Q=spectral.average_spectra(pQ),
                            carrier_I=float(np.mean([r[4] for r in results])),
                            carrier_Q=float(np.mean([r[5] for r in results])))


@lru_cache(maxsize=64)
def _spectra_cached(ctx, probe, polarized, condition_index):
    return _spectra_uncached(ctx, probe, polarized, condition_index)


def condition_spectra(ctx: SimContext, probe: ProbeParams, polarized: bool = True,
                      condition_index: int = 0, cache: bool = True) -> ConditionSpectra:
    """Iteration-averaged I and Q spectra for one probe/polarization condition.

    ``jobs`` is not part of the cache key: results do not depend on it."""
    key = replace(ctx, jobs=1)
    if cache:
        out = _spectra_cached(key, probe, polarized, condition_index)
    else:
        out = _spectra_uncached(ctx, probe, polarized, condition_index)
    return out


def config_hash_of(ctx: SimContext, probe: ProbeParams) -> str:
    """Hash of the probe/atom configuration shared by polarized and
    unpolarized runs (everything but the polarization state)."""
    import hashlib
    import json
    from dataclasses import asdict
    blob = json.dumps({"fields": asdict(ctx.fields), "params": asdict(ctx.params),
                       "probe": asdict(probe), "duration": ctx.duration, "dt": ctx.dt,
                       "decimation": ctx.decimation, "n": ctx.n_iterations, "seed": ctx.seed},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def fit_condition(ctx: SimContext, probe: ProbeParams, polarized: bool = True,
                  quadrature: str = "Q", level: float = 0.68,
                  condition_index: int = 0) -> NoiseBudget:
    spec = condition_spectra(ctx, probe, polarized, condition_index)[quadrature]
    return fit_noise_model(spec, probe.xi2, probe.xibar2, ctx.mask,
                           mode="polarized" if polarized else "unpolarized",
                           quadrature=quadrature, fmin=ctx.fmin, fmax=ctx.fmax, level=level,
                           config_hash=config_hash_of(ctx, probe))


def default_context(**overrides) -> SimContext:
    """Operating point mirroring the reported conditions (field at 45 deg,
    1.6 dB squeezing with 3 dB antisqueezing, 50 iterations) with atomic
    and optical constants chosen to give a ~300 Hz resonance and PSN, SPN
    and back-action of comparable size."""
    from .config import ExperimentConfig
    cfg = ExperimentConfig()
    ctx = cfg.context()
    return ctx.with_(**overrides) if overrides else ctx
