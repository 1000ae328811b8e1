"""Stochastic Bloch-equation integrator for a Bell-Bloom pumped spin ensemble.

The collective spin obeys

    dF/dt = [-gamma*B(t) + G*S3(t)*z] x F - Gamma*F + P(t)*(z*F_max - F) + N_F

with ``B`` the dc field (tipped by ``psi`` from x towards z) plus an rf field
along x, ``P(t)`` a stroboscopic pump and ``N_F`` isotropic white noise of
intensity ``q**2`` per component.

Each step applies the field and back-action torques as one exact rotation,
then relaxation, pumping and spin noise by Euler-Maruyama.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numba
import numpy as np

from .probe_noise import CHANNEL_SPIN, ProbeParams, StokesSeries, rng_for, standard_stokes

TWO_PI = 2.0 * math.pi

# max precession angle per step accepted by ``step``/``simulate``
MAX_ROTATION_PER_STEP = 0.1


@dataclass(frozen=True)
class FieldConfig:
    """Magnetic fields.  Tones are slow harmonic perturbations used for
    responsivity measurements: ``dc_tone`` modulates |B_dc|, ``rf_tone``
    modulates the rf amplitude."""

    B_dc: float
    psi: float = math.pi / 4
    B_rf_amp: float = 0.0
    B_rf_phase: float = 0.0
    omega_rf: float | None = None
    dc_tone_amp: float = 0.0
    dc_tone_freq: float = 0.0
    rf_tone_amp: float = 0.0
    rf_tone_freq: float = 0.0

    def __post_init__(self):
        if self.B_dc < 0 or self.B_rf_amp < 0:
            raise ValueError("field magnitudes must be non-negative")
        if not 0.0 <= self.psi <= math.pi / 2:
            raise ValueError(f"psi must lie in [0, pi/2], got {self.psi}")

    @property
    def b_hat(self) -> np.ndarray:
        return np.array([math.cos(self.psi), 0.0, math.sin(self.psi)])


@dataclass(frozen=True)
class SpinParams:
    """Atomic and pumping parameters.

    ``pump_mode`` is ``"pulse"`` (rectangular P(t) of height ``pump_rate``
    for a fraction ``pump_duty`` of each period) or ``"kick"`` (one
    instantaneous partial reset per period with the same mean rate).
    """

    gamma: float
    Gamma: float
    omega_p: float
    pump_rate: float = 0.0
    pump_duty: float = 0.1
    F_max: float = 1.0
    G: float = 0.0
    q: float = 0.0
    pump_phase: float = 0.0
    pump_mode: str = "pulse"

    def __post_init__(self):
        # Gamma = 0 is allowed for pure-precession checks
        if not self.Gamma >= 0:
            raise ValueError("Gamma must be non-negative")
        if not 0 < self.pump_duty <= 1:
            raise ValueError("pump_duty must be in (0, 1]")
        if not self.omega_p > 0:
            raise ValueError("omega_p must be positive")
        if self.pump_rate < 0 or self.q < 0:
            raise ValueError("pump_rate and q must be non-negative")
        if self.pump_mode not in ("pulse", "kick"):
            raise ValueError(f"unknown pump_mode {self.pump_mode!r}")

    @property
    def mean_pump_rate(self) -> float:
        return self.pump_rate * self.pump_duty

    @property
    def linewidth(self) -> float:
        """Total transverse relaxation rate, rad/s (the resonance half-width)."""
        return self.Gamma + self.mean_pump_rate

    @property
    def kick_fraction(self) -> float:
        period = TWO_PI / self.omega_p
        return 1.0 - math.exp(-self.mean_pump_rate * period)

    def quality_factor(self, fields: FieldConfig) -> float:
        return self.gamma * fields.B_dc / self.linewidth


def default_dt(omega_p: float) -> float:
    """200 steps per pump period."""
    return TWO_PI / omega_p / 200.0


def settling_time(params: SpinParams, n_tau: float = 12.0) -> float:
    if not params.linewidth > 0:
        raise ValueError("no relaxation: the ensemble never settles")
    return n_tau / params.linewidth


@numba.njit(cache=True)
def _advance(fx, fy, fz, t, dt, bx, bz, B_dc, dc_amp, dc_om, rf_amp, rf_phase,
             om_rf, rf_tone_amp, rf_tone_om, gamma, Gamma, F_max, pump_rate,
             duty, om_p, pump_phase, kick, kick_frac, G, ds3, dwx, dwy, dwz):
    tm = t + 0.5 * dt
    bmag = B_dc + dc_amp * math.cos(dc_om * tm)
    brf = (rf_amp + rf_tone_amp * math.cos(rf_tone_om * tm)) * math.cos(om_rf * tm + rf_phase)
    # rotation vector of this step, dF = W x F
    wx = -gamma * (bmag * bx + brf) * dt
    wy = 0.0
    wz = -gamma * bmag * bz * dt + G * ds3
    th = math.sqrt(wx * wx + wy * wy + wz * wz)
    if th > 0.0:
        kx = wx / th
        ky = wy / th
        kz = wz / th
        c = math.cos(th)
        s = math.sin(th)
        kdotf = kx * fx + ky * fy + kz * fz
        cx = ky * fz - kz * fy
        cy = kz * fx - kx * fz
        cz = kx * fy - ky * fx
        fx, fy, fz = (fx * c + cx * s + kx * kdotf * (1.0 - c),
                      fy * c + cy * s + ky * kdotf * (1.0 - c),
                      fz * c + cz * s + kz * kdotf * (1.0 - c))
    if kick:
        n0 = math.floor((om_p * t - pump_phase) / (2.0 * math.pi))
        n1 = math.floor((om_p * (t + dt) - pump_phase) / (2.0 * math.pi))
        P = 0.0
        if n1 > n0:
            fx -= kick_frac * fx
            fy -= kick_frac * fy
            fz += kick_frac * (F_max - fz)
    else:
        ph = (om_p * tm - pump_phase) / (2.0 * math.pi)
        P = pump_rate if ph - math.floor(ph) < duty else 0.0
    fx += dt * (-Gamma * fx - P * fx) + dwx
    fy += dt * (-Gamma * fy - P * fy) + dwy
    fz += dt * (-Gamma * fz + P * (F_max - fz)) + dwz
    return fx, fy, fz


@numba.njit(cache=True)
def _integrate(F0, t0, dt, bx, bz, B_dc, dc_amp, dc_om, rf_amp, rf_phase, om_rf,
               rf_tone_amp, rf_tone_om, gamma, Gamma, F_max, pump_rate, duty,
               om_p, pump_phase, kick, kick_frac, G, ds3, dW, out):
    fx = F0[0]
    fy = F0[1]
    fz = F0[2]
    n = ds3.shape[0]
    n_out = out.shape[0]
    n_skip = n - n_out
    for k in range(n):
        if k >= n_skip:
            out[k - n_skip, 0] = fx
            out[k - n_skip, 1] = fy
            out[k - n_skip, 2] = fz
        t = t0 + k * dt
        fx, fy, fz = _advance(fx, fy, fz, t, dt, bx, bz, B_dc, dc_amp, dc_om, rf_amp,
                              rf_phase, om_rf, rf_tone_amp, rf_tone_om, gamma, Gamma,
                              F_max, pump_rate, duty, om_p, pump_phase, kick,
                              kick_frac, G, ds3[k], dW[k, 0], dW[k, 1], dW[k, 2])
    return np.array([fx, fy, fz])


def _kernel_args(fields: FieldConfig, params: SpinParams):
    om_rf = params.omega_p if fields.omega_rf is None else fields.omega_rf
    return (
        math.cos(fields.psi), math.sin(fields.psi), fields.B_dc,
        fields.dc_tone_amp, TWO_PI * fields.dc_tone_freq,
        fields.B_rf_amp, fields.B_rf_phase, om_rf,
        fields.rf_tone_amp, TWO_PI * fields.rf_tone_freq,
        params.gamma, params.Gamma, params.F_max, params.pump_rate,
        params.pump_duty, params.omega_p, params.pump_phase,
        params.pump_mode == "kick", params.kick_fraction, params.G,
    )


def _check_dt(fields: FieldConfig, params: SpinParams, dt: float):
    if not dt > 0:
        raise ValueError("dt must be positive")
    b_max = fields.B_dc + abs(fields.dc_tone_amp) + fields.B_rf_amp + abs(fields.rf_tone_amp)
    angle = abs(params.gamma) * b_max * dt
    if angle >= MAX_ROTATION_PER_STEP:
        raise ValueError(
            f"dt={dt:.3g} s gives {angle:.3g} rad of precession per step "
            f"(limit {MAX_ROTATION_PER_STEP})"
        )


def step(F, fields: FieldConfig, params: SpinParams, ds3: float, dW, t: float,
         dt: float) -> np.ndarray:
    """Advance the spin by one step.

    ``dW`` are the spin-noise Wiener increments (each ~ N(0, dt)); they are
    multiplied by ``params.q``.
    """
    _check_dt(fields, params, dt)
    dW = np.asarray(dW, dtype=float) * params.q
    out = _advance(float(F[0]), float(F[1]), float(F[2]), float(t), float(dt),
                   *_kernel_args(fields, params)[:-1], params.G, float(ds3),
                   dW[0], dW[1], dW[2])
    return np.array(out)


@dataclass
class SpinTrajectory:
    dt: float
    F: np.ndarray
    stokes: StokesSeries
    t0: float = 0.0
    config: dict | None = None
    final_state: np.ndarray | None = None

    def __len__(self):
        return self.F.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def Fz(self) -> np.ndarray:
        return self.F[:, 2]

    def max_norm_excess(self, F_max: float) -> float:
        """Largest relative excursion of |F| above ``F_max`` (monitored only)."""
        if F_max <= 0:
            return float("nan")
        return float(np.max(np.linalg.norm(self.F, axis=1)) / F_max - 1.0)


def simulate(fields: FieldConfig, params: SpinParams, probe: ProbeParams,
             duration: float, dt: float | None = None, seed: int = 0, *,
             stream: int = 0, warmup: float = 0.0, F0=None,
             spin_noise: bool = True, stokes_noise: bool = True,
             back_action: bool = True) -> SpinTrajectory:
    """Integrate the spin for ``warmup + duration`` seconds and keep the last
    ``duration``.

    Time zero of the recorded trajectory is the end of the warmup, and the
    pump and rf phases are referenced to the start of the warmup, which is a
    whole number of pump periods long so the recorded phases do not depend
    on it.

    The noise switches zero individual channels without changing the draws
    of the others: ``stokes_noise`` covers both S2 (readout) and S3
    (back-action), ``back_action`` only the S3 torque.
    """
    if dt is None:
        dt = default_dt(params.omega_p)
    _check_dt(fields, params, dt)
    n = int(round(duration / dt))
    if n < 1:
        raise ValueError("duration shorter than one step")
    period = TWO_PI / params.omega_p
    n_warm = int(round(math.ceil(warmup / period - 1e-9) * period / dt)) if warmup > 0 else 0
    n_tot = n + n_warm

    z2, z3 = standard_stokes(n_tot, seed, stream)
    unit = math.sqrt(probe.photon_flux * dt)
    s_on = 1.0 if stokes_noise else 0.0
    ds2 = z2 * (unit * math.sqrt(probe.xi2) * s_on)
    ds3 = z3 * (unit * math.sqrt(probe.xibar2) * s_on * (1.0 if back_action else 0.0))
    dW = rng_for(seed, stream, CHANNEL_SPIN).standard_normal((n_tot, 3))
    dW *= math.sqrt(dt) * params.q * (1.0 if spin_noise else 0.0)

    F_start = np.zeros(3) if F0 is None else np.asarray(F0, dtype=float).copy()
    out = np.empty((n, 3))
    t_start = -n_warm * dt
    final = _integrate(F_start, t_start, dt, *_kernel_args(fields, params), ds3, dW, out)

    stokes = StokesSeries(dt=dt, s1=probe.photon_flux, ds2=ds2[n_warm:], ds3=ds3[n_warm:])
    config = {
        "fields": asdict(fields), "params": asdict(params), "probe": asdict(probe),
        "duration": duration, "dt": dt, "seed": seed, "stream": stream,
        "warmup": n_warm * dt, "spin_noise": spin_noise, "stokes_noise": stokes_noise,
        "back_action": back_action,
    }
    return SpinTrajectory(dt=dt, F=out, stokes=stokes, t0=0.0, config=config,
                          final_state=final)


def unpolarized_run(params: SpinParams, probe: ProbeParams, duration: float,
                    dt: float | None = None, seed: int = 0, *,
                    fields: FieldConfig | None = None,
                    keep_pump_relaxation: bool = False, **kwargs) -> SpinTrajectory:
    """Simulate an unpolarized ensemble.

    By default the pump is switched off (``pump_rate = 0``).  With
    ``keep_pump_relaxation`` the pump light stays on but carries no
    orientation (``F_max = 0``): the ensemble then has the same relaxation
    rate, and therefore the same spin-noise spectrum, as the polarized one.
    """
    if fields is None:
        fields = FieldConfig(B_dc=0.0, psi=0.0)
    if keep_pump_relaxation:
        params = replace(params, F_max=0.0)
    else:
        params = replace(params, pump_rate=0.0)
    return simulate(fields, params, probe, duration, dt, seed, **kwargs)
