"""Faraday-rotation readout and lock-in demodulation at the pump frequency."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .spin_sim import SpinTrajectory

logger = logging.getLogger(__name__)

SMALL_ANGLE_LIMIT = 0.1


@dataclass
class RawSignal:
    """Detected S2 after the cell, photon counts per sample."""

    dt: float
    samples: np.ndarray
    t0: float = 0.0

    def __len__(self):
        return self.samples.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))


@dataclass
class IQSeries:
    dt_out: float
    I: np.ndarray
    Q: np.ndarray
    demod_phase: float
    omega_p: float
    t0: float = 0.0

    def __len__(self):
        return self.I.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt_out * np.arange(len(self))

    def quadrature(self, name: str) -> np.ndarray:
        if name == "I":
            return self.I
        if name == "Q":
            return self.Q
        raise ValueError(f"unknown quadrature {name!r}")


def faraday_signal(traj: SpinTrajectory, G: float, *, readout_noise: bool = True) -> RawSignal:
    """``G * F_z * flux * dt + ds2`` per sample.

    The S2 noise is the realization stored with the trajectory, so it comes
    from the same probe state whose S3 part drove the back-action.
    """
    Fz = traj.Fz
    ds2 = traj.stokes.ds2
    if Fz.shape != ds2.shape:
        raise ValueError(f"trajectory has {Fz.shape[0]} samples but {ds2.shape[0]} S2 increments")
    peak = abs(G) * float(np.max(np.abs(Fz))) if Fz.size else 0.0
    if peak >= SMALL_ANGLE_LIMIT:
        logger.warning("rotation angle %.3g rad is outside the small-angle regime", peak)
    samples = (G * traj.stokes.s1 * traj.dt) * Fz
    if readout_noise:
        samples = samples + ds2
    return RawSignal(dt=traj.dt, samples=samples, t0=traj.t0)


def demodulate(raw: RawSignal, omega_p: float, demod_phase: float = 0.0,
               decimation: int = 200) -> IQSeries:
    """Complex lock-in: ``I + iQ = 2 <raw * exp(-i(omega_p t + phase))>``.

    The average is a boxcar over consecutive blocks of ``decimation``
    samples; a trailing partial block is dropped.  A tone
    ``cos(omega_p t + phi)`` comes out as ``I + iQ = exp(i(phi - phase))``.
    """
    if decimation < 1:
        raise ValueError("decimation must be >= 1")
    n_blocks = len(raw) // decimation
    if n_blocks < 1:
        raise ValueError("signal shorter than one decimation block")
    n = n_blocks * decimation
    if n != len(raw):
        logger.debug("dropping %d trailing samples", len(raw) - n)
    t = raw.t0 + raw.dt * np.arange(n)
    ref = np.exp(-1j * (omega_p * t + demod_phase))
    z = 2.0 * (raw.samples[:n] * ref).reshape(n_blocks, decimation).mean(axis=1)
    return IQSeries(
        dt_out=raw.dt * decimation,
        I=np.ascontiguousarray(z.real),
        Q=np.ascontiguousarray(z.imag),
        demod_phase=demod_phase,
        omega_p=omega_p,
        t0=raw.t0 + 0.5 * (decimation - 1) * raw.dt,
    )


class CalibrationError(RuntimeError):
    pass


def calibrate_demod_phase(traj: SpinTrajectory, G: float, omega_p: float,
                          decimation: int = 200, min_snr: float = 5.0) -> float:
    """Demodulation phase that zeroes the mean of Q, with mean(I) > 0.

    Returns a phase in [0, 2*pi).  The blocks used for the error estimate
    are rounded up to whole pump periods, so a static Faraday offset (which
    alternates sign between half-period blocks) does not inflate it.
    """
    raw = faraday_signal(traj, G)
    period = max(1, int(round(2 * math.pi / (omega_p * traj.dt))))
    decimation = period * max(1, int(math.ceil(decimation / period - 1e-9)))
    iq = demodulate(raw, omega_p, 0.0, decimation)
    z = iq.I + 1j * iq.Q
    zbar = z.mean()
    stderr = math.sqrt(np.var(z.real) + np.var(z.imag)) / math.sqrt(len(z))
    if abs(zbar) == 0.0 or abs(zbar) < min_snr * stderr:
        raise CalibrationError(
            f"no oscillation at omega_p detected (|<I+iQ>| = {abs(zbar):.3g}, "
            f"standard error {stderr:.3g})"
        )
    return float(np.angle(zbar) % (2 * math.pi))


def write_iq(path, iq: IQSeries, header: dict | None = None):
    from .io import write_columns
    write_columns(path, {"t": iq.times, "I": iq.I, "Q": iq.Q},
                  units={"t": "s", "I": "photons", "Q": "photons"}, header=header)
