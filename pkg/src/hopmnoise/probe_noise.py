"""Stokes-parameter noise of a (possibly squeezed) probe beam.

Fluctuations are in photon-count units: over a step ``dt`` the integrated
S2 and S3 fluctuations of coherent light each have variance ``flux * dt``
(one-sided PSD ``2 * flux``).  Squeezing scales the S2 variance by ``xi2``
and the S3 variance by ``xibar2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# independent noise channels of one trajectory; see ``rng_for``
CHANNEL_S2 = 0
CHANNEL_S3 = 1
CHANNEL_SPIN = 2


@dataclass(frozen=True)
class ProbeParams:
    """Photon flux and quadrature noise factors of the probe light."""

    photon_flux: float
    xi2: float = 1.0
    xibar2: float = 1.0

    def __post_init__(self):
        if not (self.photon_flux > 0 and math.isfinite(self.photon_flux)):
            raise ValueError(f"photon_flux must be positive, got {self.photon_flux}")
        if not (self.xi2 > 0 and self.xibar2 > 0):
            raise ValueError("squeezing factors must be positive")
        # small slack so that 10**(-x/10) * 10**(x/10) round-off is accepted
        if self.xi2 * self.xibar2 < 1.0 - 1e-12:
            raise ValueError(
                f"xi2*xibar2 = {self.xi2 * self.xibar2:.6g} violates the "
                "minimum-uncertainty bound (must be >= 1)"
            )

    @property
    def squeezing_db(self) -> float:
        return -10.0 * math.log10(self.xi2)

    @property
    def antisqueezing_db(self) -> float:
        return 10.0 * math.log10(self.xibar2)

    @property
    def purity_product(self) -> float:
        return self.xi2 * self.xibar2


def make_probe(flux: float, squeezing_db: float = 0.0,
               antisqueezing_db: float | None = None) -> ProbeParams:
    """Build probe parameters from squeezing levels in dB.

    ``squeezing_db`` is the S2 noise reduction (negative values describe an
    antisqueezed S2 quadrature).  Without ``antisqueezing_db`` the state is
    taken as pure, ``xibar2 = 1 / xi2``.
    """
    if not math.isfinite(squeezing_db):
        raise ValueError("squeezing_db must be finite")
    xi2 = 10.0 ** (-squeezing_db / 10.0)
    if antisqueezing_db is None:
        xibar2 = 1.0 / xi2
    else:
        if not math.isfinite(antisqueezing_db):
            raise ValueError("antisqueezing_db must be finite")
        xibar2 = 10.0 ** (antisqueezing_db / 10.0)
    return ProbeParams(photon_flux=float(flux), xi2=xi2, xibar2=xibar2)


def rng_for(seed: int, stream: int = 0, channel: int = 0) -> np.random.Generator:
    """Generator for one noise channel of one trajectory.

    Streams are derived with ``SeedSequence`` spawn keys, so the draws for a
    given ``(seed, stream, channel)`` never depend on which other streams or
    channels were used, nor on the order jobs run in.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(channel)))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class StokesSeries:
    dt: float
    s1: float
    ds2: np.ndarray
    ds3: np.ndarray

    def __post_init__(self):
        if self.ds2.shape != self.ds3.shape:
            raise ValueError("ds2 and ds3 must have equal length")

    def __len__(self):
        return self.ds2.shape[0]


def standard_stokes(n_steps: int, seed: int, stream: int = 0):
    """Unit-variance S2 and S3 draws; scaled by :func:`sample_stokes`."""
    z2 = rng_for(seed, stream, CHANNEL_S2).standard_normal(n_steps)
    z3 = rng_for(seed, stream, CHANNEL_S3).standard_normal(n_steps)
    return z2, z3


def sample_stokes(probe: ProbeParams, dt: float, n_steps: int, seed: int,
                  stream: int = 0) -> StokesSeries:
    """Draw white S2/S3 fluctuation increments for ``n_steps`` steps of ``dt``.

    ``ds2[k] ~ N(0, xi2*flux*dt)`` and ``ds3[k] ~ N(0, xibar2*flux*dt)``,
    mutually independent.  Probes that differ only in their squeezing
    factors get the same underlying normal draws for a given seed, which is
    what paired comparisons rely on.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    z2, z3 = standard_stokes(n_steps, seed, stream)
    unit = math.sqrt(probe.photon_flux * dt)
    return StokesSeries(
        dt=dt,
        s1=probe.photon_flux,
        ds2=z2 * (unit * math.sqrt(probe.xi2)),
        ds3=z3 * (unit * math.sqrt(probe.xibar2)),
    )
