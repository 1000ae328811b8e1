"""Lorentzian-plus-white noise model of the demodulated quadratures.

    S(omega) = xi2*psn + L(omega) * (spn + xibar2*mba),
    L(omega) = dw**2 / (omega**2 + dw**2)

A single spectrum only constrains the white floor ``xi2*psn``, the
low-frequency atomic excess ``spn + xibar2*mba`` and the linewidth ``dw``.
SPN and MBA are separated by fitting an unpolarized ensemble (no MBA) and a
polarized one and subtracting, see :func:`decompose_budget`, or by a joint
fit over probes with different ``xibar2`` (:func:`fit_joint`).

Fits maximize the Whittle likelihood of averaged periodograms: a bin that is
the mean of ``n`` periodograms is gamma distributed with shape ``n`` and mean
``S(omega)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, stats

from .spectral import Spectrum

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
FIT_PARAMS = ("psn", "atomic", "delta_omega")
UNITS = {"psn": "power/Hz", "spn": "power/Hz", "mba": "power/Hz", "atomic": "power/Hz",
         "floor": "power/Hz", "delta_omega": "rad/s", "xi2": "1", "xibar2": "1"}


class FitError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class NoiseBudget:
    """Parameters of the noise model for one quadrature.

    ``psn`` and ``mba`` are the squeezing-independent coefficients.  For a
    polarized fit without a known SPN level the whole Lorentzian excess is
    booked as back-action (``spn = 0``) until :func:`decompose_budget`
    subtracts the unpolarized SPN.
    """

    psn: float
    spn: float
    mba: float
    delta_omega: float
    xi2: float = 1.0
    xibar2: float = 1.0
    quadrature: str = "Q"
    mode: str = "polarized"
    intervals: dict = field(default_factory=dict)
    level: float = 0.68
    loglike: float = float("nan")
    n_points: int = 0
    degenerate: bool = False
    config_hash: str | None = None

    def __post_init__(self):
        if self.delta_omega <= 0:
            raise ValueError("delta_omega must be positive")

    @property
    def floor(self) -> float:
        return self.xi2 * self.psn

    @property
    def atomic(self) -> float:
        return self.spn + self.xibar2 * self.mba

    def sigma(self, name: str) -> float:
        """Gaussian-equivalent standard error from the profile interval."""
        lo, hi = self.intervals[name]
        z = stats.norm.ppf(0.5 + self.level / 2)
        return (hi - lo) / (2 * z)

    def report_rows(self) -> list[dict]:
        rows = []
        for name in ("psn", "spn", "mba", "atomic", "floor", "delta_omega"):
            lo, hi = self.intervals.get(name, (float("nan"), float("nan")))
            rows.append({"parameter": name, "estimate": getattr(self, name),
                         "ci_low": lo, "ci_high": hi, "units": UNITS[name]})
        return rows


def lorentzian(omega, delta_omega):
    omega = np.asarray(omega, dtype=float)
    return delta_omega ** 2 / (omega ** 2 + delta_omega ** 2)


def model_psd(budget: NoiseBudget, omega):
    """Evaluate the noise model at angular frequency ``omega`` (rad/s)."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0):
        raise ValueError("omega must be non-negative")
    return budget.xi2 * budget.psn + lorentzian(omega, budget.delta_omega) * (
        budget.spn + budget.xibar2 * budget.mba)


# --------------------------------------------------------------------------
# likelihood machinery


@dataclass
class _Block:
    omega: np.ndarray
    power: np.ndarray
    n_avg: float
    overlap: float


def _fit_points(spec: Spectrum, mask=(), fmin=None, fmax=None) -> _Block:
    f = spec.freqs
    keep = f > 0
    if len(f) > 1:
        keep &= f < f[-1]   # Nyquist/last bin has different statistics
    if fmin is not None:
        keep &= f >= fmin
    if fmax is not None:
        keep &= f <= fmax
    for lo, hi in mask or ():
        keep &= ~((f >= lo) & (f <= hi))
    if spec.n_averages < 1:
        raise ValueError("spectrum has no recorded averages")
    return _Block(omega=TWO_PI * f[keep], power=spec.psd[keep],
                  n_avg=float(spec.n_averages), overlap=spec.bin_overlap)


def _whittle(blocks, models) -> float:
    ll = 0.0
    for b, s in zip(blocks, models):
        if np.any(s <= 0):
            return -np.inf
        ll -= b.n_avg * np.sum(np.log(s) + b.power / s)
    return ll


class _Problem:
    """Parameter vector <-> models, with an optimizer over a subset of
    free parameters (the rest held fixed, as in profiling)."""

    def __init__(self, blocks, model_fn, names, lower, space):
        self.blocks = blocks
        self.model_fn = model_fn
        self.names = list(names)
        self.lower = np.asarray(lower, dtype=float)
        self.space = space
        self.n_evals = 0

    def loglike(self, theta) -> float:
        self.n_evals += 1
        if np.any(~np.isfinite(theta)) or np.any(theta < self.lower):
            return -np.inf
        return _whittle(self.blocks, self.model_fn(theta))

    def _to_u(self, theta, scale, free):
        t = theta[free]
        if self.space == "log":
            return np.log(t / scale[free])
        return t / scale[free]

    def _from_u(self, u, theta, scale, free):
        th = theta.copy()
        if self.space == "log":
            th[free] = np.exp(u) * scale[free]
        else:
            th[free] = u * scale[free]
        return th

    def maximize(self, theta0, scale, free=None, tol=1e-9, max_restarts=6):
        """Nelder-Mead with restarts from the incumbent until the
        log-likelihood stops improving by more than ``tol``."""
        theta0 = np.asarray(theta0, dtype=float)
        free = np.ones(len(theta0), bool) if free is None else np.asarray(free)
        if not free.any():
            return theta0, self.loglike(theta0), True
        if self.space == "log":
            theta0 = np.where(free, np.maximum(theta0, 1e-300), theta0)

        def neg(u):
            v = -self.loglike(self._from_u(u, theta0, scale, free))
            return v if np.isfinite(v) else 1e300

        bounds = None
        if self.space == "linear":
            lo = self.lower[free] / scale[free]
            bounds = [(l, None) for l in lo]
        u = self._to_u(theta0, scale, free)
        best = neg(u)
        converged = False
        for _ in range(max_restarts):
            res = optimize.minimize(
                neg, u, method="Nelder-Mead", bounds=bounds,
                options={"xatol": 1e-11, "fatol": tol * 0.1, "maxiter": 4000 * free.sum(),
                         "adaptive": free.sum() > 2},
            )
            improved = best - res.fun
            if res.fun <= best:
                u, best = res.x, res.fun
            if improved <= tol:
                converged = True
                break
        theta = self._from_u(u, theta0, scale, free)
        return theta, -best, converged


def _profile_interval(problem: _Problem, theta_hat, ll_hat, scale, j, drop,
                      hard_lower=0.0, max_expand=60, max_span=1e4):
    """Values of parameter ``j`` where the profile log-likelihood falls
    ``drop`` below its maximum.  Unbounded directions give 0 or inf; the
    upper search gives up (inf) ``max_span`` scales away from the estimate."""
    free = np.ones(len(theta_hat), bool)
    free[j] = False
    cache = {}
    warm = {"theta": theta_hat.copy()}

    def prof(v):
        if v in cache:
            return cache[v]
        th = warm["theta"].copy()
        th[j] = v
        th_opt, ll, _ = problem.maximize(th, scale, free, tol=1e-7, max_restarts=3)
        # keep the best warm start; profiles are smooth near the optimum
        warm["theta"] = th_opt
        cache[v] = ll_hat - ll - drop
        return cache[v]

    x0 = theta_hat[j]
    step = max(abs(x0), scale[j]) * 0.02

    # upper side
    hi_prev, hi = x0, x0 + step
    hi_val = prof(hi)
    k = 0
    span = max_span * max(abs(x0), scale[j])
    while hi_val < 0 and k < max_expand and hi - x0 < span:
        hi_prev, hi = hi, x0 + (hi - x0) * 2.0
        hi_val = prof(hi)
        k += 1
    if hi_val < 0:
        upper = math.inf
    else:
        warm["theta"] = theta_hat.copy()
        upper = optimize.brentq(prof, hi_prev, hi, xtol=1e-10 * max(abs(hi), 1e-300),
                                rtol=1e-6)

    # lower side
    warm["theta"] = theta_hat.copy()
    lo_prev, lo = x0, x0 - step
    if lo <= hard_lower:
        lo = hard_lower if problem.space == "linear" else x0 / 2
    lo_val = prof(lo)
    k = 0
    while lo_val < 0 and k < max_expand:
        if lo <= hard_lower or (problem.space == "log" and lo < 1e-12 * scale[j]):
            break
        lo_prev = lo
        lo = max(hard_lower, x0 - (x0 - lo) * 2.0) if problem.space == "linear" else lo / 4
        lo_val = prof(lo)
        k += 1
    if lo_val < 0:
        lower = hard_lower
    else:
        warm["theta"] = theta_hat.copy()
        lower = optimize.brentq(prof, lo, lo_prev, xtol=1e-10 * max(abs(lo_prev), 1e-300),
                                rtol=1e-6)
    return lower, upper


def _initial_guess(block: _Block, xi2: float):
    p = block.power
    n = len(p)
    order = np.argsort(block.omega)
    hi = p[order[int(0.75 * n):]]
    floor0 = float(np.median(hi)) * 1.0
    lo = p[order[: max(3, n // 50)]]
    atomic0 = max(float(np.mean(lo)) - floor0, 0.05 * floor0)
    w = block.omega[order]
    return floor0, atomic0, float(w[0]), float(w[-1])


def _multistart(problem: _Problem, starts, scale, tol):
    best = None
    for th0 in starts:
        th, ll, conv = problem.maximize(th0, scale, tol=tol)
        if best is None or ll > best[1]:
            best = (th, ll, conv)
    # polish the winner with fresh simplices
    th, ll, conv = problem.maximize(best[0], scale, tol=tol, max_restarts=10)
    return th, ll, conv


def fit_noise_model(spec: Spectrum, xi2: float = 1.0, xibar2: float = 1.0, mask=(),
                    mode: str = "polarized", *, spn: float | None = None,
                    quadrature: str = "Q", fmin: float | None = None,
                    fmax: float | None = None, level: float = 0.68,
                    intervals: bool = True, param_space: str = "linear",
                    n_starts: int = 8, tol: float = 1e-9,
                    config_hash: str | None = None) -> NoiseBudget:
    """Maximum-likelihood fit of the noise model to an averaged spectrum.

    ``mask`` is a sequence of ``(f_lo, f_hi)`` bands in Hz excluded from
    the likelihood.  In ``"unpolarized"`` mode the Lorentzian excess is
    reported as SPN with ``mba = 0``; in ``"polarized"`` mode it is booked
    as ``spn + xibar2*mba`` with ``spn`` fixed to the given value (0 if
    unknown).

    Profile-likelihood intervals at ``level`` are computed for ``psn``,
    ``atomic`` and ``delta_omega``; the likelihood-ratio threshold is
    widened by the window's bin-overlap factor so that intervals stay
    calibrated for correlated Hann periodogram bins.
    """
    if mode not in ("polarized", "unpolarized"):
        raise ValueError(f"unknown mode {mode!r}")
    if param_space not in ("linear", "log"):
        raise ValueError(f"unknown param_space {param_space!r}")
    block = _fit_points(spec, mask, fmin, fmax)
    if not np.all(np.isfinite(block.power)) or np.any(block.power < 0):
        raise ValueError("spectrum contains negative or non-finite values")
    if len(block.omega) < 4 * 3:
        raise ValueError(f"only {len(block.omega)} unmasked points for 3 parameters")

    def model(theta):
        floor, atomic, dw = theta
        return [floor + atomic * lorentzian(block.omega, dw)]

    floor0, atomic0, w_lo, w_hi = _initial_guess(block, xi2)
    lower = [1e-300 if param_space == "log" else 0.0] * 2 + [1e-300]
    problem = _Problem([block], model, ("floor", "atomic", "delta_omega"), lower, param_space)
    dws = np.geomspace(max(w_lo, 1e-3), w_hi / 2, n_starts)
    scale = np.array([floor0, max(atomic0, floor0), float(np.median(dws))])
    if param_space == "log":
        atomic0 = max(atomic0, 1e-3 * floor0)
    starts = [np.array([floor0, atomic0, dw]) for dw in dws]
    theta, ll, conv = _multistart(problem, starts, scale, tol)
    if not conv or not np.isfinite(ll):
        raise FitError("noise-model fit did not converge",
                       {"theta": theta.tolist(), "loglike": ll, "evals": problem.n_evals,
                        "n_points": len(block.omega)})
    floor, atomic, dw = (float(x) for x in theta)

    ivals = {}
    degenerate = False
    if intervals:
        drop = 0.5 * stats.chi2.ppf(level, 1) * block.overlap
        iscale = np.array([max(floor, 1e-300), max(atomic, floor * 1e-3), dw])
        for j, name in enumerate(("floor", "atomic")):
            ivals[name] = _profile_interval(problem, theta, ll, iscale, j, drop)
        a_lo, a_hi = ivals["atomic"]
        if a_lo > 0.0 and np.isfinite(a_hi):
            ivals["delta_omega"] = _profile_interval(problem, theta, ll, iscale, 2, drop)
        else:
            # no resolved Lorentzian: its width is unconstrained
            ivals["delta_omega"] = (0.0, math.inf)
        if (ivals["atomic"][0] <= 0.0 or not np.isfinite(ivals["atomic"][1])
                or not np.isfinite(ivals["delta_omega"][1])):
            degenerate = True
    if atomic <= 1e-6 * floor:
        degenerate = True
    if degenerate:
        logger.info("Lorentzian excess consistent with zero; linewidth unconstrained")

    psn = floor / xi2
    if mode == "unpolarized":
        spn_v, mba_v = atomic, 0.0
    else:
        spn_v = 0.0 if spn is None else float(spn)
        mba_v = (atomic - spn_v) / xibar2
    if intervals:
        flo, fhi = ivals.pop("floor")
        ivals["psn"] = (flo / xi2, fhi / xi2)
        ivals["floor"] = (flo, fhi)
        alo, ahi = ivals["atomic"]
        if mode == "unpolarized":
            ivals["spn"] = (alo, ahi)
            ivals["mba"] = (0.0, 0.0)
        else:
            ivals["spn"] = (spn_v, spn_v)
            ivals["mba"] = ((alo - spn_v) / xibar2, (ahi - spn_v) / xibar2)
    return NoiseBudget(psn=psn, spn=spn_v, mba=mba_v, delta_omega=dw, xi2=xi2,
                       xibar2=xibar2, quadrature=quadrature, mode=mode, intervals=ivals,
                       level=level, loglike=ll, n_points=len(block.omega),
                       degenerate=degenerate, config_hash=config_hash)


@dataclass
class JointFit:
    psn: float
    spn: float
    mba: float
    delta_omega: float
    xi2: list
    xibar2: list
    loglike: float
    intervals: dict = field(default_factory=dict)


def fit_joint(spectra, xi2s, xibar2s, *, mask=(), fmin=None, fmax=None,
              free_squeezing: bool = False, level: float = 0.68,
              intervals: bool = False, tol: float = 1e-9) -> JointFit:
    """Joint fit of polarized spectra taken with different probes.

    All spectra share ``psn, spn, mba, delta_omega``; with at least two
    distinct ``xibar2`` values SPN and MBA become separately identifiable.
    With ``free_squeezing`` the squeezing factors of every spectrum but the
    first (the reference, usually coherent light) are fitted as well.
    """
    blocks = [_fit_points(s, mask, fmin, fmax) for s in spectra]
    xi2s = [float(x) for x in xi2s]
    xibar2s = [float(x) for x in xibar2s]
    n = len(blocks)
    if len(set(xibar2s)) < 2 and not free_squeezing:
        raise ValueError("need at least two distinct xibar2 values to separate SPN and MBA")

    def unpack(theta):
        psn, spn, mba, dw = theta[:4]
        if free_squeezing:
            x2 = [xi2s[0]] + list(theta[4:4 + n - 1])
            xb2 = [xibar2s[0]] + list(theta[4 + n - 1:])
        else:
            x2, xb2 = xi2s, xibar2s
        return psn, spn, mba, dw, x2, xb2

    def model(theta):
        psn, spn, mba, dw, x2, xb2 = unpack(theta)
        return [x2[i] * psn + (spn + xb2[i] * mba) * lorentzian(b.omega, dw)
                for i, b in enumerate(blocks)]

    ref = blocks[0]
    floor0, atomic0, w_lo, w_hi = _initial_guess(ref, xi2s[0])
    names = ["psn", "spn", "mba", "delta_omega"]
    theta_base = [floor0 / xi2s[0], atomic0 / 2, atomic0 / 2 / xibar2s[0]]
    if free_squeezing:
        names += [f"xi2_{i}" for i in range(1, n)] + [f"xibar2_{i}" for i in range(1, n)]
    lower = np.zeros(len(names))
    lower[3] = 1e-300
    problem = _Problem(blocks, model, names, lower, "linear")
    dws = np.geomspace(max(w_lo, 1e-3), w_hi / 2, 8)
    starts = []
    for dw in dws:
        th = theta_base + [dw]
        if free_squeezing:
            th += xi2s[1:] + xibar2s[1:]
        starts.append(np.array(th))
    scale = np.abs(starts[len(starts) // 2]) + 1e-300
    scale[1] = scale[2] = max(atomic0, floor0)
    theta, ll, conv = _multistart(problem, starts, scale, tol)
    if not conv:
        raise FitError("joint fit did not converge", {"theta": theta.tolist()})
    psn, spn, mba, dw, x2, xb2 = unpack(theta)
    ivals = {}
    if intervals:
        drop = 0.5 * stats.chi2.ppf(level, 1) * max(b.overlap for b in blocks)
        iscale = np.maximum(np.abs(theta), 1e-12 * scale)
        for j, name in enumerate(names):
            ivals[name] = _profile_interval(problem, theta, ll, iscale, j, drop)
    return JointFit(psn=float(psn), spn=float(spn), mba=float(mba), delta_omega=float(dw),
                    xi2=[float(v) for v in x2], xibar2=[float(v) for v in xb2],
                    loglike=float(ll), intervals=ivals)


# --------------------------------------------------------------------------
# decomposition


@dataclass
class Decomposition:
    """SPN/MBA split from an unpolarized and a polarized fit.

    ``mba`` is the observed back-action level ``xibar2 * S_MBA`` in the
    polarized spectrum; ``mba_coefficient`` divides out ``xibar2``.
    """

    psn: float
    spn: float
    mba: float
    mba_raw: float
    mba_coefficient: float
    sigma: dict
    xi2: float
    xibar2: float
    quadrature: str
    clamped: bool = False

    def consistent_with_zero(self, confidence: float = 0.95) -> bool:
        z = stats.norm.ppf(0.5 + confidence / 2)
        return abs(self.mba_raw) <= z * self.sigma["mba"]

    def report_rows(self) -> list[dict]:
        z = 1.0
        rows = []
        for name in ("psn", "spn", "mba", "mba_coefficient"):
            v = getattr(self, name)
            s = self.sigma[name]
            rows.append({"parameter": name, "estimate": v, "ci_low": v - z * s,
                         "ci_high": v + z * s, "units": "power/Hz"})
        return rows


def decompose_budget(fit_unpolarized: NoiseBudget, fit_polarized: NoiseBudget) -> Decomposition:
    """Subtract the unpolarized SPN from the polarized Lorentzian excess."""
    u, p = fit_unpolarized, fit_polarized
    if u.config_hash and p.config_hash and u.config_hash != p.config_hash:
        raise ValueError("fits come from different probe/atom configurations "
                         f"({u.config_hash} vs {p.config_hash})")
    if not (math.isclose(u.xi2, p.xi2) and math.isclose(u.xibar2, p.xibar2)):
        raise ValueError("fits use different squeezing factors")
    if u.quadrature != p.quadrature:
        raise ValueError("fits are for different quadratures")
    if u.mode != "unpolarized":
        raise ValueError("first argument must be an unpolarized fit")

    def sig(b, name):
        return b.sigma(name) if name in b.intervals else float("nan")

    s_psn_u, s_psn_p = sig(u, "psn"), sig(p, "psn")
    if np.isfinite(s_psn_u) and np.isfinite(s_psn_p) and s_psn_u > 0 and s_psn_p > 0:
        w_u, w_p = 1 / s_psn_u ** 2, 1 / s_psn_p ** 2
        psn = (w_u * u.psn + w_p * p.psn) / (w_u + w_p)
        s_psn = (w_u + w_p) ** -0.5
    else:
        psn, s_psn = 0.5 * (u.psn + p.psn), float("nan")
    spn = u.spn
    s_spn = sig(u, "atomic")
    mba_raw = p.atomic - spn
    s_mba = math.hypot(sig(p, "atomic"), s_spn)
    clamped = mba_raw < 0
    if clamped:
        warnings.warn(f"negative MBA estimate {mba_raw:.4g} clamped to 0", RuntimeWarning,
                      stacklevel=2)
    mba = max(mba_raw, 0.0)
    return Decomposition(psn=psn, spn=spn, mba=mba, mba_raw=mba_raw,
                         mba_coefficient=mba / p.xibar2,
                         sigma={"psn": s_psn, "spn": s_spn, "mba": s_mba,
                                "mba_coefficient": s_mba / p.xibar2},
                         xi2=p.xi2, xibar2=p.xibar2, quadrature=p.quadrature,
                         clamped=clamped)


def synthetic_spectrum(budget: NoiseBudget, freqs, n_averages: int, rng,
                       window: str = "none") -> Spectrum:
    """Averaged-periodogram draw: each bin ~ Gamma(n, S/n), independent."""
    freqs = np.asarray(freqs, dtype=float)
    s = model_psd(budget, TWO_PI * freqs)
    p = rng.gamma(shape=n_averages, scale=s / n_averages)
    return Spectrum(freqs=freqs, psd=p, n_averages=n_averages, window=window)
