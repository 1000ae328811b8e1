"""Command-line experiment runner.

Subcommands::

    hopmnoise simulate     one trajectory and its demodulated I/Q series
    hopmnoise noise        spectra, fits and PSN/SPN/MBA decomposition
    hopmnoise sensitivity  responsivity and equivalent magnetic noise
    hopmnoise sweep        noise pipeline over one scalar config field
    hopmnoise check        analytic-oracle report

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, spectral
from .config import ConfigError, ExperimentConfig, load_config
from .io import write_columns, write_records
from .noise_model import FitError, decompose_budget
from .pipeline import ALL_CONDITIONS, condition_spectra, fit_condition

logger = logging.getLogger("hopmnoise")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
QUADS = ("I", "Q")
POLS = {True: "polarized", False: "unpolarized"}


class StageError(RuntimeError):
    def __init__(self, stage: str, config_hash: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed (config {config_hash}): {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class _Stage:
    name: str
    config_hash: str

    def __enter__(self):
        logger.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, self.config_hash, exc) from exc
        return False


def _header(cfg: ExperimentConfig, **extra) -> dict:
    h = {"config_hash": cfg.hash(), "seed": cfg.get("run.seed")}
    h.update(extra)
    return h


def _conditions(cfg: ExperimentConfig, only: str | None):
    conds = list(cfg.get("analysis.conditions"))
    if only is not None:
        if only not in ALL_CONDITIONS:
            raise ConfigError(f"unknown condition {only!r}")
        conds = [only]
    return conds


# --------------------------------------------------------------------------
# noise


def run_noise(cfg: ExperimentConfig, out, jobs: int = 1, condition: str | None = None) -> dict:
    """Spectra, fits and decomposition for every condition x polarization x
    quadrature.  Returns ``{(cond, pol, quad): NoiseBudget}`` plus the
    decompositions under ``("decomposition", cond, quad)``."""
    out = Path(out)
    ctx = cfg.context().with_(jobs=jobs)
    h = cfg.hash()
    results = {}
    level = float(cfg.get("analysis.level"))
    summary = []
    for ci, cond in enumerate(_conditions(cfg, condition)):
        probe = ctx.probe(cond)
        for polarized in (True, False):
            with _Stage(f"simulate/{cond}/{POLS[polarized]}", h):
                cs = condition_spectra(ctx, probe, polarized, ci)
            for quad in QUADS:
                tag = f"{cond}_{POLS[polarized]}_{quad}"
                meta = _header(cfg, condition=cond, polarization=POLS[polarized],
                               quadrature=quad, xi2=f"{probe.xi2:.10g}",
                               xibar2=f"{probe.xibar2:.10g}")
                with _Stage(f"spectra/{tag}", h):
                    spectral.write_spectrum(out / "spectra" / f"{tag}.txt", cs[quad], meta,
                                            units="photons^2/Hz")
                    spectral.write_spectrum(out / "spectra" / "logbinned" / f"{tag}.txt",
                                            spectral.log_bin(cs[quad], ctx.bins_per_decade),
                                            meta, units="photons^2/Hz")
                with _Stage(f"fit/{tag}", h):
                    fit = fit_condition(ctx, probe, polarized, quad, level, ci)
                fit_meta = dict(meta, loglike=f"{fit.loglike:.10g}", level=level,
                                degenerate=fit.degenerate,
                                carrier=f"{cs.carrier_I if quad == 'I' else cs.carrier_Q:.10g}")
                write_records(out / "fits" / f"{tag}.txt", fit.report_rows(), fit_meta)
                results[(cond, POLS[polarized], quad)] = fit
        for quad in QUADS:
            with _Stage(f"decompose/{cond}/{quad}", h):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    dec = decompose_budget(results[(cond, "unpolarized", quad)],
                                           results[(cond, "polarized", quad)])
            results[("decomposition", cond, quad)] = dec
            for row in dec.report_rows():
                summary.append({"condition": cond, "quadrature": quad, **row})
    if summary:
        write_records(out / "decomposition.txt", summary, _header(cfg))
    return results


# --------------------------------------------------------------------------
# sensitivity


def run_sensitivity(cfg: ExperimentConfig, out, jobs: int = 1,
                    condition: str | None = None) -> dict:
    """Responsivity (static slope and tone ratio) and equivalent magnetic
    noise for both channels and every probe condition."""
    from .sensitivity import (CHANNELS, QUADRATURE, crop_to, equivalent_noise,
                              linear_bound, responsivity_at_zero, responsivity_spectrum,
                              write_magnetic_noise, write_responsivity)
    out = Path(out)
    ctx = cfg.context().with_(jobs=jobs)
    h = cfg.hash()
    a = cfg.data["analysis"]
    results = {}
    for channel in CHANNELS:
        with _Stage(f"linear_bound/{channel}", h):
            bound = linear_bound(ctx, channel)
        amp = a["test_amplitude"]
        amp = float(a["test_amplitude_fraction"]) * bound if amp is None else float(amp)
        static = np.linspace(-amp, amp, 5)
        for ci, cond in enumerate(_conditions(cfg, condition)):
            probe = ctx.probe(cond)
            with _Stage(f"responsivity/{channel}/{cond}", h):
                zero = responsivity_at_zero(ctx, channel, static, probe, noisy=True,
                                            n_seeds=int(a["r0_seeds"]),
                                            duration=ctx.duration, jobs=jobs)
                resp = responsivity_spectrum(ctx, channel, a["test_freqs"], amp, probe,
                                             n_iterations=int(a["sensitivity_iterations"]),
                                             duration=float(a["tone_duration"]),
                                             r0=zero.r0, jobs=jobs)
            with _Stage(f"equivalent_noise/{channel}/{cond}", h):
                noise = condition_spectra(ctx, probe, True, ci)[QUADRATURE[channel]]
                mns = equivalent_noise(crop_to(noise, resp), resp)
            meta = _header(cfg, channel=channel, condition=cond,
                           quadrature=QUADRATURE[channel], r0=f"{zero.r0:.10g}",
                           r0_stderr=f"{zero.r0_stderr:.10g}", linear_bound_T=f"{bound:.10g}",
                           test_amplitude_T=f"{amp:.10g}")
            write_magnetic_noise(out / "sensitivity" / f"{channel}_{cond}.txt", mns, meta)
            write_responsivity(out / "sensitivity" / "responsivity" / f"{channel}_{cond}.txt",
                               resp, meta)
            results[(channel, cond)] = {"zero": zero, "resp": resp, "noise": mns,
                                        "bound": bound, "amplitude": amp}
    return results


# --------------------------------------------------------------------------
# sweep

SWEEP_COLUMNS = ("value", "psn", "psn_lo", "psn_hi", "spn", "spn_lo", "spn_hi", "mba",
                 "mba_lo", "mba_hi", "delta_omega", "delta_omega_lo", "delta_omega_hi",
                 "carrier")


def sweep(cfg: ExperimentConfig, axis: str, values, out=None, jobs: int = 1,
          condition: str = "custom", quadrature: str = "Q") -> list[dict]:
    """Polarized/unpolarized fit and decomposition per value of ``axis``.

    Intervals are the decomposition's ``level`` intervals (estimate plus or
    minus z sigma).  The path is validated before any simulation runs.
    """
    from scipy import stats

    cfg.check_scalar_path(axis)
    if condition not in ALL_CONDITIONS:
        raise ConfigError(f"unknown condition {condition!r}")
    cfgs = [cfg.with_value(axis, v) for v in values]
    level = float(cfg.get("analysis.level"))
    z = stats.norm.ppf(0.5 + level / 2)
    rows = []
    for v, c in zip(values, cfgs):
        ctx = c.context().with_(jobs=jobs)
        probe = ctx.probe(condition)
        with _Stage(f"sweep/{axis}={v}", c.hash()):
            pol = fit_condition(ctx, probe, True, quadrature, level)
            unp = fit_condition(ctx, probe, False, quadrature, level)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                dec = decompose_budget(unp, pol)
            cs = condition_spectra(ctx, probe, True)
        row = {"value": float(v)}
        for name, est in (("psn", dec.psn), ("spn", dec.spn), ("mba", dec.mba_raw)):
            s = dec.sigma[name]
            row.update({name: est, f"{name}_lo": est - z * s, f"{name}_hi": est + z * s})
        lo, hi = pol.intervals.get("delta_omega", (math.nan, math.nan))
        row.update({"delta_omega": pol.delta_omega, "delta_omega_lo": lo, "delta_omega_hi": hi,
                    "carrier": cs.carrier_I})
        rows.append(row)
        if out is not None:
            meta = _header(c, axis=axis, value=v, condition=condition, quadrature=quadrature)
            write_records(Path(out) / "sweep" / f"{axis}={v}" / "polarized.txt",
                          pol.report_rows(), meta)
            write_records(Path(out) / "sweep" / f"{axis}={v}" / "unpolarized.txt",
                          unp.report_rows(), meta)
    if out is not None:
        table = {k: [r[k] for r in rows] for k in SWEEP_COLUMNS}
        write_columns(Path(out) / "sweep" / "summary.txt", table,
                      units=_sweep_units(),
                      header=_header(cfg, axis=axis, condition=condition,
                                     quadrature=quadrature, level=level))
    return rows


def _sweep_units() -> dict:
    units = {"carrier": "photons"}
    for name, u in (("psn", "photons^2/Hz"), ("spn", "photons^2/Hz"),
                    ("mba", "photons^2/Hz"), ("delta_omega", "rad/s")):
        units.update({name: u, f"{name}_lo": u, f"{name}_hi": u})
    return units


# --------------------------------------------------------------------------
# check


def run_check(cfg: ExperimentConfig, out=None) -> list:
    """Analytic-oracle comparisons.  Rows are asserted only in the high-Q
    regime (omega_L / Gamma > 50); otherwise they are reported as passing
    with a note."""
    from .analytic import (CheckRow, bbopm_evasion_check, impulse_check,
                           predicted_budget, responsivity_slope)
    from .pipeline import context_phase
    from .sensitivity import responsivity_at_zero

    ctx = cfg.context()
    h = cfg.hash()
    q_factor = ctx.params.quality_factor(ctx.fields)
    rows: list[CheckRow] = []
    with _Stage("check/impulse", h):
        rows += impulse_check(ctx.fields, ctx.params)
    with _Stage("check/budget", h):
        probe = ctx.probe("coherent")
        for quad in QUADS:
            pred = predicted_budget(ctx.fields, ctx.params, probe, ctx.dt, quad, ctx.decimation)
            fit = fit_condition(ctx, probe, True, quad, 0.95)
            unp = fit_condition(ctx, probe, False, quad, 0.95)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                dec = decompose_budget(unp, fit)
            for name, p, s, sig in (("psn", pred.psn, dec.psn, dec.sigma["psn"]),
                                    ("spn", pred.spn, dec.spn, dec.sigma["spn"]),
                                    ("mba", pred.mba, dec.mba_raw, dec.sigma["mba"])):
                rows.append(CheckRow(f"{name}_{quad}", p, s, s / p if p else math.nan,
                                     abs(s - p) <= 1.96 * sig))
            rows.append(CheckRow(f"delta_omega_{quad}", pred.delta_omega, fit.delta_omega,
                                 fit.delta_omega / pred.delta_omega,
                                 abs(fit.delta_omega / pred.delta_omega - 1) < 0.05))
    with _Stage("check/responsivity", h):
        for channel in ("dc", "rf"):
            a = 1e-2 * ctx.params.linewidth / ctx.params.gamma
            sim = responsivity_at_zero(ctx, channel, np.linspace(-a, a, 5)).r0
            pred = responsivity_slope(ctx.fields, ctx.params, ctx.probe("coherent"), ctx.dt,
                                      channel, context_phase(ctx))
            rows.append(CheckRow(f"r0_{channel}", pred, sim, sim / pred,
                                 abs(sim / pred - 1) < 0.05))
    with _Stage("check/evasion", h):
        from dataclasses import replace
        ctx0 = ctx.with_(fields=replace(ctx.fields, psi=0.0))
        rows += [CheckRow("psi0_" + r.quantity, r.predicted, r.simulated, r.ratio, r.passed)
                 for r in bbopm_evasion_check(ctx0)]
    gated = q_factor <= 50
    report = [dict(r.as_dict(), asserted=not gated) for r in rows]
    if out is not None:
        write_records(Path(out) / "check_report.txt", report,
                      _header(cfg, quality_factor=f"{q_factor:.6g}"))
    if gated:
        for r in rows:
            r.passed = True
    return rows


# --------------------------------------------------------------------------
# simulate


def run_simulate(cfg: ExperimentConfig, out, condition: str = "coherent", polarized: bool = True):
    from .pipeline import run_iq
    from .readout import write_iq
    from .spin_sim import simulate

    ctx = cfg.context()
    probe = ctx.probe(condition)
    h = cfg.hash()
    with _Stage("simulate", h):
        from dataclasses import replace
        params = ctx.params if polarized else replace(ctx.params, F_max=0.0)
        traj = simulate(ctx.fields, params, probe, ctx.duration, ctx.dt, ctx.seed,
                        warmup=ctx.warmup)
        iq = run_iq(ctx, probe, polarized, 0)
    meta = _header(cfg, condition=condition, polarization=POLS[polarized],
                   max_norm_excess=f"{traj.max_norm_excess(params.F_max):.6g}")
    out = Path(out)
    write_columns(out / "trajectory.txt",
                  {"t": traj.times, "F_x": traj.F[:, 0], "F_y": traj.F[:, 1],
                   "F_z": traj.F[:, 2]}, units={"t": "s"}, header=meta)
    write_iq(out / "iq.txt", iq, meta)
    return traj, iq


# --------------------------------------------------------------------------


def _parse_values(text: str) -> list:
    if text is None or not text.strip():
        return []
    vals = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            vals.append(float(tok))
        except ValueError:
            raise ConfigError(f"sweep value {tok!r} is not a number") from None
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hopmnoise", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults if omitted)")
    common.add_argument("--out", help="output directory (default: outputs.directory)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--condition", help="probe condition "
                        "(coherent, squeezed, antisqueezed, custom)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="one trajectory and its I/Q")
    s.add_argument("--unpolarized", action="store_true")
    sub.add_parser("noise", parents=[common], help="noise spectra, fits and budget")
    sub.add_parser("sensitivity", parents=[common], help="equivalent magnetic noise")
    s = sub.add_parser("sweep", parents=[common], help="pipeline over one config field")
    s.add_argument("--axis", required=True, help="dotted config path, e.g. fields.psi_deg")
    s.add_argument("--values", default="", help="comma-separated values")
    s.add_argument("--quadrature", choices=QUADS, default="Q")
    sub.add_parser("check", parents=[common], help="analytic-oracle report")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_value("run.seed", int(args.seed))
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        out = Path(args.out or cfg.get("outputs.directory"))
        if args.command == "simulate":
            run_simulate(cfg, out, args.condition or "coherent", not args.unpolarized)
        elif args.command == "noise":
            run_noise(cfg, out, args.jobs, args.condition)
        elif args.command == "sensitivity":
            run_sensitivity(cfg, out, args.jobs, args.condition)
        elif args.command == "sweep":
            rows = sweep(cfg, args.axis, _parse_values(args.values), out, args.jobs,
                         args.condition or "custom", args.quadrature)
            for r in rows:
                print(f"{r['value']:g}\tpsn={r['psn']:.4g}\tspn={r['spn']:.4g}\t"
                      f"mba={r['mba']:.4g}\tdelta_omega={r['delta_omega']:.4g}")
        elif args.command == "check":
            rows = run_check(cfg, out)
            for r in rows:
                print(f"{r.quantity:28s} predicted={r.predicted:<12.5g} "
                      f"simulated={r.simulated:<12.5g} {'pass' if r.passed else 'FAIL'}")
            if not all(r.passed for r in rows):
                return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, OSError):
            return EXIT_IO
        if isinstance(exc.cause, ConfigError):
            return EXIT_CONFIG
        return EXIT_NUMERIC
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
