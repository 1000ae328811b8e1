"""Experiment configuration: YAML file, defaults, validation and hashing.

Angles are given in degrees and frequencies in Hz in the file; rates are
converted to rad/s when the simulation objects are built.  Every key is
optional; missing keys take the defaults below.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    """Invalid or unresolvable configuration."""


DEFAULTS: dict = {
    "probe": {
        "photon_flux": 1.0e12,       # photons/s
        "squeezing_db": 1.6,
        "antisqueezing_db": 3.0,
        # probe of the "custom" condition, used by sweeps
        "xi2": 1.0,
        "xibar2": 1.0,
    },
    "fields": {
        "B_dc": None,                # T; null puts the Larmor frequency on the pump
        "psi_deg": 45.0,
        "B_rf_amp": 0.0,             # T
        "B_rf_phase_deg": 0.0,
    },
    "spin": {
        "gamma": TWO_PI * 7.0e9,     # rad/s/T
        "Gamma_hz": 240.0,           # relaxation rate / 2pi
        "pump_rate_hz": 600.0,       # peak pump rate / 2pi
        "pump_duty": 0.1,
        "pump_freq_hz": 20.0e3,
        "pump_mode": "pulse",
        "F_max": 3.0e4,
        "G": 1.4e-6,                 # rad/photon
        "q": 3800.0,                 # s^-1/2
    },
    "run": {
        "duration": 0.1,             # s per iteration
        "dt": None,                  # null: 200 steps per pump period
        "decimation": None,          # null: half a pump period
        "warmup": None,              # null: 12 relaxation times
        "n_iterations": 50,
        "seed": 0,
        "paired": True,              # same noise streams for every condition
    },
    "analysis": {
        "bins_per_decade": 20,
        "fmin": None,
        "fmax": 10.0e3,
        "mask": [],                  # list of [f_lo, f_hi] Hz excluded from fits
        "level": 0.68,
        "conditions": ["coherent", "squeezed", "antisqueezed"],
        "test_freqs": [10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0, 8000.0],
        "test_amplitude": None,      # T; null: a fraction of the linear-regime bound
        "test_amplitude_fraction": 0.3,
        "tone_duration": 1.0,        # s per tone record
        "sensitivity_iterations": 4,
        "r0_seeds": 8,
    },
    "outputs": {
        "directory": "out",
    },
}

# keys that do not change numeric results and are left out of the hash
_UNHASHED = ("outputs",)


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.data = _merge(DEFAULTS, self.data)
        self.validate()

    # --- construction -------------------------------------------------

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        return cls(raw)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)

    # --- paths ----------------------------------------------------------

    def get(self, path: str):
        node = self.data
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unresolvable parameter path {path!r}")
            node = node[part]
        return node

    def with_value(self, path: str, value) -> "ExperimentConfig":
        current = self.get(path)
        if isinstance(current, (dict, list)):
            raise ConfigError(f"{path!r} is not a scalar field")
        data = copy.deepcopy(self.data)
        node = data
        parts = path.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
        return ExperimentConfig(data)

    def check_scalar_path(self, path: str):
        if isinstance(self.get(path), (dict, list)):
            raise ConfigError(f"{path!r} is not a scalar field")

    # --- validation and hashing -----------------------------------------

    def validate(self):
        try:
            ctx = self.context()
            for cond in self.data["analysis"]["conditions"]:
                ctx.probe(cond)
            self.custom_probe()
            for lo_hi in self.data["analysis"]["mask"]:
                lo, hi = lo_hi
                if not lo < hi:
                    raise ValueError(f"mask band {lo_hi} is empty")
            if int(self.data["run"]["n_iterations"]) < 1:
                raise ValueError("n_iterations must be >= 1")
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def hash(self) -> str:
        payload = {k: v for k, v in self.data.items() if k not in _UNHASHED}
        blob = json.dumps(payload, sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # --- simulation objects ---------------------------------------------

    def spin_params(self):
        from .spin_sim import SpinParams
        s = self.data["spin"]
        return SpinParams(
            gamma=float(s["gamma"]), Gamma=TWO_PI * float(s["Gamma_hz"]),
            omega_p=TWO_PI * float(s["pump_freq_hz"]),
            pump_rate=TWO_PI * float(s["pump_rate_hz"]), pump_duty=float(s["pump_duty"]),
            F_max=float(s["F_max"]), G=float(s["G"]), q=float(s["q"]),
            pump_mode=str(s["pump_mode"]),
        )

    def field_config(self):
        from .spin_sim import FieldConfig
        f = self.data["fields"]
        params = self.spin_params()
        B_dc = params.omega_p / params.gamma if f["B_dc"] is None else float(f["B_dc"])
        return FieldConfig(B_dc=B_dc, psi=math.radians(float(f["psi_deg"])),
                           B_rf_amp=float(f["B_rf_amp"]),
                           B_rf_phase=math.radians(float(f["B_rf_phase_deg"])))

    def custom_probe(self):
        from .probe_noise import ProbeParams
        p = self.data["probe"]
        return ProbeParams(float(p["photon_flux"]), float(p["xi2"]), float(p["xibar2"]))

    def context(self):
        from .pipeline import SimContext
        r, a, p = self.data["run"], self.data["analysis"], self.data["probe"]
        opt = lambda v: None if v is None else float(v)  # noqa: E731
        return SimContext(
            fields=self.field_config(), params=self.spin_params(),
            photon_flux=float(p["photon_flux"]),
            squeezing_db=float(p["squeezing_db"]), antisqueezing_db=float(p["antisqueezing_db"]),
            duration=float(r["duration"]), dt_=opt(r["dt"]),
            decimation_=None if r["decimation"] is None else int(r["decimation"]),
            n_iterations=int(r["n_iterations"]), seed=int(r["seed"]),
            warmup_=opt(r["warmup"]), fmin=opt(a["fmin"]), fmax=opt(a["fmax"]),
            mask=tuple(tuple(float(x) for x in band) for band in a["mask"]),
            bins_per_decade=int(a["bins_per_decade"]), paired=bool(r["paired"]),
            custom=(float(p["xi2"]), float(p["xibar2"])),
        )


def load_config(path=None) -> ExperimentConfig:
    return ExperimentConfig() if path is None else ExperimentConfig.from_file(path)
