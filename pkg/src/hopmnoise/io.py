"""Plain columnar text output with '#'-prefixed headers."""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from . import __version__


def write_columns(path, columns: dict, units: dict | None = None,
                  header: dict | None = None, fmt: str = "%.10e"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    units = units or {}
    names = list(columns)
    data = np.column_stack([np.asarray(columns[k], dtype=float) for k in names])
    lines = [f"# tool_version: {__version__}"]
    for key, value in (header or {}).items():
        lines.append(f"# {key}: {value}")
    lines.append("# columns: " + " ".join(f"{k}[{units.get(k, '1')}]" for k in names))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        np.savetxt(fh, data, fmt=fmt)


def read_header(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition(":")
            out[key.strip()] = value.strip()
    return out


def read_columns(path) -> dict:
    header = read_header(path)
    names = [c.split("[")[0] for c in header["columns"].split()]
    with warnings.catch_warnings():
        # a header-only file (e.g. an empty sweep) is a valid empty table
        warnings.simplefilter("ignore", UserWarning)
        data = np.loadtxt(path, comments="#", ndmin=2)
    if data.size == 0:
        return {name: np.empty(0) for name in names}
    return {name: data[:, i] for i, name in enumerate(names)}


def write_records(path, rows: list[dict], header: dict | None = None):
    """Key-value report: one whitespace-separated row per record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0]) if rows else []
    lines = [f"# tool_version: {__version__}"]
    for key, value in (header or {}).items():
        lines.append(f"# {key}: {value}")
    lines.append("# columns: " + " ".join(keys))
    for row in rows:
        lines.append(" ".join(_fmt(row[k]) for k in keys))
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "pass" if v else "fail"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10e}"
    return str(v)
