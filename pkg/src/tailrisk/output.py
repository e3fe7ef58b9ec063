"""Deterministic result files and their SHA-256 manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .experiments import RunResult

SERIES_COLUMNS = ("t", "reward", "moving_avg", "phase")
SWEEP_COLUMNS = ("epsilon", "tail_risk", "mu_p_error", "ratio")


class OutputError(OSError):
    pass


def _plain(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def to_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def atomic_write(path: Path, text: str) -> str:
    """Write via a temporary file in the same directory and rename; returns the SHA-256."""
    data = text.encode("utf-8")
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e.strerror or e}") from e
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as e:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise OutputError(f"cannot write {path}: {e.strerror or e}") from e
    return hashlib.sha256(data).hexdigest()


def render(result: RunResult) -> dict[str, str]:
    """File name to content for every output of ``result``, manifest excluded."""
    files = {"summary.json": to_json({"provenance": result.provenance, **result.summary})}
    for name, rows in sorted(result.series.items()):
        files[f"series_{name}.csv"] = to_csv(rows, SERIES_COLUMNS)
    if result.sweep is not None:
        files["prop1_sweep.csv"] = to_csv(result.sweep, SWEEP_COLUMNS)
    if result.shift is not None:
        files["shift_report.json"] = to_json({"provenance": result.provenance, **result.shift})
    return files


def write_results(result: RunResult, out_dir: str | Path) -> dict:
    """Write every output file and ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create {out}: {e.strerror or e}") from e
    hashes = {name: atomic_write(out / name, text) for name, text in render(result).items()}
    manifest = {"provenance": result.provenance, "files": {k: {"sha256": v} for k, v in sorted(hashes.items())}}
    atomic_write(out / "manifest.json", to_json(manifest))
    return manifest
