"""Flat binary and CSV serialization for ensembles and process fields.

Ensemble layout (little-endian): magic ``SBSDENS1``; int64 seed, n_paths,
n_steps, dim; float64 grid nodes; float64 increments row-major as
``(n_paths, n_steps, dim)``.

Field file layout: magic ``SBSDFLD1``; the ensemble header (seed, n_paths,
n_steps, nodes; no increments); int64 field count; per field an int64 name
length, UTF-8 name, int64 ndim, int64 shape entries and float64 data.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .paths import AdaptedProcess, PathEnsemble, TimeGrid

ENSEMBLE_MAGIC = b"SBSDENS1"
FIELDS_MAGIC = b"SBSDFLD1"
_I64 = struct.Struct("<q")


def _write_i64(fh, *values):
    for v in values:
        fh.write(_I64.pack(int(v)))


def _read_i64(fh, count=1):
    out = [_I64.unpack(fh.read(8))[0] for _ in range(count)]
    return out if count > 1 else out[0]


def _read_f64(fh, count: int) -> np.ndarray:
    buf = fh.read(8 * count)
    if len(buf) != 8 * count:
        raise ValueError("truncated file")
    return np.frombuffer(buf, dtype="<f8").astype(float)


def save_ensemble(ensemble: PathEnsemble, path) -> None:
    with open(path, "wb") as fh:
        fh.write(ENSEMBLE_MAGIC)
        _write_i64(fh, ensemble.seed, ensemble.n_paths, ensemble.grid.n_steps, ensemble.dim)
        fh.write(np.ascontiguousarray(ensemble.grid.nodes, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ensemble.increments, dtype="<f8").tobytes())


def load_ensemble(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        if fh.read(8) != ENSEMBLE_MAGIC:
            raise ValueError(f"{path}: not an ensemble file")
        seed, n_paths, n_steps, dim = _read_i64(fh, 4)
        nodes = _read_f64(fh, n_steps + 1)
        inc = _read_f64(fh, n_paths * n_steps * dim).reshape(n_paths, n_steps, dim)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return PathEnsemble(TimeGrid.from_nodes(nodes), n_paths, dim, inc, seed)


def save_fields(ensemble: PathEnsemble, fields: Dict[str, np.ndarray], path) -> None:
    """Write named per-path arrays (first axis ``n_paths``) next to the grid header."""
    with open(path, "wb") as fh:
        fh.write(FIELDS_MAGIC)
        _write_i64(fh, ensemble.seed, ensemble.n_paths, ensemble.grid.n_steps)
        fh.write(np.ascontiguousarray(ensemble.grid.nodes, dtype="<f8").tobytes())
        _write_i64(fh, len(fields))
        for name in sorted(fields):
            arr = np.ascontiguousarray(fields[name], dtype="<f8")
            raw = name.encode("utf-8")
            _write_i64(fh, len(raw))
            fh.write(raw)
            _write_i64(fh, arr.ndim, *arr.shape)
            fh.write(arr.tobytes())


def load_fields(path) -> dict:
    """Return ``{"seed", "n_paths", "nodes", "fields": {name: array}}``."""
    with open(path, "rb") as fh:
        if fh.read(8) != FIELDS_MAGIC:
            raise ValueError(f"{path}: not a field file")
        seed, n_paths, n_steps = _read_i64(fh, 3)
        nodes = _read_f64(fh, n_steps + 1)
        fields = {}
        for _ in range(_read_i64(fh)):
            name = fh.read(_read_i64(fh)).decode("utf-8")
            ndim = _read_i64(fh)
            shape = tuple(_read_i64(fh, ndim)) if ndim > 1 else ((_read_i64(fh),) if ndim == 1 else ())
            fields[name] = _read_f64(fh, int(np.prod(shape))).reshape(shape)
    return {"seed": seed, "n_paths": n_paths, "nodes": nodes, "fields": fields}


def process_to_csv(process: AdaptedProcess, path, max_paths=None) -> None:
    """Columns ``path_id, node_index, c0, c1, ...`` (components flattened)."""
    v = process.values
    n = v.shape[0] if max_paths is None else min(int(max_paths), v.shape[0])
    flat = v[:n].reshape(n, v.shape[1], -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "node_index"] + [f"c{j}" for j in range(flat.shape[2])])
        for p in range(n):
            for i in range(flat.shape[1]):
                w.writerow([p, i] + [repr(float(x)) for x in flat[p, i]])


def read_process_csv(path) -> np.ndarray:
    """Inverse of :func:`process_to_csv`; returns ``(n_paths, n_nodes, n_components)``."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n_paths = int(rows[:, 0].max()) + 1
    n_nodes = int(rows[:, 1].max()) + 1
    return rows[:, 2:].reshape(n_paths, n_nodes, -1)


def write_table(path, rows: list) -> None:
    """Write a list of flat dicts as CSV; columns in first-seen order."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    columns: list = []
    for r in rows:
        for k in r:
            if k not in columns:
                columns.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in columns})


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
