"""CSV writing and reading with fixed column schemas."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.17g"


def write_csv(path, columns, data, meta=None):
    """Write equally long 1-d ``data`` arrays under ``columns``.

    ``meta`` (a mapping) goes into ``#``-prefixed header comment lines.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = [np.asarray(d) for d in data]
    n = arrays[0].shape[0]
    if any(a.shape[0] != n for a in arrays):
        raise ValueError("all columns must have the same length")
    with path.open("w", newline="") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key}={value}\n")
        fh.write(",".join(columns) + "\n")
        for row in zip(*arrays):
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT % float(v)


def read_csv(path):
    """Return ``(meta, {column: array})`` from a file written by :func:`write_csv`."""
    meta = {}
    rows = []
    with Path(path).open() as fh:
        lines = [ln for ln in fh if ln.strip()]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            key, _, value = ln[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        else:
            body.append(ln)
    reader = csv.reader(body)
    header = next(reader)
    rows = [[float(x) for x in r] for r in reader]
    arr = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return meta, {name: arr[:, i] for i, name in enumerate(header)}
