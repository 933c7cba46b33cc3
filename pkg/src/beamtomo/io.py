"""Artifact file formats: CSV tables and flat float64 binaries with JSON sidecars."""

import json
import os

import numpy as np


def write_field_binary(path, values, h=None, dt=None, T=None, kind=""):
    """Little-endian float64 row-major binary plus a JSON sidecar."""
    arr = np.ascontiguousarray(values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())
    meta = {"dims": list(arr.shape), "h": h, "dt": dt, "T": T, "kind": kind}
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_field_binary(path):
    with open(path + ".json") as fh:
        meta = json.load(fh)
    arr = np.fromfile(path, dtype="<f8").reshape(meta["dims"])
    return arr, meta


def write_csv(path, header, rows, fmt="%.17g"):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt % v if isinstance(v, float)
                              else str(v) for v in row) + "\n")


def field_csv_rows(xs, ts, values):
    """(x, t, value) rows for a (nt+1, nx+1) table."""
    rows = []
    for i, t in enumerate(ts):
        for j, x in enumerate(xs):
            rows.append((float(x), float(t), float(values[i, j])))
    return rows


def write_report(path, report):
    """Deterministic JSON report (sorted keys, newline-terminated)."""
    with open(path, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1, default=_coerce)
        fh.write("\n")


def _coerce(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj)}")


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
