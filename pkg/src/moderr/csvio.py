"""CSV persistence with a reproducibility contract.

Every table writes with 17 significant digits (round-trip exact for
doubles), a plain header row, Unix newlines and no timestamps, so a
rerun with the same configuration and seed produces byte-identical
files.  Complex-valued columns split into re_/im_ pairs.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

FLOAT_FMT = "%.17g"


def write_table(path, columns):
    """Write named columns (dict of name -> 1-d array) as CSV."""
    names = list(columns.keys())
    arrays = [np.asarray(columns[name]) for name in names]
    length = arrays[0].shape[0]
    if any(a.shape != (length,) for a in arrays):
        raise ConfigurationError("all columns must be equal-length vectors")
    out_names = []
    out_cols = []
    for name, arr in zip(names, arrays):
        if np.iscomplexobj(arr):
            out_names.extend([f"re_{name}", f"im_{name}"])
            out_cols.extend([arr.real, arr.imag])
        elif arr.dtype.kind in ("U", "S", "O"):
            out_names.append(name)
            out_cols.append(arr.astype(str))
        else:
            out_names.append(name)
            out_cols.append(arr.astype(float))

    def fmt(value):
        return FLOAT_FMT % value if isinstance(value, float) else str(value)

    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(out_names) + "\n")
        for i in range(length):
            fh.write(",".join(fmt(col[i]) for col in out_cols) + "\n")


def read_table(path):
    """Read a CSV written by :func:`write_table`; returns dict of arrays."""
    with open(path, "r") as fh:
        header = fh.readline().strip()
        if not header:
            raise ConfigurationError(f"{path} has no header row")
        names = header.split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    out = {}
    for j, name in enumerate(names):
        col = [row[j] for row in rows]
        try:
            out[name] = np.array(col, dtype=float)
        except ValueError:
            out[name] = np.array(col)
    return out


def write_trajectory(path, traj):
    """Trajectory CSV: t, x_0..x_{d-1}; complex states split re_/im_."""
    columns = {"t": traj.times}
    states = traj.states
    for j in range(states.shape[1]):
        columns[f"x_{j}"] = states[:, j]
    write_table(path, columns)


def write_observations(path, times, values):
    columns = {"t": np.asarray(times)}
    values = np.asarray(values)
    for j in range(values.shape[1]):
        columns[f"v_{j}"] = values[:, j]
    write_table(path, columns)
