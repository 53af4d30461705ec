"""CSV readers and writers for paths, moment tracks, ensembles and reports.

Every file may start with ``#`` comment lines (provenance headers); numbers
are written with 17 significant digits so that a round trip is exact.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path as FsPath

import numpy as np

from .model import ModelError, Path, make_dyadic_grid


def fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(file, header, rows, comments=()) -> None:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    FsPath(file).write_text(buf.getvalue())


def read_csv(file):
    """Return ``(comments, header, rows)`` with rows as lists of strings."""
    comments, data = [], []
    for line in FsPath(file).read_text().splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif line.strip():
            data.append(line)
    reader = csv.reader(data)
    header = [h.strip() for h in next(reader)]
    return comments, header, [r for r in reader]


def write_path(path: Path, file, prefix: str = "x", comments=()) -> None:
    header = ["t"] + [f"{prefix}{k + 1}" for k in range(path.dim)]
    rows = np.column_stack([path.grid.times, path.values])
    write_csv(file, header, rows, comments)


def read_path(file) -> Path:
    _, header, rows = read_csv(file)
    if not header or header[0] != "t":
        raise ModelError(f"{file}: path CSV must start with a 't' column")
    arr = np.array(rows, dtype=float)
    n_steps = arr.shape[0] - 1
    level = int(round(np.log2(n_steps))) if n_steps > 0 else -1
    if n_steps < 1 or 2 ** level != n_steps:
        raise ModelError(f"{file}: {arr.shape[0]} rows is not a dyadic grid")
    grid = make_dyadic_grid(level, float(arr[-1, 0]))
    if np.abs(arr[:, 0] - grid.times).max() > 1e-12 * grid.T:
        raise ModelError(f"{file}: times are not the dyadic grid")
    return Path(grid, arr[:, 1:])


def write_track(track, file, comments=()) -> None:
    """``t, mean_1..mean_d, cov_11..cov_dd`` per grid time."""
    d = track.means.shape[1]
    header = (["t"] + [f"mean_{k + 1}" for k in range(d)]
              + [f"cov_{i + 1}{j + 1}" for i in range(d) for j in range(d)])
    rows = np.column_stack([track.times, track.means, track.covs.reshape(len(track.times), -1)])
    write_csv(file, header, rows, comments)


def read_track(file):
    """Return ``(comments, times, means, covs)`` from a track CSV."""
    comments, header, rows = read_csv(file)
    arr = np.array(rows, dtype=float)
    d = sum(h.startswith("mean_") for h in header)
    return comments, arr[:, 0], arr[:, 1:1 + d], arr[:, 1 + d:].reshape(-1, d, d)


def write_ensemble(ensemble, first_stream: int, file, comments=()) -> None:
    """``stream_id, log_weight, x_T_1..x_T_d`` per ensemble member."""
    d = ensemble.paths.shape[2]
    header = ["stream_id", "log_weight"] + [f"x_T_{k + 1}" for k in range(d)]
    M = len(ensemble)
    rows = ([first_stream + k, ensemble.log_weights[k], *ensemble.paths[k, -1]]
            for k in range(M))
    write_csv(file, header, rows, comments)


REPORT_COLUMNS = ["label", "kl_to_reference", "expected_energy", "total", "gibbs_gap",
                  "gap_predicted", "mc_se"]


def write_reports(reports, file, comments=()) -> None:
    rows = [[r.label, r.kl_to_reference, r.expected_energy, r.total, r.gibbs_gap,
             r.gap_predicted, r.gap_standard_error] for r in reports]
    write_csv(file, REPORT_COLUMNS, rows, comments)


def write_plot_data(xs, ys, file, comments=()) -> None:
    write_csv(file, ["x", "y"], zip(xs, ys), comments)
