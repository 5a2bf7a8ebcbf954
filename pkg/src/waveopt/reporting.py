"""Deterministic CSV/manifest writers and the matplotlib report figures.

CSV payloads contain only quantities that are bitwise reproducible between
reruns of the same configuration; wall-clock timings go to the manifest
sidecar instead.  Every CSV gets a ``<name>.manifest`` neighbour recording
the configuration, its hash, the package version and mesh checksums.
"""

from __future__ import annotations

import csv
import hashlib
from importlib import metadata

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "format_value",
    "write_csv",
    "write_manifest",
    "convergence_figure",
    "sweep_figure",
]

SOLVER_COLUMN = {
    "sc": "SC-PCG",
    "sc-cg": "SC-CG",
    "sc-lumped": "SC-PCG-lumped",
    "sc-amg": "SC-PCG-AMG",
    "sc-nested": "SC-PCG-nested",
    "bp": "BP-PCG",
    "gmres": "PGMRES",
}


def package_version():
    try:
        return metadata.version("waveopt")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "unknown"


def format_value(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def config_hash(config):
    canon = "\n".join(f"{k}={config[k]}" for k in sorted(config))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def write_manifest(path, config, extras=None):
    """Sidecar with the run configuration, its hash, and free-form extras."""
    lines = [f"config_hash = {config_hash(config)}",
             f"waveopt_version = {package_version()}"]
    for k in sorted(config):
        lines.append(f"{k} = {config[k]}")
    for k, v in (extras or {}).items():
        lines.append(f"{k} = {v}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def convergence_rows_to_csv(rows, solvers):
    header = ["Level", "Vertices", "Dofs", "L2Error", "EOC"]
    header += [SOLVER_COLUMN.get(s, s) for s in solvers]
    data = []
    for row in rows:
        rec = [row.level, row.n_vertices, row.n_dofs, row.error, row.eoc]
        rec += [row.iterations.get(s) for s in solvers]
        data.append(rec)
    return header, data


def convergence_figure(path, series, title=None, guides=()):
    """Log-log error vs vertex count, one line per labelled series.

    ``guides`` holds (slope_in_h, label) pairs drawn as dashed references,
    with h read as N^(-1/(d+1)); the offset anchors at the last data point of
    the first series.
    """
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    for label, nvec, evec in series:
        ax.loglog(nvec, evec, marker="o", markersize=3.5, label=label)
    if series and guides:
        n0 = np.asarray(series[0][1], dtype=float)
        e0 = np.asarray(series[0][2], dtype=float)
        for slope, label, dim in guides:
            ref = e0[-1] * (n0 / n0[-1]) ** (-slope / (dim + 1.0))
            ax.loglog(n0, ref, "--", linewidth=0.9, label=label)
    ax.set_xlabel("N (vertices)")
    ax.set_ylabel(r"$\|y_h - y_d\|_{L^2(Q)}$")
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(True, which="both", alpha=0.25)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def sweep_figure(path, rows, slopes, title=None):
    """The rho-sweep triptych: three error quantities against rho, log-log."""
    rhos = np.array([r[0] for r in rows])
    names = [(1, r"$\|y_d-y_\rho\|_{L^2}$", "l2"),
             (2, r"$|y_d-y_\rho|_{H^1}$", "h1"),
             (3, r"$|p_\rho|_{H^1}$", "p_h1")]
    fig, ax = plt.subplots(figsize=(5.2, 4.0))
    for col, label, key in names:
        vals = np.array([r[col] for r in rows])
        line, = ax.loglog(rhos, vals, marker="o", markersize=3.5,
                          label=f"{label} (slope {slopes[key]:.3f})")
        ref = vals[0] * (rhos / rhos[0]) ** slopes[key]
        ax.loglog(rhos, ref, "--", linewidth=0.8, color=line.get_color())
    ax.set_xlabel(r"$\rho$")
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(True, which="both", alpha=0.25)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
