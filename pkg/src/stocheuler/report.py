"""Artifact writers: CSV and JSON tagged with the config hash, plus figures."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DataError  # noqa: E402

NUMERIC_SUFFIXES = (".csv", ".json", ".npy")
MANIFEST = "manifest.json"


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def write_json(path: Path, payload: dict, config_hash: str) -> None:
    body = {"config_hash": config_hash, **_clean(payload)}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, columns: dict, config_hash: str) -> None:
    """Columns of equal length, one header line with the config hash."""
    names = list(columns)
    data = np.column_stack([np.asarray(columns[k], dtype=float) for k in names])
    np.savetxt(path, data, fmt="%.17g", delimiter=",",
               header=f"config_hash={config_hash}\n" + ",".join(names))


def read_csv(path: Path) -> tuple[str, dict]:
    """Inverse of :func:`write_csv`; returns (config_hash, columns)."""
    try:
        with open(path) as fh:
            tag = fh.readline().lstrip("# ").strip()
            names = fh.readline().lstrip("# ").strip().split(",")
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not tag.startswith("config_hash="):
        raise DataError(f"{path} carries no config hash")
    return tag.split("=", 1)[1], {k: data[:, j] for j, k in enumerate(names)}


def numeric_digest(directory: Path) -> dict:
    """SHA-256 of every numeric artifact under ``directory`` (manifest excluded)."""
    d = Path(directory)
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_file() and p.suffix in NUMERIC_SUFFIXES and p.name != MANIFEST:
            out[str(p.relative_to(d))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def orphan_artifacts(directory: Path, config_hash: str) -> list[str]:
    """Numeric files that do not carry ``config_hash``."""
    bad = []
    for p in sorted(Path(directory).rglob("*")):
        if not p.is_file() or p.name == MANIFEST:
            continue
        if p.suffix == ".csv":
            with open(p) as fh:
                if fh.readline().strip() != f"# config_hash={config_hash}":
                    bad.append(str(p))
        elif p.suffix == ".json":
            try:
                if json.loads(p.read_text()).get("config_hash") != config_hash:
                    bad.append(str(p))
            except ValueError:
                bad.append(str(p))
        elif p.suffix == ".npy":
            # arrays are tagged through the json/csv sitting next to them
            if not any(q.suffix in (".json", ".csv") for q in p.parent.iterdir()):
                bad.append(str(p))
    return bad


# ---------------------------------------------------------------- figures

def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def plot_norms(path: Path, t, series: dict, title: str, logy: bool = True) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for name, vals in series.items():
        ax.plot(t, vals, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_title(title)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_bound(path: Path, report) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(report.times, report.lhs, label="measured")
    ax.plot(report.times, report.rhs, "--", label="bound")
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_title(report.name)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_sweep(path: Path, nus, errors, slope: float | None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.loglog(nus, errors, "o-")
    ax.set_xlabel("nu")
    ax.set_ylabel("E(nu)")
    if slope is not None:
        ax.set_title(f"log-log slope {slope:.2f}")
    _save(fig, path)


def plot_field(path: Path, data: np.ndarray, title: str) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(data.T, origin="lower", extent=(0, 1, 0, 1), cmap="RdBu_r")
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    _save(fig, path)


def plot_series(path: Path, x, ys: dict, xlabel: str, title: str, logy: bool = True) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, y in ys.items():
        ax.plot(x, y, "o-", label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    _save(fig, path)
