"""CSV / JSON contract files written and read by the command-line stages.

Floats are written with ``repr`` (shortest round-trip form), so identical
runs give byte-identical files and reading a file back is exact.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import MissingInput
from .stats import BiasLabel, BiasReport

PROFILE_COLUMNS = ["user_id", "stage", "window", "i", "alpha"]
DEVIATION_COLUMNS = ["user_id", "window", "i", "delta"]
NORM_COLUMNS = ["i", "alpha"]
REPORT_COLUMNS = ["user_id", "label", "beta1", "p", "n_obs", "dof"]
EXCLUDED_COLUMNS = ["user_id", "reason"]

MANIFEST_NAME = "manifest.json"
LAYOUT_VERSION = 1


def _num(x: float) -> str:
    return repr(float(x))


def _write_rows(path, columns: list[str], rows: Iterable[Iterable]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _read_rows(path, columns: list[str]) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing input file: {path}")
    with path.open() as fh:
        reader = csv.DictReader(fh)
        missing = set(columns) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return list(reader)


# -- attention profiles and deviations --------------------------------------

def write_profiles(path, profiles: Iterable) -> None:
    """``profiles``: objects with ``user_id``, ``stage`` and ``alphas`` (W, m)."""
    rows = []
    for prof in profiles:
        for w, row in enumerate(np.asarray(prof.alphas)):
            rows.extend([prof.user_id, prof.stage, w, i + 1, _num(a)] for i, a in enumerate(row))
    _write_rows(path, PROFILE_COLUMNS, rows)


def read_profiles(path) -> dict[tuple[str, str], np.ndarray]:
    """(user_id, stage) -> (W, m) array."""
    cells: dict[tuple[str, str], dict[tuple[int, int], float]] = defaultdict(dict)
    for r in _read_rows(path, PROFILE_COLUMNS):
        cells[(r["user_id"], r["stage"])][(int(r["window"]), int(r["i"]))] = float(r["alpha"])
    return {k: _grid(v) for k, v in cells.items()}


def write_deviations(path, surfaces: Iterable) -> None:
    rows = []
    for s in surfaces:
        for w, row in enumerate(np.asarray(s.delta)):
            rows.extend([s.user_id, w, i + 1, _num(d)] for i, d in enumerate(row))
    _write_rows(path, DEVIATION_COLUMNS, rows)


def read_deviations(path) -> dict[str, np.ndarray]:
    cells: dict[str, dict[tuple[int, int], float]] = defaultdict(dict)
    for r in _read_rows(path, DEVIATION_COLUMNS):
        cells[r["user_id"]][(int(r["window"]), int(r["i"]))] = float(r["delta"])
    return {k: _grid(v) for k, v in cells.items()}


def _grid(cells: Mapping[tuple[int, int], float]) -> np.ndarray:
    W = max(w for w, _ in cells) + 1
    m = max(i for _, i in cells)
    out = np.full((W, m), np.nan)
    for (w, i), v in cells.items():
        out[w, i - 1] = v
    if np.isnan(out).any():
        raise ValueError("profile grid has missing (window, position) cells")
    return out


LINES_COLUMNS = ["user_id", "label", "i", "delta"]


def write_lines(path, curves: Mapping[str, np.ndarray], labels: Mapping[str, BiasLabel]) -> None:
    """Data behind the deviation-lines figure: one row per (user, visit position)."""
    rows = []
    for uid in sorted(curves):
        label = BiasLabel(labels.get(uid, BiasLabel.INCONCLUSIVE)).value
        rows.extend([uid, label, i + 1, _num(d)] for i, d in enumerate(curves[uid]))
    _write_rows(path, LINES_COLUMNS, rows)


def write_norm(path, alpha: np.ndarray) -> None:
    _write_rows(path, NORM_COLUMNS, ([i + 1, _num(a)] for i, a in enumerate(alpha)))


def read_norm(path) -> np.ndarray:
    rows = _read_rows(path, NORM_COLUMNS)
    return np.array([float(r["alpha"]) for r in sorted(rows, key=lambda r: int(r["i"]))])


# -- reports ----------------------------------------------------------------

def write_bias_report(path, reports: Mapping[str, BiasReport | None]) -> None:
    """One row per user in id order; users without a report are Inconclusive with empty statistics."""
    rows = []
    for uid in sorted(reports):
        rep = reports[uid]
        if rep is None:
            rows.append([uid, BiasLabel.INCONCLUSIVE.value, "", "", 0, 0])
        else:
            r = rep.result
            rows.append([uid, rep.label.value, _num(r.beta1), _num(r.p_beta1), r.n_obs, r.dof])
    _write_rows(path, REPORT_COLUMNS, rows)


def read_bias_report(path) -> dict[str, dict]:
    out = {}
    for r in _read_rows(path, REPORT_COLUMNS):
        out[r["user_id"]] = {
            "label": BiasLabel(r["label"]),
            "beta1": float(r["beta1"]) if r["beta1"] else None,
            "p": float(r["p"]) if r["p"] else None,
            "n_obs": int(r["n_obs"]),
            "dof": int(r["dof"]),
        }
    return out


def read_labels_only(path) -> dict[str, BiasLabel]:
    return {u: r["label"] for u, r in read_bias_report(path).items()}


def write_excluded(path, excluded: Mapping[str, str]) -> None:
    _write_rows(path, EXCLUDED_COLUMNS, ([u, excluded[u]] for u in sorted(excluded)))


def read_excluded(path) -> dict[str, str]:
    return {r["user_id"]: r["reason"] for r in _read_rows(path, EXCLUDED_COLUMNS)}


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- manifest ---------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def update_manifest(out_dir, artifacts: Iterable[str], stage: str, info: dict | None = None) -> dict:
    """Record ``artifacts`` (paths relative to ``out_dir``) with content hashes."""
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST_NAME
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.setdefault("layout_version", LAYOUT_VERSION)
    files = manifest.setdefault("artifacts", {})
    for rel in artifacts:
        files[rel] = {"sha256": sha256_file(out_dir / rel), "bytes": (out_dir / rel).stat().st_size,
                      "stage": stage}
    if info:
        manifest.setdefault("stages", {})[stage] = info
    write_json(path, manifest)
    return manifest
