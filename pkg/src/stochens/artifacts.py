"""On-disk artifact plumbing: manifests, hashes, delimited exports.

Every command output directory is self-describing: a ``manifest.json``
holds the config snapshot, tool version, wall-clock timings, and SHA-256
hashes of the artifacts written next to it.  Loaders verify those hashes
before use and fail naming the offending path.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os

import numpy as np

from . import __version__
from .errors import ArtifactError, ShapeError

__all__ = [
    "sha256_file",
    "write_manifest",
    "verify_artifact_dir",
    "write_json",
    "write_metrics_json",
    "write_kl_json",
    "write_predictions_csv",
    "read_predictions_csv",
    "write_calibration_csv",
    "write_compare_tables",
]

MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(dirpath, config_snapshot: dict, timings: dict) -> None:
    """Hash every artifact in ``dirpath`` and record the run metadata."""
    names = sorted(
        name
        for name in os.listdir(dirpath)
        if name != MANIFEST_NAME and os.path.isfile(os.path.join(dirpath, name))
    )
    manifest = {
        "tool_version": __version__,
        "config": config_snapshot,
        "timings": timings,
        "artifact_hashes": {name: sha256_file(os.path.join(dirpath, name)) for name in names},
    }
    with open(os.path.join(dirpath, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def verify_artifact_dir(dirpath) -> dict:
    """Check artifact hashes against the manifest; returns the manifest.

    Directories without a manifest pass silently (plain input files), but a
    manifest that disagrees with the bytes on disk is an error.
    """
    manifest_path = os.path.join(dirpath, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        return {}
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt manifest: {manifest_path}") from exc
    for name, expected in manifest.get("artifact_hashes", {}).items():
        path = os.path.join(dirpath, name)
        if not os.path.isfile(path):
            raise ArtifactError(f"missing artifact: {path}")
        actual = sha256_file(path)
        if actual != expected:
            raise ArtifactError(f"artifact hash mismatch: {path}")
    return manifest


def write_json(path, payload: dict) -> None:
    """Deterministic JSON bytes: sorted keys, two-space indent, one newline."""
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics_json(path, report) -> None:
    write_json(path, report.to_dict())


def write_kl_json(path, breakdown) -> None:
    write_json(path, breakdown.to_dict())


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_predictions_csv(path, points, probs, entropy, mi) -> None:
    """Grid prediction export: x0,x1,p_class0,...,entropy,mi."""
    points = np.asarray(points)
    probs = np.asarray(probs)
    header = ["x0", "x1"] + [f"p_class{c}" for c in range(probs.shape[1])] + ["entropy", "mi"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(points.shape[0]):
            row = [_fmt(points[i, 0]), _fmt(points[i, 1])]
            row += [_fmt(p) for p in probs[i]]
            row += [_fmt(entropy[i]), _fmt(mi[i])]
            writer.writerow(row)


def read_predictions_csv(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["x0", "x1"] or header[-2:] != ["entropy", "mi"]:
            raise ShapeError(f"{path}:1: unexpected prediction header {header}")
        n_classes = len(header) - 4
        if n_classes < 2:
            raise ShapeError(f"{path}:1: prediction file needs >= 2 class columns")
        points, probs, entropy, mi = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise ShapeError(f"{path}:{lineno}: malformed row {row}") from exc
            if len(vals) != len(header):
                raise ShapeError(f"{path}:{lineno}: expected {len(header)} fields")
            points.append(vals[:2])
            probs.append(vals[2 : 2 + n_classes])
            entropy.append(vals[-2])
            mi.append(vals[-1])
    if not points:
        raise ShapeError(f"{path}: no data rows")
    return {
        "points": np.array(points),
        "probs": np.array(probs),
        "entropy": np.array(entropy),
        "mi": np.array(mi),
    }


def write_calibration_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_confidence", "bin_accuracy", "bin_count"])
        for conf, acc, count in curve:
            writer.writerow([_fmt(conf), _fmt(acc), int(count)])


_TABLE_FIELDS = (
    "accuracy",
    "loss",
    "ece",
    "agreement",
    "variance",
    "odd_auroc",
    "mean_abs_entropy_diff",
    "mean_abs_mi_diff",
)


def write_compare_tables(csv_path, txt_path, rows: list[tuple[str, dict]]) -> None:
    """Consolidated metric table: one row per report, CSV + aligned text."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", *_TABLE_FIELDS])
        for name, report in rows:
            writer.writerow(
                [name]
                + [
                    "" if report.get(f) is None else _fmt(report[f])
                    for f in _TABLE_FIELDS
                ]
            )

    def cell(value):
        return "-" if value is None else f"{value:.4f}"

    headers = ["method", *_TABLE_FIELDS]
    lines = [[name] + [cell(report.get(f)) for f in _TABLE_FIELDS] for name, report in rows]
    widths = [max(len(h), *(len(line[i]) for line in lines)) for i, h in enumerate(headers)]
    with open(txt_path, "w") as fh:
        fh.write("  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip() + "\n")
        fh.write("  ".join("-" * w for w in widths) + "\n")
        for line in lines:
            fh.write("  ".join(v.ljust(w) for v, w in zip(line, widths)).rstrip() + "\n")
