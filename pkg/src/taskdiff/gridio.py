"""Bit-exact file formats: grid files, run manifests, CSV reports.

Grid format: one ASCII header line ``GRID <rows> <cols>\\n`` followed by the
row-major little-endian IEEE-754 float64 payload.  Round trips are bit exact
and trivially parseable from any language.
"""

import csv
import hashlib
import json
import os

import numpy as np

CSV_SCHEMA_VERSION = 1

STATS_COLUMNS = [
    "method",
    "bias_vs_truth",
    "std",
    "bias_vs_posterior_mean",
    "wall_time_s",
    "forward_calls_setup",
    "adjoint_calls_setup",
    "forward_calls_stepping",
    "adjoint_calls_stepping",
    "n_samples",
    "n_redrawn",
    "n_failed",
]


def write_grid(path, array) -> None:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2:
        raise ValueError("grid files store 2-d arrays")
    rows, cols = array.shape
    with open(path, "wb") as fh:
        fh.write(f"GRID {rows} {cols}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != b"GRID":
            raise ValueError(f"not a grid file: {path}")
        rows, cols = int(header[1]), int(header[2])
        payload = fh.read(8 * rows * cols)
    if len(payload) != 8 * rows * cols:
        raise ValueError(f"truncated grid file: {path}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def check_overwrite(out_dir, cfg_hash: str, force: bool) -> None:
    """Refuse to overwrite a run made from a different config unless forced."""
    manifest_path = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        return
    previous = read_manifest(manifest_path)
    if previous.get("config_hash") != cfg_hash and not force:
        raise FileExistsError(
            f"{out_dir} holds results for a different config "
            f"({previous.get('config_hash', '?')[:12]}); pass --force to overwrite"
        )


def write_stats_csv(path, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=STATS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in STATS_COLUMNS})


def write_csv(path, columns: list, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)
