"""Deterministic on-disk formats: a flat binary array container and CSV helpers.

The container format (magic ``DLAR1``) exists because reruns must reproduce
output files byte-for-byte; zip-based containers embed timestamps.  Layout:

    line 1: b"DLAR1\\n"
    line 2: UTF-8 JSON header + b"\\n", with sorted keys, containing the
            caller's metadata plus "arrays": [{"name", "shape"}, ...]
    then:   for each listed array in order, its little-endian float64
            entries in row-major (C) order, with no padding between arrays.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

MAGIC = b"DLAR1\n"


def save_arrays(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.astype("<f8", copy=False).tobytes(order="C"))
    full = dict(header)
    full["arrays"] = entries
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(full, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a DLAR1 array container")
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in header.pop("arrays"):
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, arrays


def format_float(x: float) -> str:
    """Shortest round-trip decimal form; stable across runs."""
    return repr(float(x))


def write_csv(path, fieldnames: list[str], rows: list[dict]) -> None:
    """CSV with fixed newline and shortest round-trip float formatting."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: format_float(v) if isinstance(v, float) else v
                             for k, v in row.items()})


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
