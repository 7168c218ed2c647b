"""Result files: metrics CSV and the binary state dump."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .engine import MetricsRecord

STATE_MAGIC = b"PSGP"
_HEADER = struct.Struct("<4sIQ")  # magic, n, d: 16 bytes


def write_metrics_csv(path: str | Path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsRecord.FIELDS)
        for r in records:
            w.writerow([r.k] + [repr(float(v)) for v in r.row()[1:]])


def read_metrics_csv(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(k=int(r["k"]), **{f: float(r[f]) for f in MetricsRecord.FIELDS[1:]})
            for r in rows]


def dump_state(path: str | Path, Z: np.ndarray) -> None:
    """Write ``(n, d)`` states as a 16-byte header followed by little-endian float64 values."""
    Z = np.asarray(Z, dtype="<f8")
    if Z.ndim != 2:
        raise ValueError("state must be a 2-d array")
    n, d = Z.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STATE_MAGIC, n, d))
        fh.write(np.ascontiguousarray(Z).tobytes())


def load_state(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, n, d = _HEADER.unpack_from(raw)
    if magic != STATE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n * d:
        raise ValueError(f"{path}: expected {n * d} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(n, d).astype(float)
