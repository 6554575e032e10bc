"""Tensor serialization and long-format CSV import.

Binary layout (little endian)::

    b"TNS3" | uint32 I | uint32 J | uint32 K | uint8 has_mask
    float64[I*J*K] values (C order, k fastest)
    uint8[I*J*K]  mask (only if has_mask)
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor3

MAGIC = b"TNS3"
_HEADER = struct.Struct("<4sIIIB")


def dumps(t: Tensor3) -> bytes:
    header = _HEADER.pack(MAGIC, *t.dims, int(t.has_mask))
    body = t.values.astype("<f8").tobytes(order="C")
    if t.has_mask:
        body += t.mask.astype(np.uint8).tobytes(order="C")
    return header + body


def loads(data: bytes) -> Tensor3:
    if len(data) < _HEADER.size:
        raise ValueError("truncated tensor header")
    magic, i, j, k, has_mask = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError("not a TNS3 tensor file")
    n = i * j * k
    expected = _HEADER.size + 8 * n + (n if has_mask else 0)
    if len(data) != expected:
        raise ValueError(f"tensor payload has {len(data)} bytes, expected {expected}")
    off = _HEADER.size
    values = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(i, j, k)
    mask = None
    if has_mask:
        mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=off + 8 * n)
        mask = mask.reshape(i, j, k).astype(bool)
    return Tensor3(values.copy(), mask)


def save(t: Tensor3, path) -> None:
    Path(path).write_bytes(dumps(t))


def load(path) -> Tensor3:
    return loads(Path(path).read_bytes())


def read_long_csv(path, entities=None, metrics=None, n_minutes=None):
    """Build a tensor from ``entity,metric,minute,value`` records.

    Entity and metric order defaults to first appearance. Cells without a
    record are unobserved. Returns ``(tensor, entities, metrics)``.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"entity", "metric", "minute", "value"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for rec in reader:
            rows.append((rec["entity"], rec["metric"], int(rec["minute"]), rec["value"]))
    return from_records(rows, entities, metrics, n_minutes)


def from_records(rows, entities=None, metrics=None, n_minutes=None):
    """Records are ``(entity, metric, minute, value)``; empty value means missing."""
    ent_order = list(entities) if entities is not None else list(dict.fromkeys(r[0] for r in rows))
    met_order = list(metrics) if metrics is not None else list(dict.fromkeys(r[1] for r in rows))
    if n_minutes is None:
        n_minutes = 1 + max(r[2] for r in rows) if rows else 1
    ei = {e: n for n, e in enumerate(ent_order)}
    mi = {m: n for n, m in enumerate(met_order)}
    values = np.zeros((len(ent_order), len(met_order), n_minutes))
    mask = np.zeros(values.shape, dtype=bool)
    for ent, met, minute, value in rows:
        if ent not in ei or met not in mi:
            raise ValueError(f"unknown entity/metric {ent!r}/{met!r}")
        if not 0 <= minute < n_minutes:
            raise ValueError(f"minute {minute} outside [0, {n_minutes})")
        if value == "" or value is None:
            continue
        v = float(value)
        if not np.isfinite(v):
            continue
        values[ei[ent], mi[met], minute] = v
        mask[ei[ent], mi[met], minute] = True
    return Tensor3(values, mask), ent_order, met_order


def write_long_csv(path, t: Tensor3, entities, metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entity", "metric", "minute", "value"])
        obs = t.observed
        for i, ent in enumerate(entities):
            for j, met in enumerate(metrics):
                for k in np.flatnonzero(obs[i, j]):
                    w.writerow([ent, met, int(k), repr(float(t.values[i, j, k]))])
