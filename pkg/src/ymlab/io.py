"""Time-series CSV, run summaries and binary checkpoints.

Checkpoint layout (all little-endian)::

    magic      8 bytes   b"YMLABCK\\0"
    version    u32
    kind       u8        0 connection, 1 metric (payload holds H then H0)
    n          u32
    sizes      n x u32
    spacing    f64
    rank       u32
    scalar     u8        0 real, 1 complex
    twist g    n*r*r complex as (re, im) f64 pairs
    chern      n*n i64
    config     u32 length + UTF-8 INI text
    scalars    t, dt, dissipation as f64; step, accepted, rejected as u64
    extra      u32 length + UTF-8 JSON (monitor state and the like)
    payload    u32 field count, then per field u64 value count + f64 values
               in index order (complex fields interleave re, im)
    crc32      u32 over everything above

Floats are stored as raw IEEE doubles, so a save/load round trip is exact.
"""
from __future__ import annotations

import csv
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lattice import LatticeGeometry, TwistCocycle

MAGIC = b"YMLABCK\x00"
VERSION = 1
KINDS = ("connection", "metric")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


# -- CSV --------------------------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def csv_columns(records: list[dict]) -> list[str]:
    cols: list[str] = []
    for rec in records:
        for k in rec:
            if k not in cols:
                cols.append(k)
    if "step" in cols:
        cols.remove("step")
        cols.insert(0, "step")
    return cols


def write_csv(path, records: list[dict], columns: list[str] | None = None,
              append: bool = False) -> list[str]:
    """Write records with 17 significant digits; returns the column order used."""
    columns = columns or csv_columns(records)
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(columns)
        for rec in records:
            w.writerow([format_value(rec[c]) if c in rec else "" for c in columns])
    return columns


def read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [], []
    header = rows[0]
    out = []
    for row in rows[1:]:
        rec = {}
        for k, v in zip(header, row):
            if v == "":
                continue
            rec[k] = int(v) if k == "step" else float(v)
        out.append(rec)
    return header, out


def truncate_csv(path, before_step: int) -> list[str]:
    """Drop the rows with step >= before_step, keeping the header; returns the header."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.readlines()
    header = next(csv.reader([lines[0]]))
    idx = header.index("step")
    keep = [lines[0]]
    for line in lines[1:]:
        row = next(csv.reader([line]))
        if int(row[idx]) < before_step:
            keep.append(line)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.writelines(keep)
    return header


def write_summary(path, summary: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# -- checkpoints ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str
    geometry: LatticeGeometry
    twist: TwistCocycle
    fields: list[np.ndarray]
    config_text: str = ""
    t: float = 0.0
    dt: float = 0.0
    dissipation: float = 0.0
    step: int = 0
    accepted: int = 0
    rejected: int = 0
    extra: dict = field(default_factory=dict)


def _f64(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if np.iscomplexobj(arr):
        arr = arr.astype(np.complex128).view(np.float64)
    return arr.astype("<f8").tobytes()


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(ck: Checkpoint) -> bytes:
    if ck.kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {ck.kind!r}")
    geom, tw = ck.geometry, ck.twist
    parts = [MAGIC, struct.pack("<IB", VERSION, KINDS.index(ck.kind)),
             struct.pack("<I", geom.n), struct.pack(f"<{geom.n}I", *geom.sizes),
             struct.pack("<dIB", geom.spacing, tw.rank, int(tw.complex_kind)),
             _f64(np.asarray(tw.g, dtype=complex)),
             np.asarray(tw.chern, dtype="<i8").tobytes(),
             _text(ck.config_text),
             struct.pack("<dddQQQ", ck.t, ck.dt, ck.dissipation, ck.step, ck.accepted,
                         ck.rejected),
             _text(json.dumps(_jsonable(ck.extra), sort_keys=True)),
             struct.pack("<I", len(ck.fields))]
    for arr in ck.fields:
        if ck.kind == "metric" or ck.twist.complex_kind:
            arr = np.asarray(arr, dtype=np.complex128)
        raw = _f64(arr)
        parts.append(struct.pack("<Q", len(raw) // 8))
        parts.append(raw)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(ck))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes at offset {self.pos}, have {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def text(self) -> str:
        (length,) = self.unpack("<I")
        return self.take(length).decode("utf-8")


def decode_checkpoint(buf: bytes) -> Checkpoint:
    rd = _Reader(buf)
    if rd.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a ymlab checkpoint (bad magic)")
    version, kind = rd.unpack("<IB")
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} is not supported (expected {VERSION})")
    if kind >= len(KINDS):
        raise CheckpointError(f"unknown field kind code {kind}")
    (n,) = rd.unpack("<I")
    sizes = rd.unpack(f"<{n}I")
    spacing, rank, scalar = rd.unpack("<dIB")
    g = rd.f64(2 * n * rank * rank).view(np.complex128).reshape(n, rank, rank)
    chern = np.frombuffer(rd.take(8 * n * n), dtype="<i8").astype(np.int64).reshape(n, n)
    config_text = rd.text()
    t, dt, dissipation, step, accepted, rejected = rd.unpack("<dddQQQ")
    extra = json.loads(rd.text())
    (nfields,) = rd.unpack("<I")
    geom = LatticeGeometry(n, tuple(sizes), spacing)
    complex_kind = bool(scalar)
    twist = TwistCocycle(rank, complex_kind, g if complex_kind else g.real.copy(), chern)
    fields = []
    for i in range(nfields):
        (count,) = rd.unpack("<Q")
        raw = rd.f64(count)
        if KINDS[kind] == "connection":
            shape = geom.sizes + (n, rank, rank)
        else:
            shape = geom.sizes + (rank, rank)
        cplx = complex_kind or KINDS[kind] == "metric"
        expected = int(np.prod(shape)) * (2 if cplx else 1)
        if count != expected:
            raise CheckpointError(f"field {i} holds {count} values, expected {expected}")
        fields.append(raw.view(np.complex128).reshape(shape) if cplx else raw.reshape(shape))
    body_end = rd.pos
    (crc,) = rd.unpack("<I")
    if crc != zlib.crc32(buf[:body_end]):
        raise CheckpointError("checkpoint checksum mismatch")
    if rd.pos != len(buf):
        raise CheckpointError(f"{len(buf) - rd.pos} trailing bytes after checkpoint")
    return Checkpoint(KINDS[kind], geom, twist, fields, config_text, t, dt, dissipation,
                      step, accepted, rejected, extra)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
