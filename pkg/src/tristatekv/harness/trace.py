"""Binary attention-trace format.

All integers are little-endian uint32, all weights little-endian float32.

Header (28 bytes)::

    magic     4 bytes  b"TKVA"
    version   u32      1
    n_layers  u32      L
    n_heads   u32      H  (query heads)
    n_kv      u32      G  (KV heads, H % G == 0)
    window    u32      W
    n_records u32

Each record::

    length    u32      bytes that follow (16 + 4*H*Q*K)
    layer_id  u32
    step      u32      0 is the prefill record
    n_queries u32      Q
    n_keys    u32      K
    weights   f32[H][Q][K]  row-major post-softmax attention
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..errors import TraceError

MAGIC = b"TKVA"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
_RECORD = struct.Struct("<5I")
ROW_SUM_SLACK = 1e-4


class TraceShapeError(TraceError):
    """Record shapes are inconsistent with the header or the window."""


@dataclass(frozen=True, eq=False)
class TraceRecord:
    layer_id: int
    step: int
    weights: np.ndarray  # float32 [H][Q][K]


@dataclass
class AttnTrace:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    window: int
    records: list[TraceRecord] = field(default_factory=list)

    def layer_records(self, layer: int) -> list[TraceRecord]:
        return sorted((r for r in self.records if r.layer_id == layer), key=lambda r: r.step)


def write_trace(path: str | Path, trace: AttnTrace) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC, VERSION, trace.n_layers, trace.n_heads, trace.n_kv_heads,
                trace.window, len(trace.records),
            )
        )
        for rec in trace.records:
            w = np.ascontiguousarray(rec.weights, dtype="<f4")
            h, q, k = w.shape
            fh.write(struct.pack("<I", 16 + w.nbytes))
            fh.write(struct.pack("<4I", rec.layer_id, rec.step, q, k))
            fh.write(w.tobytes())


def read_trace(path: str | Path) -> AttnTrace:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise TraceError(f"cannot read trace {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise TraceError("file shorter than the trace header")
    magic, version, n_layers, n_heads, n_kv, window, n_records = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise TraceError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TraceError(f"unsupported trace version {version}")
    if n_kv == 0 or n_heads % n_kv:
        raise TraceShapeError(f"n_heads {n_heads} not divisible by n_kv {n_kv}")
    trace = AttnTrace(n_layers, n_heads, n_kv, window)
    off = _HEADER.size
    for i in range(n_records):
        if off + _RECORD.size > len(raw):
            raise TraceError(f"record {i}: truncated header")
        length, layer, step, q, k = _RECORD.unpack_from(raw, off)
        if length != 16 + 4 * n_heads * q * k:
            raise TraceShapeError(f"record {i}: length {length} does not match shape H={n_heads}, Q={q}, K={k}")
        start = off + _RECORD.size
        if start + 4 * n_heads * q * k > len(raw):
            raise TraceError(f"record {i}: truncated body")
        w = np.frombuffer(raw, dtype="<f4", count=n_heads * q * k, offset=start)
        trace.records.append(TraceRecord(layer, step, w.reshape(n_heads, q, k).astype(np.float32)))
        off = start + 4 * n_heads * q * k
    if off != len(raw):
        raise TraceError(f"{len(raw) - off} trailing bytes after the last record")
    return trace


def validate_trace(trace: AttnTrace, window: Optional[int] = None) -> list[str]:
    """Return a list of problems; empty means the trace is usable.

    Raises TraceShapeError for problems that make replay impossible.
    """
    w = trace.window if window is None else window
    problems = []
    for i, rec in enumerate(trace.records):
        h, q, k = rec.weights.shape
        if rec.layer_id >= trace.n_layers:
            raise TraceShapeError(f"record {i}: layer {rec.layer_id} >= n_layers {trace.n_layers}")
        if k <= w:
            raise TraceShapeError(f"record {i}: K={k} does not exceed window {w}")
        a = rec.weights
        if not np.all(np.isfinite(a)):
            problems.append(f"record {i}: non-finite weights")
            continue
        if np.any(a < 0):
            problems.append(f"record {i}: negative weights")
        sums = a[:, max(0, q - w) :, : k - w].sum(axis=-1, dtype=np.float64)
        if np.any(sums > 1 + ROW_SUM_SLACK):
            problems.append(f"record {i}: windowed rows sum above 1")
    steps0 = {r.layer_id for r in trace.records if r.step == 0}
    missing = sorted(set(range(trace.n_layers)) - steps0)
    if missing:
        problems.append(f"no prefill (step 0) record for layers {missing}")
    return problems


def records_from_arrays(layer_arrays: Iterable[tuple[int, int, np.ndarray]]) -> list[TraceRecord]:
    return [TraceRecord(layer, step, np.asarray(a, dtype=np.float32)) for layer, step, a in layer_arrays]
