"""Symmetric int8 quantization with one scale per token, per KV head, per tensor.

Scales are ``max|x| / 127`` (1.0 for an all-zero head).  Codes are computed
in float64 against the stored float32 scale so that the round-trip error is
bounded by ``scale / 2`` plus one float32 ulp.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import NumericError
from .kv_store import QuantizedEntry, TokenEntry, TriStateCache

QMAX = 127


def quantize_array(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantize ``x`` of shape ``(..., d)`` along the last axis.

    Returns int8 codes with the shape of ``x`` and float32 scales of shape ``x.shape[:-1]``.
    """
    x64 = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x64)):
        raise NumericError("cannot quantize non-finite values")
    amax = np.max(np.abs(x64), axis=-1)
    scale = np.where(amax > 0, amax / QMAX, 1.0).astype(np.float32)
    # subnormal inputs can underflow the scale far enough that clipping to
    # 127 would cost more than half a step; bump those scales by one ulp
    short = amax > (QMAX + 0.5) * scale.astype(np.float64)
    if np.any(short):
        scale = np.where(short, np.nextafter(scale, np.float32(np.inf)), scale)
    codes = np.rint(x64 / scale.astype(np.float64)[..., None])
    np.clip(codes, -QMAX, QMAX, out=codes)
    return codes.astype(np.int8), scale


def dequantize_array(codes: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return codes.astype(np.float32) * scale[..., None]


def quantize_token(entry: TokenEntry) -> QuantizedEntry:
    kc, ks = quantize_array(entry.key)
    vc, vs = quantize_array(entry.value)
    return QuantizedEntry(entry.position, kc, ks, vc, vs)


def dequantize_token(qe: QuantizedEntry) -> TokenEntry:
    return TokenEntry(
        qe.position,
        dequantize_array(qe.key_codes, qe.key_scale),
        dequantize_array(qe.value_codes, qe.value_scale),
    )


class KVView(NamedTuple):
    keys: np.ndarray  # (n, n_kv_heads, d_head)
    values: np.ndarray
    positions: np.ndarray  # (n,) sorted ascending


def reconstruct(cache: TriStateCache) -> KVView:
    """Merge originals and dequantized entries into one sequence-ordered view."""
    o_pos = cache.original_positions
    if cache.n_quantized == 0:
        return KVView(cache.original_keys.copy(), cache.original_values.copy(), o_pos.copy())
    kc, ks, vc, vs = cache.quantized_arrays
    q_pos = cache.quantized_positions
    pos = np.concatenate([o_pos, q_pos])
    order = np.argsort(pos, kind="stable")
    keys = np.concatenate([cache.original_keys, dequantize_array(kc, ks)])[order]
    values = np.concatenate([cache.original_values, dequantize_array(vc, vs)])[order]
    return KVView(keys, values, pos[order])
