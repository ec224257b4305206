"""Tri-state tailor: partition a layer's cache into Original / Quantized / Evicted.

Plans are expressed in cache-index space ``[0, K)`` (sequence order of the
tokens currently cached); the last ``W`` indices form the protected window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import ConfigurationError, IntegrityError
from .hh_scoring import HhScoreVector, top_b
from .kv_store import LayerBudget, TriStateCache
from .quant import dequantize_array, quantize_array

DEFAULT_ALPHA = 0.75


@dataclass(frozen=True, eq=False)
class TailorPlan:
    originals: np.ndarray
    quantize: np.ndarray
    evict: np.ndarray
    n_tokens: int
    window: int
    layer_id: int = 0
    positions: Optional[np.ndarray] = None

    def counts(self) -> tuple[int, int, int]:
        return len(self.originals), len(self.quantize), len(self.evict)

    def key(self) -> tuple:
        """Hashable form, handy for comparing plan streams."""
        return (
            tuple(self.originals.tolist()),
            tuple(self.quantize.tolist()),
            tuple(self.evict.tolist()),
        )


def keep_size(n_tokens: int, window: int, alpha: float) -> int:
    # exact floor: a float product can round up onto an integer
    return math.floor(Fraction(alpha) * (n_tokens - window))


def build_plan(
    scores: HhScoreVector | np.ndarray,
    n_tokens: int,
    budget: LayerBudget,
    alpha: float = DEFAULT_ALPHA,
    layer_id: int = 0,
    positions: Optional[np.ndarray] = None,
) -> TailorPlan:
    """Choose the state of every cached token.

    The top ``floor(alpha * (K - W))`` eligible tokens are kept; the best of
    them fill the original quota, the next ones become quantized (bounded by
    the quant quota and by what the budget can still hold), and the rest are
    evicted.  The window is always original.
    """
    w = budget.window
    if n_tokens <= w:
        raise ConfigurationError(f"cache of {n_tokens} tokens does not exceed window {w}")
    if not 0 < alpha <= 1:
        raise ConfigurationError(f"alpha {alpha} outside (0, 1]")
    if budget.original_quota < w:
        raise ConfigurationError("original quota cannot hold the window")
    s = scores.scores if isinstance(scores, HhScoreVector) else np.asarray(scores)
    n_elig = n_tokens - w
    if len(s) != n_elig:
        raise ValueError(f"expected {n_elig} scores, got {len(s)}")

    keep = top_b(s, keep_size(n_tokens, w, alpha))
    n_orig = min(budget.original_quota - w, len(keep))
    rest = keep[n_orig:]
    # half-units: 2*(W + n_orig) + n_quant <= 2*B
    feasible = 2 * (budget.total - w - n_orig)
    n_quant = max(0, min(len(rest), budget.quant_quota, feasible))

    state = np.full(n_tokens, 2, dtype=np.int8)  # 0 original, 1 quantized, 2 evicted
    state[keep[:n_orig]] = 0
    state[rest[:n_quant]] = 1
    state[n_elig:] = 0
    return TailorPlan(
        originals=np.flatnonzero(state == 0),
        quantize=np.flatnonzero(state == 1),
        evict=np.flatnonzero(state == 2),
        n_tokens=n_tokens,
        window=w,
        layer_id=layer_id,
        positions=None if positions is None else np.asarray(positions).copy(),
    )


def apply_plan(cache: TriStateCache, plan: TailorPlan) -> TriStateCache:
    """Re-partition ``cache`` in place according to ``plan``.

    Promoting a quantized token back to original keeps its dequantized
    values; the precision lost at quantization is not recovered.
    """
    pos = cache.positions()
    if len(pos) != plan.n_tokens:
        raise IntegrityError(f"plan covers {plan.n_tokens} tokens, cache holds {len(pos)}")
    if plan.positions is not None and not np.array_equal(plan.positions, pos):
        raise IntegrityError("plan references positions not present in the cache")
    state = np.full(plan.n_tokens, -1, dtype=np.int8)
    for code, idx in enumerate((plan.originals, plan.quantize, plan.evict)):
        if idx.size and (idx.min() < 0 or idx.max() >= plan.n_tokens):
            raise IntegrityError("plan index out of range")
        if np.any(state[idx] != -1):
            raise IntegrityError("plan assigns a token to more than one state")
        state[idx] = code
    if np.any(state == -1):
        raise IntegrityError("plan leaves tokens unassigned")

    o_pos_now = cache.original_positions
    q_pos_now = cache.quantized_positions
    was_orig = np.isin(pos, o_pos_now)
    kc, ks, vc, vs = cache.quantized_arrays

    # originals: retained originals copied bitwise, promoted ones dequantized
    o_sel = pos[state == 0]
    o_from_orig = was_orig[state == 0]
    o_key = np.empty((len(o_sel), cache.n_kv_heads, cache.d_head), dtype=np.float32)
    o_val = np.empty_like(o_key)
    if o_from_orig.any():
        i = np.searchsorted(o_pos_now, o_sel[o_from_orig])
        o_key[o_from_orig] = cache.original_keys[i]
        o_val[o_from_orig] = cache.original_values[i]
    if (~o_from_orig).any():
        j = np.searchsorted(q_pos_now, o_sel[~o_from_orig])
        o_key[~o_from_orig] = dequantize_array(kc[j], ks[j])
        o_val[~o_from_orig] = dequantize_array(vc[j], vs[j])

    # quantized: retained codes kept, demoted originals quantized now
    q_sel = pos[state == 1]
    q_from_orig = was_orig[state == 1]
    shape = (len(q_sel), cache.n_kv_heads, cache.d_head)
    n_kc = np.empty(shape, dtype=np.int8)
    n_vc = np.empty(shape, dtype=np.int8)
    n_ks = np.empty(shape[:2], dtype=np.float32)
    n_vs = np.empty(shape[:2], dtype=np.float32)
    if q_from_orig.any():
        i = np.searchsorted(o_pos_now, q_sel[q_from_orig])
        n_kc[q_from_orig], n_ks[q_from_orig] = quantize_array(cache.original_keys[i])
        n_vc[q_from_orig], n_vs[q_from_orig] = quantize_array(cache.original_values[i])
    if (~q_from_orig).any():
        j = np.searchsorted(q_pos_now, q_sel[~q_from_orig])
        n_kc[~q_from_orig], n_ks[~q_from_orig] = kc[j], ks[j]
        n_vc[~q_from_orig], n_vs[~q_from_orig] = vc[j], vs[j]

    cache.replace_contents(o_sel, o_key, o_val, q_sel, n_kc, n_ks, n_vc, n_vs)
    cache.n_evicted += int(np.count_nonzero(state == 2))
    cache.tailor_count += 1
    return cache


def demote_outside_window(cache: TriStateCache) -> int:
    """Quantize every original that has left the recency window.

    Used by the quantized-only strategy; returns the number of demoted tokens.
    """
    pos = cache.positions()
    w = min(cache.window_size, len(pos))
    cutoff = pos[len(pos) - w] if w else pos[-1] + 1
    o_pos = cache.original_positions
    n_out = int(np.searchsorted(o_pos, cutoff))
    if n_out == 0:
        return 0
    q_pos = cache.quantized_positions
    if not q_pos.size or q_pos[-1] < o_pos[0]:
        # common case: the oldest originals just slid out of the window
        kc, ks = quantize_array(cache.original_keys[:n_out])
        vc, vs = quantize_array(cache.original_values[:n_out])
        cache.demote_oldest(n_out, kc, ks, vc, vs)
        return n_out
    originals = np.flatnonzero(pos >= cutoff)
    quantize = np.setdiff1d(np.arange(len(pos)), originals)
    plan = TailorPlan(originals, quantize, np.empty(0, dtype=np.int64), len(pos), w, cache.layer_id)
    tailors = cache.tailor_count
    apply_plan(cache, plan)
    cache.tailor_count = tailors
    return n_out
