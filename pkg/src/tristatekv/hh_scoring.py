"""Heavy-hitter token scores over the observation window."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attn_stats import AttnWindow

DEFAULT_GAMMA = 263.81


@dataclass(frozen=True, eq=False)
class HhScoreVector:
    scores: np.ndarray
    gamma: float
    layer_id: int = 0
    group_map: Optional[tuple[int, ...]] = None

    def __len__(self) -> int:
        return len(self.scores)


def group_map_for(n_query_heads: int, n_kv_heads: int) -> tuple[int, ...]:
    """KV group of each query head under contiguous GQA grouping."""
    size = n_query_heads // n_kv_heads
    return tuple(h // size for h in range(n_query_heads))


def _mean_var(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # contiguous copy pins the reduction order, so key permutations permute scores exactly
    flat = np.ascontiguousarray(w.reshape(-1, w.shape[-1]))
    mu = flat.mean(axis=0)
    var = ((flat - mu) ** 2).mean(axis=0)
    return mu, var


def hh_scores(
    window: AttnWindow | np.ndarray,
    gamma: float = DEFAULT_GAMMA,
    group_map: Optional[Sequence[int]] = None,
    layer_id: int = 0,
) -> HhScoreVector:
    """Per-key score ``mean + gamma * variance`` over (head, query).

    With ``group_map`` the mean and population variance are taken over the
    query heads of each KV group, and the per-group scores are then averaged
    so every KV head sees the same ranking.
    """
    if isinstance(window, AttnWindow):
        layer_id = window.layer_id
        w = window.weights
    else:
        w = np.asarray(window)
    w = w.astype(np.float64, copy=False)
    if group_map is None:
        mu, var = _mean_var(w)
        s = mu + gamma * var
        gm = None
    else:
        gm = tuple(int(g) for g in group_map)
        if len(gm) != w.shape[0]:
            raise ValueError("group_map length must equal the number of query heads")
        groups = sorted(set(gm))
        s = np.zeros(w.shape[-1])
        for g in groups:
            heads = [h for h, gg in enumerate(gm) if gg == g]
            mu, var = _mean_var(w[heads])
            s += mu + gamma * var
        s /= len(groups)
    return HhScoreVector(s, float(gamma), layer_id, gm)


def top_b(scores: HhScoreVector | np.ndarray, b: int) -> np.ndarray:
    """Indices of the ``b`` highest scores, ties going to the lower index.

    Returned in rank order (best first).
    """
    s = scores.scores if isinstance(scores, HhScoreVector) else np.asarray(scores)
    n = len(s)
    if not 0 <= b <= n:
        raise ValueError(f"b={b} outside [0, {n}]")
    order = np.argsort(-s, kind="stable")
    return order[:b]


class ScoreSmoother:
    """Exponential smoothing of scores across tailor events, keyed by position.

    ``beta = 0`` returns the raw scores unchanged.
    """

    def __init__(self, beta: float = 0.0):
        if not 0.0 <= beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        self.beta = beta
        self._state: dict[int, float] = {}

    def __call__(self, scores: np.ndarray, positions: np.ndarray) -> np.ndarray:
        if self.beta == 0.0:
            return scores
        out = np.array(scores, dtype=np.float64)
        b = self.beta
        for i, p in enumerate(positions.tolist()):
            prev = self._state.get(p)
            if prev is not None:
                out[i] = b * prev + (1 - b) * out[i]
        self._state = dict(zip(positions.tolist(), out.tolist()))
        return out
