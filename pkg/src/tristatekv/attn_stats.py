"""Layer-level attention statistics and precision budget allocation.

During prefill the last ``W`` queries' attention over the evictable keys
``[0, K-W)`` is reduced to a key-mass distribution.  Its entropy, variance
and kurtosis give each layer an OQ score; the score relative to the best
layer sets how much of the budget stays full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateDistributionError, WindowTooLargeError
from .kv_store import LayerBudget

STAT_FLOOR = 1e-6
VARIANCE_DEGENERATE = 1e-12

# tuned values reported for the method (window 32)
DEFAULT_TAU = (7.774, 5.407, 5.528)


@dataclass(frozen=True)
class AttnWindow:
    layer_id: int
    weights: np.ndarray  # [head][query][key]

    @property
    def n_heads(self) -> int:
        return self.weights.shape[0]

    @property
    def n_keys(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class AttnStats:
    entropy: float
    variance: float
    kurtosis: float
    layer_id: int = 0


@dataclass(frozen=True)
class OqConfig:
    tau1: float = DEFAULT_TAU[0]
    tau2: float = DEFAULT_TAU[1]
    tau3: float = DEFAULT_TAU[2]
    window: int = 32

    def __post_init__(self) -> None:
        if min(self.tau1, self.tau2, self.tau3) <= 0:
            raise ConfigurationError("temperatures must be strictly positive")
        if self.window < 0:
            raise ConfigurationError("window must be non-negative")


@dataclass(frozen=True)
class OqAllocation:
    """Frozen prefill result: per-layer scores, ratios and budgets."""

    scores: tuple[float, ...]
    ratios: tuple[float, ...]
    budgets: tuple[LayerBudget, ...]
    stats: tuple[AttnStats, ...] = field(default=())


def slice_window(full_attention: np.ndarray, window: int, layer_id: int = 0) -> AttnWindow:
    """Restrict ``[H][Q][K]`` attention to the last ``window`` queries and keys ``[0, K-window)``."""
    a = np.asarray(full_attention)
    if a.ndim != 3:
        raise ValueError(f"expected a [H][Q][K] array, got shape {a.shape}")
    _, q, k = a.shape
    if q <= window or k <= window:
        raise WindowTooLargeError(f"window {window} too large for Q={q}, K={k}")
    return AttnWindow(layer_id, a[:, q - window :, : k - window])


def key_mass(window: AttnWindow | np.ndarray) -> np.ndarray:
    """Sum weights over heads and queries, then normalise once over keys."""
    w = window.weights if isinstance(window, AttnWindow) else np.asarray(window)
    per_key = w.sum(axis=(0, 1), dtype=np.float64)
    z = per_key.sum()
    if not z > 0:
        raise DegenerateDistributionError("attention window carries no mass")
    return per_key / z


def compute_stats(p: np.ndarray, layer_id: int = 0) -> AttnStats:
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    if n < 2:
        raise ValueError("need at least two keys for statistics")
    nz = p[p > 0]
    entropy = float(-np.sum(nz * np.log(nz)))
    dev = p - 1.0 / n
    m2 = float(np.mean(dev**2))
    if m2 < VARIANCE_DEGENERATE:
        kurt = 1.0
    else:
        kurt = float(np.mean(dev**4)) / (m2 * m2)
    return AttnStats(max(entropy, 0.0), m2, kurt, layer_id)


def oq_score(stats: AttnStats, cfg: OqConfig) -> float:
    h = max(stats.entropy, STAT_FLOOR)
    v = max(stats.variance, STAT_FLOOR)
    k = max(stats.kurtosis, STAT_FLOOR)
    return h ** (1.0 / cfg.tau1) * v ** (1.0 / cfg.tau2) * k ** (1.0 / cfg.tau3)


def oq_ratios(scores: Sequence[float]) -> list[float]:
    q = [float(s) for s in scores]
    top = max(q)
    assert top > 0, "OQ scores must be positive after clamping"
    return [s / top for s in q]


def allocate_budgets(
    ratios: Sequence[float], budget: int, window: int, rule: str = "window"
) -> list[LayerBudget]:
    """Split a per-layer token budget into original and quantized quotas.

    ``rule="window"`` reserves the window first and scales the remainder by the
    ratio; ``rule="proportional"`` scales the whole budget (floored at the window).
    """
    if budget <= window:
        raise ConfigurationError(f"budget {budget} must exceed window {window}")
    out = []
    for rho in ratios:
        if not 0 < rho <= 1:
            raise ConfigurationError(f"ratio {rho} outside (0, 1]")
        if rule == "window":
            orig = window + math.floor(rho * (budget - window))
        elif rule == "proportional":
            orig = max(window, math.floor(rho * budget))
        else:
            raise ConfigurationError(f"unknown budget rule {rule!r}")
        out.append(LayerBudget(budget, orig, 2 * (budget - orig), window))
    return out


def layer_stats(full_attention: np.ndarray, window: int, layer_id: int = 0) -> AttnStats | None:
    """Stats for one layer's prefill attention, shrinking the window for short prompts.

    Returns None when no window leaves two evictable keys.
    """
    _, q, k = full_attention.shape
    w = min(window, q - 1, k - 2)
    if w < 1:
        return None
    win = slice_window(full_attention, w, layer_id)
    return compute_stats(key_mass(win), layer_id)


def allocate_from_prefill(
    attentions: Sequence[np.ndarray],
    cfg: OqConfig,
    budget: int,
    rule: str = "window",
) -> OqAllocation:
    stats = [layer_stats(a, cfg.window, i) for i, a in enumerate(attentions)]
    if any(s is None for s in stats):
        scores = [1.0] * len(stats)
        ratios = [1.0] * len(stats)
        stats_t: tuple[AttnStats, ...] = ()
    else:
        scores = [oq_score(s, cfg) for s in stats]
        ratios = oq_ratios(scores)
        stats_t = tuple(stats)
    budgets = allocate_budgets(ratios, budget, cfg.window, rule)
    return OqAllocation(tuple(scores), tuple(ratios), tuple(budgets), stats_t)
