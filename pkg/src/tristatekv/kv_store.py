"""Per-layer tri-state KV cache with exact token-equivalent accounting.

Every cached token is either Original (full precision) or Quantized (int8
codes with per-head scales); evicted tokens are simply absent.  Budgets are
tracked in integer half-units so ``usage <= budget`` is an exact check:
an Original token costs 2 half-units, a Quantized one costs 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigurationError, IntegrityError, SequencingError

ORIGINAL_HALF_UNITS = 2
QUANTIZED_HALF_UNITS = 1


@dataclass(frozen=True, eq=False)
class TokenEntry:
    """Full-precision K/V for one token; arrays are shaped ``(n_kv_heads, d_head)``."""

    position: int
    key: np.ndarray
    value: np.ndarray


@dataclass(frozen=True, eq=False)
class QuantizedEntry:
    position: int
    key_codes: np.ndarray
    key_scale: np.ndarray
    value_codes: np.ndarray
    value_scale: np.ndarray


@dataclass(frozen=True)
class LayerBudget:
    """Per-layer quotas.

    ``total``, ``original_quota`` and ``window`` are in tokens (an Original
    token is one token-equivalent).  ``quant_quota`` counts Quantized tokens,
    each worth half a token-equivalent.
    """

    total: int
    original_quota: int
    quant_quota: int
    window: int

    def __post_init__(self) -> None:
        for name in ("total", "original_quota", "quant_quota", "window"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ConfigurationError(f"{name} must be a non-negative integer, got {v!r}")
        if self.original_quota < self.window:
            raise ConfigurationError(
                f"original_quota {self.original_quota} smaller than window {self.window}"
            )
        if ORIGINAL_HALF_UNITS * self.original_quota + self.quant_quota > self.total_half_units:
            raise ConfigurationError("original and quantized quotas exceed the total budget")

    @property
    def total_half_units(self) -> int:
        return ORIGINAL_HALF_UNITS * self.total

    @property
    def quant_quota_equivalents(self) -> float:
        return self.quant_quota / 2


@dataclass(frozen=True)
class CostModel:
    """Logical storage cost: bf16 originals, int8 codes plus two fp32 scales per head."""

    d_head: int
    n_kv_heads: int

    cost_original = 1.0
    cost_quantized = 0.5
    cost_evicted = 0.0

    @property
    def byte_cost_original(self) -> int:
        return 4 * self.d_head * self.n_kv_heads

    @property
    def byte_cost_quantized(self) -> int:
        return 2 * self.d_head * self.n_kv_heads + 8 * self.n_kv_heads

    def bytes_for(self, n_original: int, n_quantized: int) -> int:
        return n_original * self.byte_cost_original + n_quantized * self.byte_cost_quantized


@dataclass(frozen=True)
class Usage:
    half_units: int
    bytes: int
    n_original: int
    n_quantized: int

    @property
    def token_equivalents(self) -> float:
        return self.half_units / 2


class TriStateCache:
    """Tri-state KV store for one layer.

    Originals and quantized entries live in separate capacity-doubling
    buffers, each kept sorted by position.  Only the owning decode loop may
    mutate a cache (single writer per layer).
    """

    def __init__(
        self,
        layer_id: int,
        n_kv_heads: int,
        d_head: int,
        window_size: int,
        budget: Optional[LayerBudget] = None,
        capacity: int = 64,
    ):
        self.layer_id = layer_id
        self.n_kv_heads = n_kv_heads
        self.d_head = d_head
        self.window_size = window_size
        self.budget = budget
        self.cost = CostModel(d_head, n_kv_heads)
        self.n_evicted = 0
        self.tailor_count = 0
        self._alloc_originals(max(capacity, 1))
        self._alloc_quantized(0)
        self._n_o = 0
        self._n_q = 0

    # storage --------------------------------------------------------------

    def _alloc_originals(self, cap: int) -> None:
        shape = (cap, self.n_kv_heads, self.d_head)
        self._o_pos = np.empty(cap, dtype=np.int64)
        self._o_key = np.empty(shape, dtype=np.float32)
        self._o_val = np.empty(shape, dtype=np.float32)

    def _alloc_quantized(self, cap: int) -> None:
        shape = (cap, self.n_kv_heads, self.d_head)
        self._q_pos = np.empty(cap, dtype=np.int64)
        self._q_kcodes = np.empty(shape, dtype=np.int8)
        self._q_kscale = np.empty((cap, self.n_kv_heads), dtype=np.float32)
        self._q_vcodes = np.empty(shape, dtype=np.int8)
        self._q_vscale = np.empty((cap, self.n_kv_heads), dtype=np.float32)

    def _grow_originals(self) -> None:
        n = self._n_o
        old = (self._o_pos, self._o_key, self._o_val)
        self._alloc_originals(2 * len(old[0]))
        self._o_pos[:n] = old[0][:n]
        self._o_key[:n] = old[1][:n]
        self._o_val[:n] = old[2][:n]

    # read access ----------------------------------------------------------

    def __len__(self) -> int:
        return self._n_o + self._n_q

    @property
    def n_original(self) -> int:
        return self._n_o

    @property
    def n_quantized(self) -> int:
        return self._n_q

    @property
    def original_positions(self) -> np.ndarray:
        return self._o_pos[: self._n_o]

    @property
    def original_keys(self) -> np.ndarray:
        return self._o_key[: self._n_o]

    @property
    def original_values(self) -> np.ndarray:
        return self._o_val[: self._n_o]

    @property
    def quantized_positions(self) -> np.ndarray:
        return self._q_pos[: self._n_q]

    @property
    def quantized_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        n = self._n_q
        return self._q_kcodes[:n], self._q_kscale[:n], self._q_vcodes[:n], self._q_vscale[:n]

    def positions(self) -> np.ndarray:
        """All cached positions in sequence order."""
        if self._n_q == 0:
            return self.original_positions.copy()
        return np.sort(np.concatenate([self.original_positions, self.quantized_positions]))

    @property
    def max_position(self) -> int:
        last = int(self._o_pos[self._n_o - 1]) if self._n_o else -1
        if self._n_q:
            last = max(last, int(self._q_pos[self._n_q - 1]))
        return last

    def originals(self) -> Iterator[TokenEntry]:
        for i in range(self._n_o):
            yield TokenEntry(int(self._o_pos[i]), self._o_key[i].copy(), self._o_val[i].copy())

    def quantized(self) -> Iterator[QuantizedEntry]:
        for i in range(self._n_q):
            yield QuantizedEntry(
                int(self._q_pos[i]),
                self._q_kcodes[i].copy(),
                self._q_kscale[i].copy(),
                self._q_vcodes[i].copy(),
                self._q_vscale[i].copy(),
            )

    # mutation -------------------------------------------------------------

    def append(self, entry: TokenEntry) -> "TriStateCache":
        self.append_arrays(entry.position, entry.key, entry.value)
        return self

    def append_arrays(self, position: int, key: np.ndarray, value: np.ndarray) -> None:
        expected = self.max_position + 1
        if position != expected:
            raise SequencingError(
                f"layer {self.layer_id}: expected position {expected}, got {position}"
            )
        if self._n_o == len(self._o_pos):
            self._grow_originals()
        i = self._n_o
        self._o_pos[i] = position
        self._o_key[i] = key
        self._o_val[i] = value
        self._n_o = i + 1

    def replace_contents(
        self,
        o_pos: np.ndarray,
        o_key: np.ndarray,
        o_val: np.ndarray,
        q_pos: np.ndarray,
        q_kcodes: np.ndarray,
        q_kscale: np.ndarray,
        q_vcodes: np.ndarray,
        q_vscale: np.ndarray,
    ) -> None:
        """Install new sorted original/quantized sets (used by the tailor)."""
        if o_pos.size and np.any(np.diff(o_pos) <= 0):
            raise IntegrityError("original positions not strictly increasing")
        if q_pos.size and np.any(np.diff(q_pos) <= 0):
            raise IntegrityError("quantized positions not strictly increasing")
        if np.intersect1d(o_pos, q_pos).size:
            raise IntegrityError("a position is both original and quantized")
        n_o, n_q = len(o_pos), len(q_pos)
        self._alloc_originals(max(64, 2 * n_o))
        self._o_pos[:n_o] = o_pos
        self._o_key[:n_o] = o_key
        self._o_val[:n_o] = o_val
        self._n_o = n_o
        self._alloc_quantized(max(1, n_q))
        self._q_pos[:n_q] = q_pos
        self._q_kcodes[:n_q] = q_kcodes
        self._q_kscale[:n_q] = q_kscale
        self._q_vcodes[:n_q] = q_vcodes
        self._q_vscale[:n_q] = q_vscale
        self._n_q = n_q

    def demote_oldest(
        self,
        n: int,
        kcodes: np.ndarray,
        kscale: np.ndarray,
        vcodes: np.ndarray,
        vscale: np.ndarray,
    ) -> None:
        """Move the ``n`` oldest originals to the end of the quantized set.

        Only valid when every quantized token is older than them; the caller
        supplies their codes and scales.
        """
        if not 0 <= n <= self._n_o:
            raise IntegrityError(f"cannot demote {n} of {self._n_o} originals")
        if n == 0:
            return
        if self._n_q and self._q_pos[self._n_q - 1] >= self._o_pos[0]:
            raise IntegrityError("demoted originals must be newer than every quantized token")
        nq = self._n_q
        if nq + n > len(self._q_pos):
            old = self.quantized_positions.copy(), *(a.copy() for a in self.quantized_arrays)
            self._alloc_quantized(max(64, 2 * (nq + n)))
            self._q_pos[:nq], self._q_kcodes[:nq], self._q_kscale[:nq], self._q_vcodes[:nq], self._q_vscale[:nq] = old
        self._q_pos[nq : nq + n] = self._o_pos[:n]
        self._q_kcodes[nq : nq + n] = kcodes
        self._q_kscale[nq : nq + n] = kscale
        self._q_vcodes[nq : nq + n] = vcodes
        self._q_vscale[nq : nq + n] = vscale
        self._n_q = nq + n
        rest = self._n_o - n
        self._o_pos[:rest] = self._o_pos[n : self._n_o].copy()
        self._o_key[:rest] = self._o_key[n : self._n_o].copy()
        self._o_val[:rest] = self._o_val[n : self._n_o].copy()
        self._n_o = rest

    # accounting -----------------------------------------------------------

    def usage_half_units(self) -> int:
        return ORIGINAL_HALF_UNITS * self._n_o + QUANTIZED_HALF_UNITS * self._n_q

    def usage(self) -> Usage:
        return Usage(
            half_units=self.usage_half_units(),
            bytes=self.cost.bytes_for(self._n_o, self._n_q),
            n_original=self._n_o,
            n_quantized=self._n_q,
        )

    def needs_tailor(self) -> bool:
        if self.budget is None:
            return False
        return self.usage_half_units() >= self.budget.total_half_units

    def check_invariants(self) -> None:
        """Raise IntegrityError if any structural invariant is broken."""
        pos = self.positions()
        if pos.size != len(self) or (pos.size and np.any(np.diff(pos) <= 0)):
            raise IntegrityError("duplicate or unordered positions")
        w = min(self.window_size, len(self))
        if w and not np.all(np.isin(pos[-w:], self.original_positions)):
            raise IntegrityError("window token is not full precision")
        if self.budget is not None and self.usage_half_units() > self.budget.total_half_units:
            raise IntegrityError("usage exceeds budget")


def usage(cache: TriStateCache) -> Usage:
    return cache.usage()


def needs_tailor(cache: TriStateCache) -> bool:
    return cache.needs_tailor()


def append_token(cache: TriStateCache, entry: TokenEntry) -> TriStateCache:
    return cache.append(entry)
