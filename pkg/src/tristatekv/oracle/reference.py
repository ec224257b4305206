from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Sequence


def _f32(x: float) -> float:
    return struct.unpack("<f", struct.pack("<f", x))[0]


def _f32_next_up(x: float) -> float:
    (bits,) = struct.unpack("<I", struct.pack("<f", x))
    return struct.unpack("<f", struct.pack("<I", bits + 1))[0]


def oracle_stats(p: Sequence[float]) -> tuple[float, float, float, bool]:
    """Raw (entropy, variance, kurtosis, degenerate) with no clamping.

    ``degenerate`` is set when the variance is below 1e-12; kurtosis is NaN
    when the variance is exactly zero.
    """
    p = [float(x) for x in p]
    n = len(p)
    entropy = -math.fsum(x * math.log(x) for x in p if x > 0)
    mean = 1.0 / n
    m2 = math.fsum((x - mean) ** 2 for x in p) / n
    m4 = math.fsum((x - mean) ** 4 for x in p) / n
    kurt = m4 / (m2 * m2) if m2 > 0 else math.nan
    return entropy, m2, kurt, m2 < 1e-12


def oracle_topk(scores: Sequence[float], b: int) -> set[int]:
    ranked = sorted(range(len(scores)), key=lambda i: (-float(scores[i]), i))
    return set(ranked[:b])


def oracle_quantize(x: Sequence[float]) -> tuple[list[int], float, list[float]]:
    """Scalar int8 quantization of one head vector: (codes, scale, dequantized)."""
    amax = max((abs(float(v)) for v in x), default=0.0)
    scale = _f32(amax / 127) if amax > 0 else 1.0
    if amax > 127.5 * scale:
        scale = _f32_next_up(scale)
    codes = []
    for v in x:
        c = round(float(v) / scale)  # round-half-even
        codes.append(max(-127, min(127, c)))
    return codes, scale, [_f32(c * scale) for c in codes]


@dataclass
class PlanCheck:
    ok: bool
    violations: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def _as_set(xs: Iterable[Any]) -> list[int]:
    return [int(x) for x in xs]


def oracle_validate_plan(
    plan: Any,
    scores: Sequence[float],
    budget: Any,
    alpha: float,
    n_tokens: int,
    window: int,
) -> PlanCheck:
    """Re-derive the legal partition from first principles and diff it against ``plan``.

    ``plan`` needs ``originals``, ``quantize`` and ``evict`` index collections;
    ``budget`` needs ``total``, ``original_quota`` and ``quant_quota``.
    """
    v: list[str] = []
    orig, quant, evict = _as_set(plan.originals), _as_set(plan.quantize), _as_set(plan.evict)
    everything = orig + quant + evict
    if sorted(everything) != list(range(n_tokens)):
        v.append("partition: states do not partition [0, K)")
    so, sq, se = set(orig), set(quant), set(evict)
    if not set(range(n_tokens - window, n_tokens)) <= so:
        v.append("window: a protected token is not original")
    if 2 * len(so) + len(sq) > 2 * budget.total:
        v.append(f"budget: {len(so) + len(sq) / 2} token-equivalents exceed {budget.total}")

    n_elig = n_tokens - window
    b = math.floor(Fraction(alpha) * n_elig)
    ranked = sorted(range(n_elig), key=lambda i: (-float(scores[i]), i))
    keep = ranked[:b]
    n_o = min(budget.original_quota - window, len(keep))
    rest = keep[n_o:]
    n_q = max(0, min(len(rest), budget.quant_quota, 2 * (budget.total - window - n_o)))
    want_o = set(keep[:n_o]) | set(range(n_elig, n_tokens))
    want_q = set(rest[:n_q])
    want_e = set(range(n_tokens)) - want_o - want_q
    if so != want_o:
        v.append("mismatch: original set differs from the reference")
    if sq != want_q:
        v.append("mismatch: quantized set differs from the reference")
    if se != want_e:
        v.append("mismatch: evicted set differs from the reference")

    eo = [scores[i] for i in so if i < n_elig]
    eq = [scores[i] for i in sq]
    ee = [scores[i] for i in se if i < n_elig]
    if eo and eq and min(eo) < max(eq):
        v.append("monotonicity: a quantized token outscores an original one")
    if eq and ee and min(eq) < max(ee):
        v.append("monotonicity: an evicted token outscores a quantized one")
    if eo and ee and min(eo) < max(ee):
        v.append("monotonicity: an evicted token outscores an original one")
    return PlanCheck(not v, v)
