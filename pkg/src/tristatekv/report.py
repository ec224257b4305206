"""Per-run metrics and their tabular/structured renderings."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence


@dataclass(frozen=True)
class StepMetrics:
    step: int
    position: int
    token: int
    n_original: tuple[int, ...]
    n_quantized: tuple[int, ...]
    n_evicted: tuple[int, ...]
    usage_half_units: tuple[int, ...]
    bytes: tuple[int, ...]
    tailored: tuple[bool, ...]


def quant_ratio(n_quantized: Sequence[int], budget: Optional[int]) -> float:
    """Quantized tokens over cache budget, percent, averaged over layers."""
    if not budget or not n_quantized:
        return 0.0
    return 100.0 * sum(n_quantized) / (budget * len(n_quantized))


def evict_ratio(n_evicted: Sequence[int], seen: int) -> float:
    """Evicted tokens over tokens seen, percent, averaged over layers."""
    if seen <= 0 or not n_evicted:
        return 0.0
    return 100.0 * sum(n_evicted) / (seen * len(n_evicted))


@dataclass
class DecodeReport:
    strategy: str
    budget: Optional[int]
    window: int
    n_layers: int
    prompt_len: int
    n_generated: int
    rho: tuple[float, ...] = ()
    oq_scores: tuple[float, ...] = ()
    steps: list[StepMetrics] = field(default_factory=list)
    decode_seconds: float = 0.0
    prefill_seconds: float = 0.0
    tokens_per_sec: float = 0.0
    relative_tps: Optional[float] = None
    max_abs_logit_delta: Optional[float] = None
    mean_kl: Optional[float] = None
    kl_per_step: list[float] = field(default_factory=list)
    top1_agreement: Optional[float] = None

    def quant_ratios(self) -> list[float]:
        return [quant_ratio(s.n_quantized, self.budget) for s in self.steps]

    def evict_ratios(self) -> list[float]:
        return [evict_ratio(s.n_evicted, s.position + 1) for s in self.steps]

    @property
    def final_quant_ratio(self) -> float:
        return self.quant_ratios()[-1] if self.steps else 0.0

    @property
    def final_evict_ratio(self) -> float:
        return self.evict_ratios()[-1] if self.steps else 0.0

    @property
    def mean_quant_ratio(self) -> float:
        r = self.quant_ratios()
        return sum(r) / len(r) if r else 0.0

    @property
    def steady_quant_ratio(self) -> float:
        """Mean quant ratio from the first tailor onwards (all steps if none fired)."""
        start = next((i for i, s in enumerate(self.steps) if any(s.tailored)), 0)
        r = self.quant_ratios()[start:]
        return sum(r) / len(r) if r else 0.0

    @property
    def max_usage_half_units(self) -> int:
        return max((max(s.usage_half_units) for s in self.steps), default=0)

    @property
    def decode_seconds_per_token(self) -> float:
        n = max(self.n_generated - 1, 0)
        return self.decode_seconds / n if n else 0.0

    def summary(self, timing: bool = True) -> dict:
        """Structured summary; ``timing=False`` drops wall-clock fields."""
        out = {
            "strategy": self.strategy,
            "budget": self.budget,
            "window": self.window,
            "n_layers": self.n_layers,
            "prompt_len": self.prompt_len,
            "n_generated": self.n_generated,
            "rho": list(self.rho),
            "oq_scores": list(self.oq_scores),
            "final_quant_ratio": self.final_quant_ratio,
            "mean_quant_ratio": self.mean_quant_ratio,
            "steady_quant_ratio": self.steady_quant_ratio,
            "final_evict_ratio": self.final_evict_ratio,
            "max_usage_token_equivalents": self.max_usage_half_units / 2,
            "max_abs_logit_delta": self.max_abs_logit_delta,
            "mean_kl": self.mean_kl,
            "top1_agreement": self.top1_agreement,
        }
        if timing:
            out.update(
                tokens_per_sec=self.tokens_per_sec,
                relative_tps=self.relative_tps,
                decode_seconds=self.decode_seconds,
                prefill_seconds=self.prefill_seconds,
            )
        return out

    def step_rows(self) -> list[dict]:
        rows = []
        qr, er = self.quant_ratios(), self.evict_ratios()
        for i, s in enumerate(self.steps):
            row = {
                "step": s.step,
                "position": s.position,
                "token": s.token,
                "usage_token_equivalents": sum(s.usage_half_units) / 2,
                "bytes": sum(s.bytes),
                "n_original": sum(s.n_original),
                "n_quantized": sum(s.n_quantized),
                "n_evicted": sum(s.n_evicted),
                "quant_ratio": round(qr[i], 6),
                "evict_ratio": round(er[i], 6),
                "tailored_layers": sum(s.tailored),
                "kl": _fmt(self.kl_per_step[i]) if i < len(self.kl_per_step) else "",
            }
            for layer in range(self.n_layers):
                row[f"orig_l{layer}"] = s.n_original[layer]
                row[f"quant_l{layer}"] = s.n_quantized[layer]
            rows.append(row)
        return rows

    def steps_csv(self) -> str:
        rows = self.step_rows()
        buf = io.StringIO()
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        return buf.getvalue()


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "nan"
    return f"{x:.9e}"
