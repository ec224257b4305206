"""Policy replay over recorded attention, with no KV values involved."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..attn_stats import OqAllocation
from ..decode import DecodeSession, StrategyConfig, strategy_budgets
from ..hh_scoring import group_map_for, hh_scores
from ..model import Transformer
from ..tailor import TailorPlan, build_plan
from .trace import AttnTrace, TraceRecord, TraceShapeError, validate_trace


@dataclass
class ReplayResult:
    allocation: Optional[OqAllocation]
    plans: list[tuple[int, int, TailorPlan]] = field(default_factory=list)  # (layer, step, plan)

    def rows(self) -> list[dict]:
        out = []
        for layer, step, plan in self.plans:
            o, q, e = plan.counts()
            out.append(
                {"layer": layer, "step": step, "n_keys": plan.n_tokens,
                 "n_original": o, "n_quantized": q, "n_evicted": e,
                 "usage_token_equivalents": o + q / 2}
            )
        return out

    def stream(self) -> list[tuple]:
        return [(layer, step, plan.key()) for layer, step, plan in self.plans]


def replay_policy(trace: AttnTrace, strategy: StrategyConfig) -> ReplayResult:
    """Score and plan every record of ``trace`` as if a tailor fired there.

    The step-0 record of each layer is the prefill attention that fixes the
    per-layer budgets.
    """
    if trace.window != strategy.window:
        raise TraceShapeError(f"trace window {trace.window} != strategy window {strategy.window}")
    validate_trace(trace)
    prefill = []
    for layer in range(trace.n_layers):
        recs = [r for r in trace.layer_records(layer) if r.step == 0]
        if not recs:
            raise TraceShapeError(f"layer {layer} has no prefill record")
        prefill.append(recs[0].weights)
    budgets, alloc = strategy_budgets(strategy, prefill)
    result = ReplayResult(alloc)
    if strategy.kind == "base":
        return result
    gmap = group_map_for(trace.n_heads, trace.n_kv_heads)
    w = strategy.window
    for rec in sorted(trace.records, key=lambda r: (r.step, r.layer_id)):
        _, q, k = rec.weights.shape
        win = rec.weights[:, max(0, q - w) :, : k - w]
        hh = hh_scores(win, strategy.gamma, gmap, rec.layer_id)
        plan = build_plan(hh, k, budgets[rec.layer_id], strategy.alpha, rec.layer_id)
        result.plans.append((rec.layer_id, rec.step, plan))
    return result


def export_trace(
    model: Transformer,
    prompt: Sequence[int],
    n_tokens: int,
    strategy: StrategyConfig,
    every: int = 16,
) -> AttnTrace:
    """Record prefill attention and, every ``every`` decode steps, the recent
    attention rows over all cached keys."""
    cfg = model.cfg
    trace = AttnTrace(cfg.n_layers, cfg.n_query_heads, cfg.n_kv_heads, strategy.window)
    session = DecodeSession(model, strategy)
    _, attn = model.forward_full(np.asarray(prompt))
    for layer, a in enumerate(attn):
        trace.records.append(TraceRecord(layer, 0, a.astype(np.float32)))
    logits = session.prefill(prompt).logits
    for step in range(1, n_tokens):
        logits = session.decode_step(int(np.argmax(logits))).logits
        if step % every == 0:
            for layer, cache in enumerate(session.caches):
                kpos = cache.positions()
                if len(kpos) > strategy.window:
                    a = session.window_weights(layer, kpos).astype(np.float32)
                    trace.records.append(TraceRecord(layer, step, a))
    return trace
