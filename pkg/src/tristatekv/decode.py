"""Cache strategies, prefill/decode steps and the greedy generation loop.

Strategies:

* ``base``        unbounded full-precision cache
* ``origin_only`` heavy-hitter eviction, everything kept at full precision
* ``quant_only``  every token outside the window is quantized; eviction once
                  the token count reaches the budget
* ``arkv``        layer-aware Original/Quantized/Evicted tailoring

All bounded strategies share ``build_plan``; they differ only in the per-layer
budget split and the tailor trigger.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .attn_stats import AttnWindow, OqAllocation, OqConfig, allocate_from_prefill, layer_stats
from .errors import ConfigurationError, IntegrityError, LengthError
from .hh_scoring import DEFAULT_GAMMA, ScoreSmoother, group_map_for, hh_scores
from .kv_store import LayerBudget, TriStateCache
from .model import Transformer
from .quant import reconstruct
from .report import DecodeReport, StepMetrics
from .tailor import DEFAULT_ALPHA, apply_plan, build_plan, demote_outside_window

STRATEGIES = ("base", "origin_only", "quant_only", "arkv")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "arkv"
    budget: int = 512
    window: int = 32
    oq: OqConfig = field(default_factory=OqConfig)
    gamma: float = DEFAULT_GAMMA
    alpha: float = DEFAULT_ALPHA
    beta: float = 0.0
    budget_rule: str = "window"

    def __post_init__(self) -> None:
        if self.kind not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.kind!r}")
        if self.kind != "base" and self.budget <= self.window:
            raise ConfigurationError(f"budget {self.budget} must exceed window {self.window}")
        if not 0 < self.alpha <= 1:
            raise ConfigurationError("alpha must lie in (0, 1]")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be non-negative")
        if self.oq.window != self.window:
            object.__setattr__(self, "oq", replace(self.oq, window=self.window))


def strategy_budgets(
    s: StrategyConfig, prefill_attention: Sequence[np.ndarray]
) -> tuple[list[Optional[LayerBudget]], Optional[OqAllocation]]:
    """Per-layer budgets for a strategy; only ``arkv`` looks at the prefill attention."""
    n = len(prefill_attention)
    if s.kind == "base":
        return [None] * n, None
    if s.kind == "origin_only":
        return [LayerBudget(s.budget, s.budget, 0, s.window)] * n, None
    if s.kind == "quant_only":
        return [LayerBudget(s.budget, s.window, 2 * (s.budget - s.window), s.window)] * n, None
    alloc = allocate_from_prefill(prefill_attention, s.oq, s.budget, s.budget_rule)
    return list(alloc.budgets), alloc


@dataclass
class PrefillResult:
    logits: np.ndarray
    windows: list[Optional[AttnWindow]]
    allocation: Optional[OqAllocation]


@dataclass
class StepResult:
    logits: np.ndarray
    metrics: StepMetrics


class DecodeSession:
    """One generation's KV state.  Call ``prefill`` once, then ``decode_step``."""

    def __init__(self, model: Transformer, strategy: StrategyConfig):
        self.model = model
        self.strategy = strategy
        cfg = model.cfg
        self.group_map = group_map_for(cfg.n_query_heads, cfg.n_kv_heads)
        self.caches = [
            TriStateCache(layer, cfg.n_kv_heads, cfg.d_head, strategy.window)
            for layer in range(cfg.n_layers)
        ]
        # last W attention rows per layer: (key positions, probs[H, n])
        self._rows: list[deque] = [deque(maxlen=strategy.window) for _ in range(cfg.n_layers)]
        self._smoothers = [ScoreSmoother(strategy.beta) for _ in range(cfg.n_layers)]
        self.allocation: Optional[OqAllocation] = None
        self.position = 0
        self.step = 0
        self.plan_counts: list[tuple[int, int, int, int, int]] = []
        self._prefilled = False

    # budgets ----------------------------------------------------------------

    def _budgets(self, attentions: Sequence[np.ndarray]) -> list[Optional[LayerBudget]]:
        budgets, self.allocation = strategy_budgets(self.strategy, attentions)
        return budgets

    # cache maintenance ------------------------------------------------------

    def _triggered(self, cache: TriStateCache) -> bool:
        if self.strategy.kind == "quant_only":
            return len(cache) >= self.strategy.budget
        return cache.needs_tailor()

    def window_weights(self, layer: int, eligible: np.ndarray) -> np.ndarray:
        """Recent attention rows ``[H][rows][keys]`` restricted to ``eligible`` positions."""
        rows = self._rows[layer]
        h = self.model.cfg.n_query_heads
        out = np.zeros((h, len(rows), len(eligible)), dtype=np.float64)
        for r, (kpos, probs) in enumerate(rows):
            idx = np.searchsorted(kpos, eligible)
            idx_c = np.minimum(idx, len(kpos) - 1)
            hit = kpos[idx_c] == eligible
            out[:, r, hit] = probs[:, idx_c[hit]]
        return out

    def _maintain(self, layer: int) -> bool:
        cache = self.caches[layer]
        if self.strategy.kind == "quant_only":
            demote_outside_window(cache)
        tailored = False
        # one pass suffices during decode; a prompt much longer than the
        # budget can need a second one before usage drops below it
        while self._triggered(cache):
            pos = cache.positions()
            eligible = pos[: len(pos) - self.strategy.window]
            weights = self.window_weights(layer, eligible)
            hh = hh_scores(weights, self.strategy.gamma, self.group_map, layer)
            scores = self._smoothers[layer](hh.scores, eligible)
            plan = build_plan(scores, len(pos), cache.budget, self.strategy.alpha, layer, pos)
            apply_plan(cache, plan)
            o, q, e = plan.counts()
            self.plan_counts.append((self.step, layer, o, q, e))
            tailored = True
            if e == 0:
                break
        return tailored

    def _metrics(self, token: int, tailored: Sequence[bool]) -> StepMetrics:
        cs = self.caches
        return StepMetrics(
            step=self.step,
            position=self.position - 1,
            token=int(token),
            n_original=tuple(c.n_original for c in cs),
            n_quantized=tuple(c.n_quantized for c in cs),
            n_evicted=tuple(c.n_evicted for c in cs),
            usage_half_units=tuple(c.usage_half_units() for c in cs),
            bytes=tuple(c.usage().bytes for c in cs),
            tailored=tuple(tailored),
        )

    # phases -----------------------------------------------------------------

    def prefill(self, prompt: Sequence[int]) -> PrefillResult:
        if self._prefilled:
            raise ConfigurationError("prefill already ran; OQ allocation is frozen")
        model, cfg = self.model, self.model.cfg
        tokens = np.asarray(prompt, dtype=np.int64)
        if len(tokens) == 0:
            raise LengthError("empty prompt")
        if len(tokens) > cfg.max_seq_len:
            raise LengthError(f"prompt of {len(tokens)} tokens exceeds max_seq_len {cfg.max_seq_len}")
        pos = np.arange(len(tokens))
        x = model.embed(tokens)
        attentions = []
        for layer in range(cfg.n_layers):
            q, k, v = model.qkv(layer, x, pos)
            out, p = model.attend(q, pos, k, v, pos)
            attentions.append(p)
            cache = self.caches[layer]
            for i in range(len(tokens)):
                cache.append_arrays(i, k[i], v[i])
            rows = self._rows[layer]
            for t in range(max(0, len(tokens) - self.strategy.window), len(tokens)):
                rows.append((pos, p[:, t, :].astype(np.float64)))
            x = model.finish_layer(layer, x, out)
        logits = model.logits(x[-1])

        budgets = self._budgets(attentions)
        for cache, b in zip(self.caches, budgets):
            cache.budget = b
        self.position = len(tokens)
        self._prefilled = True
        tailored = [self._maintain(layer) for layer in range(cfg.n_layers)]
        self.prefill_metrics = self._metrics(tokens[-1], tailored)

        windows = []
        for layer, a in enumerate(attentions):
            w = min(self.strategy.window, a.shape[1] - 1, a.shape[2] - 2)
            windows.append(None if layer_stats(a, w, layer) is None else _slice(a, w, layer))
        return PrefillResult(logits, windows, self.allocation)

    def decode_step(self, token: int) -> StepResult:
        if not self._prefilled:
            raise ConfigurationError("decode_step called before prefill")
        model, cfg = self.model, self.model.cfg
        p = self.position
        if p >= cfg.max_seq_len:
            raise LengthError(f"position {p} exceeds max_seq_len {cfg.max_seq_len}")
        x = model.embed(np.array([token]))
        qpos = np.array([p])
        tailored = []
        for layer in range(cfg.n_layers):
            q, k, v = model.qkv(layer, x, qpos)
            cache = self.caches[layer]
            cache.append_arrays(p, k[0], v[0])
            tailored.append(self._maintain(layer))
            view = reconstruct(cache)
            if view.positions[-1] != p:
                raise IntegrityError(f"layer {layer}: newest token missing after maintenance")
            out, probs = model.attend(q, qpos, view.keys, view.values, view.positions)
            self._rows[layer].append((view.positions, probs[:, 0, :].astype(np.float64)))
            x = model.finish_layer(layer, x, out)
        self.position = p + 1
        self.step += 1
        return StepResult(model.logits(x[0]), self._metrics(token, tailored))


def _slice(a: np.ndarray, w: int, layer: int) -> AttnWindow:
    _, q, k = a.shape
    return AttnWindow(layer, a[:, q - w :, : k - w])


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def kl_divergence(ref_logits: np.ndarray, logits: np.ndarray) -> float:
    """KL(ref || other) of the next-token distributions."""
    lp, lq = log_softmax(ref_logits), log_softmax(logits)
    return float(np.sum(np.exp(lp) * (lp - lq)))


@dataclass
class GenerationResult:
    tokens: list[int]
    logits: np.ndarray
    report: DecodeReport
    allocation: Optional[OqAllocation] = None
    session: Optional[DecodeSession] = field(default=None, repr=False)


def generate(
    model: Transformer,
    prompt: Sequence[int],
    n_tokens: int,
    strategy: StrategyConfig,
    reference: Optional[GenerationResult] = None,
) -> GenerationResult:
    """Greedy decoding.

    With ``reference`` (normally a base-strategy run) the reference tokens are
    fed back instead of this run's own argmax, so every step's logits can be
    compared against the reference on an identical prefix.
    """
    if reference is not None and len(reference.tokens) < n_tokens:
        raise ValueError("reference run is shorter than the requested generation")
    session = DecodeSession(model, strategy)
    t0 = time.perf_counter()
    pre = session.prefill(prompt)
    t1 = time.perf_counter()

    s = strategy
    report = DecodeReport(
        strategy=s.kind,
        budget=None if s.kind == "base" else s.budget,
        window=s.window,
        n_layers=model.cfg.n_layers,
        prompt_len=len(prompt),
        n_generated=n_tokens,
    )
    if pre.allocation is not None:
        report.rho = pre.allocation.ratios
        report.oq_scores = pre.allocation.scores

    tokens: list[int] = []
    all_logits = np.empty((n_tokens, model.cfg.vocab_size), dtype=np.float32)
    logits = pre.logits
    report.steps.append(session.prefill_metrics)
    t2 = time.perf_counter()
    for i in range(n_tokens):
        if i:
            res = session.decode_step(tokens[-1])
            logits = res.logits
            report.steps.append(res.metrics)
        all_logits[i] = logits
        tokens.append(int(reference.tokens[i]) if reference is not None else int(np.argmax(logits)))
    t3 = time.perf_counter()

    report.prefill_seconds = t1 - t0
    report.decode_seconds = t3 - t2
    steps = max(n_tokens - 1, 0)
    report.tokens_per_sec = steps / report.decode_seconds if steps and report.decode_seconds > 0 else 0.0

    if reference is not None and n_tokens:
        ref = reference.logits[:n_tokens]
        report.kl_per_step = [kl_divergence(ref[i], all_logits[i]) for i in range(n_tokens)]
        report.mean_kl = float(np.mean(report.kl_per_step))
        report.max_abs_logit_delta = float(np.max(np.abs(ref.astype(np.float64) - all_logits)))
        report.top1_agreement = float(np.mean(np.argmax(ref, axis=1) == np.argmax(all_logits, axis=1)))
        if reference.report.tokens_per_sec > 0:
            report.relative_tps = report.tokens_per_sec / reference.report.tokens_per_sec

    return GenerationResult(tokens, all_logits, report, pre.allocation, session)
