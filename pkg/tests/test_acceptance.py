"""Acceptance battery: one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import statistics
import time

import numpy as np
import pytest

from tristatekv.attn_stats import STAT_FLOOR, AttnStats, OqConfig, allocate_budgets, compute_stats, oq_ratios, oq_score
from tristatekv.decode import DecodeSession, StrategyConfig, generate
from tristatekv.harness.cli import main
from tristatekv.harness.runner import synthetic_prompt
from tristatekv.hh_scoring import top_b
from tristatekv.kv_store import LayerBudget
from tristatekv.model import ModelConfig, Transformer
from tristatekv.oracle import oracle_stats, oracle_topk, oracle_validate_plan
from tristatekv.quant import dequantize_array, quantize_array
from tristatekv.tailor import TailorPlan, build_plan

from .conftest import record_criterion

pytestmark = pytest.mark.acceptance


def _model(n_layers, seed):
    return Transformer(ModelConfig(n_layers=n_layers, rng_seed=seed))


# 1 --------------------------------------------------------------------------


def test_c1_budget_enforcement():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    violations = 0
    worst = 0.0
    runs = 0
    kinds = ("arkv", "origin_only", "quant_only")
    for i in range(100):
        n_layers = int(rng.choice([2, 4]))
        budget = int(rng.choice([64, 128, 256]))
        window = int(rng.choice([8, 16, 32]))
        seed = int(rng.integers(1 << 30))
        model = _model(n_layers, seed)
        prompt = synthetic_prompt(model.cfg.vocab_size, seed, int(rng.integers(8, 97)))
        s = StrategyConfig(kinds[i % 3], budget=budget, window=window)
        res = generate(model, prompt, 4 * budget, s)
        for m in res.report.steps:
            # exact integer comparison in half-units
            violations += sum(u > 2 * budget for u in m.usage_half_units)
            worst = max(worst, max(m.usage_half_units) / (2 * budget))
        for c in res.session.caches:
            c.check_invariants()
        runs += 1
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and runs == 100 and elapsed < 120
    record_criterion(1, "budget enforcement", ok,
                     f"{runs} runs, {violations} violations, peak usage {worst:.4f} B, {elapsed:.1f}s (< 120s)")
    assert ok


# 2 --------------------------------------------------------------------------


class _OneLayerSession(DecodeSession):
    """quant_only maintenance on a single layer; the others stay full precision."""

    only = None

    def _maintain(self, layer):
        if self.only is not None and layer != self.only:
            return False
        return super()._maintain(layer)


def _forced_logits(model, prompt, tokens, strategy, only):
    sess = _OneLayerSession(model, strategy)
    sess.only = only
    out = [sess.prefill(prompt).logits]
    for t in tokens[:-1]:
        out.append(sess.decode_step(t).logits)
    return np.array(out)


def test_c2_no_pressure_equivalence():
    prompt_len, gen = 64, 192
    budget = prompt_len + gen
    exact = True
    lines = []
    quant_ok = True
    for n_layers, seed in [(2, 0), (4, 1), (4, 2)]:
        model = _model(n_layers, seed)
        prompt = synthetic_prompt(model.cfg.vocab_size, seed, prompt_len)
        base = generate(model, prompt, gen, StrategyConfig("base"))
        for kind in ("arkv", "origin_only"):
            r = generate(model, prompt, gen, StrategyConfig(kind, budget=budget))
            exact &= r.tokens == base.tokens and np.array_equal(r.logits, base.logits)

        # quant_only: the window never covers the whole sequence, so it does quantize;
        # its logit error must stay under the sum of single-layer quantization errors
        s = StrategyConfig("quant_only", budget=budget)
        full = float(np.abs(_forced_logits(model, prompt, base.tokens, s, None) - base.logits).max())
        per_layer = [
            float(np.abs(_forced_logits(model, prompt, base.tokens, s, layer) - base.logits).max())
            for layer in range(n_layers)
        ]
        bound = sum(per_layer)
        quant_ok &= full <= bound
        lines.append(f"L={n_layers} max|dlogit|={full:.4f} <= {bound:.4f} "
                     f"({100 * full / np.abs(base.logits).max():.2f}% of max|logit|)")
    ok = exact and quant_ok
    record_criterion(2, "no-pressure equivalence", ok,
                     f"arkv/origin_only bit-identical={exact}; quant_only " + "; ".join(lines))
    assert ok


# 3 --------------------------------------------------------------------------


def _clamped_oracle(p):
    h, v, k, degenerate = oracle_stats(p)
    if degenerate:
        k = 1.0
    return max(h, STAT_FLOOR), max(v, STAT_FLOOR), max(k, STAT_FLOOR)


def test_c3_stats_oracle():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(2, 300))
        kind = i % 5
        if kind == 0:
            p = rng.dirichlet(np.ones(n))
        elif kind == 1:
            p = rng.dirichlet(np.full(n, 0.05))  # spiky
        elif kind == 2:
            p = np.full(n, 1.0 / n)  # degenerate
        elif kind == 3:
            p = np.zeros(n)
            p[rng.choice(n, size=max(1, n // 10), replace=False)] = rng.random(max(1, n // 10)) + 0.1
            p /= p.sum()
        else:
            p = np.exp(rng.standard_normal(n) * 4)
            p /= p.sum()
        s = compute_stats(p)
        got = (max(s.entropy, STAT_FLOOR), max(s.variance, STAT_FLOOR), max(s.kurtosis, STAT_FLOOR))
        ref = _clamped_oracle(p.tolist())
        for g, r in zip(got, ref):
            worst = max(worst, abs(g - r) / abs(r))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10
    record_criterion(3, "stats oracle equivalence", ok,
                     f"1000 distributions, max relative error {worst:.2e} (<= 1e-6), {elapsed:.1f}s (< 10s)")
    assert ok


# 4 --------------------------------------------------------------------------


def test_c4_topb_and_tailor():
    rng = np.random.default_rng(4)
    topk_bad = 0
    ties = 0
    for i in range(1000):
        n = int(rng.integers(1, 200))
        if i % 4 == 0:
            s = rng.integers(0, 3, size=n).astype(np.float64)  # heavy ties
            ties += 1
        elif i % 4 == 1:
            s = np.full(n, 0.5)
            ties += 1
        else:
            s = rng.standard_normal(n)
        b = int(rng.integers(0, n + 1))
        topk_bad += set(top_b(s, b).tolist()) != oracle_topk(s.tolist(), b)

    plan_bad = 0
    for _ in range(10_000):
        w = int(rng.integers(1, 40))
        total = int(rng.integers(w + 1, w + 120))
        orig = int(rng.integers(w, total + 1))
        budget = LayerBudget(total, orig, int(rng.integers(0, 2 * (total - orig) + 1)), w)
        k = int(rng.integers(w + 1, 2 * total + 40))
        alpha = float(rng.choice([0.3, 0.5, 0.75, 0.9, 1.0]))
        s = rng.integers(0, 8, size=k - w) / 7.0 if rng.random() < 0.3 else rng.random(k - w)
        plan = build_plan(s, k, budget, alpha)
        plan_bad += not oracle_validate_plan(plan, s, budget, alpha, k, w).ok

    # injected faults
    budget = LayerBudget(40, 20, 30, 8)
    s = rng.random(52)
    plan = build_plan(s, 60, budget)
    n_o, n_q, _ = plan.counts()
    over = 2 * budget.total - (2 * n_o + n_q) + 1
    faults = [
        TailorPlan(plan.originals[plan.originals != 59], plan.quantize, np.append(plan.evict, 59), 60, 8),
        TailorPlan(np.sort(np.concatenate([plan.originals, plan.quantize[:over]])), plan.quantize[over:],
                   plan.evict, 60, 8),
        TailorPlan(plan.originals, plan.quantize, plan.evict[1:], 60, 8),
        TailorPlan(np.sort(np.append(plan.originals[1:], plan.quantize[0])),
                   np.sort(np.append(plan.quantize[1:], plan.originals[0])), plan.evict, 60, 8),
    ]
    rejected = sum(not oracle_validate_plan(f, s, budget, 0.75, 60, 8).ok for f in faults)
    ok = topk_bad == 0 and ties >= 100 and plan_bad == 0 and rejected == len(faults)
    record_criterion(4, "top-b / tailor correctness", ok,
                     f"top-b mismatches {topk_bad}/1000 ({ties} tie cases), plan failures {plan_bad}/10000, "
                     f"faults rejected {rejected}/{len(faults)}")
    assert ok


# 5 --------------------------------------------------------------------------


def test_c5_quantization_bound():
    rng = np.random.default_rng(5)
    n, g, d = 100_000, 2, 16
    mag = 10.0 ** rng.uniform(-6, 3, size=(n, 1, 1))
    x = (rng.standard_normal((n, g, d)) * mag).astype(np.float32)
    codes, scale = quantize_array(x)
    back = dequantize_array(codes, scale)
    err = np.abs(back.astype(np.float64) - x.astype(np.float64))
    ulp = np.spacing(np.maximum(np.abs(x), np.abs(back))).astype(np.float64)
    bound = scale.astype(np.float64)[..., None] / 2 + ulp
    violations = int(np.count_nonzero(err > bound))
    ok = violations == 0
    record_criterion(5, "quantization bound", ok,
                     f"{n} tokens x {g} heads x {d}, magnitudes 1e-6..1e3, violations {violations}, "
                     f"max err/scale {float((err / scale[..., None]).max()):.4f}")
    assert ok


# 6 --------------------------------------------------------------------------


def test_c6_oq_ratio_properties():
    rng = np.random.default_rng(6)
    max_ok = True
    scale_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 33))
        stats = [AttnStats(*rng.uniform(0, 5, size=3)) for _ in range(n)]
        q = [oq_score(s, OqConfig()) for s in stats]
        r = oq_ratios(q)
        max_ok &= max(r) == 1.0
        # exact scalings: powers of two on real scores, integer factors on integer scores
        e = int(rng.integers(-30, 31))
        scale_ok &= oq_ratios([x * 2.0**e for x in q]) == r
        qi = [float(v) for v in rng.integers(1, 1 << 20, size=n)]
        c = float(rng.integers(1, 1 << 20))
        scale_ok &= oq_ratios([x * c for x in qi]) == oq_ratios(qi)

    feasible = True
    checked = 0
    for budget in (512, 1024, 2048):
        for rho in np.linspace(1.0 / 1000, 1.0, 1000):
            for b in allocate_budgets([float(rho)], budget, 32):
                feasible &= 2 * b.original_quota + b.quant_quota <= 2 * budget and b.original_quota >= 32
                checked += 1
    ok = max_ok and scale_ok and feasible
    record_criterion(6, "OQ ratio properties", ok,
                     f"max rho == 1: {max_ok}; exact scaling invariance: {scale_ok}; "
                     f"{checked} grid budgets feasible: {feasible}")
    assert ok


# 7 --------------------------------------------------------------------------


def test_c7_memory_direction():
    t0 = time.perf_counter()
    model = _model(4, 0)
    prompt = synthetic_prompt(model.cfg.vocab_size, 0, 64)
    rows = []
    for budget in (512, 1024, 2048):
        rep = generate(model, prompt, 4096 - 64, StrategyConfig("arkv", budget=budget)).report
        rows.append((budget, rep.final_evict_ratio, rep.final_quant_ratio, rep.steady_quant_ratio,
                     rep.mean_quant_ratio))
    elapsed = time.perf_counter() - t0
    ev = [r[1] for r in rows]
    qr = [r[2] for r in rows]
    decreasing = ev[0] > ev[1] > ev[2]
    spread = max(qr) - min(qr)
    ok = decreasing and spread < 5.0 and elapsed < 300
    detail = "; ".join(f"B={b}: evict {e:.2f}% quant {q:.2f}% (steady {s:.2f}%, all-step mean {m:.2f}%)"
                       for b, e, q, s, m in rows)
    record_criterion(7, "memory-behaviour direction", ok,
                     f"{detail}; quant spread {spread:.2f} pp (< 5), {elapsed:.1f}s (< 300s)")
    assert ok


# 8 --------------------------------------------------------------------------


def _ci(xs):
    m = statistics.fmean(xs)
    half = 1.96 * statistics.stdev(xs) / math.sqrt(len(xs))
    return m, half


def test_c8_fidelity_ordering():
    prompt_len, gen = 64, 448
    budget = (prompt_len + gen) // 4
    kl = {"origin_only": [], "arkv": [], "quant_only": []}
    for seed in range(20):
        model = _model(4, seed)
        prompt = synthetic_prompt(model.cfg.vocab_size, seed, prompt_len)
        base = generate(model, prompt, gen, StrategyConfig("base"))
        for kind in kl:
            r = generate(model, prompt, gen, StrategyConfig(kind, budget=budget), reference=base)
            kl[kind].append(r.report.mean_kl)
    o, a, q = (np.array(kl[k]) for k in ("origin_only", "arkv", "quant_only"))
    wins = float(np.mean(a <= q))
    ok = o.mean() <= 1.5 * a.mean() and wins >= 0.8
    cis = ", ".join(f"{k} {m:.5f} +/- {h:.5f}" for k, (m, h) in ((k, _ci(v)) for k, v in kl.items()))
    record_criterion(8, "fidelity ordering", ok,
                     f"20 seeds, B={budget} of {prompt_len + gen}; mean KL (95% CI) {cis}; "
                     f"origin/arkv {o.mean() / a.mean():.3f} (<= 1.5); arkv <= quant_only in {100 * wins:.0f}% "
                     f"of seeds (>= 80%)")
    assert ok


# 9 --------------------------------------------------------------------------


def test_c9_overhead_bound():
    model = _model(4, 0)
    prompt = synthetic_prompt(model.cfg.vocab_size, 0, 64)
    configs = {k: StrategyConfig(k, budget=128) for k in ("arkv", "origin_only")}
    for s in configs.values():  # warm-up
        generate(model, prompt, 64, s)
    times = {k: [] for k in configs}
    for i in range(10):
        order = ("arkv", "origin_only") if i % 2 == 0 else ("origin_only", "arkv")
        for k in order:
            times[k].append(generate(model, prompt, 448, configs[k]).report.decode_seconds_per_token)
    a = statistics.median(times["arkv"])
    o = statistics.median(times["origin_only"])
    ok = a <= 1.3 * o
    record_criterion(9, "overhead bound", ok,
                     f"median per-token decode arkv {1e3 * a:.3f} ms, origin_only {1e3 * o:.3f} ms, "
                     f"ratio {a / o:.3f} (<= 1.3) over 10 interleaved runs")
    assert ok


# 10 -------------------------------------------------------------------------


def test_c10_determinism(tmp_path):
    cfg = {
        "model": {"n_layers": 2, "rng_seed": 11},
        "strategies": [
            {"kind": "base"},
            {"kind": "origin_only", "budget": 64},
            {"kind": "quant_only", "budget": 64},
            {"kind": "arkv", "budget": 64},
        ],
        "workload": {"synthetic": {"seed": 11, "prompt_len": 48, "gen_len": 200}},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["run", "--config", str(path), "--out", str(o)]) for o in outs]
    tables = sorted(p.name for p in outs[0].glob("*.csv"))
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in tables)
    runs = [json.loads((o / "summary.json").read_text())["runs"] for o in outs]
    ok = codes == [0, 0] and len(tables) == 5 and same and runs[0] == runs[1]
    record_criterion(10, "determinism", ok, f"{len(tables)} CSV tables byte-identical across two runs: {same}")
    assert ok
