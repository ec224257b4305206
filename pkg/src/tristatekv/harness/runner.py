"""Strategy runs, pairing against the base strategy, and report files."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..decode import GenerationResult, StrategyConfig, generate
from ..kv_store import LayerBudget, TriStateCache
from ..model import Transformer, load_weights
from .config import RunConfig
from .replay import ReplayResult, replay_policy
from .trace import read_trace

log = logging.getLogger(__name__)

COMPARISON_FIELDS = (
    "label", "strategy", "budget", "window", "prompt_len", "n_generated",
    "final_quant_ratio", "mean_quant_ratio", "steady_quant_ratio", "final_evict_ratio",
    "max_usage_token_equivalents", "mean_kl", "max_abs_logit_delta", "top1_agreement", "rho",
)


def build_model(cfg: RunConfig) -> Transformer:
    if cfg.weights:
        mcfg, weights = load_weights(cfg.weights, rng_seed=cfg.model.rng_seed)
        return Transformer(mcfg, weights)
    return Transformer(cfg.model)


def synthetic_prompt(vocab_size: int, seed: int, length: int) -> list[int]:
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, length).tolist()


def strategy_labels(strategies: tuple[StrategyConfig, ...]) -> list[str]:
    kinds = [s.kind for s in strategies]
    labels = []
    for s in strategies:
        label = s.kind if kinds.count(s.kind) == 1 else f"{s.kind}_B{s.budget}"
        while label in labels:
            label += "_"
        labels.append(label)
    return labels


def run_synthetic(cfg: RunConfig, pair: bool = False) -> dict[str, GenerationResult]:
    """Run every strategy on the synthetic workload.

    With ``pair`` (or whenever ``base`` is listed) the base run comes first and
    every other strategy is teacher-forced on its tokens for fidelity metrics.
    """
    assert cfg.synthetic is not None
    model = build_model(cfg)
    wl = cfg.synthetic
    prompt = synthetic_prompt(model.cfg.vocab_size, wl.seed, wl.prompt_len)
    strategies = cfg.strategies
    labels = strategy_labels(strategies)
    pair = pair or any(s.kind == "base" for s in strategies)
    results: dict[str, GenerationResult] = {}
    base: Optional[GenerationResult] = None
    if pair:
        base_idx = next((i for i, s in enumerate(strategies) if s.kind == "base"), None)
        base_strategy = strategies[base_idx] if base_idx is not None else replace(strategies[0], kind="base")
        base = generate(model, prompt, wl.gen_len, base_strategy)
        base.report.relative_tps = 1.0
        results[labels[base_idx] if base_idx is not None else "base"] = base
    for label, s in zip(labels, strategies):
        if label in results:
            continue
        log.info("running %s (budget %s)", label, s.budget)
        results[label] = generate(model, prompt, wl.gen_len, s, reference=base)
    return results


def run_trace(cfg: RunConfig, trace_path: Optional[str] = None) -> dict[str, ReplayResult]:
    trace = read_trace(trace_path or cfg.trace)
    labels = strategy_labels(cfg.strategies)
    return {label: replay_policy(trace, s) for label, s in zip(labels, cfg.strategies)}


def _csv(rows: list[dict], fieldnames) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def comparison_rows(results: dict[str, GenerationResult]) -> list[dict]:
    rows = []
    for label, res in results.items():
        summ = res.report.summary(timing=False)
        row = {"label": label, **{k: summ[k] for k in COMPARISON_FIELDS if k in summ}}
        row["rho"] = " ".join(f"{r:.6f}" for r in summ["rho"])
        for k in ("final_quant_ratio", "mean_quant_ratio", "steady_quant_ratio", "final_evict_ratio"):
            row[k] = f"{row[k]:.6f}"
        for k in ("mean_kl", "max_abs_logit_delta", "top1_agreement"):
            row[k] = "" if row[k] is None else f"{row[k]:.9e}"
        rows.append(row)
    return rows


def render_text(results: dict[str, GenerationResult]) -> str:
    lines = []
    for label, res in results.items():
        r = res.report
        lines.append(f"[{label}] strategy={r.strategy} budget={r.budget} window={r.window}")
        lines.append(f"  prompt={r.prompt_len} generated={r.n_generated}")
        if r.rho:
            lines.append("  rho: " + ", ".join(f"{x:.4f}" for x in r.rho))
        lines.append(
            f"  quant ratio final {r.final_quant_ratio:.2f}%  mean {r.mean_quant_ratio:.2f}%"
            f"  evict ratio {r.final_evict_ratio:.2f}%"
        )
        lines.append(f"  max usage {r.max_usage_half_units / 2:.1f} token-equivalents")
        if r.mean_kl is not None:
            lines.append(
                f"  vs base: mean KL {r.mean_kl:.6g}  max |dlogit| {r.max_abs_logit_delta:.6g}"
                f"  top-1 agreement {r.top1_agreement:.4f}"
            )
        rel = f"  relative {r.relative_tps:.3f}" if r.relative_tps is not None else ""
        lines.append(f"  decode {r.tokens_per_sec:.1f} tok/s{rel}")
    return "\n".join(lines) + "\n"


def write_reports(
    results: dict[str, GenerationResult], cfg: RunConfig, out_dir: str | Path
) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats = set(cfg.report.formats)
    written = []

    def put(name: str, text: str) -> None:
        p = out / name
        p.write_text(text)
        written.append(p)

    if "csv" in formats:
        for label, res in results.items():
            put(f"{label}_steps.csv", res.report.steps_csv())
        put("comparison.csv", _csv(comparison_rows(results), ("label",) + COMPARISON_FIELDS[1:]))
    if "json" in formats:
        doc = {
            "config": _config_dict(cfg),
            "runs": {label: res.report.summary(timing=False) for label, res in results.items()},
            "timing": {
                label: {
                    "tokens_per_sec": res.report.tokens_per_sec,
                    "relative_tps": res.report.relative_tps,
                    "decode_seconds": res.report.decode_seconds,
                    "prefill_seconds": res.report.prefill_seconds,
                }
                for label, res in results.items()
            },
        }
        put("summary.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if "txt" in formats:
        put("summary.txt", render_text(results))
    return written


def write_replay_reports(results: dict[str, ReplayResult], cfg: RunConfig, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    doc = {"config": _config_dict(cfg), "runs": {}}
    for label, res in results.items():
        rows = res.rows()
        p = out / f"{label}_plans.csv"
        p.write_text(_csv(rows, ("layer", "step", "n_keys", "n_original", "n_quantized",
                                 "n_evicted", "usage_token_equivalents")))
        written.append(p)
        doc["runs"][label] = {
            "rho": list(res.allocation.ratios) if res.allocation else [],
            "n_plans": len(rows),
        }
    p = out / "replay_summary.json"
    p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written


def _config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["strategies"] = [asdict(s) for s in cfg.strategies]
    return d


def save_snapshot(path: str | Path, caches: list[TriStateCache]) -> None:
    """Serialize layer caches to a single ``.npz`` file."""
    arrays = {}
    for c in caches:
        p = f"l{c.layer_id}_"
        kc, ks, vc, vs = c.quantized_arrays
        arrays.update({
            p + "meta": np.array([c.layer_id, c.n_kv_heads, c.d_head, c.window_size, c.n_evicted]),
            p + "budget": np.array(
                [c.budget.total, c.budget.original_quota, c.budget.quant_quota, c.budget.window]
                if c.budget else [-1, -1, -1, -1]
            ),
            p + "o_pos": c.original_positions, p + "o_key": c.original_keys, p + "o_val": c.original_values,
            p + "q_pos": c.quantized_positions, p + "q_kcodes": kc, p + "q_kscale": ks,
            p + "q_vcodes": vc, p + "q_vscale": vs,
        })
    np.savez(path, n_layers=np.array(len(caches)), **arrays)


def load_snapshot(path: str | Path) -> list[TriStateCache]:
    data = np.load(path)
    caches = []
    for layer in range(int(data["n_layers"])):
        p = f"l{layer}_"
        lid, g, d, w, ev = (int(x) for x in data[p + "meta"])
        b = [int(x) for x in data[p + "budget"]]
        budget = LayerBudget(*b) if b[0] >= 0 else None
        c = TriStateCache(lid, g, d, w, budget)
        c.replace_contents(
            data[p + "o_pos"], data[p + "o_key"], data[p + "o_val"],
            data[p + "q_pos"], data[p + "q_kcodes"], data[p + "q_kscale"],
            data[p + "q_vcodes"], data[p + "q_vscale"],
        )
        c.n_evicted = ev
        caches.append(c)
    return caches
