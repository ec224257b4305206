"""Tri-state (Original / Quantized / Evicted) KV-cache management under a memory budget."""

from .attn_stats import (
    AttnStats,
    AttnWindow,
    OqAllocation,
    OqConfig,
    allocate_budgets,
    compute_stats,
    key_mass,
    oq_ratios,
    oq_score,
    slice_window,
)
from .decode import DecodeSession, GenerationResult, StrategyConfig, generate
from .hh_scoring import HhScoreVector, hh_scores, top_b
from .kv_store import CostModel, LayerBudget, QuantizedEntry, TokenEntry, TriStateCache
from .model import ModelConfig, Transformer
from .quant import dequantize_token, quantize_token, reconstruct
from .report import DecodeReport
from .tailor import TailorPlan, apply_plan, build_plan

__version__ = "0.1.0"
