"""Brute-force reference implementations for the test suite.

Deliberately written with plain Python loops, ``math.fsum`` and exact
fractions; nothing here imports from the main modules.
"""

from .reference import (
    PlanCheck,
    oracle_quantize,
    oracle_stats,
    oracle_topk,
    oracle_validate_plan,
)

__all__ = ["PlanCheck", "oracle_quantize", "oracle_stats", "oracle_topk", "oracle_validate_plan"]
