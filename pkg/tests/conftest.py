import numpy as np
import pytest

from tristatekv.kv_store import LayerBudget, TokenEntry, TriStateCache
from tristatekv.model import ModelConfig, Transformer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(n_layers=2, n_query_heads=4, n_kv_heads=2, d_model=32, d_head=8, vocab_size=64, rng_seed=7)


@pytest.fixture(scope="session")
def small_model(small_cfg):
    return Transformer(small_cfg)


def make_entry(pos, rng, heads=2, d=4):
    return TokenEntry(pos, rng.standard_normal((heads, d)).astype(np.float32),
                      rng.standard_normal((heads, d)).astype(np.float32))


def filled_cache(n, rng, window_size=4, budget=None, heads=2, d=4):
    cache = TriStateCache(0, heads, d, window_size, budget)
    for p in range(n):
        cache.append(make_entry(p, rng, heads, d))
    return cache


@pytest.fixture
def budget_64():
    return LayerBudget(total=64, original_quota=40, quant_quota=48, window=8)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, title, passed, detail=""):
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
