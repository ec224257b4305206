"""Run configuration: JSON file <-> dataclasses."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from ..attn_stats import OqConfig
from ..decode import StrategyConfig
from ..errors import ConfigurationError
from ..model import ModelConfig


@dataclass(frozen=True)
class SyntheticWorkload:
    seed: int
    prompt_len: int
    gen_len: int


@dataclass(frozen=True)
class ReportConfig:
    out_dir: str = "report"
    formats: tuple[str, ...] = ("txt", "csv", "json")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    strategies: tuple[StrategyConfig, ...]
    synthetic: Optional[SyntheticWorkload] = None
    trace: Optional[str] = None
    report: ReportConfig = field(default_factory=ReportConfig)
    weights: Optional[str] = None

    def __post_init__(self) -> None:
        if (self.synthetic is None) == (self.trace is None):
            raise ConfigurationError("workload needs exactly one of 'synthetic' or 'trace'")
        if not self.strategies:
            raise ConfigurationError("at least one strategy is required")

    def with_overrides(self, seed: Optional[int] = None, budget: Optional[int] = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            model = replace(cfg.model, rng_seed=seed)
            synth = replace(cfg.synthetic, seed=seed) if cfg.synthetic else None
            cfg = replace(cfg, model=model, synthetic=synth)
        if budget is not None:
            cfg = replace(cfg, strategies=tuple(replace(s, budget=budget) for s in cfg.strategies))
        return cfg


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"{where}: unknown fields {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def parse_strategy(data: Any, where: str = "strategy") -> StrategyConfig:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object")
    data = dict(data)
    oq = data.pop("oq", {})
    window = data.get("window", 32)
    oq_cfg = _build(OqConfig, {"window": window, **oq}, f"{where}.oq")
    return _build(StrategyConfig, {**data, "oq": oq_cfg}, where)


def parse_config(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be an object")
    known = {"model", "strategy", "strategies", "workload", "report", "weights"}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown top-level fields {sorted(unknown)}")
    model = _build(ModelConfig, data.get("model", {}), "model")
    if "strategy" in data and "strategies" in data:
        raise ConfigurationError("give either 'strategy' or 'strategies', not both")
    raw = data.get("strategies", [data["strategy"]] if "strategy" in data else None)
    if not isinstance(raw, list):
        raise ConfigurationError("missing 'strategy' or 'strategies' list")
    strategies = tuple(parse_strategy(s, f"strategies[{i}]") for i, s in enumerate(raw))

    wl = data.get("workload")
    if not isinstance(wl, dict) or len(wl) != 1 or next(iter(wl)) not in ("synthetic", "trace"):
        raise ConfigurationError("workload must be {'synthetic': {...}} or {'trace': path}")
    synth = _build(SyntheticWorkload, wl["synthetic"], "workload.synthetic") if "synthetic" in wl else None
    trace = wl.get("trace")
    if trace is not None and not isinstance(trace, str):
        raise ConfigurationError("workload.trace must be a path string")
    rep = data.get("report", {})
    if isinstance(rep, dict) and "formats" in rep:
        rep = {**rep, "formats": tuple(rep["formats"])}
    report = _build(ReportConfig, rep, "report")
    return RunConfig(model, strategies, synth, trace, report, data.get("weights"))


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(data)
