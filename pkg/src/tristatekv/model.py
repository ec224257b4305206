"""A small decoder-only transformer in numpy (float32).

Pre-norm blocks with RMSNorm, grouped-query attention with rotary position
encoding, and a SiLU-gated MLP.  Weights come from a seeded scaled-normal
initialisation or from a flat binary file (see ``save_weights``).  Rotary
encoding is applied to keys before they are cached, so a cached key never
needs re-rotation; attention masks compare absolute positions.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, TriStateError

WEIGHT_MAGIC = b"TKVW"
WEIGHT_VERSION = 1
_HEADER_FIELDS = (
    "n_layers",
    "n_query_heads",
    "n_kv_heads",
    "d_model",
    "d_head",
    "vocab_size",
    "max_seq_len",
    "d_ff",
)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_query_heads: int = 4
    n_kv_heads: int = 2
    d_model: int = 64
    d_head: int = 16
    vocab_size: int = 256
    max_seq_len: int = 8192
    rng_seed: int = 0
    d_ff: int = 0  # 0 means 4 * d_model
    rope_base: float = 10000.0
    # attention sharpness, geometric from first to last layer
    qk_gain: float = 0.1
    qk_gain_last: float = 16.0

    def __post_init__(self) -> None:
        if self.n_query_heads % self.n_kv_heads:
            raise ConfigurationError("n_query_heads must be divisible by n_kv_heads")
        if self.d_model != self.n_query_heads * self.d_head:
            raise ConfigurationError("d_model must equal n_query_heads * d_head")
        if self.d_head % 2:
            raise ConfigurationError("d_head must be even for rotary encoding")
        if min(self.n_layers, self.vocab_size, self.max_seq_len) <= 0:
            raise ConfigurationError("sizes must be positive")
        if self.qk_gain <= 0 or self.qk_gain_last <= 0:
            raise ConfigurationError("qk gains must be positive")

    @property
    def ffn_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    def layer_qk_gain(self, layer: int) -> float:
        if self.n_layers == 1:
            return self.qk_gain
        t = layer / (self.n_layers - 1)
        return self.qk_gain * (self.qk_gain_last / self.qk_gain) ** t

    @property
    def group_size(self) -> int:
        return self.n_query_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class Weights:
    tok_emb: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        """Tensors in file order."""
        out = [self.tok_emb]
        for lw in self.layers:
            out += [
                lw.attn_norm, lw.wq, lw.wk, lw.wv, lw.wo,
                lw.mlp_norm, lw.w_gate, lw.w_up, lw.w_down,
            ]
        return out + [self.final_norm, self.lm_head]


def _shapes(cfg: ModelConfig) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]], list[tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.ffn_dim
    hd, gd = cfg.n_query_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head
    head = [(cfg.vocab_size, d)]
    layer = [(d,), (d, hd), (d, gd), (d, gd), (hd, d), (d,), (d, f), (d, f), (f, d)]
    tail = [(d,), (d, cfg.vocab_size)]
    return head, layer, tail


def init_weights(cfg: ModelConfig) -> Weights:
    rng = np.random.default_rng(cfg.rng_seed)

    def normal(shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
        return (rng.standard_normal(shape) * (gain / np.sqrt(fan_in))).astype(np.float32)

    d, f = cfg.d_model, cfg.ffn_dim
    hd, gd = cfg.n_query_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head
    layers = []
    for layer in range(cfg.n_layers):
        g = np.sqrt(cfg.layer_qk_gain(layer))
        layers.append(
            LayerWeights(
                attn_norm=np.ones(d, dtype=np.float32),
                wq=normal((d, hd), d, g),
                wk=normal((d, gd), d, g),
                wv=normal((d, gd), d),
                wo=normal((hd, d), hd),
                mlp_norm=np.ones(d, dtype=np.float32),
                w_gate=normal((d, f), d),
                w_up=normal((d, f), d),
                w_down=normal((f, d), f),
            )
        )
    return Weights(
        tok_emb=rng.standard_normal((cfg.vocab_size, d)).astype(np.float32),
        layers=layers,
        final_norm=np.ones(d, dtype=np.float32),
        lm_head=normal((d, cfg.vocab_size), d),
    )


def save_weights(path: str | Path, cfg: ModelConfig, weights: Weights) -> None:
    """Write ``magic, version, 8 config ints`` (little-endian uint32) then float32 tensors.

    Tensor order: tok_emb; per layer attn_norm, wq, wk, wv, wo, mlp_norm,
    w_gate, w_up, w_down; then final_norm, lm_head.  All row-major.
    """
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", WEIGHT_VERSION))
        fh.write(struct.pack("<8I", *(getattr(cfg, n) if n != "d_ff" else cfg.ffn_dim for n in _HEADER_FIELDS)))
        for t in weights.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_weights(path: str | Path, rng_seed: int = 0) -> tuple[ModelConfig, Weights]:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHT_MAGIC:
        raise TriStateError(f"{path}: not a weight file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != WEIGHT_VERSION:
        raise TriStateError(f"{path}: unsupported weight version {version}")
    fields = dict(zip(_HEADER_FIELDS, struct.unpack_from("<8I", raw, 8)))
    cfg = ModelConfig(rng_seed=rng_seed, **fields)
    head, layer, tail = _shapes(cfg)
    shapes = head + layer * cfg.n_layers + tail
    expected = 40 + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != expected:
        raise TriStateError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = 40
    tensors = []
    for s in shapes:
        n = int(np.prod(s))
        tensors.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(s).astype(np.float32))
        off += 4 * n
    layers = [LayerWeights(*tensors[1 + 9 * i : 10 + 9 * i]) for i in range(cfg.n_layers)]
    return cfg, Weights(tensors[0], layers, tensors[-2], tensors[-1])


def rms_norm(x: np.ndarray, w: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(eps))) * w


def silu(x: np.ndarray) -> np.ndarray:
    return x / (np.float32(1.0) + np.exp(-x))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


class Rotary:
    """Half-split rotary tables for absolute positions."""

    def __init__(self, d_head: int, max_seq_len: int, base: float = 10000.0):
        inv = 1.0 / (base ** (np.arange(0, d_head, 2, dtype=np.float64) / d_head))
        ang = np.outer(np.arange(max_seq_len, dtype=np.float64), inv)
        self.cos = np.cos(ang).astype(np.float32)
        self.sin = np.sin(ang).astype(np.float32)
        self.half = d_head // 2

    def apply(self, x: np.ndarray, positions: np.ndarray | int) -> np.ndarray:
        """Rotate ``x`` of shape ``(..., heads, d_head)``; ``positions`` indexes the leading axis."""
        cos = self.cos[positions]
        sin = self.sin[positions]
        if np.ndim(positions):
            cos, sin = cos[:, None, :], sin[:, None, :]
        x1, x2 = x[..., : self.half], x[..., self.half :]
        return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


class Transformer:
    """Stateless forward pieces; KV state lives with the caller."""

    def __init__(self, cfg: ModelConfig, weights: Optional[Weights] = None):
        self.cfg = cfg
        self.w = weights if weights is not None else init_weights(cfg)
        self.rope = Rotary(cfg.d_head, cfg.max_seq_len, cfg.rope_base)
        self.scale = np.float32(1.0 / np.sqrt(cfg.d_head))

    def embed(self, tokens: np.ndarray | int) -> np.ndarray:
        return self.w.tok_emb[tokens]

    def qkv(self, layer: int, x: np.ndarray, positions: np.ndarray | int):
        """Project normalised hidden states; returns rotated q, rotated k, v."""
        cfg, lw = self.cfg, self.w.layers[layer]
        h = rms_norm(x, lw.attn_norm)
        lead = h.shape[:-1]
        q = (h @ lw.wq).reshape(*lead, cfg.n_query_heads, cfg.d_head)
        k = (h @ lw.wk).reshape(*lead, cfg.n_kv_heads, cfg.d_head)
        v = (h @ lw.wv).reshape(*lead, cfg.n_kv_heads, cfg.d_head)
        return self.rope.apply(q, positions), self.rope.apply(k, positions), v

    def attend(
        self,
        q: np.ndarray,
        q_pos: np.ndarray,
        keys: np.ndarray,
        values: np.ndarray,
        k_pos: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Causal GQA attention.

        ``q`` is ``(Q, H, d)``, ``keys``/``values`` are ``(K, G, d)``.  Returns the
        attention output ``(Q, H*d)`` and probabilities ``(H, Q, K)``.
        """
        cfg = self.cfg
        nq, nk = q.shape[0], keys.shape[0]
        g, r, d = cfg.n_kv_heads, cfg.group_size, cfg.d_head
        qg = q.reshape(nq, g, r, d).transpose(1, 2, 0, 3).reshape(g, r * nq, d)
        kt = keys.transpose(1, 2, 0)  # (G, d, K)
        s = (qg @ kt) * self.scale  # (G, r*Q, K)
        s = s.reshape(g, r, nq, nk)
        future = k_pos[None, :] > q_pos[:, None]
        if future.any():
            s = np.where(future, np.float32(-np.inf), s)
        p = softmax(s, axis=-1)
        out = p.reshape(g, r * nq, nk) @ values.transpose(1, 0, 2)  # (G, r*Q, d)
        out = out.reshape(g, r, nq, d).transpose(2, 0, 1, 3).reshape(nq, g * r * d)
        return out, p.reshape(g * r, nq, nk)

    def finish_layer(self, layer: int, x: np.ndarray, attn_out: np.ndarray) -> np.ndarray:
        lw = self.w.layers[layer]
        x = x + attn_out @ lw.wo
        h = rms_norm(x, lw.mlp_norm)
        return x + (silu(h @ lw.w_gate) * (h @ lw.w_up)) @ lw.w_down

    def logits(self, x: np.ndarray) -> np.ndarray:
        return rms_norm(x, self.w.final_norm) @ self.w.lm_head

    def forward_full(self, tokens: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Cache-free forward over a whole sequence: logits ``(T, V)`` and per-layer attention."""
        tokens = np.asarray(tokens)
        pos = np.arange(len(tokens))
        x = self.embed(tokens)
        attn = []
        for layer in range(self.cfg.n_layers):
            q, k, v = self.qkv(layer, x, pos)
            out, p = self.attend(q, pos, k, v, pos)
            attn.append(p)
            x = self.finish_layer(layer, x, out)
        return self.logits(x), attn
