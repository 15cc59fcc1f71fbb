"""Gated grouped-query attention with QK-norm, RoPE (local layers) and NoPE (global layers)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class AttentionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionLayerConfig:
    d_model: int
    h_q: int
    h_kv: int
    kind: Literal["local", "global"] = "global"
    window: int = 0
    rope_theta: float = 10_000.0
    intra_doc_masking: bool = False
    norm_eps: float = 1e-6
    head_dim: int | None = None  # defaults to d_model // h_q

    def __post_init__(self):
        if self.h_q % self.h_kv:
            raise AttentionConfigError(f"h_q={self.h_q} not divisible by h_kv={self.h_kv}")
        if self.head_dim is None and self.d_model % self.h_q:
            raise AttentionConfigError(f"d_model={self.d_model} not divisible by h_q={self.h_q}")
        if self.kind not in ("local", "global"):
            raise AttentionConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "local":
            if self.window < 1:
                raise AttentionConfigError("local layers need window >= 1")
            if self.d_head % 2:
                raise AttentionConfigError(f"RoPE needs an even head dim, got {self.d_head}")

    @property
    def d_head(self) -> int:
        return self.head_dim if self.head_dim is not None else self.d_model // self.h_q

    @property
    def d_attn(self) -> int:
        return self.h_q * self.d_head


def layer_pattern(n_layers: int) -> list[str]:
    """Three local layers then one global, repeated; a trailing partial group stays local."""
    return ["global" if i % 4 == 3 else "local" for i in range(n_layers)]


def kv_head_index(i: int, h_q: int, h_kv: int) -> int:
    """1-indexed kv head serving 1-indexed query head ``i``: ``ceil(i * h_kv / h_q)``."""
    if not 1 <= i <= h_q:
        raise IndexError(f"query head {i} outside 1..{h_q}")
    return -((-i * h_kv) // h_q)


def kv_head_map(h_q: int, h_kv: int) -> np.ndarray:
    """0-indexed kv head for each 0-indexed query head."""
    return np.array([kv_head_index(i + 1, h_q, h_kv) - 1 for i in range(h_q)])


# ---------------------------------------------------------------- weights


ATTENTION_PARAMS = ("wq", "wk", "wv", "wg", "wo", "q_gain", "k_gain")


def attention_param_shapes(cfg: AttentionLayerConfig) -> dict[str, tuple[int, ...]]:
    d, dh = cfg.d_model, cfg.d_head
    return {
        "wq": (d, cfg.h_q * dh),
        "wk": (d, cfg.h_kv * dh),
        "wv": (d, cfg.h_kv * dh),
        "wg": (d, cfg.d_attn),
        "wo": (cfg.d_attn, d),
        "q_gain": (dh,),
        "k_gain": (dh,),
    }


def init_attention_weights(cfg: AttentionLayerConfig, sigma: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in attention_param_shapes(cfg).items():
        if name.endswith("_gain"):
            out[name] = np.ones(shape)
        else:
            out[name] = nx.sample_truncated_normal(int(np.prod(shape)), sigma, rng).data.reshape(shape)
    return out


# ---------------------------------------------------------------- pieces


def _heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    # [B, T, n*dh] -> [B, n, T, dh]
    b, t, _ = x.shape
    return nx.transpose(nx.reshape(x, (b, t, n_heads, d_head)), (0, 2, 1, 3))


def project_and_norm(x: Tensor, cfg: AttentionLayerConfig, w: dict) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head q, k, v; q and k RMS-normalized over the head dimension.

    ``x`` is ``[B, T, d]``; outputs are ``[B, h, T, d_h]``.
    """
    x = nx.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise nx.DimensionError(f"expected [B, T, {cfg.d_model}] input, got {x.shape}")
    dh = cfg.d_head
    q = _heads(x @ w["wq"], cfg.h_q, dh)
    k = _heads(x @ w["wk"], cfg.h_kv, dh)
    v = _heads(x @ w["wv"], cfg.h_kv, dh)
    q = nx.rms_normalize(q, w["q_gain"], cfg.norm_eps)
    k = nx.rms_normalize(k, w["k_gain"], cfg.norm_eps)
    return q, k, v


def _rope_tables(positions: np.ndarray, d_head: int, theta: float):
    freqs = theta ** (-np.arange(0, d_head, 2) / d_head)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    cos = np.repeat(np.cos(ang), 2, axis=-1)
    sin = np.repeat(np.sin(ang), 2, axis=-1)
    return cos, sin


def _pair_rotation(d_head: int) -> np.ndarray:
    # x @ R swaps each (x0, x1) pair into (-x1, x0)
    r = np.zeros((d_head, d_head))
    for i in range(0, d_head, 2):
        r[i + 1, i] = -1.0
        r[i, i + 1] = 1.0
    return r


def apply_rope(x, positions, theta: float = 10_000.0) -> Tensor:
    """Rotate adjacent feature pairs of ``x[..., T, d_h]`` by ``position * theta**(-2i/d_h)``."""
    x = nx.as_tensor(x)
    dh = x.shape[-1]
    if dh % 2:
        raise AttentionConfigError(f"RoPE needs an even head dim, got {dh}")
    cos, sin = _rope_tables(np.asarray(positions), dh, theta)
    return x * cos + (x @ _pair_rotation(dh)) * sin


def build_mask(
    seq_len: int,
    kind: str = "global",
    window: int = 0,
    doc_ids: np.ndarray | None = None,
) -> np.ndarray:
    """Boolean ``[..., T, T]`` array; entry ``(t, s)`` is True when t may attend to s."""
    t = np.arange(seq_len)[:, None]
    s = np.arange(seq_len)[None, :]
    allowed = s <= t
    if kind == "local":
        allowed &= s >= t - window + 1
    if doc_ids is not None:
        doc_ids = np.asarray(doc_ids)
        same = doc_ids[..., :, None] == doc_ids[..., None, :]
        allowed = allowed & same
    return allowed


def sdpa(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, h_q: int, h_kv: int) -> tuple[Tensor, Tensor]:
    """Masked softmax attention with GQA head sharing.

    Returns per-head outputs ``[B, h_q, T, d_h]`` and the attention weights.
    """
    dh = q.shape[-1]
    kv_map = kv_head_map(h_q, h_kv)
    if h_q != h_kv:
        k = nx.take(k, kv_map, axis=1)
        v = nx.take(v, kv_map, axis=1)
    logits = (q @ nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[:, None]
    logits = nx.where(mask, logits, -np.inf)
    probs = nx.softmax_lastdim(logits)
    return probs @ v, probs


def gated_output(x: Tensor, heads_out: Tensor, w_gate, w_out) -> Tensor:
    """Sigmoid-gate each head's output by its contiguous slice of ``sigmoid(x W_G)``, then project."""
    b, h, t, dh = heads_out.shape
    concat = nx.reshape(nx.transpose(heads_out, (0, 2, 1, 3)), (b, t, h * dh))
    gate = nx.sigmoid(nx.as_tensor(x) @ w_gate)
    return (concat * gate) @ w_out


def attention_forward(
    x,
    cfg: AttentionLayerConfig,
    w: dict,
    doc_ids: np.ndarray | None = None,
    positions: np.ndarray | None = None,
) -> Tensor:
    """Full gated attention sublayer on ``x`` of shape ``[B, T, d]`` (or ``[T, d]``)."""
    x = nx.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
        if doc_ids is not None:
            doc_ids = np.asarray(doc_ids)[None]
    t = x.shape[1]
    q, k, v = project_and_norm(x, cfg, w)
    if cfg.kind == "local":
        pos = np.arange(t) if positions is None else positions
        q = apply_rope(q, pos, cfg.rope_theta)
        k = apply_rope(k, pos, cfg.rope_theta)
    mask = build_mask(t, cfg.kind, cfg.window, doc_ids if cfg.intra_doc_masking else None)
    heads_out, _ = sdpa(q, k, v, mask, cfg.h_q, cfg.h_kv)
    u = gated_output(x, heads_out, w["wg"], w["wo"])
    if squeeze:
        u = nx.reshape(u, u.shape[1:])
    return u
