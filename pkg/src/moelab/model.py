"""Decoder assembly: sandwich-normalized blocks, depth-scaled gains, init, losses and presets."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import yaml

from . import numerics as nx
from .attention import (
    AttentionLayerConfig,
    attention_forward,
    attention_param_shapes,
    layer_pattern,
)
from .moe import (
    LoadStats,
    MoeConfig,
    RouterState,
    expert_param_shapes,
    max_vio,
    moe_forward,
    swiglu_expert,
)
from .numerics import Tensor

PRESET_DIR = Path(__file__).parent / "presets"
PRESETS = ("tiny", "trinity-nano", "trinity-mini", "trinity-large")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    name: str = "custom"
    n_layers: int = 8
    dense_first: int = 2
    d_model: int = 64
    ffn_dim: int = 192
    h_q: int = 8
    h_kv: int = 2
    head_dim: int | None = None
    window: int = 16
    seq_len: int = 64
    n_shared: int = 1
    n_routed: int = 16
    top_k: int = 2
    route_scale: float = 1.414
    expert_dim: int = 64
    init_sigma: float | None = None
    vocab_size: int = 512
    z_loss_weight: float = 1e-6
    aux_alpha: float = 1e-4
    balancer: Literal["sign", "smebu", "none"] = "smebu"
    intra_doc_masking: bool = False
    rope_theta: float = 10_000.0
    norm_eps: float = 1e-6
    post_norm_eps: float = 1e-6
    gamma: float = 5e-4
    lam: float = 5e-4
    kappa: float = 2.0
    beta: float = 0.5

    def __post_init__(self):
        if not 0 <= self.dense_first <= self.n_layers:
            raise ConfigError(f"dense_first={self.dense_first} outside 0..{self.n_layers}")
        if self.init_sigma is not None and not sigma_matches(self.init_sigma, self.d_model):
            raise ConfigError(
                f"init_sigma {self.init_sigma} does not match 0.5/sqrt({self.d_model})"
                f" = {0.5 / math.sqrt(self.d_model):.6f}"
            )

    @property
    def d_head(self) -> int:
        return self.head_dim if self.head_dim is not None else self.d_model // self.h_q

    @property
    def sigma(self) -> float:
        return init_sigma(self.d_model)

    def attention_config(self, layer: int) -> AttentionLayerConfig:
        return AttentionLayerConfig(
            d_model=self.d_model,
            h_q=self.h_q,
            h_kv=self.h_kv,
            kind=layer_pattern(self.n_layers)[layer],
            window=self.window,
            rope_theta=self.rope_theta,
            intra_doc_masking=self.intra_doc_masking,
            norm_eps=self.norm_eps,
            head_dim=self.head_dim,
        )

    def moe_config(self) -> MoeConfig:
        return MoeConfig(
            d_model=self.d_model,
            n_routed=self.n_routed,
            n_shared=self.n_shared,
            top_k=self.top_k,
            expert_dim=self.expert_dim,
            route_scale=self.route_scale,
            aux_alpha=self.aux_alpha,
            balancer=self.balancer,
        )

    def blocks(self) -> list["BlockSpec"]:
        kinds = layer_pattern(self.n_layers)
        return [
            BlockSpec(i, kinds[i], "dense" if i < self.dense_first else "moe")
            for i in range(self.n_layers)
        ]

    def moe_layers(self) -> list[int]:
        return list(range(self.dense_first, self.n_layers))

    def new_router_states(self) -> dict[int, RouterState]:
        return {
            layer: RouterState.zeros(
                self.n_routed, gamma=self.gamma, lam=self.lam, kappa=self.kappa, beta=self.beta
            )
            for layer in self.moe_layers()
        }

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class BlockSpec:
    index: int
    attention: str
    ffn: str


def init_sigma(d_model: int) -> float:
    return 0.5 / math.sqrt(d_model)


def sigma_matches(printed: float, d_model: int) -> bool:
    """True when ``0.5/sqrt(d_model)`` rounds to ``printed`` at its printed precision."""
    text = repr(float(printed))
    decimals = len(text.split(".")[1]) if "." in text and "e" not in text else 12
    return round(init_sigma(d_model), decimals) == round(printed, decimals)


def load_config(path_or_name: str | Path) -> ModelConfig:
    """Load a YAML config file, or a shipped preset by name."""
    path = Path(path_or_name)
    if not path.exists() and str(path_or_name) in PRESETS:
        path = PRESET_DIR / f"{path_or_name}.yaml"
    if not path.exists():
        raise ConfigError(f"no config file or preset named {path_or_name!r}")
    raw = yaml.safe_load(path.read_text()) or {}
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return ModelConfig(**raw)


def dump_config(cfg: ModelConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False)


# ---------------------------------------------------------------- parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor's shape, computed without allocating anything."""
    d = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for blk in cfg.blocks():
        p = f"layers.{blk.index}"
        for name, shape in attention_param_shapes(cfg.attention_config(blk.index)).items():
            shapes[f"{p}.attn.{name}"] = shape
        for sub in ("attn", "ffn"):
            shapes[f"{p}.{sub}.norm1"] = (d,)
            shapes[f"{p}.{sub}.norm2"] = (d,)
        if blk.ffn == "dense":
            shapes[f"{p}.ffn.gate"] = (d, cfg.ffn_dim)
            shapes[f"{p}.ffn.up"] = (d, cfg.ffn_dim)
            shapes[f"{p}.ffn.down"] = (cfg.ffn_dim, d)
        else:
            for name, shape in expert_param_shapes(cfg.moe_config()).items():
                shapes[f"{p}.moe.{name}"] = shape
    shapes["lm_norm"] = (d,)
    shapes["unembed"] = (d, cfg.vocab_size)
    return shapes


def count_params(cfg: ModelConfig) -> dict[str, int]:
    """Total and per-token active parameter counts (embeddings included)."""
    total = active = 0
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        total += n
        if ".moe.routed." in name:
            continue
        active += n
    per_expert = 3 * cfg.d_model * cfg.expert_dim
    active += len(cfg.moe_layers()) * cfg.top_k * per_expert
    return {"total": total, "active": active}


def init_norm_gains(n_layers: int) -> tuple[float, float]:
    """Initial gains of the input and output RMSNorm of every sublayer."""
    if n_layers < 1:
        raise ConfigError("need at least one layer")
    return 1.0, 1.0 / math.sqrt(n_layers)


def is_norm_gain(name: str) -> bool:
    return name.endswith(("norm1", "norm2", "lm_norm", "q_gain", "k_gain"))


def init_all_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Truncated-normal matrices with sigma = 0.5/sqrt(d); depth-scaled output-norm gains."""
    rng = np.random.default_rng(seed)
    sigma = cfg.sigma
    g1, g2 = init_norm_gains(cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm2"):
            params[name] = np.full(shape, g2)
        elif is_norm_gain(name):
            params[name] = np.full(shape, g1)
        else:
            n = int(np.prod(shape))
            params[name] = nx.sample_truncated_normal(n, sigma, rng).data.reshape(shape)
    return params


# ---------------------------------------------------------------- forward pieces


def embed(token_ids, table, d_model: int) -> Tensor:
    """``sqrt(d) * table[token_ids]``."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    table = nx.as_tensor(table)
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= table.shape[0]):
        raise IndexError(f"token id outside vocabulary of {table.shape[0]}")
    return nx.take(table, token_ids, axis=0) * math.sqrt(d_model)


def sandwich_block(x, sublayer, gain_in, gain_out, eps: float = 1e-6, post_eps: float | None = None) -> Tensor:
    """``x + RMSNorm_out(sublayer(RMSNorm_in(x)))``."""
    x = nx.as_tensor(x)
    h = sublayer(nx.rms_normalize(x, gain_in, eps))
    return x + nx.rms_normalize(h, gain_out, eps if post_eps is None else post_eps)


def final_head(h, lm_norm_gain, unembed, eps: float = 1e-6) -> Tensor:
    return nx.rms_normalize(h, lm_norm_gain, eps) @ unembed


def z_loss(logits) -> Tensor:
    """Mean squared log-partition over positions."""
    logits = nx.as_tensor(logits)
    lse = nx.logsumexp_lastdim(nx.reshape(logits, (-1, logits.shape[-1])))
    return nx.mean(nx.square(lse))


def training_loss(logits, targets, z_weight: float, aux_losses=()) -> Tensor:
    loss = nx.cross_entropy(logits, targets)
    if z_weight:
        loss = loss + z_loss(logits) * z_weight
    for aux in aux_losses:
        loss = loss + aux
    return loss


def adjusted_lr(lr: float, fan_in: int, fan_out: int) -> float:
    """``lr * sqrt(max(1, fan_out / fan_in))``."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fans must be positive")
    return lr * math.sqrt(max(1.0, fan_out / fan_in))


# ---------------------------------------------------------------- full model


@dataclass
class ForwardResult:
    loss: Tensor
    ce: float
    z: float
    aux: float
    logits: Tensor
    load_stats: dict[int, LoadStats] = field(default_factory=dict)
    selections: dict[int, np.ndarray] = field(default_factory=dict)
    lse_mean_abs: float = 0.0
    lse_max: float = 0.0

    @property
    def max_vio(self) -> dict[int, float]:
        return {layer: max_vio(s) for layer, s in self.load_stats.items()}

    def metrics(self) -> dict:
        mv = self.max_vio
        return {
            "loss": float(self.loss.data),
            "ce": self.ce,
            "z_loss": self.z,
            "aux_loss": self.aux,
            "lse_mean_abs": self.lse_mean_abs,
            "lse_max": self.lse_max,
            "max_vio": {str(k): v for k, v in mv.items()},
            "max_vio_max": max(mv.values()) if mv else 0.0,
            "max_vio_mean": float(np.mean(list(mv.values()))) if mv else 0.0,
        }


def model_forward(
    inputs,
    targets,
    cfg: ModelConfig,
    params: dict,
    states: dict[int, RouterState],
    doc_ids: np.ndarray | None = None,
    selections: dict[int, np.ndarray] | None = None,
) -> ForwardResult:
    """Embed, run every block, project to logits and compute the training loss.

    ``inputs``/``targets`` are ``[B, T]`` token ids. ``selections`` freezes
    MoE expert choices per layer (as returned in a previous result).
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    b, t = inputs.shape
    if t > cfg.seq_len:
        raise ValueError(f"sequence length {t} exceeds seq_len {cfg.seq_len}")
    if doc_ids is not None:
        doc_ids = np.atleast_2d(doc_ids)
    eps, post_eps = cfg.norm_eps, cfg.post_norm_eps
    moe_cfg = cfg.moe_config()

    x = embed(inputs, params["embed"], cfg.d_model)
    load_stats, chosen, aux_terms = {}, {}, []
    for blk in cfg.blocks():
        p = f"layers.{blk.index}"
        acfg = cfg.attention_config(blk.index)
        aw = {k: params[f"{p}.attn.{k}"] for k in attention_param_shapes(acfg)}
        x = sandwich_block(
            x,
            lambda h: attention_forward(h, acfg, aw, doc_ids=doc_ids),
            params[f"{p}.attn.norm1"],
            params[f"{p}.attn.norm2"],
            eps,
            post_eps,
        )
        if blk.ffn == "dense":
            fw = (params[f"{p}.ffn.gate"], params[f"{p}.ffn.up"], params[f"{p}.ffn.down"])
            sub = lambda h: swiglu_expert(h, *fw)  # noqa: E731
        else:
            mw = {k: params[f"{p}.moe.{k}"] for k in expert_param_shapes(moe_cfg)}
            frozen = None if selections is None else selections.get(blk.index)
            layer = blk.index

            def sub(h, mw=mw, frozen=frozen, layer=layer):
                res = moe_forward(
                    h, moe_cfg, mw, states[layer], selected=frozen, residual=False, seq_len=t
                )
                load_stats[layer] = res.stats
                chosen[layer] = res.selected
                if res.aux_loss is not None:
                    aux_terms.append(res.aux_loss)
                return res.out

        x = sandwich_block(x, sub, params[f"{p}.ffn.norm1"], params[f"{p}.ffn.norm2"], eps, post_eps)

    logits = final_head(x, params["lm_norm"], params["unembed"], eps)
    ce = nx.cross_entropy(logits, targets)
    loss = ce
    zl = None
    if cfg.z_loss_weight:
        zl = z_loss(logits)
        loss = loss + zl * cfg.z_loss_weight
    aux_total = 0.0
    for a in aux_terms:
        loss = loss + a
        aux_total += float(a.data)
    lse = nx._logsumexp(logits.data)
    return ForwardResult(
        loss=loss,
        ce=float(ce.data),
        z=float(zl.data) if zl is not None else 0.0,
        aux=aux_total,
        logits=logits,
        load_stats=load_stats,
        selections=chosen,
        lse_mean_abs=float(np.abs(lse).mean()),
        lse_max=float(lse.max()),
    )
