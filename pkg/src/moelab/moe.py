"""Sigmoid-routed sparse MoE with shared experts and bias-based load balancing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MoeConfig:
    d_model: int
    n_routed: int
    n_shared: int
    top_k: int
    expert_dim: int
    route_scale: float = 1.0
    aux_alpha: float = 0.0
    balancer: Literal["sign", "smebu", "none"] = "smebu"

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_routed:
            raise ValueError(f"need 1 <= top_k <= n_routed, got {self.top_k}/{self.n_routed}")
        if self.route_scale <= 0:
            raise ValueError("route_scale must be positive")
        if self.aux_alpha < 0:
            raise ValueError("aux_alpha must be non-negative")
        if self.balancer not in ("sign", "smebu", "none"):
            raise ValueError(f"unknown balancer {self.balancer!r}")


@dataclass
class RouterState:
    bias: np.ndarray
    momentum: np.ndarray
    gamma: float = 5e-4
    lam: float = 5e-4
    kappa: float = 2.0
    beta: float = 0.5

    @classmethod
    def zeros(cls, n_routed: int, **hparams) -> "RouterState":
        return cls(np.zeros(n_routed), np.zeros(n_routed), **hparams)

    def copy(self) -> "RouterState":
        return dataclasses.replace(self, bias=self.bias.copy(), momentum=self.momentum.copy())


@dataclass
class LoadStats:
    counts: np.ndarray
    tokens: int
    top_k: int

    @property
    def mean_load(self) -> float:
        return float(self.counts.mean())

    def __add__(self, other: "LoadStats") -> "LoadStats":
        return LoadStats(self.counts + other.counts, self.tokens + other.tokens, self.top_k)


# ---------------------------------------------------------------- routing


def router_scores(u, router) -> Tensor:
    """``sigmoid(u @ router)``; ``router`` holds one column per routed expert."""
    return nx.sigmoid(nx.as_tensor(u) @ router)


def select_topk(scores: np.ndarray, bias: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest ``scores + bias`` per row, ties to the lowest index.

    Works on a single row or a ``[T, N]`` matrix; rows of the result are sorted
    ascending.
    """
    biased = np.asarray(scores, dtype=np.float64) + bias
    order = np.argsort(-biased, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def selection_mask(selected: np.ndarray, n_routed: int) -> np.ndarray:
    selected = np.atleast_2d(selected)
    mask = np.zeros((selected.shape[0], n_routed), dtype=bool)
    np.put_along_axis(mask, selected, True, axis=-1)
    return mask


def normalize_gates(scores, mask: np.ndarray) -> Tensor:
    """Gates are the selected scores divided by their row sum; unselected gates are 0."""
    scores = nx.as_tensor(scores)
    kept = scores * mask.astype(np.float64)
    return kept / nx.sum_(kept, axis=-1, keepdims=True)


# ---------------------------------------------------------------- experts


def swiglu_expert(u, gate_w, up_w, down_w) -> Tensor:
    u = nx.as_tensor(u)
    return (nx.silu(u @ gate_w) * (u @ up_w)) @ down_w


def expert_param_shapes(cfg: MoeConfig) -> dict[str, tuple[int, ...]]:
    d, e = cfg.d_model, cfg.expert_dim
    shapes = {"router": (d, cfg.n_routed)}
    for kind, n in (("shared", cfg.n_shared), ("routed", cfg.n_routed)):
        for i in range(n):
            shapes[f"{kind}.{i}.gate"] = (d, e)
            shapes[f"{kind}.{i}.up"] = (d, e)
            shapes[f"{kind}.{i}.down"] = (e, d)
    return shapes


def init_moe_weights(cfg: MoeConfig, sigma: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        name: nx.sample_truncated_normal(int(np.prod(shape)), sigma, rng).data.reshape(shape)
        for name, shape in expert_param_shapes(cfg).items()
    }


def _expert(w: dict, kind: str, i: int):
    return w[f"{kind}.{i}.gate"], w[f"{kind}.{i}.up"], w[f"{kind}.{i}.down"]


@dataclass
class MoeOutput:
    out: Tensor
    stats: LoadStats
    scores: Tensor
    selected: np.ndarray
    aux_loss: Tensor | None = None


def moe_forward(
    u,
    cfg: MoeConfig,
    w: dict,
    state: RouterState,
    selected: np.ndarray | None = None,
    residual: bool = True,
    seq_len: int | None = None,
) -> MoeOutput:
    """Shared experts plus gated, route-scaled routed experts over tokens ``u[..., d]``.

    ``selected`` freezes the expert choice (``[tokens, top_k]`` indices) instead of
    computing it from ``scores + bias``. With ``residual`` the input is added back.
    ``seq_len`` splits the flattened tokens into sequences for the aux loss.
    The router state is read, never modified.
    """
    u = nx.as_tensor(u)
    lead = u.shape[:-1]
    flat = nx.reshape(u, (-1, cfg.d_model))
    n_tok = flat.shape[0]

    scores = router_scores(flat, w["router"])
    if selected is None:
        selected = select_topk(scores.data, state.bias, cfg.top_k)
    mask = selection_mask(selected, cfg.n_routed)
    gates = normalize_gates(scores, mask)

    total = None
    for i in range(cfg.n_shared):
        y = swiglu_expert(flat, *_expert(w, "shared", i))
        total = y if total is None else total + y
    routed = None
    for i in range(cfg.n_routed):
        rows = np.nonzero(mask[:, i])[0]
        if rows.size == 0:
            continue
        y = swiglu_expert(nx.take(flat, rows, axis=0), *_expert(w, "routed", i))
        g = nx.reshape(nx.getitem(gates, (rows, i)), (-1, 1))
        y = nx.scatter_rows(y * g, rows, n_tok)
        routed = y if routed is None else routed + y
    if routed is not None:
        routed = routed * cfg.route_scale
        total = routed if total is None else total + routed
    if total is None:
        total = nx.Tensor(np.zeros((n_tok, cfg.d_model)))
    if residual:
        total = flat + total
    out = nx.reshape(total, lead + (cfg.d_model,))

    stats = LoadStats(mask.sum(axis=0).astype(np.int64), n_tok, cfg.top_k)
    aux = None
    if cfg.aux_alpha > 0:
        aux = seq_aux_loss(scores, mask, cfg, seq_len or n_tok)
    return MoeOutput(out, stats, scores, selected, aux)


# ---------------------------------------------------------------- aux loss and metrics


def seq_aux_loss(scores, mask: np.ndarray, cfg: MoeConfig, seq_len: int | None = None) -> Tensor:
    """Sequence-wise balance loss ``alpha * sum_i f_i P_i``, averaged over sequences.

    ``mask`` is the (constant) top-k selection indicator built from ``scores + bias``;
    gradients flow through the normalized scores only.
    """
    scores = nx.as_tensor(scores)
    n_tok, n_r = scores.shape
    seq_len = seq_len or n_tok
    n_seq = n_tok // seq_len
    if n_seq * seq_len != n_tok:
        raise ValueError(f"{n_tok} tokens do not split into sequences of {seq_len}")
    f = mask.reshape(n_seq, seq_len, n_r).sum(axis=1) * (n_r / (cfg.top_k * seq_len))
    s = nx.reshape(scores, (n_seq, seq_len, n_r))
    s_norm = s / nx.sum_(s, axis=-1, keepdims=True)
    p = nx.mean(s_norm, axis=1)
    per_seq = nx.sum_(p * f, axis=-1)
    return nx.mean(per_seq) * cfg.aux_alpha


def max_vio(load) -> float:
    """``(max load - mean load) / mean load``."""
    counts = load.counts if isinstance(load, LoadStats) else np.asarray(load, dtype=np.float64)
    mean_load = float(np.mean(counts))
    if mean_load <= 0:
        raise MetricError("MaxVio is undefined for zero mean load")
    return (float(np.max(counts)) - mean_load) / mean_load


# ---------------------------------------------------------------- balancers


def bias_update_sign(state: RouterState, stats: LoadStats) -> RouterState:
    """``b += gamma * sign(mean - n)``, then re-center ``b`` to zero mean."""
    n = stats.counts.astype(np.float64)
    delta = state.gamma * np.sign(n.mean() - n)
    b = state.bias + delta
    b = b - b.mean()
    return dataclasses.replace(state, bias=b, momentum=state.momentum.copy())


def smebu_delta(state: RouterState, stats: LoadStats) -> np.ndarray:
    """Mean-centered, tanh-clamped normalized violation times ``lam`` (before momentum)."""
    n = stats.counts.astype(np.float64)
    nbar = n.mean()
    v = (nbar - n) / nbar
    delta = state.lam * np.tanh(state.kappa * v)
    return delta - delta.mean()


def bias_update_smebu(state: RouterState, stats: LoadStats) -> RouterState:
    """Soft-clamped momentum bias update; a step with no routed tokens is skipped."""
    if stats.counts.sum() == 0:
        return state.copy()
    delta = smebu_delta(state, stats)
    m = state.beta * state.momentum + (1.0 - state.beta) * delta
    return dataclasses.replace(state, bias=state.bias + m, momentum=m)


def update_bias(state: RouterState, stats: LoadStats, balancer: str) -> RouterState:
    if balancer == "sign":
        return bias_update_sign(state, stats)
    if balancer == "smebu":
        return bias_update_smebu(state, stats)
    return state


# ---------------------------------------------------------------- balancer simulation


@dataclass
class BalancerSimConfig:
    n_routed: int = 16
    top_k: int = 2
    steps: int = 2000
    tokens_per_step: int = 1024
    skew: float = 4.0
    noise: float = 1.0
    balancer: str = "smebu"
    gamma: float = 5e-4
    lam: float = 5e-4
    kappa: float = 2.0
    beta: float = 0.5
    seed: int = 0


@dataclass
class BalancerTrace:
    max_vio: np.ndarray
    bias: np.ndarray
    bias_step: np.ndarray
    loads: np.ndarray
    pre_momentum_sums: list[float] = field(default_factory=list)


def skewed_affinity(n_routed: int, skew: float) -> np.ndarray:
    """Zero-mean per-expert logit offsets whose exponentials run geometrically from ``skew`` to 1."""
    logw = np.log(np.geomspace(skew, 1.0, n_routed))
    return logw - logw.mean()


def simulate_balancer(cfg: BalancerSimConfig) -> BalancerTrace:
    """Route a synthetic token stream with skewed expert affinities through a balancer.

    Each token's router logit for expert ``i`` is ``offset_i + noise``; scores
    are their sigmoid, selection is top-k of ``score + bias`` and the bias is
    updated once per step from that step's loads.
    """
    rng = np.random.default_rng(cfg.seed)
    offsets = skewed_affinity(cfg.n_routed, cfg.skew)
    state = RouterState.zeros(
        cfg.n_routed, gamma=cfg.gamma, lam=cfg.lam, kappa=cfg.kappa, beta=cfg.beta
    )
    mv = np.empty(cfg.steps)
    biases = np.empty((cfg.steps, cfg.n_routed))
    steps = np.empty(cfg.steps)
    loads = np.empty((cfg.steps, cfg.n_routed), dtype=np.int64)
    sums: list[float] = []
    for t in range(cfg.steps):
        logits = offsets + cfg.noise * rng.standard_normal((cfg.tokens_per_step, cfg.n_routed))
        scores = nx._sigmoid(logits)
        sel = select_topk(scores, state.bias, cfg.top_k)
        counts = np.bincount(sel.ravel(), minlength=cfg.n_routed)
        stats = LoadStats(counts, cfg.tokens_per_step, cfg.top_k)
        mv[t] = max_vio(stats)
        loads[t] = counts
        if cfg.balancer == "smebu":
            sums.append(float(smebu_delta(state, stats).sum()))
        new = update_bias(state, stats, cfg.balancer)
        if cfg.balancer == "sign":
            sums.append(float(new.bias.sum()))
        steps[t] = float(np.mean(np.abs(new.bias - state.bias)))
        state = new
        biases[t] = state.bias
    return BalancerTrace(mv, biases, steps, loads, sums)
