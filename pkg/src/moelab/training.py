"""Smoke training: AdamW with fan-adjusted hidden-layer learning rates, warmup + linear decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .datapipe import CorpusParams, Document, sequential_pack, synth_corpus, batch_het
from .model import ModelConfig, adjusted_lr, init_all_params, is_norm_gain, model_forward
from .moe import RouterState, update_bias


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite {detail} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 3e-3
    embed_lr: float = 3e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup: int = 20
    final_lr_frac: float = 0.1
    microbatches: int = 3
    seed: int = 0


def lr_at(step: int, tc: TrainConfig) -> float:
    """Multiplier on the peak lr: linear warmup, then linear decay to ``final_lr_frac``."""
    if step < tc.warmup:
        return (step + 1) / tc.warmup
    span = max(1, tc.steps - tc.warmup)
    frac = min(1.0, (step - tc.warmup) / span)
    return 1.0 - (1.0 - tc.final_lr_frac) * frac


def is_hidden_matrix(name: str, shape: tuple[int, ...]) -> bool:
    return len(shape) == 2 and name not in ("embed", "unembed")


@dataclass
class AdamW:
    params: dict[str, np.ndarray]
    tc: TrainConfig
    m: dict[str, np.ndarray] = field(init=False)
    v: dict[str, np.ndarray] = field(init=False)
    t: int = field(init=False, default=0)

    def __post_init__(self):
        self.m = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.base_lr = {}
        for k, p in self.params.items():
            if is_hidden_matrix(k, p.shape):
                # stored as [fan_in, fan_out]
                self.base_lr[k] = adjusted_lr(self.tc.lr, p.shape[0], p.shape[1])
            elif k in ("embed", "unembed"):
                self.base_lr[k] = self.tc.embed_lr
            else:
                self.base_lr[k] = self.tc.lr

    def step(self, grads: dict[str, np.ndarray], lr_scale: float) -> None:
        tc = self.tc
        self.t += 1
        c1 = 1.0 - tc.beta1**self.t
        c2 = 1.0 - tc.beta2**self.t
        for k, g in grads.items():
            p = self.params[k]
            lr = self.base_lr[k] * lr_scale
            m = self.m[k]
            v = self.v[k]
            m *= tc.beta1
            m += (1.0 - tc.beta1) * g
            v *= tc.beta2
            v += (1.0 - tc.beta2) * g * g
            if not is_norm_gain(k):
                p *= 1.0 - lr * tc.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + tc.eps)


# ---------------------------------------------------------------- data


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    doc_ids: np.ndarray


def smoke_corpus(n_tokens: int, vocab_size: int, seed: int) -> list[Document]:
    """About ``n_tokens`` tokens of short lognormal documents over a fixed vocabulary."""
    params = CorpusParams(
        length_mu=4.0,
        length_sigma=0.5,
        domain_weights=(0.8, 0.2),
        band_size=vocab_size // 2,
        seed=seed,
    )
    docs, total = [], 0
    for doc in synth_corpus(params):
        take = min(doc.length, n_tokens - total)
        docs.append(Document(doc.tokens[:take], doc.domain, doc.doc_id))
        total += take
        if total >= n_tokens:
            break
    return docs


def make_batch(docs: list[Document], seq_len: int) -> Batch:
    """Pack into ``seq_len + 1`` windows and split each into inputs and next-token targets."""
    seqs = list(sequential_pack(docs, seq_len + 1))
    tokens = np.stack([s.tokens for s in seqs])
    ids = np.stack([s.doc_ids() for s in seqs])
    return Batch(tokens[:, :-1], tokens[:, 1:], ids[:, :-1])


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    states: dict[int, RouterState]
    history: list[dict]


def per_sequence_ce(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    lse = nx._logsumexp(logits)
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    return (lse - picked).mean(axis=-1)


def train(
    cfg: ModelConfig,
    tc: TrainConfig,
    batch: Batch,
    params: dict[str, np.ndarray] | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Full-batch smoke training; router biases are updated once per step from whole-batch loads."""
    params = params if params is not None else init_all_params(cfg, tc.seed)
    states = cfg.new_router_states()
    opt = AdamW(params, tc)
    names = list(params)
    history = []
    for step in range(tc.steps):
        leaves = {k: nx.Tensor(params[k], requires_grad=True) for k in names}
        # overflow is detected explicitly below, so numpy's warnings are noise
        with nx.Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
            res = model_forward(batch.inputs, batch.targets, cfg, leaves, states, doc_ids=batch.doc_ids)
        loss = float(res.loss.data)
        if not math.isfinite(loss) or not np.all(np.isfinite(res.logits.data)):
            raise TrainingDiverged(step + 1, "loss")
        with np.errstate(over="ignore", invalid="ignore"):
            grads = dict(zip(names, tape.gradient(res.loss, [leaves[k] for k in names])))
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(step + 1, f"gradient for {k}")
        grad_norm = float(math.sqrt(sum(float((g * g).sum()) for g in grads.values())))

        seq_ce = per_sequence_ce(res.logits.data, batch.targets)
        micro = [c.mean() for c in np.array_split(seq_ce, min(tc.microbatches, seq_ce.size))]

        scale = lr_at(step, tc)
        opt.step(grads, scale)
        for layer, stats in res.load_stats.items():
            states[layer] = update_bias(states[layer], stats, cfg.balancer)

        rec = {"step": step + 1, "lr_scale": scale, "grad_norm": grad_norm}
        rec.update(res.metrics())
        rec["batch_het"] = batch_het(micro)
        rec["load"] = {str(k): s.counts.tolist() for k, s in res.load_stats.items()}
        rec["bias_norm"] = {str(k): float(np.linalg.norm(s.bias)) for k, s in states.items()}
        rec["momentum_norm"] = {str(k): float(np.linalg.norm(s.momentum)) for k, s in states.items()}
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    return TrainResult(params, states, history)
