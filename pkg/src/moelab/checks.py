"""Property catalogue behind the ``check`` subcommand.

Each property is a function returning ``(passed, value, detail)``; the
catalogue groups them into suites so a run can be filtered by suite or id.
Thresholds live next to the checks that use them. Long-running experiments
(balancer simulation, reference packing benchmark, smoke training) sit in
their own suites so quick suites stay quick.
"""

from __future__ import annotations

import functools
import itertools
import re
import tempfile
import time
from collections import Counter, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import attention as attn
from . import bpe
from . import datapipe as dp
from . import moe
from . import numerics as nx
from .model import (
    PRESETS,
    adjusted_lr,
    count_params,
    init_all_params,
    load_config,
    model_forward,
    param_shapes,
    sigma_matches,
)

GRAD_TOL = 1e-4

Outcome = tuple[bool, float, dict]


@dataclass(frozen=True)
class Property:
    id: str
    suite: str
    description: str
    fn: Callable[[], Outcome]


CATALOGUE: list[Property] = []
CATALOGUE_BY_ID: dict[str, Property] = {}


def prop(suite: str, description: str):
    def register(fn):
        p = Property(f"{suite}.{fn.__name__}", suite, description, fn)
        CATALOGUE.append(p)
        CATALOGUE_BY_ID[p.id] = p
        return fn

    return register


def suites() -> list[str]:
    return sorted({p.suite for p in CATALOGUE})


def run_checks(selected_suites=None, ids=None, on_result=None) -> dict:
    """Run the selected properties; a property that raises counts as failed."""
    results = []
    for p in CATALOGUE:
        if selected_suites and p.suite not in selected_suites:
            continue
        if ids and p.id not in ids:
            continue
        t0 = time.perf_counter()
        try:
            ok, value, detail = p.fn()
        except Exception as exc:  # surfaced in the report, not swallowed
            ok, value, detail = False, float("nan"), {"error": f"{type(exc).__name__}: {exc}"}
        rec = {
            "id": p.id,
            "suite": p.suite,
            "description": p.description,
            "passed": bool(ok),
            "value": float(value),
            "detail": detail,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        results.append(rec)
        if on_result is not None:
            on_result(rec)
    failed = [r["id"] for r in results if not r["passed"]]
    return {"passed": not failed, "failed": failed, "results": results}


# ---------------------------------------------------------------- gradient harness


def param_grad_error(
    loss_fn: Callable[[dict], nx.Tensor],
    params: dict[str, np.ndarray],
    names,
    coords_per_param: int,
    rng: np.random.Generator,
    h: float = 1e-4,
) -> tuple[float, str]:
    """Worst finite-difference relative error over sampled coordinates of ``names``."""
    worst, where = 0.0, ""
    for name in names:
        size = params[name].size
        idx = rng.choice(size, size=min(coords_per_param, size), replace=False)

        def f(t, name=name):
            return loss_fn({**params, name: t})

        err = nx.finite_difference_check(f, params[name], h=h, indices=idx)
        if err > worst:
            worst, where = err, name
    return worst, where


def _projection_loss(y: nx.Tensor, seed: int) -> nx.Tensor:
    # fixed random projection so every output coordinate feeds the scalar
    r = np.random.default_rng(seed).standard_normal(y.shape)
    return nx.sum_(y * r)


def attention_grad_error(seed: int = 0) -> tuple[float, str]:
    rng = np.random.default_rng(seed)
    cfg = attn.AttentionLayerConfig(d_model=16, h_q=4, h_kv=2, kind="local", window=3)
    w = attn.init_attention_weights(cfg, 0.3, rng)
    w["q_gain"] = 1.0 + 0.1 * rng.standard_normal(w["q_gain"].shape)
    w["k_gain"] = 1.0 + 0.1 * rng.standard_normal(w["k_gain"].shape)
    params = dict(w, x=rng.standard_normal((2, 6, 16)))

    def loss(p):
        aw = {k: p[k] for k in attn.ATTENTION_PARAMS}
        return _projection_loss(attn.attention_forward(p["x"], cfg, aw), seed)

    return param_grad_error(loss, params, list(params), 24, rng)


def moe_grad_error(seed: int = 0) -> tuple[float, str]:
    rng = np.random.default_rng(seed)
    cfg = moe.MoeConfig(d_model=8, n_routed=6, n_shared=1, top_k=2, expert_dim=5, route_scale=1.4, aux_alpha=0.1)
    w = moe.init_moe_weights(cfg, 0.4, rng)
    state = moe.RouterState(rng.normal(0, 0.05, 6), np.zeros(6))
    u = rng.standard_normal((12, 8))
    frozen = moe.moe_forward(u, cfg, w, state, seq_len=6).selected
    params = dict(w, u=u)

    def loss(p):
        mw = {k: p[k] for k in w}
        res = moe.moe_forward(p["u"], cfg, mw, state, selected=frozen, seq_len=6)
        return _projection_loss(res.out, seed) + res.aux_loss

    return param_grad_error(loss, params, list(params), 12, rng)


def model_grad_error(seed: int = 0, batch: int = 2, seq: int = 16, coords: int = 2) -> tuple[float, str]:
    """Full tiny-preset model, every parameter tensor, MoE selections frozen from a first pass."""
    cfg = load_config("tiny")
    rng = np.random.default_rng(seed)
    params = init_all_params(cfg, seed)
    # move gains off their initial constants so their gradients are generic
    for k in params:
        if params[k].ndim == 1:
            params[k] = params[k] * (1.0 + 0.1 * rng.standard_normal(params[k].shape))
    inputs = rng.integers(0, cfg.vocab_size, (batch, seq))
    targets = rng.integers(0, cfg.vocab_size, (batch, seq))
    doc_ids = np.repeat(np.arange(2), seq // 2)[None].repeat(batch, 0)
    states = cfg.new_router_states()
    for s in states.values():
        s.bias[:] = rng.normal(0, 0.01, s.bias.shape)
    first = model_forward(inputs, targets, cfg, params, states, doc_ids=doc_ids)

    def loss(p):
        return model_forward(inputs, targets, cfg, p, states, doc_ids=doc_ids, selections=first.selections).loss

    return param_grad_error(loss, params, list(params), coords, rng)


# ---------------------------------------------------------------- gradients


@prop("gradients", "gated attention sublayer: FD vs tape max rel. error < 1e-4")
def attention_block():
    err, where = attention_grad_error()
    return err < GRAD_TOL, err, {"worst_param": where}


@prop("gradients", "MoE layer through gates/experts/aux loss, frozen selection: < 1e-4")
def moe_layer():
    err, where = moe_grad_error()
    return err < GRAD_TOL, err, {"worst_param": where}


@prop("gradients", "two-layer local+global attention stack: < 1e-4")
def attention_stack():
    rng = np.random.default_rng(3)
    cfgs = [
        attn.AttentionLayerConfig(d_model=8, h_q=2, h_kv=1, kind="local", window=2),
        attn.AttentionLayerConfig(d_model=8, h_q=2, h_kv=1, kind="global"),
    ]
    params = {"x": rng.standard_normal((1, 5, 8))}
    for i, c in enumerate(cfgs):
        for k, v in attn.init_attention_weights(c, 0.4, rng).items():
            params[f"{i}.{k}"] = v

    def loss(p):
        h = nx.as_tensor(p["x"])
        for i, c in enumerate(cfgs):
            h = h + attn.attention_forward(h, c, {k: p[f"{i}.{k}"] for k in attn.ATTENTION_PARAMS})
        return _projection_loss(h, 3)

    err, where = param_grad_error(loss, params, list(params), 10, rng)
    return err < GRAD_TOL, err, {"worst_param": where}


@prop("gradients", "full tiny-preset model, every parameter tensor: < 1e-4")
def tiny_model():
    err, where = model_grad_error()
    return err < GRAD_TOL, err, {"worst_param": where}


@prop("gradients", "sequence-wise aux loss w.r.t. scores, indicator frozen: < 1e-4")
def aux_loss():
    rng = np.random.default_rng(4)
    cfg = moe.MoeConfig(d_model=4, n_routed=6, n_shared=0, top_k=2, expert_dim=2, aux_alpha=0.3)
    s = nx._sigmoid(rng.standard_normal((10, 6)))
    mask = moe.selection_mask(moe.select_topk(s, np.zeros(6), 2), 6)
    err = nx.finite_difference_check(lambda t: moe.seq_aux_loss(t, mask, cfg, 5), s)
    return err < GRAD_TOL, err, {}


# ---------------------------------------------------------------- numerics


def _op_cases(rng):
    a = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.standard_normal((4, 2))
    return {
        "add": (lambda t: nx.sum_(nx.add(t, a[0]) * a), a),
        "sub": (lambda t: nx.sum_(nx.sub(a, t) * a), a),
        "mul": (lambda t: nx.sum_(nx.mul(t, t) * a), a),
        "div": (lambda t: nx.sum_(nx.div(a, t)), pos),
        "exp": (lambda t: nx.sum_(nx.exp(t) * a), a),
        "log": (lambda t: nx.sum_(nx.log(t) * a), pos),
        "square": (lambda t: nx.sum_(nx.square(t) * a), a),
        "sigmoid": (lambda t: nx.sum_(nx.sigmoid(t) * a), a),
        "silu": (lambda t: nx.sum_(nx.silu(t) * a), a),
        "rsqrt": (lambda t: nx.sum_(nx.rsqrt(t) * a), pos),
        "mean": (lambda t: nx.mean(nx.square(t), axis=0)[1], a),
        "logsumexp": (lambda t: nx.sum_(nx.logsumexp_lastdim(t) * a[:, 0]), a),
        "softmax": (lambda t: nx.sum_(nx.softmax_lastdim(t) * a), a),
        "matmul": (lambda t: nx.sum_(nx.square(t @ b)), a),
        "transpose": (lambda t: nx.sum_(nx.transpose(t) * a.T * a.T), a),
        "take": (lambda t: nx.sum_(nx.square(nx.take(t, np.array([0, 2, 2]), 0))), a),
        "rms_normalize": (lambda t: nx.sum_(nx.rms_normalize(t, a[0]) * a), a),
        "cross_entropy": (lambda t: nx.cross_entropy(t, np.array([0, 3, 1])), a),
    }


@prop("numerics", "every differentiable op: FD error < 1e-4 on 20 random small inputs")
def op_gradients():
    worst, where = 0.0, ""
    for trial in range(20):
        for name, (f, x) in _op_cases(np.random.default_rng(trial)).items():
            err = nx.finite_difference_check(f, x)
            if err > worst:
                worst, where = err, name
    return worst < GRAD_TOL, worst, {"worst_op": where}


@prop("numerics", "softmax rows sum to 1 +- 1e-12 and ignore a per-row constant")
def softmax_rows():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((200, 17)) * 5
    p = nx.softmax_lastdim(x).data
    shifted = nx.softmax_lastdim(x + rng.standard_normal((200, 1)) * 3).data
    dev = max(float(np.abs(p.sum(-1) - 1).max()), float(np.abs(p - shifted).max()))
    return dev <= 1e-12, dev, {}


@prop("numerics", "seeded truncated-normal sampling is bit-reproducible and within +-3 sigma")
def seeded_sampling():
    a = nx.sample_truncated_normal(10_000, 0.016, 7).data
    b = nx.sample_truncated_normal(10_000, 0.016, 7).data
    ok = np.array_equal(a, b) and float(np.abs(a).max()) <= 3 * 0.016
    return ok, float(np.abs(a).max() / 0.016), {}


@prop("numerics", "tape replay reproduces forward values bit-identically")
def tape_replay():
    rng = np.random.default_rng(6)
    x = nx.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    with nx.Tape() as tape:
        y = nx.sum_(nx.softmax_lastdim(nx.silu(x) @ rng.standard_normal((5, 3))))
    recorded = [r.output.data.copy() for r in tape.records]
    replayed = tape.replay()
    ok = all(np.array_equal(a, b) for a, b in zip(recorded, replayed)) and len(replayed) == len(recorded)
    return ok, float(len(recorded)), {"output": float(y.data)}


# ---------------------------------------------------------------- digits / tokenizer


DIGIT_ORACLE = re.compile(r"\d{1,3}(?=(?:\d{3})*(?!\d))", re.ASCII)


def digit_oracle(run: str) -> list[str]:
    """Right-aligned triples: the lookahead-regex split."""
    return DIGIT_ORACLE.findall(run)


def _pipeline_digits(run: str) -> list[str]:
    from .pretokenizer import pretokenize

    return [t.text for t in pretokenize(run)]


@prop("digits", "digit chunking equals the lookahead regex: exhaustive lengths 1-60, 2000 random <= 510")
def digit_oracle_equivalence():
    rng = np.random.default_rng(8)
    bad = []
    runs = ["".join(rng.choice(list("0123456789"), n)) for n in range(1, 61)]
    runs += ["".join(rng.choice(list("0123456789"), int(n))) for n in rng.integers(1, 511, 2000)]
    for r in runs:
        if _pipeline_digits(r) != digit_oracle(r):
            bad.append(len(r))
    return not bad, float(len(bad)), {"failing_lengths": bad[:10]}


def digit_scaling_ratio(small_runs: int = 21, large_runs: int = 5) -> float:
    """Median streaming pretokenize time on 10^6 digits over the median on 10^4 digits.

    Medians rather than minima: the minimum of many millisecond timings is
    biased low against a single long run.
    """
    from .pretokenizer import iter_pretokens

    def timed(s):
        t0 = time.perf_counter()
        deque(iter_pretokens(s), maxlen=0)
        return time.perf_counter() - t0

    small, large = "7" * 10**4, "7" * 10**6
    per_large = max(1, small_runs // large_runs)
    t_small, t_large = [], []
    for _ in range(large_runs):
        t_small += [timed(small) for _ in range(per_large)]
        t_large.append(timed(large))
    return float(np.median(t_large) / np.median(t_small))


@prop("digits", "pretokenizing a 10^6-digit run takes <= 100x the 10^4-digit time")
def digit_linear_time():
    ratio = digit_scaling_ratio()
    return ratio <= 100, ratio, {}


def random_text_corpus(n_bytes: int, seed: int) -> list[str]:
    """Lines of Zipf-distributed pseudo-words, numbers and punctuation."""
    rng = np.random.default_rng(seed)
    letters = list("abcdefghijklmnopqrstuvwxyz")
    words = ["".join(rng.choice(letters, int(n))) for n in rng.integers(1, 9, 3000)]
    probs = 1.0 / np.arange(1, len(words) + 1)
    probs /= probs.sum()
    lines, total = [], 0
    while total < n_bytes:
        picks = rng.choice(len(words), int(rng.integers(3, 15)), p=probs)
        parts = [words[i] if rng.random() > 0.1 else str(int(rng.integers(0, 10**6))) for i in picks]
        line = " ".join(parts) + rng.choice([".", ",", "!", "?", ""]) + "\n"
        lines.append(line)
        total += len(line)
    return lines


@prop("tokenizer", "byte-level encode/decode round-trips 2000 random byte strings")
def byte_roundtrip():
    model = bpe.train_bpe(random_text_corpus(50_000, 9), 400)
    rng = np.random.default_rng(9)
    bad = 0
    for _ in range(2000):
        raw = rng.integers(0, 256, int(rng.integers(0, 64)), dtype=np.uint8).tobytes()
        if bpe.decode_bytes(model, bpe.encode(model, raw)) != raw:
            bad += 1
    return bad == 0, float(bad), {}


@prop("tokenizer", "truncated vocabulary tokenizes like a model trained to that size (k=260,300,500)")
def truncation_equivalence():
    corpus = random_text_corpus(200_000, 10)
    big = bpe.train_bpe(corpus, 600)
    sample = corpus[:300]
    bad = []
    for k in (260, 300, 500):
        direct = bpe.train_bpe(corpus, k)
        cut = big.truncate(k)
        if direct.merges != cut.merges or any(bpe.encode(direct, s) != bpe.encode(cut, s) for s in sample):
            bad.append(k)
    return not bad, float(len(bad)), {"failing_k": bad}


@prop("tokenizer", "pretoken byte spans concatenate back to the input")
def pretokenize_lossless():
    from .pretokenizer import pretoken_bytes, pretokenize

    rng = np.random.default_rng(11)
    alphabet = list("ab 1\n'.,漢字ไทย한국x\t") + ["  ", "99999"]
    bad = 0
    for _ in range(500):
        text = "".join(rng.choice(alphabet, int(rng.integers(0, 30))))
        raw = text.encode()
        toks = pretokenize(text)
        if b"".join(pretoken_bytes(t) for t in toks) != raw:
            bad += 1
        if any(raw[t.byte_span[0] : t.byte_span[1]] != pretoken_bytes(t) for t in toks):
            bad += 1
    return bad == 0, float(bad), {}


# ---------------------------------------------------------------- routing


@prop("routing", "normalized gate rows sum to 1 +- 1e-10 over 10^4 rows")
def gate_rows():
    rng = np.random.default_rng(12)
    s = nx._sigmoid(rng.standard_normal((10_000, 32)) * 3)
    sel = moe.select_topk(s, rng.normal(0, 0.1, 32), 4)
    g = moe.normalize_gates(s, moe.selection_mask(sel, 32)).data
    dev = float(np.abs(g.sum(-1) - 1).max())
    return dev <= 1e-10, dev, {}


def brute_topk(row: np.ndarray, k: int) -> list[int]:
    """Sort (value desc, index asc) pairs by plain comparison."""
    pairs = sorted(range(len(row)), key=lambda i: (-row[i], i))
    return sorted(pairs[:k])


@prop("routing", "top-k matches a brute-force sort on 10^4 random instances (N_r <= 32)")
def topk_oracle():
    rng = np.random.default_rng(13)
    bad = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 33))
        k = int(rng.integers(1, n + 1))
        # coarse values make ties common
        s = rng.integers(0, 5, n) / 4.0
        b = rng.integers(-2, 3, n) / 8.0
        if moe.select_topk(s, b, k).tolist() != brute_topk(s + b, k):
            bad += 1
    return bad == 0, float(bad), {}


@prop("routing", "adding a constant to every biased logit leaves the selection unchanged")
def shift_invariance():
    rng = np.random.default_rng(14)
    bad = 0
    for _ in range(2000):
        s = rng.integers(0, 8, 16) / 8.0
        b = rng.integers(-4, 4, 16) / 16.0
        c = float(rng.integers(-8, 8)) / 4.0  # dyadic, so the shift is exact
        if not np.array_equal(moe.select_topk(s, b, 3), moe.select_topk(s + c, b, 3)):
            bad += 1
    return bad == 0, float(bad), {}


@prop("routing", "for fixed selections the MoE output does not depend on the bias (exact)")
def bias_not_in_values():
    rng = np.random.default_rng(15)
    cfg = moe.MoeConfig(d_model=8, n_routed=8, n_shared=1, top_k=2, expert_dim=4, route_scale=2.0)
    w = moe.init_moe_weights(cfg, 0.3, rng)
    u = rng.standard_normal((20, 8))
    sel = moe.moe_forward(u, cfg, w, moe.RouterState.zeros(8)).selected
    outs = [
        moe.moe_forward(u, cfg, w, moe.RouterState(rng.normal(0, 5, 8), np.zeros(8)), selected=sel).out.data
        for _ in range(5)
    ]
    ok = all(np.array_equal(outs[0], o) for o in outs[1:])
    return ok, float(np.abs(outs[0] - outs[-1]).max()), {}


# ---------------------------------------------------------------- balancer


@prop("balancer", "balanced loads with zero momentum leave the SMEBU state bit-identical")
def smebu_fixed_point():
    st = moe.RouterState(np.array([0.1, -0.3, 0.2, 0.0]), np.zeros(4))
    new = moe.bias_update_smebu(st, moe.LoadStats(np.full(4, 7), 14, 2))
    ok = np.array_equal(new.bias, st.bias) and np.array_equal(new.momentum, st.momentum)
    return ok, float(np.abs(new.bias - st.bias).max()), {}


@prop("balancer", "sign updates keep sum(b)=0 +- 1e-9; SMEBU pre-momentum updates are centered")
def centering():
    rng = np.random.default_rng(16)
    st_sign = moe.RouterState.zeros(16)
    st_smebu = moe.RouterState.zeros(16)
    worst = 0.0
    for _ in range(500):
        counts = rng.multinomial(2048, rng.dirichlet(np.ones(16)))
        stats = moe.LoadStats(counts, 1024, 2)
        st_sign = moe.bias_update_sign(st_sign, stats)
        worst = max(worst, abs(float(st_sign.bias.sum())), abs(float(moe.smebu_delta(st_smebu, stats).sum())))
        st_smebu = moe.bias_update_smebu(st_smebu, stats)
    return worst <= 1e-9, worst, {}


@functools.lru_cache(maxsize=None)
def balancer_experiment(seed: int = 0) -> dict:
    out = {}
    for name in ("smebu", "sign", "none"):
        tr = moe.simulate_balancer(moe.BalancerSimConfig(balancer=name, seed=seed))
        tail = slice(-500, None)
        out[name] = {
            "max_vio_mean_tail": float(tr.max_vio[tail].mean()),
            "max_vio_max_tail": float(tr.max_vio[tail].max()),
            "mean_abs_bias_step_tail": float(tr.bias_step[tail].mean()),
            "centering_max": float(np.abs(tr.pre_momentum_sums).max()) if tr.pre_momentum_sums else 0.0,
        }
    return out


@prop("balancer_sim", "skewed 16-expert stream: SMEBU holds MaxVio < 0.25 over the final 500 of 2000 steps")
def smebu_holds():
    r = balancer_experiment()
    v = r["smebu"]["max_vio_mean_tail"]
    return v < 0.25, v, r


@prop("balancer_sim", "sign updates oscillate more than SMEBU at equilibrium (mean |delta b|)")
def sign_oscillates_more():
    r = balancer_experiment()
    a, b = r["sign"]["mean_abs_bias_step_tail"], r["smebu"]["mean_abs_bias_step_tail"]
    return a > b, a / b, r


# ---------------------------------------------------------------- attention


@prop("attention", "perturbing future tokens or tokens beyond the window leaves outputs unchanged")
def causality_and_window():
    rng = np.random.default_rng(17)
    worst = 0.0
    for kind, window in (("global", 0), ("local", 3)):
        cfg = attn.AttentionLayerConfig(d_model=8, h_q=2, h_kv=1, kind=kind, window=window)
        w = attn.init_attention_weights(cfg, 0.4, rng)
        x = rng.standard_normal((10, 8))
        base = attn.attention_forward(x, cfg, w).data
        for t in range(10):
            y = x.copy()
            y[t] += rng.standard_normal(8)
            out = attn.attention_forward(y, cfg, w).data
            untouched = [s for s in range(10) if s < t or (kind == "local" and s >= t + window)]
            if untouched:
                worst = max(worst, float(np.abs(out[untouched] - base[untouched]).max()))
    return worst == 0.0, worst, {}


def naive_mha(x, cfg, w):
    """Per-head loop reference for full-rank multi-head attention on ``[T, d]``."""
    t_len, dh = x.shape[0], cfg.d_head
    out = np.zeros((t_len, cfg.d_attn))
    pos = np.arange(t_len)
    mask = attn.build_mask(t_len, cfg.kind, cfg.window)
    for h in range(cfg.h_q):
        sl = slice(h * dh, (h + 1) * dh)
        q, k, v = x @ w["wq"][:, sl], x @ w["wk"][:, sl], x @ w["wv"][:, sl]
        q = q / np.sqrt((q * q).mean(-1, keepdims=True) + cfg.norm_eps) * w["q_gain"]
        k = k / np.sqrt((k * k).mean(-1, keepdims=True) + cfg.norm_eps) * w["k_gain"]
        if cfg.kind == "local":
            q = attn.apply_rope(q, pos, cfg.rope_theta).data
            k = attn.apply_rope(k, pos, cfg.rope_theta).data
        logits = np.where(mask, q @ k.T / np.sqrt(dh), -np.inf)
        p = np.exp(logits - logits.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        out[:, sl] = p @ v
    gate = 1.0 / (1.0 + np.exp(-(x @ w["wg"])))
    return (out * gate) @ w["wo"]


@prop("attention", "GQA with h_kv = h_q reproduces a per-head MHA loop")
def gqa_equals_mha():
    rng = np.random.default_rng(18)
    cfg = attn.AttentionLayerConfig(d_model=12, h_q=3, h_kv=3, kind="local", window=4)
    w = attn.init_attention_weights(cfg, 0.4, rng)
    x = rng.standard_normal((7, 12))
    dev = float(np.abs(attn.attention_forward(x, cfg, w).data - naive_mha(x, cfg, w)).max())
    return dev < 1e-12, dev, {}


@prop("attention", "NoPE global layers are equivariant to a rigid position shift")
def nope_shift():
    rng = np.random.default_rng(19)
    cfg = attn.AttentionLayerConfig(d_model=8, h_q=2, h_kv=1, kind="global")
    w = attn.init_attention_weights(cfg, 0.4, rng)
    x = rng.standard_normal((6, 8))
    a = attn.attention_forward(x, cfg, w, positions=np.arange(6)).data
    b = attn.attention_forward(x, cfg, w, positions=np.arange(6) + 1000).data
    return np.array_equal(a, b), float(np.abs(a - b).max()), {}


# ---------------------------------------------------------------- packing


def _small_corpus(count: int, seed: int, mu: float = 3.0):
    return list(dp.synth_corpus(dp.CorpusParams(count=count, length_mu=mu, length_sigma=1.0, seed=seed)))


def _trim_to_multiple(docs, seq_len):
    # drop tokens from the last document so the total divides seq_len
    total = sum(d.length for d in docs)
    extra = total % seq_len
    while extra:
        last = docs[-1]
        if last.length <= extra:
            docs.pop()
            extra -= last.length
        else:
            docs[-1] = dp.Document(last.tokens[: last.length - extra], last.domain, last.doc_id)
            extra = 0
    return docs


@prop("packing", "both packers conserve the token multiset when totals divide seq_len")
def token_conservation():
    bad = []
    for seed in range(5):
        docs = _trim_to_multiple(_small_corpus(300, seed), 64)
        want = Counter(np.concatenate([d.tokens for d in docs]).tolist())
        for name, seqs in (
            ("sequential", dp.sequential_pack(docs, 64)),
            ("rsdb", dp.Rsdb(docs, 16, seed).sequences(64)),
        ):
            got = Counter(itertools.chain.from_iterable(s.tokens.tolist() for s in seqs))
            if got != want:
                bad.append((name, seed))
    return not bad, float(len(bad)), {"failures": bad}


@prop("packing", "RSDB span records reassemble every source document in order")
def span_reassembly():
    docs = _trim_to_multiple(_small_corpus(400, 20), 32)
    pieces: dict[int, list[tuple[int, np.ndarray]]] = {}
    for seq in dp.Rsdb(docs, 8, 20).sequences(32):
        for sp in seq.spans:
            pieces.setdefault(sp.doc_id, []).append((sp.doc_offset, seq.tokens[sp.start : sp.end]))
    bad = 0
    for d in docs:
        frags = pieces.get(d.doc_id, [])
        offsets = [o for o, _ in frags]
        rebuilt = np.concatenate([f for _, f in frags]) if frags else np.array([])
        if offsets != sorted(offsets) or not np.array_equal(rebuilt, d.tokens):
            bad += 1
    return bad == 0, float(bad), {}


def _stream_summary(seqs) -> dict:
    seqs = list(seqs)
    toks = np.concatenate([s.tokens for s in seqs])
    return {
        "sequences": len(seqs),
        "tokens": int(toks.size),
        "token_multiset_hash": hash(tuple(sorted(Counter(toks.tolist()).items()))),
    }


@prop("packing", "RSDB is seed-deterministic and its summary is invariant to worker sharding")
def sharding_invariance():
    # lengths are multiples of seq_len so no shard withholds a partial final buffer
    docs = [
        dp.Document(np.tile(d.tokens, 64)[: 64 * max(1, d.length // 8)], d.domain, d.doc_id)
        for d in _small_corpus(500, 21)
    ]
    a = [s.tokens for s in dp.Rsdb(docs, 32, 5).sequences(64)]
    b = [s.tokens for s in dp.Rsdb(docs, 32, 5).sequences(64)]
    deterministic = len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
    ref = _stream_summary(dp.Rsdb(docs, 32, 5).sequences(64))
    caps, summaries = set(), []
    for workers in (1, 2, 4):
        sh = dp.ShardedRsdb(docs, 32, workers, 5)
        caps.add(sh.total_internal_capacity)
        summaries.append(_stream_summary(sh.sequences(64)))
    ok = deterministic and len(caps) == 1 and all(s == ref for s in summaries)
    return ok, float(len(caps)), {"summaries": summaries, "reference": ref}


@prop("packing", "BatchHet spot values: equal losses -> 0, [1,2,3] -> 1.0")
def batch_het_values():
    a, b = dp.batch_het([2.5] * 4), dp.batch_het([1.0, 2.0, 3.0])
    return a == 0.0 and b == 1.0, b, {}


@functools.lru_cache(maxsize=None)
def reference_packing(steps: int = 2000, seed: int = 0) -> dict:
    _, summary = dp.packing_comparison(dp.PackingBenchConfig(steps=steps, seed=seed))
    return summary


@prop("packing_reference", "reference corpus: mean BatchHet ratio RSDB/sequential <= 0.7")
def reference_ratio():
    s = reference_packing()
    return s["ratio"] <= 0.7, s["ratio"], s


@prop("packing_reference", "reference corpus: RSDB BatchHet lower in >= 90% of steps")
def reference_dominance():
    s = reference_packing()
    f = s["frac_steps_rsdb_lower"]
    return f >= 0.9, f, s


# ---------------------------------------------------------------- config / lr / checkpoint

TABLE = {
    "trinity-nano": dict(n_layers=56, dense_first=2, d_model=1024, ffn_dim=3072, h_q=8, head_dim=128, h_kv=2,
                         window=2048, seq_len=4096, n_shared=1, n_routed=128, top_k=8, route_scale=2.826,
                         expert_dim=256, init_sigma=0.016),
    "trinity-mini": dict(n_layers=32, dense_first=2, d_model=2048, ffn_dim=6144, h_q=32, head_dim=128, h_kv=4,
                         window=2048, seq_len=4096, n_shared=1, n_routed=128, top_k=8, route_scale=2.826,
                         expert_dim=1024, init_sigma=0.011),
    "trinity-large": dict(n_layers=60, dense_first=6, d_model=3072, ffn_dim=12288, h_q=48, head_dim=128, h_kv=8,
                          window=4096, seq_len=8192, n_shared=1, n_routed=256, top_k=4, route_scale=2.448,
                          expert_dim=3072, init_sigma=0.009),
}


@prop("config", "published presets reproduce every tabulated field and sigma = 0.5/sqrt(d) at printed precision")
def presets_match_table():
    bad = []
    for name, fields in TABLE.items():
        cfg = load_config(name)
        bad += [f"{name}.{k}" for k, v in fields.items() if getattr(cfg, k) != v]
        if not sigma_matches(fields["init_sigma"], cfg.d_model):
            bad.append(f"{name}.sigma")
    return not bad, float(len(bad)), {"mismatches": bad}


@prop("config", "every preset builds its parameter shapes without allocating weights")
def lazy_shapes():
    counts = {}
    for name in PRESETS:
        cfg = load_config(name)
        shapes = param_shapes(cfg)
        counts[name] = count_params(cfg)
        if not all(all(isinstance(n, int) and n > 0 for n in s) for s in shapes.values()):
            return False, 0.0, {"bad_preset": name}
    return True, float(len(counts)), counts


@prop("lr", "hidden-layer lr adjustment: equal fans x1, 4x fan-out x2, narrower fan-out x1")
def lr_units():
    vals = (adjusted_lr(1.0, 64, 64), adjusted_lr(1.0, 64, 256), adjusted_lr(1.0, 256, 64))
    return vals == (1.0, 2.0, 1.0), vals[1], {"values": vals}


@prop("checkpoint", "save/load round-trips parameters and router state bit-exactly")
def checkpoint_roundtrip():
    from .checkpoint import load_checkpoint, save_checkpoint

    cfg = load_config("tiny")
    params = init_all_params(cfg, 1)
    states = cfg.new_router_states()
    rng = np.random.default_rng(1)
    for s in states.values():
        s.bias[:] = rng.standard_normal(s.bias.shape)
        s.momentum[:] = rng.standard_normal(s.bias.shape)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ck.bin"
        save_checkpoint(path, params, states, {"step": 3})
        p2, s2, meta = load_checkpoint(path)
    ok = (
        list(p2) == list(params)
        and all(np.array_equal(params[k], p2[k]) for k in params)
        and all(np.array_equal(states[k].bias, s2[k].bias) and np.array_equal(states[k].momentum, s2[k].momentum)
                and states[k].lam == s2[k].lam for k in states)
        and meta == {"step": 3}
    )
    return ok, float(len(p2)), {}


@prop("checkpoint", "a corrupted payload is reported with its file offset")
def checkpoint_corruption():
    from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ck.bin"
        save_checkpoint(path, {"a": np.arange(4.0), "b": np.ones((2, 2))})
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF
        path.write_bytes(bytes(raw))
        try:
            load_checkpoint(path)
        except CheckpointError as exc:
            return "offset" in str(exc) and "'b'" in str(exc), 1.0, {"message": str(exc)}
    return False, 0.0, {"message": "corruption not detected"}


# ---------------------------------------------------------------- training


def smoke_run(seed: int = 0, steps: int = 200, **overrides):
    from .training import TrainConfig, make_batch, smoke_corpus, train

    cfg = load_config("tiny")
    if overrides:
        cfg = cfg.replace(**overrides)
    batch = make_batch(smoke_corpus(1000, cfg.vocab_size, seed), cfg.seq_len)
    return train(cfg, TrainConfig(steps=steps, seed=seed), batch).history


def smoke_summary(history: list[dict]) -> dict:
    lse = np.array([r["lse_mean_abs"] for r in history])
    half = len(lse) // 2
    quarter = len(lse) // 4
    return {
        "loss_first": history[0]["loss"],
        "loss_last": history[-1]["loss"],
        "max_vio_after_50": max(r["max_vio_max"] for r in history[50:]),
        "lse_mean_third_quarter": float(lse[half : half + quarter].mean()),
        "lse_mean_last_quarter": float(lse[half + quarter :].mean()),
        "lse_monotone_tail": bool(np.all(np.diff(lse[half:]) > 0)),
    }


@prop("training", "determinism: identical seed, config and data give a bit-identical loss trajectory")
def deterministic_losses():
    a = [r["loss"] for r in smoke_run(steps=3)]
    b = [r["loss"] for r in smoke_run(steps=3)]
    return a == b, a[-1], {}


@prop("training_smoke", "tiny preset, 200 steps: loss falls, MaxVio < 0.5 after step 50, |lse| stops growing")
def smoke_training():
    s = smoke_summary(smoke_run())
    ok = (
        s["loss_last"] < s["loss_first"]
        and s["max_vio_after_50"] < 0.5
        and s["lse_mean_last_quarter"] <= s["lse_mean_third_quarter"]
        and not s["lse_monotone_tail"]
    )
    return ok, s["lse_mean_last_quarter"], s
