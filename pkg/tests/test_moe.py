import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from moelab import numerics as nx
from moelab.moe import (
    BalancerSimConfig,
    LoadStats,
    MetricError,
    MoeConfig,
    RouterState,
    bias_update_sign,
    bias_update_smebu,
    init_moe_weights,
    max_vio,
    moe_forward,
    normalize_gates,
    router_scores,
    select_topk,
    selection_mask,
    seq_aux_loss,
    simulate_balancer,
    smebu_delta,
    swiglu_expert,
)

S = np.array([0.9, 0.1, 0.5, 0.4])


def sort_oracle(v, k):
    return sorted(sorted(range(len(v)), key=lambda i: (-v[i], i))[:k])


def stats(counts, k=1):
    counts = np.asarray(counts)
    return LoadStats(counts, int(counts.sum()) // k, k)


def loop_moe(u, cfg, w, bias):
    """Token-by-token evaluation of shared + gated routed experts."""
    silu = lambda z: z / (1 + np.exp(-z))
    ffn = lambda x, kind, i: (silu(x @ w[f"{kind}.{i}.gate"]) * (x @ w[f"{kind}.{i}.up"])) @ w[f"{kind}.{i}.down"]
    out = np.zeros_like(u)
    for t, x in enumerate(u):
        s = 1 / (1 + np.exp(-(x @ w["router"])))
        sel = sort_oracle(s + bias, cfg.top_k)
        h = x.copy()
        for i in range(cfg.n_shared):
            h += ffn(x, "shared", i)
        for i in sel:
            h += cfg.route_scale * s[i] / s[sel].sum() * ffn(x, "routed", i)
        out[t] = h
    return out


# ---------------------------------------------------------------- routing


def test_select_and_gate_example():
    sel = select_topk(S, np.zeros(4), 2)
    assert sel.tolist() == [0, 2]
    g = normalize_gates(S, selection_mask(sel, 4)).data[0]
    np.testing.assert_allclose(g, [9 / 14, 0, 5 / 14, 0], rtol=1e-15)


def test_bias_dominates_and_full_selection():
    assert 1 in select_topk(S, np.array([0, 10.0, 0, 0]), 1)
    assert select_topk(S, np.zeros(4), 4).tolist() == [0, 1, 2, 3]


def test_ties_go_to_lowest_index():
    assert select_topk(np.full(5, 0.3), np.zeros(5), 2).tolist() == [0, 1]


def test_gate_edge_cases():
    assert normalize_gates([0.3, 0.7], np.array([[False, True]])).data.tolist() == [[0.0, 1.0]]
    assert normalize_gates([0.4, 0.4, 0.1], np.array([[True, True, False]])).data.tolist() == [[0.5, 0.5, 0.0]]


# dyadic grids keep s + b + c exact, so the shift cannot create or break ties
@given(
    hnp.arrays(np.float64, (6, 12), elements=st.integers(0, 64).map(lambda i: i / 64)),
    hnp.arrays(np.float64, 12, elements=st.integers(-16, 16).map(lambda i: i / 64)),
    st.integers(1, 12),
    st.integers(-8, 8),
)
def test_topk_matches_sort_oracle_and_shift(s, b, k, c):
    sel = select_topk(s, b, k)
    for row, got in zip(s, sel):
        assert got.tolist() == sort_oracle(row + b, k)
    np.testing.assert_array_equal(select_topk(s + c, b, k), sel)


@given(hnp.arrays(np.float64, (5, 9), elements=st.floats(-8, 8)), st.integers(1, 9))
def test_gates_sum_to_one(logits, k):
    s = 1 / (1 + np.exp(-logits))
    g = normalize_gates(s, selection_mask(select_topk(s, np.zeros(9), k), 9)).data
    assert np.abs(g.sum(-1) - 1).max() <= 1e-12
    assert ((g > 0).sum(-1) <= k).all()


def test_router_scores():
    u = np.array([[1.0, 0.0]])
    e = np.array([[0.0, 3.0], [1.0, -2.0]])
    s = router_scores(u, e).data
    assert s[0, 0] == 0.5
    assert np.all((s > 0) & (s < 1))
    assert nx.finite_difference_check(lambda t: nx.sum_(router_scores(u, t) * [[1.0, -2.0]]), e) < 1e-4


# ---------------------------------------------------------------- experts


def test_swiglu_zero_cases():
    rng = np.random.default_rng(0)
    g, up, down = rng.standard_normal((4, 6)), rng.standard_normal((4, 6)), rng.standard_normal((6, 4))
    assert not swiglu_expert(np.zeros((2, 4)), g, up, down).data.any()
    assert not swiglu_expert(rng.standard_normal((2, 4)), g, np.zeros((4, 6)), down).data.any()
    x = rng.standard_normal((3, 4))
    assert nx.finite_difference_check(lambda t: nx.sum_(nx.square(swiglu_expert(x, t, up, down))), g) < 1e-4


@pytest.fixture
def setup():
    cfg = MoeConfig(d_model=6, n_routed=5, n_shared=1, top_k=2, expert_dim=4, route_scale=2.448)
    w = init_moe_weights(cfg, 0.4, np.random.default_rng(0))
    w["router"] = np.random.default_rng(1).standard_normal((6, 5))
    return cfg, w


def test_forward_matches_loop(setup):
    cfg, w = setup
    u = np.random.default_rng(2).standard_normal((9, 6))
    bias = np.array([0.1, -0.2, 0.0, 0.3, -0.2])
    res = moe_forward(u, cfg, w, RouterState(bias, np.zeros(5)))
    np.testing.assert_allclose(res.out.data, loop_moe(u, cfg, w, bias), rtol=1e-12, atol=1e-14)
    assert res.stats.counts.sum() == 9 * cfg.top_k


def test_zero_experts_pass_through(setup):
    cfg, w = setup
    zero = {k: np.zeros_like(v) for k, v in w.items()}
    u = np.random.default_rng(3).standard_normal((2, 4, 6))
    np.testing.assert_array_equal(moe_forward(u, cfg, zero, RouterState.zeros(5)).out.data, u)


def test_single_expert_gate_is_one():
    cfg = MoeConfig(d_model=4, n_routed=1, n_shared=1, top_k=1, expert_dim=3, route_scale=1.5)
    w = init_moe_weights(cfg, 0.5, np.random.default_rng(0))
    u = np.random.default_rng(1).standard_normal((3, 4))
    want = (
        u
        + swiglu_expert(u, w["shared.0.gate"], w["shared.0.up"], w["shared.0.down"]).data
        + 1.5 * swiglu_expert(u, w["routed.0.gate"], w["routed.0.up"], w["routed.0.down"]).data
    )
    np.testing.assert_allclose(moe_forward(u, cfg, w, RouterState.zeros(1)).out.data, want, rtol=1e-13)


@given(st.lists(st.floats(-3, 3), min_size=5, max_size=5))
def test_bias_never_reaches_values(bias):
    cfg = MoeConfig(d_model=6, n_routed=5, n_shared=1, top_k=2, expert_dim=4)
    w = init_moe_weights(cfg, 0.4, np.random.default_rng(0))
    u = np.random.default_rng(2).standard_normal((7, 6))
    base = moe_forward(u, cfg, w, RouterState.zeros(5))
    other = moe_forward(u, cfg, w, RouterState(np.array(bias), np.zeros(5)), selected=base.selected)
    np.testing.assert_array_equal(other.out.data, base.out.data)


def test_state_not_mutated(setup):
    cfg, w = setup
    st_ = RouterState(np.arange(5.0), np.ones(5))
    moe_forward(np.ones((3, 6)), cfg, w, st_)
    assert st_.bias.tolist() == [0, 1, 2, 3, 4] and st_.momentum.tolist() == [1] * 5


# ---------------------------------------------------------------- balancers


def test_sign_update_example():
    st_ = RouterState.zeros(2, gamma=0.01)
    new = bias_update_sign(st_, stats([2, 0]))
    np.testing.assert_allclose(new.bias, [-0.01, 0.01])
    assert abs(new.bias.sum()) < 1e-12
    same = bias_update_sign(RouterState(np.array([0.2, -0.2]), np.zeros(2), gamma=0.01), stats([1, 1]))
    assert same.bias.tolist() == [0.2, -0.2]


@given(st.lists(st.integers(0, 50), min_size=2, max_size=16), st.integers(0, 10**6))
def test_sign_update_centered_and_bounded(counts, seed):
    b = np.random.default_rng(seed).standard_normal(len(counts))
    b -= b.mean()
    st_ = RouterState(b, np.zeros(len(counts)), gamma=0.01)
    new = bias_update_sign(st_, stats(counts))
    assert abs(new.bias.sum()) <= 1e-9
    assert np.abs(new.bias - b).max() <= 2 * 0.01 + 1e-15


def test_smebu_starved_expert():
    st_ = RouterState.zeros(4, lam=1.0, kappa=2.0)
    n = np.array([0, 2, 2, 4])
    v = (n.mean() - n) / n.mean()
    assert v[0] == 1.0
    assert abs(math.tanh(2.0) - 0.9640) < 1e-4
    raw = np.tanh(2.0 * v)
    np.testing.assert_allclose(smebu_delta(st_, stats(n)), raw - raw.mean(), rtol=1e-15)


def test_smebu_fixed_point_and_momentum():
    st_ = RouterState(np.array([0.3, -0.1, -0.2]), np.zeros(3))
    new = bias_update_smebu(st_, stats([5, 5, 5]))
    assert new.bias.tolist() == st_.bias.tolist() and new.momentum.tolist() == [0, 0, 0]
    st2 = RouterState.zeros(2, lam=0.1, beta=0.5)
    one = bias_update_smebu(st2, stats([3, 1]))
    d = smebu_delta(st2, stats([3, 1]))
    np.testing.assert_allclose(one.momentum, 0.5 * d)
    two = bias_update_smebu(one, stats([3, 1]))
    np.testing.assert_allclose(two.momentum, 0.5 * one.momentum + 0.5 * d)
    np.testing.assert_allclose(two.bias, one.momentum + two.momentum)


def test_smebu_skips_empty_step():
    st_ = RouterState(np.array([0.1, -0.1]), np.array([0.01, -0.01]))
    new = bias_update_smebu(st_, LoadStats(np.zeros(2, dtype=int), 0, 1))
    assert new.bias.tolist() == st_.bias.tolist() and new.momentum.tolist() == st_.momentum.tolist()


@given(st.lists(st.integers(0, 40), min_size=2, max_size=16).filter(lambda c: sum(c) > 0), st.floats(0.5, 50))
def test_smebu_delta_centered_and_sign_limit(counts, kappa):
    st_ = RouterState.zeros(len(counts), kappa=kappa)
    d = smebu_delta(st_, stats(counts))
    assert abs(d.sum()) <= 1e-9
    # large kappa: tanh saturates, so the update is the centered sign update
    n = np.array(counts, dtype=float)
    big = smebu_delta(RouterState.zeros(len(counts), kappa=1e9, lam=1.0), stats(counts))
    sgn = np.sign(n.mean() - n)
    np.testing.assert_allclose(big, sgn - sgn.mean(), atol=1e-12)


# ---------------------------------------------------------------- aux loss and MaxVio


def test_aux_loss_uniform():
    cfg = MoeConfig(4, n_routed=4, n_shared=0, top_k=1, expert_dim=2, aux_alpha=0.01)
    scores = np.full((4, 4), 0.5)
    mask = np.eye(4, dtype=bool)
    assert abs(float(seq_aux_loss(scores, mask, cfg).data) - 0.01) < 1e-15
    zero = MoeConfig(4, n_routed=4, n_shared=0, top_k=1, expert_dim=2, aux_alpha=0.0)
    assert float(seq_aux_loss(scores, mask, zero).data) == 0.0


def test_aux_loss_one_hot_expert():
    cfg = MoeConfig(4, n_routed=4, n_shared=0, top_k=1, expert_dim=2, aux_alpha=0.1)
    rng = np.random.default_rng(0)
    s = rng.uniform(0.1, 0.9, (6, 4))
    mask = np.zeros((6, 4), bool)
    mask[:, 0] = True
    p1 = (s[:, 0] / s.sum(1)).mean()
    assert abs(float(seq_aux_loss(s, mask, cfg).data) - 0.1 * 4 * p1) < 1e-15


def test_aux_loss_gradient_frozen_indicator():
    cfg = MoeConfig(4, n_routed=5, n_shared=0, top_k=2, expert_dim=2, aux_alpha=0.3)
    s = np.random.default_rng(1).uniform(0.1, 0.9, (8, 5))
    mask = selection_mask(select_topk(s, np.zeros(5), 2), 5)
    assert nx.finite_difference_check(lambda t: seq_aux_loss(t, mask, cfg, seq_len=4), s) < 1e-4


def test_max_vio_examples():
    assert max_vio([3, 3, 3]) == 0.0
    assert abs(max_vio([2, 1, 1]) - 0.5) < 1e-15
    assert max_vio([0, 0, 12, 0, 0, 0]) == 5.0
    with pytest.raises(MetricError):
        max_vio([0, 0])


# ---------------------------------------------------------------- simulation


def test_short_simulation_invariants():
    for balancer in ("sign", "smebu"):
        tr = simulate_balancer(BalancerSimConfig(steps=60, tokens_per_step=256, balancer=balancer))
        assert (tr.loads.sum(1) == 256 * 2).all()
        assert np.abs(tr.pre_momentum_sums).max() <= 1e-9
        assert np.abs(tr.bias.sum(1)).max() <= 1e-9
    none = simulate_balancer(BalancerSimConfig(steps=10, tokens_per_step=256, balancer="none"))
    assert not none.bias.any()
