import math

import numpy as np
import pytest

from moelab.model import adjusted_lr, load_config
from moelab.training import (
    AdamW,
    TrainConfig,
    TrainingDiverged,
    is_hidden_matrix,
    lr_at,
    make_batch,
    per_sequence_ce,
    smoke_corpus,
    train,
)


@pytest.fixture(scope="module")
def small():
    cfg = load_config("tiny").replace(n_layers=4, dense_first=1)
    batch = make_batch(smoke_corpus(400, cfg.vocab_size, seed=0), cfg.seq_len)
    return cfg, batch


def test_schedule_shape():
    tc = TrainConfig(steps=100, warmup=10, final_lr_frac=0.1)
    assert lr_at(0, tc) == 0.1 and lr_at(9, tc) == 1.0
    assert lr_at(10, tc) == 1.0
    assert abs(lr_at(100, tc) - 0.1) < 1e-12
    vals = [lr_at(s, tc) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_hidden_lr_adjustment():
    params = {"embed": np.zeros((8, 4)), "w": np.zeros((4, 16)), "v": np.zeros((16, 4)), "g": np.ones(4)}
    opt = AdamW(params, TrainConfig(lr=0.01, embed_lr=0.02))
    assert opt.base_lr["w"] == adjusted_lr(0.01, 4, 16) == 0.02
    assert opt.base_lr["v"] == 0.01 and opt.base_lr["g"] == 0.01 and opt.base_lr["embed"] == 0.02
    assert is_hidden_matrix("w", (4, 16)) and not is_hidden_matrix("unembed", (4, 16))


def test_adamw_first_step_is_signed_lr():
    params = {"w": np.ones((2, 2))}
    opt = AdamW(params, TrainConfig(lr=0.1, weight_decay=0.0, eps=0.0))
    opt.step({"w": np.array([[2.0, -3.0], [0.5, -1e-3]])}, 1.0)
    np.testing.assert_allclose(params["w"], [[0.9, 1.1], [0.9, 1.1]], rtol=1e-12)


def test_norm_gains_skip_weight_decay():
    params = {"lm_norm": np.ones(3), "w": np.ones((3, 3))}
    opt = AdamW(params, TrainConfig(lr=0.1, weight_decay=0.5))
    opt.step({"lm_norm": np.zeros(3), "w": np.zeros((3, 3))}, 1.0)
    assert params["lm_norm"].tolist() == [1.0] * 3
    np.testing.assert_allclose(params["w"], 0.95)


def test_per_sequence_ce():
    logits = np.zeros((2, 3, 5))
    assert np.allclose(per_sequence_ce(logits, np.zeros((2, 3), int)), math.log(5))


def test_make_batch_shifts_targets():
    cfg = load_config("tiny")
    docs = smoke_corpus(300, cfg.vocab_size, seed=1)
    b = make_batch(docs, 16)
    flat = np.concatenate([d.tokens for d in docs])
    np.testing.assert_array_equal(b.inputs[0], flat[:16])
    np.testing.assert_array_equal(b.targets[0], flat[1:17])
    assert b.inputs.shape == b.doc_ids.shape


def test_short_training_is_deterministic(small):
    cfg, batch = small
    tc = TrainConfig(steps=4, warmup=2)
    a = [r["loss"] for r in train(cfg, tc, batch).history]
    b = [r["loss"] for r in train(cfg, tc, batch).history]
    assert a == b
    assert a[-1] < a[0]


def test_history_records(small):
    cfg, batch = small
    seen = []
    res = train(cfg, TrainConfig(steps=2, warmup=1), batch, on_step=seen.append)
    assert seen == res.history
    rec = res.history[-1]
    for key in ("loss", "max_vio_max", "lse_mean_abs", "batch_het", "grad_norm", "load", "bias_norm"):
        assert key in rec
    assert all(sum(v) == batch.inputs.size * cfg.top_k for v in rec["load"].values())
    assert any(np.any(s.bias != 0) for s in res.states.values())


def test_divergence_is_reported(small):
    cfg, batch = small
    with pytest.raises(TrainingDiverged) as exc:
        train(cfg, TrainConfig(steps=20, lr=1e12, embed_lr=1e12, warmup=1), batch)
    assert exc.value.step >= 2 and "step" in str(exc.value)
