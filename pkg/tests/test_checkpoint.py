import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from moelab.checkpoint import CheckpointError, MAGIC, load_checkpoint, save_checkpoint
from moelab.model import init_all_params, load_config
from moelab.moe import RouterState


def sample_state():
    return {
        2: RouterState(np.array([0.1, -0.1, 0.0]), np.array([1e-3, -2e-3, 1e-3]), gamma=1e-3, lam=2e-3),
        5: RouterState.zeros(3, kappa=3.0, beta=0.25),
    }


def test_roundtrip_bit_exact(tmp_path):
    cfg = load_config("tiny")
    params = init_all_params(cfg, 0)
    states = cfg.new_router_states()
    states[3] = RouterState(np.linspace(-1, 1, cfg.n_routed), np.full(cfg.n_routed, 1e-300), lam=1e-2)
    save_checkpoint(tmp_path / "c.bin", params, states, {"step": 7})
    p2, s2, meta = load_checkpoint(tmp_path / "c.bin")
    assert meta == {"step": 7}
    assert list(p2) == list(params)
    for k in params:
        assert p2[k].dtype == np.float64 and p2[k].tobytes() == params[k].tobytes()
    assert sorted(s2) == sorted(states)
    for k, st_ in states.items():
        assert s2[k].bias.tobytes() == st_.bias.tobytes()
        assert s2[k].momentum.tobytes() == st_.momentum.tobytes()
        assert (s2[k].gamma, s2[k].lam, s2[k].kappa, s2[k].beta) == (st_.gamma, st_.lam, st_.kappa, st_.beta)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)))
def test_arbitrary_values_roundtrip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("ck") / "a.bin"
    save_checkpoint(path, {"x": arr})
    got = load_checkpoint(path)[0]["x"]
    assert got.shape == arr.shape and got.tobytes() == arr.tobytes()


def test_corrupted_payload_reports_offset(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"a": np.zeros(4), "b": np.ones(3)}, sample_state())
    raw = bytearray(path.read_bytes())
    hlen = struct.unpack_from("<Q", raw, len(MAGIC) + 4)[0]
    start_b = len(MAGIC) + 12 + hlen + 4 * 8
    raw[start_b + 3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match=rf"'b' at offset {start_b}"):
        load_checkpoint(path)


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda raw: b"NOTACKPT" + raw[8:], "bad magic"),
        (lambda raw: raw[:10], "truncated|offset"),
        (lambda raw: raw[:-5], "truncated"),
        (lambda raw: raw[:20] + b"\xff" + raw[21:], "header"),
    ],
)
def test_other_corruptions(tmp_path, mutate, match):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"a": np.arange(6.0)}, sample_state())
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError, match=match):
        load_checkpoint(path)
