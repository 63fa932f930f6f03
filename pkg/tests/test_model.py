"""Encoder checks: shapes, grouping, head swapping, checkpoint round trips."""

import numpy as np
import pytest

from ssptlab.autodiff import ShapeError
from ssptlab.model import (
    ModelConfig,
    init_params,
    forward,
    load_checkpoint,
    save_checkpoint,
    swap_head,
)

TRUNK_GROUPS = ["embedding", "attention-1", "ffn-1", "attention-2", "ffn-2"]


def toy_params(heads=None, seed=0, **kw):
    cfg = ModelConfig(input_dim=10, seq_len=16, **kw)
    return cfg, init_params(cfg, heads or {"scc": 4, "ssc": 2, "map": 1}, seed)


def test_default_architecture_dims():
    cfg, params = toy_params()
    assert cfg.d_model == 32 and cfg.n_heads == 4 and cfg.ffn_dim == 128
    assert cfg.n_layers == 2
    g = params.groups
    assert g["embedding"]["w"].shape == (10, 32)
    assert g["embedding"]["pos"].shape == (16, 32)
    for layer in ("attention-1", "attention-2"):
        assert g[layer]["wq"].shape == (32, 32)
        assert g[layer]["wo"].shape == (32, 32)
    for layer in ("ffn-1", "ffn-2"):
        assert g[layer]["w1"].shape == (32, 128)
        assert g[layer]["w2"].shape == (128, 32)
    assert g["head-scc"]["w"].shape == (32, 4)
    assert g["head-map"]["w"].shape == (32, 1)


def test_groups_partition_all_parameters():
    _, params = toy_params()
    names = [n for n, _ in params.named_tensors()]
    assert len(names) == len(set(names))
    by_group = sum(params.n_params([g]) for g in params.groups)
    assert by_group == params.n_params()
    assert set(params.groups) == set(TRUNK_GROUPS) | {
        "head-scc", "head-ssc", "head-map"}


def test_forward_shapes():
    cfg, params = toy_params(heads={"scc": 1026, "map": 1})
    x = np.random.default_rng(0).normal(size=(4, 16, 10)).astype(np.float32)
    assert forward(params, x, "scc").shape == (4, 1026)
    assert forward(params, x, "map").shape == (4,)
    assert forward(params, x, "map", per_step=True).shape == (4, 16)


def test_forward_rejects_bad_shapes_and_heads():
    cfg, params = toy_params()
    good = np.zeros((2, 16, 10), dtype=np.float32)
    with pytest.raises(ShapeError):
        forward(params, np.zeros((2, 16, 9), dtype=np.float32), "scc")
    with pytest.raises(ShapeError):
        forward(params, good[0], "scc")
    with pytest.raises(ShapeError):
        forward(params, good, "nope")


def test_zero_windows_give_bias_driven_logits():
    # All-zero inputs: every sample must produce identical head outputs.
    cfg, params = toy_params(seed=5)
    x = np.zeros((3, 16, 10), dtype=np.float32)
    out = forward(params, x, "scc").data
    assert np.allclose(out[0], out[1]) and np.allclose(out[1], out[2])


def test_forward_deterministic():
    cfg, params = toy_params(seed=3)
    x = np.random.default_rng(1).normal(size=(4, 16, 10)).astype(np.float32)
    a = forward(params, x, "scc").data
    b = forward(params, x, "scc").data
    assert a.tobytes() == b.tobytes()


def test_init_deterministic_and_seed_sensitive():
    _, p1 = toy_params(seed=7)
    _, p2 = toy_params(seed=7)
    _, p3 = toy_params(seed=8)
    for (n1, t1), (n2, t2) in zip(p1.named_tensors(), p2.named_tensors()):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()
    assert any(t1.data.tobytes() != t3.data.tobytes()
               for (_, t1), (_, t3) in zip(p1.named_tensors(),
                                           p3.named_tensors()))


def test_swap_head_shares_trunk():
    _, params = toy_params()
    swapped = swap_head(params, "scc", "select", 1, seed=42)
    for g in TRUNK_GROUPS:
        for k, t in params.groups[g].items():
            assert swapped.groups[g][k].data is t.data
    assert "head-select" in swapped.groups
    assert "head-scc" not in swapped.groups
    assert swapped.groups["head-select"]["w"].shape == (32, 1)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    from ssptlab.optim import Adam

    cfg, params = toy_params(seed=9)
    opt = Adam(params.tensors(), lr=2e-4)
    x = np.random.default_rng(2).normal(size=(2, 16, 10)).astype(np.float32)
    from ssptlab.autodiff import cross_entropy
    loss = cross_entropy(forward(params, x, "scc"), np.array([1, 3]))
    loss.backward()
    opt.step()

    log = [(0, "train", "loss", 1.5), (0, "valid", "accuracy", 0.25)]
    path = tmp_path / "model.sspt"
    save_checkpoint(path, params, digest="abc123", optimizer=opt, log=log)
    assert path.read_bytes()[:4] == b"SSPT"

    loaded, digest, opt_state, log2 = load_checkpoint(path)
    assert digest == "abc123"
    assert log2 == log
    for (n1, t1), (n2, t2) in zip(params.named_tensors(),
                                  loaded.named_tensors()):
        assert n1 == n2
        assert t1.data.tobytes() == t2.data.tobytes()
    assert loaded.config == cfg

    opt2 = Adam(loaded.tensors(), lr=1.0)
    opt2.load_state_dict(opt_state)
    s1, s2 = opt.state_dict(), opt2.state_dict()
    assert s1["t"] == s2["t"] and s1["lr"] == s2["lr"]
    for m1, m2 in zip(s1["m"], s2["m"]):
        assert m1.tobytes() == m2.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.sspt"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_dropout_only_when_requested():
    cfg = ModelConfig(input_dim=10, seq_len=16, dropout=0.5)
    params = init_params(cfg, {"scc": 4}, seed=0)
    x = np.random.default_rng(3).normal(size=(2, 16, 10)).astype(np.float32)
    # No rng passed -> inference mode, deterministic.
    a = forward(params, x, "scc").data
    b = forward(params, x, "scc").data
    assert a.tobytes() == b.tobytes()
    c = forward(params, x, "scc",
                dropout_rng=np.random.default_rng(0)).data
    assert a.tobytes() != c.tobytes()
