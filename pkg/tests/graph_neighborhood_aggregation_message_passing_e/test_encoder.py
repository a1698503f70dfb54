import math

import numpy as np
import pytest

from oneshot_tkg.autodiff import Tensor, precision
from oneshot_tkg.core import HistoryWindow
from oneshot_tkg.encoder import (EncoderConfig, ModelParams, encode, encode_batch, multi_head,
                                 positional_encoding, scaled_dot_attention, snapshot_aggregate)
from oneshot_tkg.errors import ConfigError, HistoryLengthMismatch


def arrays_of(params):
    return {k: t.data.astype(np.float64) for k, t in params.items()}


def zero_params(cfg, n_e, n_r):
    p = ModelParams.init(cfg, n_e, n_r)
    for t in p.tensors.values():
        t.data[...] = 0
    return p


# snapshot pooling -----------------------------------------------------------

def test_empty_snapshot_gives_zero_pool(rng):
    p = ModelParams.init(EncoderConfig(d=3, ell=2, n_max=2, n_heads=1, d_inner=4), 4, 2, seed=1)
    x = snapshot_aggregate([], 2, p).data
    np.testing.assert_allclose(x, np.r_[np.zeros(3), p["entity_emb"].data[2]])


def test_zero_weights_pool_to_zero():
    p = ModelParams.init(EncoderConfig(d=3, ell=2, n_max=2, n_heads=1, d_inner=4), 4, 2, seed=1)
    p["snap.W"].data[...] = 0
    x = snapshot_aggregate([(0, 1), (1, 3)], 0, p).data
    np.testing.assert_allclose(x, np.r_[np.zeros(3), p["entity_emb"].data[0]])


def test_hand_set_single_neighbor():
    cfg = EncoderConfig(d=2, ell=1, n_max=1, n_heads=1, d_inner=2)
    with precision(np.float64):
        p = ModelParams.init(cfg, 2, 1)
        p["relation_emb"].data[...] = [[0.5, -1.0]]
        p["entity_emb"].data[...] = [[0.2, 0.3], [1.0, 2.0]]
        p["snap.W"].data[...] = [[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [0.0, -1.0]]
        p["snap.b"].data[...] = [0.1, 0.1]
    x = snapshot_aggregate([(0, 1)], 0, p).data
    # [v_r : v_n] = [0.5, -1, 1, 2]; W^T x + b = [0.5 + 2 + 0.1, -1 - 2 + 0.1]
    np.testing.assert_allclose(x, [2.6, 0.0, 0.2, 0.3], atol=1e-6)


# positional encoding -------------------------------------------------------

def test_pe_position_zero():
    pe = positional_encoding(1, 6)
    np.testing.assert_array_equal(pe[0, 0::2], 0)
    np.testing.assert_array_equal(pe[0, 1::2], 1)


def test_pe_worked_example():
    pe = positional_encoding(2, 4)
    np.testing.assert_allclose(pe[1], [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)],
                               atol=1e-9)


def test_pe_range():
    pe = positional_encoding(40, 30)
    assert np.abs(pe).max() <= 1


# attention -----------------------------------------------------------------

def test_single_key_returns_value(rng):
    v = rng.normal(size=(1, 3))
    out, w = scaled_dot_attention(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(1, 3))),
                                  Tensor(v))
    np.testing.assert_allclose(out.data, np.repeat(v, 4, 0).astype(np.float32))
    np.testing.assert_array_equal(w.data, 1)


def test_identical_keys_split_evenly():
    k = Tensor([[1.0, 2.0], [1.0, 2.0]])
    v = Tensor([[3.0, -1.0], [3.0, -1.0]])
    out, w = scaled_dot_attention(Tensor([[0.3, 0.7]]), k, v)
    np.testing.assert_allclose(w.data, [[0.5, 0.5]])
    np.testing.assert_allclose(out.data, [[3.0, -1.0]])


def scalar_attention(q, k, v):
    out = np.zeros((len(q), v.shape[1]))
    for i in range(len(q)):
        logits = [sum(q[i][c] * k[j][c] for c in range(len(q[i]))) / math.sqrt(len(q[i]))
                  for j in range(len(k))]
        top = max(logits)
        ex = [math.exp(x - top) for x in logits]
        z = sum(ex)
        for j in range(len(k)):
            for c in range(v.shape[1]):
                out[i][c] += ex[j] / z * v[j][c]
    return out


def test_attention_scalar_loop_oracle():
    q = np.array([[1.0, 0.0], [0.5, -0.5]])
    k = np.array([[1.0, 1.0], [0.0, 2.0], [-1.0, 0.5]])
    v = np.array([[1.0, 2.0, 3.0], [0.0, -1.0, 1.0], [2.0, 2.0, 0.0]])
    with precision(np.float64):
        out, _ = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
    np.testing.assert_allclose(out.data, scalar_attention(q, k, v), atol=1e-6)


# straight-line reference encoder ---------------------------------------------

def ref_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + eps) * g + b


def ref_layer(x, a, cfg, li):
    p = f"layer{li}."
    heads = []
    for h in range(cfg.n_heads):
        q, k, v = (x @ a[f"{p}head{h}.{m}"] for m in ("WQ", "WK", "WV"))
        heads.append(scalar_attention(q, k, v))
    x = ref_layer_norm(x + np.concatenate(heads, -1) @ a[p + "WO"], a[p + "ln1.gain"], a[p + "ln1.bias"])
    ff = np.maximum(x @ a[p + "ffn.W1"] + a[p + "ffn.b1"], 0) @ a[p + "ffn.W2"] + a[p + "ffn.b2"]
    return ref_layer_norm(x + ff, a[p + "ln2.gain"], a[p + "ln2.bias"])


def ref_encode(win, a, cfg):
    rows = []
    for snap in win.snapshots:
        pairs = sorted(snap)[:cfg.n_max]
        if pairs:
            feats = [np.r_[a["relation_emb"][r], a["entity_emb"][n]] @ a["snap.W"] + a["snap.b"]
                     for r, n in pairs]
            f = np.maximum(np.mean(feats, axis=0), 0)
        else:
            f = np.zeros(cfg.d)
        rows.append(np.r_[f, a["entity_emb"][win.entity]])
    x = np.array(rows) + positional_encoding(cfg.ell, cfg.d_model)
    for li in range(cfg.n_layers):
        x = ref_layer(x, a, cfg, li)
    return np.maximum(x.reshape(-1) @ a["Wstar"], 0)


def random_window(rng, entity, ell, n_e, n_r, max_pairs=4):
    snaps = []
    for _ in range(ell):
        k = int(rng.integers(0, max_pairs + 1))
        pairs = {(int(rng.integers(n_r)), int(rng.integers(n_e))) for _ in range(k)}
        snaps.append(tuple(sorted(pairs)))
    return HistoryWindow(entity, 100, tuple(snaps))


@pytest.mark.parametrize("cfg", [
    EncoderConfig(d=2, ell=2, n_max=3, n_heads=1, n_layers=1, d_inner=4),
    EncoderConfig(d=4, ell=3, n_max=2, n_heads=2, n_layers=2, d_inner=6),
])
def test_matches_straight_line_oracle(cfg):
    rng = np.random.default_rng(7)
    with precision(np.float64):
        p = ModelParams.init(cfg, 5, 6, seed=3)
        for name, t in p.items():
            if t.ndim == 1:  # make biases and gains non-trivial
                t.data[...] = rng.normal(size=t.shape)
    a = arrays_of(p)
    for e in range(5):
        win = random_window(rng, e, cfg.ell, 5, 6)
        np.testing.assert_allclose(encode(win, p, cfg).data, ref_encode(win, a, cfg), atol=1e-5)


def test_two_heads_equal_concatenated_single_heads():
    cfg = EncoderConfig(d=2, ell=3, n_max=2, n_heads=2, d_inner=3)
    rng = np.random.default_rng(2)
    with precision(np.float64):
        p = ModelParams.init(cfg, 3, 2, seed=5)
        x = Tensor(rng.normal(size=(3, 4)))
        got = multi_head(x, p, 0, cfg).data
    np.testing.assert_allclose(got, ref_layer(x.data, arrays_of(p), cfg, 0), atol=1e-9)


def test_one_head_uses_plain_attention(rng):
    cfg = EncoderConfig(d=2, ell=3, n_max=2, n_heads=1, d_inner=3)
    with precision(np.float64):
        p = ModelParams.init(cfg, 3, 2, seed=5)
        x = Tensor(rng.normal(size=(3, 4)))
        trace = []
        multi_head(x, p, 0, cfg, trace)
        q = x.data @ p["layer0.head0.WQ"].data
        k = x.data @ p["layer0.head0.WK"].data
        _, w = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(k))
    np.testing.assert_allclose(trace[0], w.data)


def test_output_shapes(rng):
    cfg = EncoderConfig(d=4, ell=3, n_max=2, n_heads=2, d_inner=5)
    p = ModelParams.init(cfg, 6, 4)
    wins = [random_window(rng, e, 3, 6, 4) for e in range(6)]
    assert encode_batch(wins, p, cfg).shape == (6, 4)
    x = Tensor(rng.normal(size=(3, 8)))
    assert multi_head(x, p, 0, cfg).shape == (3, 8)


def test_empty_history_zero_params_is_finite():
    cfg = EncoderConfig(d=3, ell=2, n_max=2, n_heads=1, d_inner=4)
    p = zero_params(cfg, 2, 2)
    h = encode(HistoryWindow(0, 5, ((), ())), p, cfg).data
    assert h.shape == (3,) and np.isfinite(h).all()
    np.testing.assert_array_equal(h, 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(d=2, ell=1, n_layers=0)
    with pytest.raises(ConfigError):
        EncoderConfig(d=3, n_heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(mode="lstm")


def test_history_length_must_match():
    cfg = EncoderConfig(d=2, ell=3, n_max=2, n_heads=1, d_inner=2)
    p = ModelParams.init(cfg, 2, 2)
    with pytest.raises(HistoryLengthMismatch):
        encode(HistoryWindow(0, 5, ((), ())), p, cfg)


def test_flat_mode_pools_whole_window():
    cfg = EncoderConfig(d=3, ell=2, n_max=2, mode="flat")
    win = HistoryWindow(1, 5, (((0, 2),), ((1, 3), (0, 0))))
    with precision(np.float64):
        p = ModelParams.init(cfg, 4, 2, seed=4)
        got = encode(win, p, cfg).data
    a = arrays_of(p)
    feats = [np.r_[a["relation_emb"][r], a["entity_emb"][n]] @ a["snap.W"] + a["snap.b"]
             for r, n in [(0, 0), (0, 2), (1, 3)]]
    x = np.r_[np.maximum(np.mean(feats, 0), 0), a["entity_emb"][1]]
    np.testing.assert_allclose(got, np.maximum(x @ a["flat.W"], 0), atol=1e-9)


def test_init_is_seeded():
    cfg = EncoderConfig(d=4, ell=2, n_max=2, n_heads=2, d_inner=4)
    a = ModelParams.init(cfg, 5, 4, seed=9).to_arrays()
    b = ModelParams.init(cfg, 5, 4, seed=9).to_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert all(np.all(v == 0) for k, v in a.items() if k.endswith(".bias") or k.endswith(".b"))
