import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bioformer import model as M
from bioformer.tensor import NumericError, ShapeError


def naive_mhsa(x, lp, cfg):
    """Per-head loops straight from the attention definition, in fp64."""
    x = x.astype(np.float64)
    S, H, P = x.shape[0], cfg.heads, cfg.head_dim
    heads = []
    for h in range(H):
        cols = slice(h * P, (h + 1) * P)
        Q = x @ lp["w_query"][:, cols] + lp["b_query"][cols]
        K = x @ lp["w_key"][:, cols] + lp["b_key"][cols]
        V = x @ lp["w_value"][:, cols] + lp["b_value"][cols]
        out = np.zeros((S, P))
        for i in range(S):
            s = np.array([Q[i] @ K[j] / math.sqrt(P) for j in range(S)])
            w = np.exp(s - s.max())
            w /= w.sum()
            for j in range(S):
                out[i] += w[j] * V[j]
        heads.append(out)
    cat = np.concatenate(heads, axis=1)
    hid = np.maximum(cat @ lp["w_proj1"] + lp["b_proj1"], 0)
    return hid @ lp["w_proj2"] + lp["b_proj2"]


def _block_permute(windows, perm, F):
    B, L, ch = windows.shape
    return windows.reshape(B, L // F, F, ch)[:, perm].reshape(B, L, ch)


# --- config ---------------------------------------------------------------

def test_reference_configs():
    b1, b2 = M.BioformerConfig.bio1(), M.BioformerConfig.bio2()
    assert (b1.heads, b1.depth, b1.n_tokens, b1.seq_len) == (8, 1, 30, 31)
    assert (b2.heads, b2.depth) == (2, 2)


@pytest.mark.parametrize("bad", [dict(filter=7), dict(heads=0), dict(embed=0), dict(num_classes=1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        M.BioformerConfig(**bad)


def test_config_dict_round_trip():
    cfg = M.BioformerConfig.bio2(30, use_pos_embedding=False)
    assert M.BioformerConfig.from_dict(cfg.to_dict()) == cfg


# --- tokenizer ------------------------------------------------------------

@pytest.mark.parametrize("F,N", [(10, 30), (20, 15), (30, 10), (1, 300)])
def test_token_count(F, N):
    cfg = M.BioformerConfig(filter=F)
    p = M.init_params(cfg, 0)
    assert M.tokenize(np.zeros((300, 14)), p, cfg).shape == (N, 64)


def test_filter_one_is_per_sample_dense(rng):
    cfg = M.BioformerConfig(filter=1)
    p = M.init_params(cfg, 0)
    x = rng.normal(size=(300, 14)).astype(np.float32)
    np.testing.assert_allclose(M.tokenize(x, p, cfg), x @ p["conv_w"][:, :, 0].T + p["conv_b"], atol=1e-5)


def test_zero_window_tokens_equal_bias():
    cfg = M.BioformerConfig()
    p = M.init_params(cfg, 0)
    tok = M.tokenize(np.zeros((300, 14)), p, cfg)
    assert np.array_equal(tok, np.broadcast_to(p["conv_b"], tok.shape))


def test_tokenize_matches_direct_convolution(rng, tiny_cfg):
    p = M.init_params(tiny_cfg, 3)
    x = rng.normal(size=(6, 3)).astype(np.float32)
    w = p["conv_w"]  # [C, Cin, F]
    ref = np.array([[np.sum(w[c] * x[i * 2:(i + 1) * 2].T) + p["conv_b"][c] for c in range(8)] for i in range(3)])
    np.testing.assert_allclose(M.tokenize(x, p, tiny_cfg), ref, atol=1e-5)


def test_tokenize_divisibility_error(tiny_cfg):
    with pytest.raises(ShapeError):
        M.tokenize(np.zeros((7, 3)), M.init_params(tiny_cfg), tiny_cfg)


# --- MHSA -----------------------------------------------------------------

def test_single_token_attention_is_one(rng):
    cfg = M.BioformerConfig(embed=8, heads=2, head_dim=4, ffn_dim=6, in_channels=3, window_len=6, filter=2)
    lp = M.layer_params(M.init_params(cfg, 1), 0)
    _, att = M.mhsa(rng.normal(size=(1, 8)), lp, cfg, return_attention=True)
    assert np.array_equal(att, np.ones((2, 1, 1)))


def test_zero_values_give_zero_context(rng, tiny_cfg):
    lp = M.layer_params(M.init_params(tiny_cfg, 1), 0)
    lp["w_value"] = np.zeros_like(lp["w_value"])
    lp["b_value"] = np.zeros_like(lp["b_value"])
    out = M.mhsa(rng.normal(size=(4, 8)), lp, tiny_cfg)
    expect = np.maximum(lp["b_proj1"], 0) @ lp["w_proj2"] + lp["b_proj2"]
    np.testing.assert_allclose(out, np.broadcast_to(expect, out.shape), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_mhsa_vs_naive_loop(seed, tiny_cfg):
    rng = np.random.default_rng(seed)
    lp = M.layer_params(M.init_params(tiny_cfg, seed), 0)
    lp = {k: (v + rng.normal(0, 0.1, v.shape)).astype(np.float32) for k, v in lp.items()}
    x = rng.normal(size=(4, 8)).astype(np.float32)
    assert np.max(np.abs(M.mhsa(x, lp, tiny_cfg) - naive_mhsa(x, lp, tiny_cfg))) < 1e-5


def test_batched_forward_matches_single_path(rng):
    cfg = M.BioformerConfig(depth=1, norm_residual=False, use_pos_embedding=False, heads=2)
    p = M.init_params(cfg, 5)
    x = rng.normal(size=(300, 14)).astype(np.float32)
    tok = M.tokenize(x, p, cfg)
    h = np.concatenate([p["cls_token"][None], tok])
    out = M.mhsa(h, M.layer_params(p, 0), cfg)
    ref = out[0] @ p["head_w"] + p["head_b"]
    np.testing.assert_allclose(M.forward(x, p, cfg), ref, atol=1e-4)


@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_attention_rows_stochastic_under_key_scaling(seed, factor):
    cfg = M.BioformerConfig(embed=8, heads=2, head_dim=4, ffn_dim=6, in_channels=3, window_len=6, filter=2)
    rng = np.random.default_rng(seed)
    lp = M.layer_params(M.init_params(cfg, seed % 1000), 0)
    x = rng.normal(size=(5, 8)).astype(np.float32)
    _, att = M.mhsa(x, lp, cfg, return_attention=True)
    lp["w_key"] = lp["w_key"] * np.float32(factor)
    _, att2 = M.mhsa(x, lp, cfg, return_attention=True)
    for a in (att, att2):
        assert np.all(a >= 0)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)


# --- forward / predict ----------------------------------------------------

def test_logits_length_reference_configs(rng):
    x = rng.normal(size=(300, 14)).astype(np.float32)
    for cfg in (M.BioformerConfig.bio1(), M.BioformerConfig.bio2()):
        assert M.forward(x, M.init_params(cfg, 0), cfg).shape == (8,)


def test_forward_deterministic(rng, tiny_cfg):
    p = M.init_params(tiny_cfg, 2)
    x = rng.normal(size=(6, 3)).astype(np.float32)
    assert np.array_equal(M.forward(x, p, tiny_cfg), M.forward(x.copy(), p, tiny_cfg))


def test_batch_rows_independent(rng, tiny_cfg2):
    p = M.init_params(tiny_cfg2, 2)
    x = rng.normal(size=(5, 6, 3)).astype(np.float32)
    full, _ = M.forward_batch(p, x, tiny_cfg2)
    for i in range(5):
        np.testing.assert_allclose(full[i], M.forward(x[i], p, tiny_cfg2), atol=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_permutation_invariance_without_positions(seed):
    cfg = M.BioformerConfig(use_pos_embedding=False, depth=2, heads=2, filter=30)
    rng = np.random.default_rng(seed)
    p = M.init_params(cfg, seed)
    x = rng.normal(size=(3, 300, 14)).astype(np.float32)
    base, _ = M.forward_batch(p, x, cfg)
    for _ in range(5):
        perm = rng.permutation(cfg.n_tokens)
        out, _ = M.forward_batch(p, _block_permute(x, perm, cfg.filter), cfg)
        np.testing.assert_allclose(out, base, atol=1e-5)
        assert np.array_equal(M.predict(out), M.predict(base))


def test_positions_break_permutation_invariance(rng):
    cfg = M.BioformerConfig(filter=30, heads=2)
    p = M.init_params(cfg, 0)
    p["pos_embedding"] = rng.normal(size=p["pos_embedding"].shape).astype(np.float32)
    x = rng.normal(size=(1, 300, 14)).astype(np.float32)
    a, _ = M.forward_batch(p, x, cfg)
    b, _ = M.forward_batch(p, _block_permute(x, np.roll(np.arange(10), 1), 30), cfg)
    assert not np.allclose(a, b, atol=1e-5)


def test_predict_examples(rng):
    assert M.predict(np.eye(8)[7]) == 7
    assert M.predict(np.zeros(8)) == 0
    v = rng.normal(size=8)
    best = 0
    for i in range(8):
        if v[i] > v[best]:
            best = i
    assert M.predict(v) == best
    with pytest.raises(NumericError):
        M.predict(np.array([0.0, np.nan]))


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=12))
def test_predict_lowest_index_tie(vals):
    v = np.array(vals, dtype=np.float32)
    assert M.predict(v) == vals.index(max(vals))


def test_forward_shape_error(tiny_cfg):
    with pytest.raises(ShapeError):
        M.forward(np.zeros((6, 4)), M.init_params(tiny_cfg), tiny_cfg)


def test_check_params_rejects_missing(tiny_cfg):
    p = M.init_params(tiny_cfg)
    del p["head_b"]
    with pytest.raises(ShapeError):
        M.check_params(p, tiny_cfg)


def test_param_shapes_follow_config():
    cfg = M.BioformerConfig.bio1()
    s = M.param_shapes(cfg)
    assert s["conv_w"] == (64, 14, 10)
    assert s["layers.0.w_query"] == (64, 256)
    assert s["layers.0.w_proj1"] == (256, 128)
    assert s["pos_embedding"] == (31, 64)
    assert "pos_embedding" not in M.param_shapes(replace(cfg, use_pos_embedding=False))


# --- checkpoint container -------------------------------------------------

def test_checkpoint_round_trip(tmp_path, tiny_cfg2):
    p = M.init_params(tiny_cfg2, 9)
    M.save_params(tmp_path / "m.biof", p, tiny_cfg2)
    q, cfg = M.load_params(tmp_path / "m.biof")
    assert cfg == tiny_cfg2 and list(q) == list(p)
    assert all(np.array_equal(p[k], q[k]) and q[k].dtype == np.float32 for k in p)


def test_checkpoint_mixed_dtypes(tiny_cfg):
    t = {"a": np.arange(6, dtype=np.int8).reshape(2, 3), "b": np.array([1 << 40], np.int64),
         "c": np.array([-5], np.int32), "d": np.ones((1, 1, 2), np.float32)}
    cfg, out, meta = M.decode_checkpoint(M.encode_checkpoint(tiny_cfg, t, {"x": 1}))
    assert meta == {"x": 1}
    assert all(np.array_equal(t[k], out[k]) and t[k].dtype == out[k].dtype for k in t)


def test_checkpoint_header_layout(tiny_cfg):
    raw = M.encode_checkpoint(tiny_cfg, {})
    assert raw[:4] == b"BIOF" and int.from_bytes(raw[4:6], "little") == M.CKPT_VERSION


@pytest.mark.parametrize("cut", [0, 5, 40, -1])
def test_checkpoint_corruption_detected(tiny_cfg, cut):
    raw = M.encode_checkpoint(tiny_cfg, M.init_params(tiny_cfg))
    with pytest.raises(M.CheckpointError):
        M.decode_checkpoint(raw[:cut])


def test_checkpoint_bitflip_detected(tiny_cfg):
    raw = bytearray(M.encode_checkpoint(tiny_cfg, M.init_params(tiny_cfg)))
    raw[len(raw) // 2] ^= 1
    with pytest.raises(M.CheckpointError):
        M.decode_checkpoint(bytes(raw))


def test_load_params_config_mismatch(tmp_path, tiny_cfg, tiny_cfg2):
    M.save_params(tmp_path / "m.biof", M.init_params(tiny_cfg), tiny_cfg)
    with pytest.raises(M.CheckpointError):
        M.load_params(tmp_path / "m.biof", expect=tiny_cfg2)
