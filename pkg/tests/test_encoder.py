import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdl import ndtensor as nt
from sdl.encoder import (
    EncoderConfig,
    attention,
    encode,
    encoder_block,
    encoder_param_count,
    frame_features,
    frame_logits,
    init_encoder,
    slice_labels,
    tubelet_embed,
    tubelets,
)
from sdl.errors import ConfigError, IndivisibleDimensions, ShapeMismatch
from sdl.ndtensor import Tensor

TINY = EncoderConfig(frames=4, height=8, width=8, channels=3, patch=4, patch_t=2, dim=8, heads=2, depth=1, n_classes=6)


def zero_params(params):
    for t in params.values():
        t.data = np.zeros_like(t.data)
    return params


def test_default_grid_and_token_count():
    cfg = EncoderConfig()
    assert cfg.grid == (4, 4, 4)
    assert cfg.n_tokens == 8 * 32 * 32 // (2 * 8 * 8) == 64
    params = init_encoder(cfg, np.random.default_rng(0))
    z = tubelet_embed(np.zeros((8, 32, 32, 3)), params, cfg)
    assert z.shape == (1, 4, 4, 4, 64)


def test_indivisible_config_rejected():
    with pytest.raises(IndivisibleDimensions):
        EncoderConfig(height=30)
    with pytest.raises(IndivisibleDimensions):
        EncoderConfig(frames=7)
    with pytest.raises(ConfigError):
        EncoderConfig(dim=10, heads=4)


def test_wrong_video_shape():
    params = init_encoder(TINY, np.random.default_rng(0))
    with pytest.raises(IndivisibleDimensions):
        tubelet_embed(np.zeros((4, 10, 8, 3)), params, TINY)
    with pytest.raises(ShapeMismatch):
        tubelet_embed(np.zeros((4, 12, 8, 3)), params, TINY)


def test_zero_video_gives_zero_tokens():
    params = init_encoder(TINY, np.random.default_rng(0))
    params["pos"].data[:] = 0.0
    z = tubelet_embed(np.zeros((4, 8, 8, 3)), params, TINY)
    assert not z.data.any()


def test_tubelet_flatten_order_matches_loop(rng):
    video = rng.normal(size=(1, 4, 8, 8, 3))
    out = tubelets(video, TINY).data
    P, Pt = TINY.patch, TINY.patch_t
    for t in range(2):
        for i in range(2):
            for j in range(2):
                ref = [video[0, t * Pt + a, i * P + r, j * P + c, ch] for a in range(Pt) for r in range(P) for c in range(P) for ch in range(3)]
                np.testing.assert_array_equal(out[0, t, i, j], ref)


def test_tubelet_locality(rng):
    params = init_encoder(TINY, np.random.default_rng(0))
    a = rng.uniform(size=(4, 8, 8, 3))
    b = a.copy()
    # second temporal slice, grid row 1, grid col 0
    b[2:4, 4:8, 0:4, :] += rng.normal(size=(2, 4, 4, 3))
    za = tubelet_embed(a, params, TINY, add_position=False).data[0]
    zb = tubelet_embed(b, params, TINY, add_position=False).data[0]
    diff = np.abs(za - zb).sum(-1) > 0
    expected = np.zeros((2, 2, 2), bool)
    expected[1, 1, 0] = True
    np.testing.assert_array_equal(diff, expected)


def test_attention_examples(rng):
    v = rng.normal(size=(1, 5, 3))
    out = attention(Tensor(np.zeros((1, 5, 3))), Tensor(rng.normal(size=(1, 5, 3))), Tensor(v), 3).data
    np.testing.assert_allclose(out, np.broadcast_to(v.mean(1, keepdims=True), out.shape), atol=1e-14)
    v1 = rng.normal(size=(1, 1, 3))
    out = attention(Tensor(rng.normal(size=(1, 4, 3))), Tensor(rng.normal(size=(1, 1, 3))), Tensor(v1), 3).data
    np.testing.assert_allclose(out, np.broadcast_to(v1, out.shape), atol=1e-14)


def test_attention_loop_oracle(rng):
    q, k, v = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    out = attention(Tensor(q), Tensor(k), Tensor(v), 2).data
    for i in range(3):
        logits = [sum(q[i, c] * k[j, c] for c in range(2)) / math.sqrt(2) for j in range(3)]
        m = max(logits)
        e = [math.exp(x - m) for x in logits]
        ref = [sum(e[j] / sum(e) * v[j, c] for j in range(3)) for c in range(2)]
        np.testing.assert_allclose(out[i], ref, rtol=1e-13)


def test_attention_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        attention(Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 3, 2))), 2)
    with pytest.raises(ShapeMismatch):
        attention(Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros((1, 4, 2))), 2)


def test_zero_weight_block_is_identity(rng):
    cfg = EncoderConfig(frames=4, height=8, width=8, patch=4, dim=8, heads=2, depth=3)
    params = zero_params(init_encoder(cfg, np.random.default_rng(0)))
    z = Tensor(rng.normal(size=(2, 2, 2, 2, 8)))
    out = z
    for level in range(cfg.depth):
        out = encoder_block(out, params, level, cfg)
    np.testing.assert_array_equal(out.data, z.data)


def test_spatial_permutation_equivariance(rng):
    # a temporal grid of one slice isolates the spatial attention + MLP path
    cfg = EncoderConfig(frames=2, height=12, width=12, patch=4, patch_t=2, dim=8, heads=2, depth=1)
    params = init_encoder(cfg, np.random.default_rng(1))
    for name in ("wo", "bo"):
        for stage in ("spatial", "temporal"):
            params[f"blocks.0.{stage}.{name}"].data = rng.normal(size=params[f"blocks.0.{stage}.{name}"].shape)
    params["blocks.0.mlp.w2"].data = rng.normal(size=params["blocks.0.mlp.w2"].shape)
    z = rng.normal(size=(1, 1, 3, 3, 8))
    perm = rng.permutation(9)
    zp = z.reshape(1, 1, 9, 8)[:, :, perm].reshape(1, 1, 3, 3, 8)
    out = encoder_block(Tensor(z), params, 0, cfg).data.reshape(1, 1, 9, 8)
    outp = encoder_block(Tensor(zp), params, 0, cfg).data.reshape(1, 1, 9, 8)
    np.testing.assert_allclose(outp, out[:, :, perm], atol=1e-13)


# ---- hand-unrolled oracle on four tokens: grid (n_t, n_h, n_w) = (2, 2, 1), d=2, one head


def _ln(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((xi - mu) ** 2 for xi in x) / len(x)
    return [g[i] * (x[i] - mu) / math.sqrt(var + eps) + b[i] for i in range(len(x))]


def _mv(x, w):
    return [sum(x[r] * w[r][c] for r in range(len(x))) for c in range(len(w[0]))]


def _gelu(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _msa(tokens, p, pre):
    ys = [_ln(t, p[pre + "ln.g"], p[pre + "ln.b"]) for t in tokens]
    q = [_mv(y, p[pre + "wq"]) for y in ys]
    k = [_mv(y, p[pre + "wk"]) for y in ys]
    v = [_mv(y, p[pre + "wv"]) for y in ys]
    out = []
    for i in range(len(tokens)):
        s = [sum(q[i][c] * k[j][c] for c in range(2)) / math.sqrt(2) for j in range(len(tokens))]
        e = [math.exp(x) for x in s]
        a = [sum(e[j] / sum(e) * v[j][c] for j in range(len(tokens))) for c in range(2)]
        o = _mv(a, p[pre + "wo"])
        out.append([o[c] + p[pre + "bo"][c] + tokens[i][c] for c in range(2)])
    return out


def test_block_matches_hand_unrolled_oracle(rng):
    cfg = EncoderConfig(frames=4, height=4, width=2, channels=1, patch=2, patch_t=2, dim=2, heads=1, depth=1, n_classes=2)
    assert cfg.grid == (2, 2, 1)
    params = init_encoder(cfg, np.random.default_rng(0))
    for t in params.values():
        t.data = rng.normal(size=t.shape)
    p = {k: v.data.tolist() for k, v in params.items()}
    z = rng.normal(size=(1, 2, 2, 1, 2))
    # tokens indexed [t][h]
    tok = [[list(z[0, t, h, 0]) for h in range(2)] for t in range(2)]
    sp = [_msa(tok[t], p, "blocks.0.spatial.") for t in range(2)]
    tp = [_msa([sp[0][h], sp[1][h]], p, "blocks.0.temporal.") for h in range(2)]
    ref = np.zeros((2, 2, 2))
    for h in range(2):
        for t in range(2):
            y = tp[h][t]
            u = _ln(y, p["blocks.0.mlp.ln.g"], p["blocks.0.mlp.ln.b"])
            hid = [_gelu(a + b) for a, b in zip(_mv(u, p["blocks.0.mlp.w1"]), p["blocks.0.mlp.b1"])]
            m = _mv(hid, p["blocks.0.mlp.w2"])
            ref[t, h] = [m[c] + p["blocks.0.mlp.b2"][c] + y[c] for c in range(2)]
    out = encoder_block(Tensor(z), params, 0, cfg).data[0, :, :, 0]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-13)


def test_frame_logits_shapes_and_sharing(rng):
    cfg = EncoderConfig()
    params = init_encoder(cfg, np.random.default_rng(0))
    params["heads.b"].data = rng.normal(size=params["heads.b"].shape)
    logits = frame_logits(Tensor(rng.normal(size=(2, 4, 4, 4, 64))), params, cfg).data
    assert logits.shape == (2, 8, 6)
    for t in range(4):
        np.testing.assert_array_equal(logits[:, 2 * t], logits[:, 2 * t + 1])
    assert not np.allclose(logits[:, 0], logits[:, 2])


def test_frame_logits_zero_features_uniform():
    cfg = EncoderConfig()
    params = init_encoder(cfg, np.random.default_rng(0))
    logits = frame_logits(Tensor(np.zeros((1, 4, 4, 4, 64))), params, cfg)
    np.testing.assert_allclose(nt.softmax(logits).data, 1 / 6, atol=1e-15)


def test_frame_logits_per_slice_heads_loop(rng):
    params = init_encoder(TINY, np.random.default_rng(0))
    z = rng.normal(size=(3, 2, 2, 2, 8))
    out = frame_logits(Tensor(z), params, TINY).data
    W, b = params["heads.w"].data, params["heads.b"].data
    for i in range(3):
        for t in range(2):
            ref = z[i, t].reshape(-1) @ W[t] + b[t, 0]
            for f in (2 * t, 2 * t + 1):
                np.testing.assert_allclose(out[i, f], ref, rtol=1e-12)


def test_frame_features(rng):
    np.testing.assert_array_equal(frame_features(Tensor(np.full((1, 4, 4, 4, 8), 2.5))).data, 2.5)
    z = np.zeros((1, 2, 2, 2, 8))
    z[0, 1, 0, 1] = rng.normal(size=8)
    feats = frame_features(Tensor(z)).data
    np.testing.assert_allclose(feats[0, 1], z[0, 1, 0, 1] / 4, rtol=1e-15)
    assert not feats[0, 0].any()
    z = rng.normal(size=(2, 4, 3, 5, 6))
    feats = frame_features(Tensor(z)).data
    for b in range(2):
        for t in range(4):
            acc = np.zeros(6)
            for h in range(3):
                for w in range(5):
                    acc += z[b, t, h, w]
            np.testing.assert_allclose(feats[b, t], acc / 15, atol=1e-12)


def test_slice_labels_majority_earlier_tie():
    assert slice_labels([0, 0, 1, 2, 3, 3, 4, 4], 2).tolist() == [0, 1, 3, 4]
    assert slice_labels([1, 2, 2, 1, 1, 2], 3).tolist() == [2, 1]
    assert slice_labels([[5, 1], [1, 5]], 2).tolist() == [[5], [1]]


def test_param_count_is_a_pure_function_of_config():
    cfg = EncoderConfig()
    params = init_encoder(cfg, np.random.default_rng(0))
    assert sum(t.data.size for t in params.values()) == encoder_param_count(cfg) == 186072
    params = init_encoder(TINY, np.random.default_rng(5))
    assert sum(t.data.size for t in params.values()) == encoder_param_count(TINY)


@settings(max_examples=20, deadline=None)
@given(
    st.sampled_from([1, 2]),
    st.sampled_from([1, 2, 3]),
    st.sampled_from([1, 2]),
    st.sampled_from([2, 4]),
    st.sampled_from([(4, 1), (4, 2), (6, 3)]),
    st.integers(0, 2),
    st.integers(2, 5),
)
def test_shape_chain_over_random_configs(n_t, n_h, pt, patch, dim_heads, depth, n_classes):
    dim, heads = dim_heads
    cfg = EncoderConfig(frames=n_t * pt, height=n_h * patch, width=2 * patch, channels=2, patch=patch, patch_t=pt, dim=dim, heads=heads, depth=depth, n_classes=n_classes)
    params = init_encoder(cfg, np.random.default_rng(0))
    video = np.random.default_rng(1).uniform(size=(cfg.frames, cfg.height, cfg.width, 2))
    z = encode(video, params, cfg)
    assert z.shape == (1, n_t, n_h, 2, dim)
    assert frame_logits(z, params, cfg).shape == (1, cfg.frames, n_classes)
    assert frame_features(z).shape == (1, n_t, dim)


def test_inference_forward_allocates_no_tape_nodes(rng):
    cfg = EncoderConfig()
    params = init_encoder(cfg, np.random.default_rng(0))
    with nt.inference_mode():
        z = encode(rng.uniform(size=(2, 8, 32, 32, 3)), params, cfg)
        frame_logits(z, params, cfg)
        assert len(nt.get_tape()) == 0


def test_cross_entropy_gradient_through_encoder(rng):
    params = init_encoder(TINY, np.random.default_rng(3))
    # O(1) weights everywhere: tiny gradients would drown in difference noise
    for t in params.values():
        t.data = t.data + rng.normal(0, 0.5, size=t.shape)
    video = rng.uniform(size=(2, 4, 8, 8, 3))
    labels = rng.integers(0, 6, size=(2, 4))

    def loss_for(ps):
        z = encode(video, ps, TINY)
        return nt.cross_entropy(frame_logits(z, ps, TINY).reshape(8, 6), labels.reshape(-1))

    for k, t in params.items():
        t.grad = None
    nt.backward(loss_for(params))
    pick = np.random.default_rng(9)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        coords = pick.choice(flat.size, size=min(4, flat.size), replace=False)
        fd = []
        for c in coords:
            vals = []
            for sgn in (1, -1):
                ps = {k: Tensor(v.data) for k, v in params.items()}
                ps[name].data.reshape(-1)[c] += sgn * 1e-6
                with nt.inference_mode():
                    vals.append(loss_for(ps).item())
            fd.append((vals[0] - vals[1]) / 2e-6)
        analytic = t.grad.reshape(-1)[coords]
        assert nt.relative_error(analytic, np.array(fd)) <= 1e-5, name
