import numpy as np
import pytest

from promptfusion import gradcore as gc
from promptfusion.encoders import TextEncoder, VisionEncoder, patchify_array
from promptfusion.gradcore import Value

from conftest import tiny_images


def vision(**kw):
    kw = {"image_size": 8, "patch_size": 4, "width": 32, "n_layers": 2, "n_heads": 4,
          "seed": 3, "dtype": np.float64, **kw}
    return VisionEncoder(**kw)


def test_patch_counts():
    assert patchify_array(np.zeros((1, 32, 32, 3)), 8).shape[1] == 16
    assert patchify_array(np.zeros((1, 16, 16, 3)), 16).shape[1] == 1
    with pytest.raises(ValueError):
        patchify_array(np.zeros((1, 10, 10, 3)), 4)
    with pytest.raises(ValueError):
        VisionEncoder(image_size=10, patch_size=4)


def test_patchify_is_row_major():
    img = np.arange(4 * 4).reshape(1, 4, 4, 1).astype(float)
    p = patchify_array(img, 2)
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[0, 2], [8, 9, 12, 13])


def test_zero_image_maps_to_projection_bias():
    enc = vision()
    tokens = enc.patchify(np.zeros((1, 8, 8, 3))).data
    np.testing.assert_allclose(tokens[0], np.broadcast_to(enc.patch_b.data, tokens[0].shape))


def test_prompt_insertion_length_and_order():
    enc = vision(image_size=16)
    tokens = enc.patchify(tiny_images(2, 16))
    prompts = Value(np.random.default_rng(0).normal(size=(30, 32)))
    seq = enc.insert_visual_prompts(tokens, prompts)
    assert seq.shape == (2, 1 + 30 + 16, 32)
    np.testing.assert_array_equal(seq.data[:, 1:31], np.broadcast_to(prompts.data, (2, 30, 32)))
    assert enc.insert_visual_prompts(tokens, None).shape == (2, 17, 32)
    with pytest.raises(gc.ShapeError):
        enc.insert_visual_prompts(tokens, Value(np.zeros((2, 16))))


def test_empty_prompt_equals_plain_encoding():
    enc = vision()
    x = tiny_images(3, 8)
    a = enc.encode_image(x, Value(np.zeros((0, 32)))).data
    b = enc.encode_image(x).data
    np.testing.assert_array_equal(a, b)


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _reference_forward(enc, images, prompts):
    """Straight-line numpy forward, independent of the graph code."""
    x = (images - enc.pixel_mean) / enc.pixel_std
    b, p, c = x.shape[0], enc.patch_size, x.shape[-1]
    g = x.shape[1] // p
    patches = np.stack([x[:, i * p:(i + 1) * p, j * p:(j + 1) * p, :].reshape(b, -1)
                        for i in range(g) for j in range(g)], axis=1)
    tok = patches @ enc.patch_w.data + enc.patch_b.data + enc.pos_embed.data[1:]
    cls = np.broadcast_to(enc.cls_token.data + enc.pos_embed.data[0], (b, 1, enc.width))
    seq = np.concatenate([cls, np.broadcast_to(prompts, (b,) + prompts.shape), tok], axis=1)
    for blk in enc.blocks:
        w = {k: v.data for k, v in blk.params.items()}
        h = _layer_norm(seq, w["ln1_g"], w["ln1_b"])
        n, e, heads = seq.shape[1], enc.width, blk.n_heads
        d = e // heads
        split = lambda t: t.reshape(b, n, heads, d).transpose(0, 2, 1, 3)
        q, k, v = split(h @ w["wq"] + w["bq"]), split(h @ w["wk"] + w["bk"]), split(h @ w["wv"] + w["bv"])
        s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(b, n, e)
        seq = seq + o @ w["wo"] + w["bo"]
        h = _layer_norm(seq, w["ln2_g"], w["ln2_b"])
        seq = seq + np.tanh(h @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]
    return _layer_norm(seq[:, 0], enc.ln_post_g.data, enc.ln_post_b.data)


def test_forward_matches_independent_reimplementation():
    enc = vision()
    x = tiny_images(4, 8, seed=2).astype(np.float64)
    prompts = np.random.default_rng(5).normal(0, 0.1, (3, 32))
    ours = enc.encode_image(x, Value(prompts)).data
    np.testing.assert_allclose(ours, _reference_forward(enc, x, prompts), rtol=1e-10, atol=1e-12)


def test_gradient_reaches_prompts_not_weights():
    enc = vision()
    prompts = Value(np.random.default_rng(0).normal(0, 0.1, (2, 32)), requires_grad=True)
    loss = gc.sum(enc.encode_image(tiny_images(2, 8), prompts))
    loss.backward()
    assert np.abs(prompts.grad).sum() > 0
    assert all(w.grad is None for w in enc.named_weights().values())


def test_deterministic_and_patch_order_sensitive():
    enc = vision()
    x = tiny_images(2, 8, seed=9)
    np.testing.assert_array_equal(enc.encode_image(x).data, enc.encode_image(x).data)
    swapped = x.copy()
    swapped[:, :4, :4], swapped[:, 4:, 4:] = x[:, 4:, 4:], x[:, :4, :4]
    assert not np.allclose(enc.encode_image(x).data, enc.encode_image(swapped).data)


def test_gate_feature_is_prompt_free_and_detached():
    enc = vision()
    x = tiny_images(3, 8)
    v = enc.gate_feature(x)
    assert isinstance(v, np.ndarray) and v.shape == (3, enc.out_dim)
    np.testing.assert_array_equal(v, enc.encode_image(x).data)
    np.testing.assert_array_equal(v, enc.gate_feature(x))


def test_text_encoder_contract():
    txt = TextEncoder(n_classes=5, width=32, seed=1, dtype=np.float64)
    ctx = np.random.default_rng(0).normal(0, 0.1, (4, 32))
    f = txt.encode_text(ctx, [0, 1]).data
    assert not np.allclose(f[0], f[1])
    flipped = txt.encode_text(ctx[::-1].copy(), [0]).data
    assert not np.allclose(f[0], flipped[0])
    alone = txt.encode_text(np.zeros((0, 32)), [2])
    assert alone.shape == (1, 32)
    with pytest.raises(ValueError, match="unknown class"):
        txt.encode_text(ctx, [5])


def test_checksum_is_stable_and_sensitive():
    enc = vision()
    c = enc.checksum()
    assert c == enc.checksum()
    enc.patch_w.data[0, 0] += 1.0
    assert c != enc.checksum()
