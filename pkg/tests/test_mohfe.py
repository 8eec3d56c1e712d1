import numpy as np
import pytest

from hmpe.maskpe import mask_from_heatmap, masked_pe, sinusoidal_pe
from hmpe.mohfe import (
    EmbeddingSeq,
    QkvProjections,
    attention_logits,
    attention_weights,
    embed_heatmap,
    encode,
    fuse_qkv,
    multihead_attention,
    multiscale_fuse,
)
from hmpe.utils.errors import DomainError, ShapeError
from hmpe.utils.numerics import Rng


def test_attention_weights_are_row_stochastic(rng):
    q, k = rng.normal((10, 8)), rng.normal((10, 8))
    weights = attention_weights(q, k, heads=4)
    assert weights.shape == (4, 10, 10)
    assert np.all(weights >= 0)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-5)


def test_attention_logits_are_scaled_per_head(rng):
    q, k = rng.normal((3, 4)), rng.normal((3, 4))
    logits = attention_logits(q, k, heads=2)
    q64, k64 = np.asarray(q, dtype=np.float64), np.asarray(k, dtype=np.float64)
    expected = q64[:, 2:] @ k64[:, 2:].T / np.sqrt(2.0)
    np.testing.assert_allclose(logits[1], expected, rtol=1e-5, atol=1e-6)


def test_identical_values_collapse_attention(rng):
    q, k = rng.normal((6, 8)), rng.normal((6, 8))
    row = rng.normal((8,))
    v = np.tile(row, (6, 1))
    out = multihead_attention(q, k, v, heads=2)
    np.testing.assert_allclose(out, v, atol=1e-5)


def test_attention_is_permutation_equivariant():
    rng = Rng(5)
    q, k, v = rng.normal((5, 4)), rng.normal((5, 4)), rng.normal((5, 4))
    out = multihead_attention(q, k, v, heads=2)
    for _ in range(100):
        perm = rng.permutation(5)
        permuted = multihead_attention(q[perm], k[perm], v[perm], heads=2)
        np.testing.assert_allclose(permuted, out[perm], rtol=1e-5, atol=1e-6)


def test_attention_rejects_indivisible_heads(rng):
    with pytest.raises(DomainError):
        attention_weights(rng.normal((3, 6)), rng.normal((3, 6)), heads=4)


def test_embed_heatmap_formula(rng):
    h = rng.uniform((3, 4))
    proj = rng.normal((6, 1))
    pe = masked_pe(sinusoidal_pe(3, 4, 6), mask_from_heatmap(h, 0.5))
    seq = embed_heatmap(h, proj, pe, "bbox")
    assert seq.tokens.shape == (12, 6) and seq.depth == 6 and seq.grid == (3, 4)
    for i in range(3):
        for j in range(4):
            expected = (
                np.asarray(proj[:, 0], dtype=np.float64) * float(h[i, j])
                + np.asarray(pe.pe[i, j], dtype=np.float64)
            )
            np.testing.assert_allclose(seq.tokens[i * 4 + j], expected, rtol=1e-5, atol=1e-6)
    np.testing.assert_array_equal(seq.heat, np.asarray(h).reshape(-1))


def test_embed_heatmap_rejects_mismatched_grid(rng):
    with pytest.raises(ShapeError):
        embed_heatmap(rng.uniform((3, 3)), rng.normal((4, 1)), sinusoidal_pe(3, 4, 4))
    with pytest.raises(ShapeError):
        embed_heatmap(rng.uniform((3, 4)), rng.normal((6, 1)), sinusoidal_pe(3, 4, 4))


def test_embedding_seq_checks_token_count(rng):
    with pytest.raises(ShapeError):
        EmbeddingSeq(tokens=rng.normal((5, 4)), source="class", heat=rng.uniform((6,)), grid=(2, 3))


def test_fuse_qkv_projects_the_concatenation(rng):
    pe = sinusoidal_pe(2, 2, 4)
    e_class = embed_heatmap(rng.uniform((2, 2)), rng.normal((4, 1)), pe, "class")
    e_bbox = embed_heatmap(rng.uniform((2, 2)), rng.normal((4, 1)), pe, "bbox")
    proj = QkvProjections.random(rng, 4)
    q, k, v = fuse_qkv(e_class, e_bbox, proj)
    joint = np.concatenate([e_class.tokens, e_bbox.tokens], axis=1).astype(np.float64)
    np.testing.assert_allclose(k, joint @ np.asarray(proj.w_k, dtype=np.float64).T, rtol=1e-5, atol=1e-6)
    assert q.shape == v.shape == (4, 4)


def test_multiscale_fuse_identity_and_average(rng):
    h = rng.uniform((4, 4))
    np.testing.assert_array_equal(multiscale_fuse([h], (4, 4)), h)
    constant = multiscale_fuse([np.full((4, 4), 0.2), np.full((2, 2), 0.6), np.full((1, 1), 1.0)], (4, 4))
    np.testing.assert_allclose(constant, np.full((4, 4), 0.6), atol=1e-6)


def test_multiscale_fuse_rejects_bad_scales(rng):
    with pytest.raises(ShapeError):
        multiscale_fuse([rng.uniform((3, 4))], (4, 4))
    with pytest.raises(DomainError):
        multiscale_fuse([], (4, 4))


def test_encode_shapes_and_values(rng):
    pe = sinusoidal_pe(3, 3, 8)
    e_class = embed_heatmap(rng.uniform((3, 3)), rng.normal((8, 1)), pe, "class")
    e_bbox = embed_heatmap(rng.uniform((3, 3)), rng.normal((8, 1)), pe, "bbox")
    proj = QkvProjections.random(rng, 8)
    out = encode(e_class, e_bbox, proj, heads=2)
    assert out.q.shape == out.k_enc.shape == out.v_enc.shape == (9, 8)
    assert out.attn_weights.shape == (2, 9, 9)
    q, k, v = fuse_qkv(e_class, e_bbox, proj)
    np.testing.assert_allclose(out.v_enc, multihead_attention(q, k, v, 2), rtol=1e-6)


def test_encode_rejects_mismatched_sequences(rng):
    e_class = embed_heatmap(rng.uniform((3, 3)), rng.normal((4, 1)), sinusoidal_pe(3, 3, 4))
    e_bbox = embed_heatmap(rng.uniform((2, 2)), rng.normal((4, 1)), sinusoidal_pe(2, 2, 4))
    with pytest.raises(ShapeError):
        encode(e_class, e_bbox, QkvProjections.random(rng, 4), heads=2)


def test_zero_projection_passes_the_encoding_through(rng):
    pe = sinusoidal_pe(3, 4, 6)
    seq = embed_heatmap(rng.uniform((3, 4)), np.zeros((6, 1)), pe)
    np.testing.assert_array_equal(seq.tokens, np.asarray(pe.pe).reshape(12, 6))


def test_block_identity_projection_selects_class_tokens(rng):
    pe = sinusoidal_pe(2, 3, 4)
    e_class = embed_heatmap(rng.uniform((2, 3)), rng.normal((4, 1)), pe, "class")
    e_bbox = embed_heatmap(rng.uniform((2, 3)), rng.normal((4, 1)), pe, "bbox")
    left = np.hstack([np.eye(4), np.zeros((4, 4))])
    q, _, _ = fuse_qkv(e_class, e_bbox, QkvProjections(w_q=left, w_k=left, w_v=left))
    np.testing.assert_array_equal(q, e_class.tokens)


def test_zero_query_gives_constant_logits(rng):
    q = np.zeros((3, 4))
    logits = attention_logits(q, rng.normal((5, 4)), heads=2)
    np.testing.assert_array_equal(logits, np.zeros((2, 3, 5)))
