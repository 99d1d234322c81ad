"""Attention primitives and the bidirectional / self-attention blocks."""

import numpy as np
import pytest

from app.core.error_handling import ContractError, ShapeError
from app.engine.module import ForwardContext
from app.engine.tensor import Tensor, default_dtype
from app.models.attention import (
    IMAGE_STREAM, IMAGE_TO_TEXT, TEXT_STREAM, TEXT_TO_IMAGE, UNIFIED, AttentionTrace, BidirectionalBlock,
    SelfAttentionBlock, bidirectional_block, merge_heads, scaled_attention, self_attention_block, split_heads,
)

pytestmark = pytest.mark.unit


def _tokens(rng, batch, count, dim=8):
    return Tensor(rng.standard_normal((batch, count, dim)))


def test_attention_weights_are_row_stochastic(rng):
    q, k, v = (Tensor(rng.standard_normal((2, 2, n, 4))) for n in (3, 5, 5))
    out, weights = scaled_attention(q, k, v)
    assert out.shape == (2, 2, 3, 4)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-5)


def test_masked_keys_get_no_weight(rng):
    q, k, v = (Tensor(rng.standard_normal((1, 1, 2, 4))) for _ in range(3))
    _, weights = scaled_attention(q, k, v, key_mask=np.array([[False, True]]))
    np.testing.assert_allclose(weights.data[..., 1], 0.0, atol=1e-12)


def test_mask_shape_is_checked(rng):
    q, k, v = (Tensor(rng.standard_normal((1, 1, 2, 4))) for _ in range(3))
    with pytest.raises(ShapeError):
        scaled_attention(q, k, v, key_mask=np.zeros((1, 3), dtype=bool))


def test_key_value_count_mismatch(rng):
    q = Tensor(rng.standard_normal((1, 1, 2, 4)))
    with pytest.raises(ShapeError):
        scaled_attention(q, Tensor(rng.standard_normal((1, 1, 3, 4))), Tensor(rng.standard_normal((1, 1, 2, 4))))


def test_split_and_merge_heads_are_inverse(rng):
    x = _tokens(rng, 2, 5)
    heads = split_heads(x, 2)
    assert heads.shape == (2, 2, 5, 4)
    np.testing.assert_array_equal(merge_heads(heads).data, x.data)


def test_bidirectional_block_keeps_stream_shapes(rng):
    block = BidirectionalBlock(8, 2, rng)
    image, text = bidirectional_block(_tokens(rng, 2, 4), _tokens(rng, 2, 6), block)
    assert image.shape == (2, 4, 8)
    assert text.shape == (2, 6, 8)


def test_zero_lambda_decouples_image_from_text(rng):
    block = BidirectionalBlock(8, 2, rng, lam=0.0)
    image = _tokens(rng, 1, 4)
    first, _ = bidirectional_block(image, _tokens(rng, 1, 6), block)
    second, _ = bidirectional_block(image, _tokens(rng, 1, 6), block)
    np.testing.assert_array_equal(first.data, second.data)


def test_cross_attention_reaches_image_when_coupled(rng):
    block = BidirectionalBlock(8, 2, rng, lam=1.0)
    image = _tokens(rng, 1, 4)
    first, _ = bidirectional_block(image, _tokens(rng, 1, 6), block)
    second, _ = bidirectional_block(image, _tokens(rng, 1, 6), block)
    assert not np.array_equal(first.data, second.data)


def test_uni_directional_block_ignores_text_on_the_image_stream(rng):
    block = BidirectionalBlock(8, 2, rng, uni_directional=True)
    image = _tokens(rng, 1, 4)
    first, text_a = bidirectional_block(image, _tokens(rng, 1, 6), block)
    second, text_b = bidirectional_block(image, _tokens(rng, 1, 6), block)
    np.testing.assert_array_equal(first.data, second.data)
    assert not np.array_equal(text_a.data, text_b.data)


def test_text_only_bag_uses_intra_attention(rng):
    block = BidirectionalBlock(8, 2, rng)
    image, text = bidirectional_block(None, _tokens(rng, 2, 6), block)
    assert image is None
    assert text.shape == (2, 6, 8)


def test_block_rejects_width_mismatch(rng):
    block = BidirectionalBlock(8, 2, rng)
    with pytest.raises(ShapeError):
        bidirectional_block(_tokens(rng, 1, 4, dim=4), _tokens(rng, 1, 6), block)


def test_trace_captures_every_stream(rng):
    block = BidirectionalBlock(8, 2, rng)
    trace = AttentionTrace()
    block(_tokens(rng, 2, 4), _tokens(rng, 2, 6), ForwardContext(trace=trace), index=3)
    streams = {r.stream: r.weights.shape for r in trace.records}
    assert streams == {
        TEXT_STREAM: (2, 6, 6),
        IMAGE_STREAM: (2, 4, 4),
        TEXT_TO_IMAGE: (2, 6, 4),
        IMAGE_TO_TEXT: (2, 4, 6),
    }
    assert {r.block for r in trace.records} == {3}


def test_trace_for_case_selects_one_row(rng):
    block = SelfAttentionBlock(8, 2, rng)
    trace = AttentionTrace()
    block(_tokens(rng, 3, 5), ForwardContext(trace=trace))
    single = trace.for_case(2)
    assert single.stream(UNIFIED)[0].weights.shape == (1, 5, 5)
    np.testing.assert_array_equal(single.records[0].weights[0], trace.records[0].weights[2])
    with pytest.raises(ContractError):
        trace.for_case(3)


def test_self_attention_block_preserves_shape(rng):
    block = SelfAttentionBlock(8, 2, rng, dropout=0.5)
    x = _tokens(rng, 2, 7)
    out = self_attention_block(x, block, ForwardContext(training=True, rng=np.random.default_rng(0)))
    assert out.shape == x.shape


def test_self_attention_is_permutation_equivariant(rng):
    with default_dtype(np.float64):
        block = SelfAttentionBlock(8, 2, rng)
        x = rng.standard_normal((1, 6, 8))
        perm = rng.permutation(6)
        out = self_attention_block(Tensor(x), block).data
        permuted = self_attention_block(Tensor(x[:, perm]), block).data
    np.testing.assert_allclose(permuted, out[:, perm], atol=1e-10)
