"""Multi-head attention primitives, the bidirectional multimodal block and the self-attention block."""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from app.core.error_handling import ContractError, ShapeError
from app.engine import ops
from app.engine.module import FeedForward, ForwardContext, LayerNorm, Linear, Module
from app.engine.tensor import Tensor

logger = logging.getLogger(__name__)

MASK_BIAS = -1e9

UNIFIED = "unified"
IMAGE_STREAM = "image"
TEXT_STREAM = "text"
IMAGE_TO_TEXT = "image_to_text"
TEXT_TO_IMAGE = "text_to_image"


# --- trace -----------------------------------------------------------------

@dataclass
class AttentionRecord:
    block: int
    stream: str
    weights: np.ndarray  # rows x Nq x Nk, averaged over heads
    per_head: Optional[Tensor] = None  # rows x h x Nq x Nk, kept when gradients are requested


@dataclass
class AttentionTrace:
    """Attention weights captured during one forward pass"""
    records: List[AttentionRecord] = field(default_factory=list)
    modality_tags: List[str] = field(default_factory=list)  # unified-bag tags
    text_tags: List[str] = field(default_factory=list)
    cls_index: Optional[int] = None
    grid_shape: Optional[Tuple[int, int]] = None
    rows_per_case: int = 1

    def add(self, block: int, stream: str, weights: Tensor, keep_per_head: bool) -> None:
        averaged = weights.data.astype(np.float64).mean(axis=1)
        if keep_per_head:
            weights.retain_grad()
        self.records.append(AttentionRecord(block, stream, averaged, weights if keep_per_head else None))

    def stream(self, name: str) -> List[AttentionRecord]:
        return sorted((r for r in self.records if r.stream == name), key=lambda r: r.block)

    def row(self, case: int, slice_index: int = 0) -> int:
        if not 0 <= slice_index < self.rows_per_case:
            raise ContractError(f"slice {slice_index} out of range for {self.rows_per_case} slices")
        return case * self.rows_per_case + slice_index

    def for_case(self, case: int, slice_index: int = 0) -> "AttentionTrace":
        """Single-row view; per-head tensors are dropped"""
        row = self.row(case, slice_index)
        if self.records and row >= self.records[0].weights.shape[0]:
            raise ContractError(f"case {case} is not in this trace")
        records = [AttentionRecord(r.block, r.stream, r.weights[row:row + 1]) for r in self.records]
        return AttentionTrace(records, list(self.modality_tags), list(self.text_tags), self.cls_index,
                              self.grid_shape, 1)


# --- primitives ------------------------------------------------------------

def split_heads(x: Tensor, heads: int) -> Tensor:
    """B x N x D -> B x h x N x d_k"""
    batch, tokens, width = x.shape
    if width % heads:
        raise ShapeError(f"width {width} is not divisible by {heads} heads")
    return ops.transpose(x.reshape(batch, tokens, heads, width // heads), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    batch, heads, tokens, head_dim = x.shape
    return ops.transpose(x, (0, 2, 1, 3)).reshape(batch, tokens, heads * head_dim)


class AttentionProjections(Module):
    """Pre-attention layer norm followed by Q/K/V maps"""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.norm = LayerNorm(dim)
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)

    def forward(self, x: Tensor, heads: int) -> Tuple[Tensor, Tensor, Tensor]:
        return qkv_project(x, self, heads)


def qkv_project(x: Tensor, params: AttentionProjections, heads: int) -> Tuple[Tensor, Tensor, Tensor]:
    if x.shape[-1] != params.dim:
        raise ShapeError(f"tokens of width {x.shape[-1]} do not match projection width {params.dim}")
    normed = params.norm(x)
    return tuple(split_heads(proj(normed), heads) for proj in (params.query, params.key, params.value))


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, key_mask: Optional[np.ndarray] = None,
                     d_k: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes; returns (output, weights)"""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if k.shape[-2] == 0:
        raise ShapeError("attention over an empty key set")
    d_k = d_k or q.shape[-1]

    scores = ops.mul(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(d_k))
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)
        if mask.shape != (q.shape[0], k.shape[-2]):
            raise ShapeError(f"key mask {mask.shape} does not match batch {q.shape[0]} x keys {k.shape[-2]}")
        bias = np.where(mask, MASK_BIAS, 0.0)[:, None, None, :]
        scores = ops.add(scores, bias)
    weights = ops.softmax_lastdim(scores)
    return ops.matmul(weights, v), weights


# --- blocks ----------------------------------------------------------------

class SelfAttentionBlock(Module):
    """Pre-norm multi-head self-attention and MLP, each with a residual"""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 dropout: float = 0.0, activation: str = "gelu"):
        super().__init__()
        self.heads = heads
        self.rate = dropout
        self.attn = AttentionProjections(dim, rng)
        self.out = Linear(dim, dim, rng)
        self.mlp_norm = LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio * dim, rng, dropout, activation)

    def forward(self, x: Tensor, ctx: ForwardContext, index: int = 0,
                key_mask: Optional[np.ndarray] = None) -> Tensor:
        q, k, v = self.attn(x, self.heads)
        attended, weights = scaled_attention(q, k, v, key_mask)
        if ctx.trace is not None:
            ctx.trace.add(index, UNIFIED, weights, ctx.retain_attention_grads)
        x = ops.add(x, ctx.dropout(self.out(merge_heads(attended)), self.rate))
        return ops.add(x, self.mlp(self.mlp_norm(x), ctx))


class BidirectionalBlock(Module):
    """Parallel image and text streams with intra- and inter-modal attention

    Each stream sums its intra-modal attention and lam times its
    cross-modal attention, projects once, and updates as
    X' = MLP(Norm(sum)) + X. With standard_residual the attention sum is
    also added back before the MLP stage.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 dropout: float = 0.0, lam: float = 1.0, uni_directional: bool = False,
                 standard_residual: bool = False):
        super().__init__()
        self.heads = heads
        self.rate = dropout
        self.lam = lam
        self.uni_directional = uni_directional
        self.standard_residual = standard_residual
        self.image_attn = AttentionProjections(dim, rng)
        self.text_attn = AttentionProjections(dim, rng)
        self.image_out = Linear(dim, dim, rng)
        self.text_out = Linear(dim, dim, rng)
        self.image_norm = LayerNorm(dim)
        self.text_norm = LayerNorm(dim)
        self.image_mlp = FeedForward(dim, mlp_ratio * dim, rng, dropout)
        self.text_mlp = FeedForward(dim, mlp_ratio * dim, rng, dropout)

    def _update(self, x: Tensor, mixed: Tensor, out: Linear, norm: LayerNorm, mlp: FeedForward,
                ctx: ForwardContext) -> Tensor:
        mixed = ctx.dropout(out(merge_heads(mixed)), self.rate)
        if self.standard_residual:
            mixed = ops.add(x, mixed)
            return ops.add(mixed, mlp(norm(mixed), ctx))
        return ops.add(mlp(norm(mixed), ctx), x)

    def _mix(self, intra: Tensor, cross: Tensor) -> Tensor:
        return ops.add(intra, ops.mul(cross, self.lam))

    def forward(self, image: Optional[Tensor], text: Tensor, ctx: ForwardContext, index: int = 0,
                text_mask: Optional[np.ndarray] = None) -> Tuple[Optional[Tensor], Tensor]:
        if image is not None and image.shape[-1] != text.shape[-1]:
            raise ShapeError(f"image width {image.shape[-1]} != text width {text.shape[-1]}")
        trace, keep = ctx.trace, ctx.retain_attention_grads

        q_t, k_t, v_t = self.text_attn(text, self.heads)
        text_intra, w = scaled_attention(q_t, k_t, v_t, text_mask)
        if trace is not None:
            trace.add(index, TEXT_STREAM, w, keep)

        if image is None:
            # text-only bag: the block reduces to text intra-attention
            return None, self._update(text, text_intra, self.text_out, self.text_norm, self.text_mlp, ctx)

        q_i, k_i, v_i = self.image_attn(image, self.heads)
        image_intra, w = scaled_attention(q_i, k_i, v_i)
        if trace is not None:
            trace.add(index, IMAGE_STREAM, w, keep)

        text_cross, w = scaled_attention(q_t, k_i, v_i)
        if trace is not None:
            trace.add(index, TEXT_TO_IMAGE, w, keep)
        text_mixed = self._mix(text_intra, text_cross)

        if self.uni_directional:
            image_mixed = image_intra
        else:
            image_cross, w = scaled_attention(q_i, k_t, v_t, text_mask)
            if trace is not None:
                trace.add(index, IMAGE_TO_TEXT, w, keep)
            image_mixed = self._mix(image_intra, image_cross)

        image = self._update(image, image_mixed, self.image_out, self.image_norm, self.image_mlp, ctx)
        text = self._update(text, text_mixed, self.text_out, self.text_norm, self.text_mlp, ctx)
        return image, text


def bidirectional_block(image: Optional[Tensor], text: Tensor, block: BidirectionalBlock,
                        ctx: Optional[ForwardContext] = None) -> Tuple[Optional[Tensor], Tensor]:
    return block(image, text, ctx or ForwardContext())


def self_attention_block(x: Tensor, block: SelfAttentionBlock, ctx: Optional[ForwardContext] = None) -> Tensor:
    return block(x, ctx or ForwardContext())
