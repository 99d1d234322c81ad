"""The multimodal diagnostic transformer: bidirectional blocks, self-attention stack, pooling and head."""

import logging
from typing import List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.error_handling import ContractError, ShapeError
from app.data.records import ClinicalBatch, PatientRecord, TaskLayout, task_layout
from app.engine import ops
from app.engine.module import ForwardContext, LayerNorm, Linear, Module, ModuleList, truncated_normal
from app.engine.tensor import Tensor, parameter
from app.models.attention import AttentionTrace, BidirectionalBlock, SelfAttentionBlock
from app.models.tokenizers import (
    CLS, IMAGE, ClinicalTextTokenizer, ImageTokenizer, embed_clinical_text, embed_image,
)

logger = logging.getLogger(__name__)


class MDTConfig(BaseModel):
    """Architecture of the unified model; defaults are full scale, tests and desk runs shrink them"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    task: Literal[1, 2] = 1
    dim: int = Field(default=768, ge=1)
    heads: int = Field(default=12, ge=1)
    n_bidirectional: int = Field(default=2, ge=0)
    n_self: int = Field(default=10, ge=0)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    pooling: Literal["average", "cls"] = "average"
    uni_directional: bool = False
    standard_residual: bool = False
    lam: float = 1.0
    class_count: Optional[int] = Field(default=None, ge=1)
    n_cc: Optional[int] = Field(default=None, ge=1)
    n_lab: Optional[int] = Field(default=None, ge=1)
    vocab_size: int = Field(default=512, ge=3)
    image_size: int = Field(default=224, ge=1)
    patch: int = Field(default=16, ge=1)
    channels: int = Field(default=1, ge=1)
    mlp_ratio: int = Field(default=4, ge=1)
    use_image: bool = True
    use_cc: bool = True
    use_lab: bool = True
    tokenized_text: bool = True
    mask_padding: bool = False
    text_position_embedding: bool = False
    init_seed: int = 0

    @model_validator(mode="after")
    def validate_shapes(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch {self.patch}")
        if self.n_bidirectional + self.n_self < 1:
            raise ValueError("the model needs at least one attention block")
        return self

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def layout(self) -> TaskLayout:
        return task_layout(self.task, self.n_cc, self.n_lab, self.class_count)

    @property
    def image_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2 if self.use_image else 0


class MDT(Module):
    def __init__(self, config: MDTConfig):
        super().__init__()
        self.config = config
        self.layout = config.layout
        rng = np.random.default_rng(config.init_seed)
        d = config.dim

        self.image_tokenizer = (
            ImageTokenizer(config.image_size, config.patch, config.channels, d, rng, config.dropout)
            if config.use_image else None
        )
        self.text_tokenizer = ClinicalTextTokenizer(
            self.layout, d, config.vocab_size, rng,
            use_cc=config.use_cc, use_lab=config.use_lab, tokenized=config.tokenized_text,
            position_embedding=config.text_position_embedding, mask_padding=config.mask_padding,
            dropout=config.dropout,
        )
        self.bidirectional = ModuleList([
            BidirectionalBlock(d, config.heads, rng, config.mlp_ratio, config.dropout, config.lam,
                               config.uni_directional, config.standard_residual)
            for _ in range(config.n_bidirectional)
        ])
        self.cls_token = parameter(truncated_normal((1, d), rng)) if config.pooling == "cls" else None
        self.self_blocks = ModuleList([
            SelfAttentionBlock(d, config.heads, rng, config.mlp_ratio, config.dropout)
            for _ in range(config.n_self)
        ])
        self.final_norm = LayerNorm(d)
        self.head_hidden = Linear(d, d, rng)
        self.head_out = Linear(d, self.layout.class_count, rng)

        logger.debug(
            f"MDT built: dim={d} heads={config.heads} blocks={config.n_bidirectional}+{config.n_self} "
            f"pooling={config.pooling} params={self.parameter_count()}"
        )

    # --- token bookkeeping --------------------------------------------------

    @property
    def text_tags(self) -> List[str]:
        return [tag for tag, count in self.text_tokenizer.token_counts.items() for _ in range(count)]

    @property
    def unified_tags(self) -> List[str]:
        tags = [CLS] if self.cls_token is not None else []
        return tags + [IMAGE] * self.config.image_tokens + self.text_tags

    @property
    def cls_index(self) -> Optional[int]:
        return 0 if self.cls_token is not None else None

    @property
    def bag_size(self) -> int:
        return len(self.unified_tags)

    # --- forward ------------------------------------------------------------

    def _begin_trace(self, trace: AttentionTrace, slices: int) -> None:
        trace.records.clear()
        trace.modality_tags = self.unified_tags
        trace.text_tags = self.text_tags
        trace.cls_index = self.cls_index
        trace.rows_per_case = slices
        if self.image_tokenizer is not None:
            trace.grid_shape = (self.image_tokenizer.grid, self.image_tokenizer.grid)

    def represent(self, batch: ClinicalBatch, ctx: Optional[ForwardContext] = None) -> Tensor:
        """Per-case pooled representation [B x D], averaged over slices"""
        ctx = ctx or ForwardContext()
        text = embed_clinical_text(self.text_tokenizer, batch, ctx)
        size = batch.size
        slices = 1
        image = None
        text_tokens, text_mask = text.tokens, text.mask_or_none()

        if self.image_tokenizer is not None:
            if batch.images is None:
                raise ContractError("model expects images but the batch has none")
            images = ops.as_tensor(batch.images)
            if images.ndim != 5:
                raise ShapeError(f"expected B x S x H x W x C images, got shape {images.shape}")
            slices = images.shape[1]
            flat = images.reshape(size * slices, *images.shape[2:])
            image = embed_image(self.image_tokenizer, flat, ctx).tokens
            if slices > 1:
                # every slice sees its case's text tokens
                rows = np.repeat(np.arange(size), slices)
                text_tokens = ops.take(text_tokens, rows)
                text_mask = None if text_mask is None else text_mask[rows]

        if ctx.trace is not None:
            self._begin_trace(ctx.trace, slices)

        for index, block in enumerate(self.bidirectional):
            image, text_tokens = block(image, text_tokens, ctx, index, text_mask)

        parts = [] if image is None else [image]
        parts.append(text_tokens)
        rows = size * slices
        if self.cls_token is not None:
            cls = ops.take(self.cls_token, np.zeros(rows, dtype=np.int64)).reshape(rows, 1, self.config.dim)
            parts.insert(0, cls)
        x = ops.concat(parts, axis=1) if len(parts) > 1 else parts[0]

        key_mask = None
        if text_mask is not None:
            prefix = np.zeros((rows, x.shape[1] - text_mask.shape[1]), dtype=bool)
            key_mask = np.concatenate([prefix, text_mask], axis=1)

        offset = len(self.bidirectional)
        for index, block in enumerate(self.self_blocks):
            x = block(x, ctx, offset + index, key_mask)

        x = self.final_norm(x)
        pooled = x[:, 0, :] if self.cls_token is not None else ops.mean(x, axis=1)
        if slices == 1:
            return pooled
        return aggregate_slices(pooled.reshape(size, slices, self.config.dim))

    def head(self, representation: Tensor) -> Tensor:
        return self.head_out(ops.gelu(self.head_hidden(representation)))

    def forward(self, batch: ClinicalBatch, ctx: Optional[ForwardContext] = None) -> Tensor:
        """Raw logits [B x class_count]"""
        return self.head(self.represent(batch, ctx))


def aggregate_slices(representations: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """Mean over slices; the summation order does not depend on slice order

    Accepts a B x S x D tensor or a list of per-slice [D] / [B x D] tensors.
    """
    if isinstance(representations, Tensor):
        if representations.ndim != 3:
            raise ShapeError(f"expected B x S x D slice representations, got shape {representations.shape}")
        if representations.shape[1] == 0:
            raise ContractError("cannot aggregate zero slices")
        return ops.order_invariant_mean(representations, axis=1)
    if not representations:
        raise ContractError("cannot aggregate zero slices")
    stacked = ops.concat([r.reshape(1, *r.shape) for r in representations], axis=0)
    return ops.order_invariant_mean(stacked, axis=0)


def mdt_forward(model: MDT, inputs: Union[ClinicalBatch, PatientRecord], pipeline=None,
                ctx: Optional[ForwardContext] = None) -> Tensor:
    """Logits for a batch, or for one record collated through an eval-mode pipeline"""
    if isinstance(inputs, PatientRecord):
        if pipeline is None:
            raise ContractError("a single record needs a data pipeline to build model inputs")
        inputs = pipeline.collate([inputs], train=False)
    return model(inputs, ctx)
