"""Comparison models: image-only ViT, early fusion, late fusion, and the MDT ablation factory."""

import logging
from typing import Dict, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.error_handling import ContractError, ShapeError
from app.data.records import ClinicalBatch, TaskLayout, task_layout
from app.engine import ops
from app.engine.module import Embedding, ForwardContext, LayerNorm, Linear, MLPStack, Module, ModuleList, truncated_normal
from app.engine.tensor import Tensor, no_grad, parameter
from app.models.attention import SelfAttentionBlock
from app.models.mdt import MDT, MDTConfig, aggregate_slices
from app.models.tokenizers import AGE_SCALE, ImageTokenizer, mean_word_embedding

logger = logging.getLogger(__name__)


class ViTConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    task: Literal[1, 2] = 1
    dim: int = Field(default=768, ge=1)
    heads: int = Field(default=12, ge=1)
    depth: int = Field(default=12, ge=1)
    dropout: float = Field(default=0.3, ge=0.0, lt=1.0)
    mlp_ratio: int = Field(default=4, ge=1)
    image_size: int = Field(default=224, ge=1)
    patch: int = Field(default=16, ge=1)
    channels: int = Field(default=1, ge=1)
    class_count: Optional[int] = Field(default=None, ge=1)
    init_seed: int = 0

    @model_validator(mode="after")
    def validate_shapes(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch {self.patch}")
        return self

    @property
    def layout(self) -> TaskLayout:
        return task_layout(self.task, class_count=self.class_count)


class ImageOnlyViT(Module):
    """Standard ViT: CLS + patch tokens through self-attention, classified from CLS"""

    def __init__(self, config: ViTConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.init_seed)
        self.tokenizer = ImageTokenizer(config.image_size, config.patch, config.channels, config.dim, rng,
                                        config.dropout)
        self.cls_token = parameter(truncated_normal((1, config.dim), rng))
        self.blocks = ModuleList([
            SelfAttentionBlock(config.dim, config.heads, rng, config.mlp_ratio, config.dropout)
            for _ in range(config.depth)
        ])
        self.norm = LayerNorm(config.dim)
        self.classifier = Linear(config.dim, config.layout.class_count, rng)

    @property
    def token_count(self) -> int:
        return self.tokenizer.token_count + 1

    def features(self, batch: ClinicalBatch, ctx: Optional[ForwardContext] = None) -> Tensor:
        """CLS output [B x D], averaged over slices"""
        ctx = ctx or ForwardContext()
        if batch.images is None:
            raise ContractError("image-only model needs images")
        images = ops.as_tensor(batch.images)
        if images.ndim != 5:
            raise ShapeError(f"expected B x S x H x W x C images, got shape {images.shape}")
        size, slices = images.shape[:2]
        rows = size * slices
        patches = self.tokenizer(images.reshape(rows, *images.shape[2:]), ctx).tokens
        cls = ops.take(self.cls_token, np.zeros(rows, dtype=np.int64)).reshape(rows, 1, self.config.dim)
        x = ops.concat([cls, patches], axis=1)
        for index, block in enumerate(self.blocks):
            x = block(x, ctx, index)
        pooled = self.norm(x)[:, 0, :]
        if slices == 1:
            return pooled
        return aggregate_slices(pooled.reshape(size, slices, self.config.dim))

    def forward(self, batch: ClinicalBatch, ctx: Optional[ForwardContext] = None) -> Tensor:
        return self.classifier(self.features(batch, ctx))


def vit_image_only_forward(model: ImageOnlyViT, batch: ClinicalBatch,
                           ctx: Optional[ForwardContext] = None) -> Tensor:
    return model(batch, ctx)


def demographics(batch: ClinicalBatch, dtype) -> Tensor:
    """[sex, age / 100] per case"""
    values = np.stack([np.asarray(batch.sex, dtype=np.float64),
                       np.asarray(batch.age, dtype=np.float64) / AGE_SCALE], axis=1)
    return Tensor(values, dtype=dtype)


class FusionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    vit: ViTConfig = Field(default_factory=ViTConfig)
    n_cc: Optional[int] = Field(default=None, ge=1)
    n_lab: Optional[int] = Field(default=None, ge=1)
    vocab_size: int = Field(default=512, ge=3)
    branch_hidden: int = Field(default=1024, ge=1)
    branch_out: int = Field(default=512, ge=1)
    demo_hidden: int = Field(default=512, ge=1)
    fusion_hidden: int = Field(default=1024, ge=1)
    dropout: float = Field(default=0.3, ge=0.0, lt=1.0)

    @property
    def layout(self) -> TaskLayout:
        return task_layout(self.vit.task, self.n_cc, self.n_lab, self.vit.class_count)

    @property
    def cc_width(self) -> int:
        """Averaged word embedding (task 1) or the raw cc vector (task 2)"""
        return self.layout.n_cc if self.layout.structured_cc else self.vit.dim


class _ClinicalFeatures(Module):
    """cc feature source shared by the fusion and text-only models"""

    def _init_cc(self, layout: TaskLayout, dim: int, vocab_size: int, rng: np.random.Generator) -> None:
        self.structured_cc = layout.structured_cc
        self.cc_embedding = None if layout.structured_cc else Embedding(vocab_size, dim, rng)

    def cc_feature(self, batch: ClinicalBatch, dtype) -> Tensor:
        if self.structured_cc:
            return Tensor(batch.cc, dtype=dtype)
        return mean_word_embedding(self.cc_embedding, batch.cc)


class EarlyFusion(_ClinicalFeatures):
    """Per-modality MLP features concatenated with ViT features, fused by an MLP"""

    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        layout = config.layout
        rng = np.random.default_rng(config.vit.init_seed)
        self.vit = ImageOnlyViT(config.vit, rng)
        self._init_cc(layout, config.vit.dim, config.vocab_size, rng)
        p = config.dropout
        self.cc_mlp = MLPStack([config.cc_width, config.branch_hidden, config.branch_out], rng, p)
        self.lab_mlp = MLPStack([layout.n_lab, config.branch_hidden, config.branch_out], rng, p)
        self.demo_mlp = MLPStack([2, config.demo_hidden, config.branch_out], rng, p)
        self.fusion = MLPStack([self.fusion_input_width, config.fusion_hidden, config.fusion_hidden], rng, p)
        self.classifier = Linear(config.fusion_hidden, layout.class_count, rng)

    @property
    def fusion_input_width(self) -> int:
        return self.config.vit.dim + 3 * self.config.branch_out

    def forward(self, batch: ClinicalBatch, ctx: Optional[ForwardContext] = None) -> Tensor:
        ctx = ctx or ForwardContext()
        if batch.images is None:
            raise ContractError("early fusion needs every modality, but the image is missing")
        dtype = self.classifier.weight.dtype
        image = self.vit.features(batch, ctx)
        cc = self.cc_mlp(self.cc_feature(batch, dtype), ctx)
        lab = self.lab_mlp(Tensor(batch.lab, dtype=dtype), ctx)
        demo = self.demo_mlp(demographics(batch, dtype), ctx)
        fused = ops.concat([image, cc, lab, demo], axis=1)
        if fused.shape[1] != self.fusion_input_width:
            raise ShapeError(f"fusion input width {fused.shape[1]} != {self.fusion_input_width}")
        return self.classifier(self.fusion(fused, ctx))


def early_fusion_forward(model: EarlyFusion, batch: ClinicalBatch, ctx: Optional[ForwardContext] = None) -> Tensor:
    return model(batch, ctx)


class TextClassifier(_ClinicalFeatures):
    """Two-layer MLP over concat(lab, demographics, cc feature)"""

    def __init__(self, layout: TaskLayout, dim: int, vocab_size: int, hidden: int = 1024,
                 dropout: float = 0.3, init_seed: int = 0):
        super().__init__()
        self.layout = layout
        rng = np.random.default_rng(init_seed)
        self._init_cc(layout, dim, vocab_size, rng)
        cc_width = layout.n_cc if layout.structured_cc else dim
        self.input_width = layout.n_lab + 2 + cc_width
        self.mlp = MLPStack([self.input_width, hidden, layout.class_count], rng, dropout, activate_last=False)

    def forward(self, batch: ClinicalBatch, ctx: Optional[ForwardContext] = None) -> Tensor:
        ctx = ctx or ForwardContext()
        dtype = self.mlp.layers[0].weight.dtype
        features = ops.concat([Tensor(batch.lab, dtype=dtype), demographics(batch, dtype),
                               self.cc_feature(batch, dtype)], axis=1)
        return self.mlp(features, ctx)


def late_fusion_predict(image_probs: np.ndarray, text_probs: np.ndarray) -> np.ndarray:
    """Elementwise mean of two classifiers' probabilities"""
    image_probs = np.asarray(image_probs, dtype=np.float64)
    text_probs = np.asarray(text_probs, dtype=np.float64)
    if image_probs.shape != text_probs.shape:
        raise ShapeError(f"probability shapes differ: {image_probs.shape} vs {text_probs.shape}")
    for name, probs in (("image", image_probs), ("text", text_probs)):
        if not np.all((probs >= 0.0) & (probs <= 1.0)):
            raise ContractError(f"{name} classifier produced probabilities outside [0, 1]")
    return (image_probs + text_probs) / 2.0


def late_fusion_forward(batch: ClinicalBatch, image_model: ImageOnlyViT, text_model: TextClassifier) -> np.ndarray:
    """Late-fusion probabilities for a batch, both classifiers in eval mode

    The text classifier reads only cc, lab and demographics, so one batch with images serves both.
    """
    ctx = ForwardContext(training=False)
    with no_grad():
        image_probs = ops.sigmoid(image_model(batch, ctx))
        text_probs = ops.sigmoid(text_model(batch, ctx))
    return late_fusion_predict(image_probs, text_probs)


# --- ablations -------------------------------------------------------------

class AblationSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    ha_blocks: int = Field(default=2, ge=0)
    uni_direction: bool = False
    use_image: bool = True
    use_cc: bool = True
    use_lab: bool = True
    tokenized_text: bool = True


ABLATIONS: Dict[str, AblationSpec] = {
    "ha2": AblationSpec(),
    "ha0": AblationSpec(ha_blocks=0),
    "ha6": AblationSpec(ha_blocks=6),
    "uni": AblationSpec(uni_direction=True),
    "no-cc": AblationSpec(use_cc=False),
    "no-lab": AblationSpec(use_lab=False),
    "no-token": AblationSpec(tokenized_text=False),
    "no-image": AblationSpec(use_image=False),
}


def ablation_spec(name: str) -> AblationSpec:
    try:
        return ABLATIONS[name]
    except KeyError:
        raise ContractError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}") from None


def ablation_config(spec: AblationSpec, base: MDTConfig) -> MDTConfig:
    """The MDT configuration for an ablation, keeping the total block count"""
    total = base.n_bidirectional + base.n_self
    if spec.ha_blocks > total:
        raise ContractError(f"{spec.ha_blocks} bidirectional blocks exceed the {total}-block budget")
    if spec.uni_direction and spec.ha_blocks == 0:
        raise ContractError("uni-directional attention needs at least one bidirectional block")
    if spec.uni_direction and not spec.use_image:
        raise ContractError("uni-directional attention needs the image modality")
    return MDTConfig(**{
        **base.model_dump(),
        "n_bidirectional": spec.ha_blocks,
        "n_self": total - spec.ha_blocks,
        "uni_directional": spec.uni_direction,
        "use_image": spec.use_image,
        "use_cc": spec.use_cc,
        "use_lab": spec.use_lab,
        "tokenized_text": spec.tokenized_text,
    })


def build_ablation(spec: AblationSpec, base: MDTConfig) -> MDT:
    config = ablation_config(spec, base)
    logger.info(
        f"Building ablation: ha={spec.ha_blocks} uni={spec.uni_direction} image={spec.use_image} "
        f"cc={spec.use_cc} lab={spec.use_lab} tokenized={spec.tokenized_text}"
    )
    return MDT(config)
