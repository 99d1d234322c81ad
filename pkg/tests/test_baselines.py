"""Image-only ViT, early fusion and late fusion baselines."""

import dataclasses

import numpy as np
import pytest

from app.core.error_handling import ContractError, ShapeError
from app.data.records import ClinicalBatch, task_layout
from app.engine import ops
from app.engine.module import ForwardContext
from app.models.baselines import (
    EarlyFusion, FusionConfig, ImageOnlyViT, TextClassifier, ViTConfig, early_fusion_forward,
    late_fusion_forward, late_fusion_predict, vit_image_only_forward,
)

pytestmark = pytest.mark.unit


@pytest.fixture
def vit_config() -> ViTConfig:
    return ViTConfig(task=1, dim=16, heads=2, depth=1, dropout=0.0, image_size=32, patch=16, class_count=2)


@pytest.fixture
def fusion_config(vit_config) -> FusionConfig:
    return FusionConfig(vit=vit_config, n_cc=8, n_lab=8, vocab_size=32, branch_hidden=8, branch_out=4,
                        demo_hidden=4, fusion_hidden=8, dropout=0.0)


def test_vit_logits(vit_config, tiny_batch):
    model = ImageOnlyViT(vit_config)
    assert model.token_count == 5
    assert vit_image_only_forward(model, tiny_batch).shape == (4, 2)


def test_vit_ignores_text(vit_config, tiny_batch):
    model = ImageOnlyViT(vit_config)
    other = dataclasses.replace(tiny_batch, cc=np.zeros_like(tiny_batch.cc), lab=np.zeros_like(tiny_batch.lab))
    np.testing.assert_array_equal(model(tiny_batch).data, model(other).data)


def test_vit_needs_images(vit_config, tiny_batch):
    with pytest.raises(ContractError):
        ImageOnlyViT(vit_config)(dataclasses.replace(tiny_batch, images=None))


def test_early_fusion_logits(fusion_config, tiny_batch):
    model = EarlyFusion(fusion_config)
    assert model.fusion_input_width == 16 + 3 * 4
    assert early_fusion_forward(model, tiny_batch, ForwardContext()).shape == (4, 2)


def test_early_fusion_needs_every_modality(fusion_config, tiny_batch):
    with pytest.raises(ContractError):
        EarlyFusion(fusion_config)(dataclasses.replace(tiny_batch, images=None))


def test_early_fusion_trains_with_dropout(vit_config, tiny_batch):
    config = FusionConfig(vit=vit_config, n_cc=8, n_lab=8, vocab_size=32, branch_hidden=8, branch_out=4,
                          demo_hidden=4, fusion_hidden=8, dropout=0.3)
    ctx = ForwardContext(training=True, rng=np.random.default_rng(0))
    assert EarlyFusion(config)(tiny_batch, ctx).shape == (4, 2)


def test_text_classifier_uses_clinical_inputs_only(tiny_batch):
    model = TextClassifier(task_layout(1, n_cc=8, n_lab=8, class_count=2), dim=16, vocab_size=32, hidden=8)
    logits = model(dataclasses.replace(tiny_batch, images=None))
    assert logits.shape == (4, 2)
    assert model.input_width == 8 + 2 + 16


def test_structured_cc_feeds_text_classifier_directly(rng):
    layout = task_layout(2, n_cc=4, n_lab=3)
    model = TextClassifier(layout, dim=8, vocab_size=16, hidden=6)
    batch = ClinicalBatch(ids=["a", "b"], images=None, cc=rng.random((2, 4)), lab=rng.random((2, 3)),
                          sex=np.array([0, 1]), age=np.array([30.0, 70.0]), labels=np.zeros((2, 3)))
    assert model.input_width == 3 + 2 + 4
    assert model(batch).shape == (2, 3)


def test_late_fusion_is_the_mean():
    out = late_fusion_predict(np.array([[0.2, 1.0]]), np.array([[0.6, 0.0]]))
    np.testing.assert_allclose(out, [[0.4, 0.5]])


def test_late_fusion_checks_inputs():
    with pytest.raises(ShapeError):
        late_fusion_predict(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ContractError):
        late_fusion_predict(np.array([1.5]), np.array([0.5]))


def test_late_fusion_forward_averages_eval_probabilities(vit_config, tiny_batch):
    image_model = ImageOnlyViT(vit_config)
    text_model = TextClassifier(task_layout(1, n_cc=8, n_lab=8, class_count=2), dim=16, vocab_size=32, hidden=8,
                                dropout=0.5)
    probs = late_fusion_forward(tiny_batch, image_model, text_model)

    eval_ctx = ForwardContext(training=False)
    expected = (ops.sigmoid(image_model(tiny_batch, eval_ctx)) + ops.sigmoid(text_model(tiny_batch, eval_ctx))) / 2
    assert probs.shape == (4, 2)
    np.testing.assert_allclose(probs, expected, atol=1e-12)
    np.testing.assert_array_equal(late_fusion_forward(tiny_batch, image_model, text_model), probs)
