"""Test configuration and fixtures."""

import numpy as np
import pytest

from app.core.config import settings
from app.data.pipeline import DataPipeline
from app.data.preprocessing import split_by_date
from app.data.synthetic import SyntheticSpec, generate_synthetic_cohort, generate_synthetic_dataset
from app.engine.tensor import reset_tape
from app.models.mdt import MDTConfig


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch):
    """Keep tests away from the developer's .env: no log files, plain-text logs, no thread caps."""
    monkeypatch.setattr(settings, "LOG_DIR", None)
    monkeypatch.setattr(settings, "LOG_JSON", False)
    monkeypatch.setattr(settings, "DEBUG", False)
    monkeypatch.setattr(settings, "MDT_THREADS", None)
    reset_tape()
    yield settings
    reset_tape()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec() -> SyntheticSpec:
    """Task 1 at desk scale: 2 classes, 8 cc words, 8 lab items, 32x32 images."""
    return SyntheticSpec(task=1, n_records=40, class_count=2, n_cc=8, n_lab=8, image_size=32, patch=16,
                         vocab_size=32, seed=3)


@pytest.fixture
def tiny_cohort(tiny_spec):
    return generate_synthetic_cohort(tiny_spec)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_spec):
    return generate_synthetic_dataset(tiny_spec, tmp_path / "data")


@pytest.fixture
def tiny_splits(tiny_cohort):
    return split_by_date(tiny_cohort.records, tiny_cohort.split_boundaries)


@pytest.fixture
def tiny_pipeline(tiny_spec, tiny_splits):
    train, _, _ = tiny_splits
    return DataPipeline.fit(train, tiny_spec.layout, tiny_spec.image_size, tiny_spec.resolved_source_size)


@pytest.fixture
def tiny_batch(tiny_pipeline, tiny_cohort):
    return tiny_pipeline.collate(tiny_cohort.records[:4], train=False)


@pytest.fixture
def tiny_mdt_config() -> MDTConfig:
    return MDTConfig(task=1, dim=16, heads=2, n_bidirectional=2, n_self=2, dropout=0.0, class_count=2,
                     n_cc=8, n_lab=8, vocab_size=32, image_size=32, patch=16, channels=1)
