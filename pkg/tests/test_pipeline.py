"""Record collation: lab normalisation, cc padding, images and batching."""

import dataclasses

import numpy as np
import pytest

from app.core.error_handling import ContractError, ShapeError
from app.core.run_config import RunConfig
from app.data.manifest import DatasetManifest
from app.data.pipeline import DataPipeline
from app.data.records import task_layout
from app.models.tokenizers import PAD_ID, LabStats
from app.services import experiments

pytestmark = pytest.mark.unit


def test_eval_batch_shapes(tiny_batch):
    assert tiny_batch.images.shape == (4, 1, 32, 32, 1)
    assert tiny_batch.images.dtype == np.float32
    assert tiny_batch.cc.shape == (4, 8)
    assert tiny_batch.cc.dtype == np.int64
    assert tiny_batch.lab.shape == (4, 8)
    assert tiny_batch.labels.shape == (4, 2)


def test_task1_lab_keeps_missing_marker(tiny_pipeline, tiny_cohort):
    record = next(r for r in tiny_cohort.records if np.isnan(r.lab).any())
    features = tiny_pipeline.lab_features(record.lab)
    np.testing.assert_array_equal(features[np.isnan(record.lab)], -1.0)
    present = features[~np.isnan(record.lab)]
    assert np.all((present >= 0.0) & (present <= 1.0))


def test_task2_lab_imputes_medians_before_scaling():
    layout = task_layout(2, n_cc=3, n_lab=2)
    stats = LabStats(min=np.array([0.0, 0.0]), max=np.array([10.0, 4.0]), median=np.array([5.0, 1.0]))
    pipeline = DataPipeline(layout, stats, image_size=16, resize_size=18)
    np.testing.assert_allclose(pipeline.lab_features(np.array([np.nan, 2.0])), [0.5, 0.5])


def test_cc_is_padded_to_layout_width(tiny_pipeline, tiny_cohort):
    short = dataclasses.replace(tiny_cohort.records[0], cc=[5, 6, 7])
    np.testing.assert_array_equal(tiny_pipeline.cc_features(short), [5, 6, 7] + [PAD_ID] * 5)
    long = dataclasses.replace(tiny_cohort.records[0], cc=list(range(2, 14)))
    np.testing.assert_array_equal(tiny_pipeline.cc_features(long), list(range(2, 10)))


def test_stats_must_match_the_layout(tiny_pipeline):
    with pytest.raises(ShapeError):
        DataPipeline(task_layout(1, n_cc=8, n_lab=5, class_count=2), tiny_pipeline.stats, 32, 37)


def test_training_augmentation_needs_a_generator(tiny_pipeline, tiny_cohort):
    with pytest.raises(ContractError):
        tiny_pipeline.collate(tiny_cohort.records[:2], train=True)


def test_training_batches_are_seeded(tiny_pipeline, tiny_cohort):
    first = tiny_pipeline.collate(tiny_cohort.records[:3], train=True, rng=np.random.default_rng(9))
    second = tiny_pipeline.collate(tiny_cohort.records[:3], train=True, rng=np.random.default_rng(9))
    np.testing.assert_array_equal(first.images, second.images)


def test_without_images(tiny_spec, tiny_pipeline, tiny_cohort):
    pipeline = DataPipeline(tiny_spec.layout, tiny_pipeline.stats, 32, 37, include_images=False)
    batch = pipeline.collate(tiny_cohort.records[:2], train=True)
    assert batch.images is None
    assert batch.n_slices == 1


def test_empty_batch_is_rejected(tiny_pipeline):
    with pytest.raises(ContractError):
        tiny_pipeline.collate([])


def test_batches_cover_every_record_once(tiny_pipeline, tiny_cohort):
    records = tiny_cohort.records[:10]
    ids = [i for b in tiny_pipeline.batches(records, 3, rng=np.random.default_rng(0), train=True) for i in b.ids]
    assert sorted(ids) == sorted(r.id for r in records)
    ordered = [i for b in tiny_pipeline.batches(records, 4) for i in b.ids]
    assert ordered == [r.id for r in records]



def _shift_labs(records, ids):
    return [dataclasses.replace(r, lab=r.lab * 100.0 + 7.0) if r.id in ids else r for r in records]


def test_lab_statistics_see_only_the_training_split(tiny_dataset, mocker):
    config = RunConfig(data_dir=str(tiny_dataset.root))
    baseline = experiments.prepare_data(config)
    held_out = {r.id for r in (*baseline.val, *baseline.test)}
    train_ids = {r.id for r in baseline.train}
    assert held_out and train_ids

    load_records = DatasetManifest.load_records
    mocker.patch.object(DatasetManifest, "load_records",
                        lambda self: _shift_labs(load_records(self), held_out))
    shifted = experiments.prepare_data(config)
    assert not np.allclose(np.nan_to_num(shifted.test[0].lab), np.nan_to_num(baseline.test[0].lab))
    for field in ("min", "max", "median"):
        np.testing.assert_array_equal(getattr(shifted.stats, field), getattr(baseline.stats, field))

    # the same shift on training records must move the statistics
    mocker.patch.object(DatasetManifest, "load_records",
                        lambda self: _shift_labs(load_records(self), train_ids))
    assert not np.array_equal(experiments.prepare_data(config).stats.max, baseline.stats.max)
