"""Planted-signal cohorts: determinism, cue placement and the Bayes oracle."""

import numpy as np
import pytest

from app.core.error_handling import ContractError
from app.data.preprocessing import split_by_date
from app.data.synthetic import (
    CROSS, IMAGE_CUE, MOTIF_LEVEL, STRUCTURED_CUE_VALUE, TEXT_CUE, SyntheticSpec, bayes_scores, class_mechanisms,
    generate_synthetic_cohort, motif_box,
)
from app.services.metrics import auroc

pytestmark = pytest.mark.unit


def test_same_spec_gives_identical_cohorts(tiny_spec):
    a = generate_synthetic_cohort(tiny_spec)
    b = generate_synthetic_cohort(tiny_spec)
    for left, right in zip(a.records, b.records):
        assert left.id == right.id and left.admission_date == right.admission_date
        np.testing.assert_array_equal(left.images[0], right.images[0])
        assert list(left.cc) == list(right.cc)
        np.testing.assert_array_equal(left.labels, right.labels)


def test_seed_changes_the_cohort(tiny_spec):
    a = generate_synthetic_cohort(tiny_spec)
    b = generate_synthetic_cohort(tiny_spec.model_copy(update={"seed": 4}))
    assert not np.array_equal(a.records[0].images[0], b.records[0].images[0])


def test_class_mechanisms_put_cross_classes_first():
    assert class_mechanisms(5, 0.6) == [CROSS, CROSS, CROSS, IMAGE_CUE, TEXT_CUE]
    assert class_mechanisms(2, 0.0) == [IMAGE_CUE, TEXT_CUE]
    with pytest.raises(ContractError):
        class_mechanisms(0, 0.5)


def test_cross_modal_share_of_positive_labels_follows_whole_classes():
    spec = SyntheticSpec(task=1, n_records=1500, class_count=8, n_cc=8, n_lab=4, image_size=32, patch=16,
                         vocab_size=32, cross_modal_fraction=0.7, seed=5)
    cohort = generate_synthetic_cohort(spec)
    cross = np.array([m == CROSS for m in cohort.mechanisms])
    assert cross.sum() == 6
    positives = cohort.labels
    share = positives[:, cross].sum() / positives.sum()
    assert share == pytest.approx(6 / 8, abs=0.04)


def test_motif_boxes_do_not_overlap():
    boxes = [motif_box(c, 32, 4) for c in range(4)]
    cells = set()
    for top, left, side in boxes:
        assert 0 <= top and top + side <= 32 and 0 <= left and left + side <= 32
        cells.update((r, c) for r in range(top, top + side) for c in range(left, left + side))
    assert len(cells) == sum(side * side for _, _, side in boxes)


def test_motifs_are_painted_inside_the_center_crop(tiny_cohort, tiny_spec):
    margin = (tiny_spec.resolved_source_size - tiny_spec.image_size) // 2
    for record, motif in zip(tiny_cohort.records, tiny_cohort.motif):
        for c in range(tiny_spec.layout.class_count):
            top, left, side = motif_box(c, tiny_spec.image_size, tiny_spec.layout.class_count)
            patch = record.images[0][margin + top:margin + top + side, margin + left:margin + left + side]
            assert np.all(patch == MOTIF_LEVEL) == bool(motif[c])


def test_cue_words_sit_in_the_kept_prefix(tiny_cohort, tiny_spec):
    n_cc = tiny_spec.layout.n_cc
    for record, cue in zip(tiny_cohort.records, tiny_cohort.cue):
        kept = set(record.cc[:n_cc])
        for c in range(tiny_spec.layout.class_count):
            assert (2 + c in kept) == bool(cue[c])
        assert all(w < tiny_spec.vocab_size for w in record.cc)


def test_structured_cc_marks_cue_components():
    spec = SyntheticSpec(task=2, n_records=30, n_cc=5, n_lab=4, n_slices=2, image_size=16, patch=8, seed=1)
    cohort = generate_synthetic_cohort(spec)
    assert cohort.mechanisms == [CROSS, CROSS, IMAGE_CUE]
    for record, cue in zip(cohort.records, cohort.cue):
        assert len(record.images) == 2
        np.testing.assert_array_equal(record.cc[:3] == STRUCTURED_CUE_VALUE, cue)
        assert set(np.unique(record.cc[3:])) <= {0.0, 1.0}


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(image_size=30, patch=16)
    with pytest.raises(ValueError):
        SyntheticSpec(train_fraction=0.8, val_fraction=0.2)
    with pytest.raises(ValueError):
        SyntheticSpec(task=2, n_cc=2, class_count=3)


def test_date_split_follows_fractions(tiny_spec):
    cohort = generate_synthetic_cohort(tiny_spec.model_copy(update={"n_records": 400}))
    train, val, test = split_by_date(cohort.records, cohort.split_boundaries)
    assert len(train) + len(val) + len(test) == 400
    assert 0.65 <= len(train) / 400 <= 0.75
    assert len(test) > 0


def test_records_validate_against_layout(tiny_cohort, tiny_spec):
    for record in tiny_cohort.records:
        record.validate(tiny_spec.layout)


@pytest.fixture(scope="module")
def oracle_cohort():
    spec = SyntheticSpec(task=1, n_records=2000, class_count=3, n_cc=6, n_lab=2, image_size=16, patch=8,
                         vocab_size=32, cross_modal_fraction=0.34, seed=11)
    return generate_synthetic_cohort(spec)


def test_bayes_oracle_on_a_cross_modal_class(oracle_cohort):
    assert oracle_cohort.mechanisms == [CROSS, IMAGE_CUE, TEXT_CUE]
    labels = oracle_cohort.labels[:, 0]
    assert auroc(bayes_scores(oracle_cohort, "joint")[:, 0], labels) == 1.0
    assert auroc(bayes_scores(oracle_cohort, "image")[:, 0], labels) == pytest.approx(0.75, abs=0.04)
    assert auroc(bayes_scores(oracle_cohort, "text")[:, 0], labels) == pytest.approx(0.75, abs=0.04)


def test_bayes_oracle_on_single_modality_classes(oracle_cohort):
    labels = oracle_cohort.labels
    image, text = bayes_scores(oracle_cohort, "image"), bayes_scores(oracle_cohort, "text")
    assert auroc(image[:, 1], labels[:, 1]) == 1.0
    assert auroc(text[:, 1], labels[:, 1]) == 0.5
    assert auroc(text[:, 2], labels[:, 2]) == 1.0
    assert auroc(image[:, 2], labels[:, 2]) == 0.5


def test_bayes_view_is_validated(oracle_cohort):
    with pytest.raises(ContractError):
        bayes_scores(oracle_cohort, "both")
