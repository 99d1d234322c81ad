"""Turns patient records into model-ready batches."""

import logging
from typing import Iterator, List, Optional, Sequence

import numpy as np

from app.core.error_handling import ContractError, ShapeError
from app.data.preprocessing import augment_train_image, preprocess_eval_image
from app.data.records import ClinicalBatch, PatientRecord, TaskLayout
from app.models.tokenizers import LabStats, impute_median, normalize_lab, pad_or_truncate_cc

logger = logging.getLogger(__name__)


class DataPipeline:
    """Lab normalisation, cc padding and image preprocessing for one task

    Lab statistics always come from the training split (see ``fit``).
    """

    def __init__(self, layout: TaskLayout, stats: LabStats, image_size: int, resize_size: int,
                 crop_area_min: float = 0.09, augment: bool = True, include_images: bool = True):
        if stats.min.shape != (layout.n_lab,):
            raise ShapeError(f"lab stats cover {stats.min.shape[0]} items, task has {layout.n_lab}")
        self.layout = layout
        self.stats = stats
        self.image_size = image_size
        self.resize_size = resize_size
        self.area_range = (crop_area_min, 1.0)
        self.augment = augment
        self.include_images = include_images

    @classmethod
    def fit(cls, train_records: Sequence[PatientRecord], layout: TaskLayout, image_size: int, resize_size: int,
            **kwargs) -> "DataPipeline":
        stats = LabStats.from_records(train_records)
        logger.debug(f"Lab statistics fitted on {len(train_records)} training records")
        return cls(layout, stats, image_size, resize_size, **kwargs)

    def lab_features(self, lab: np.ndarray) -> np.ndarray:
        """Task 1 keeps -1 for missing; task 2 imputes medians first"""
        if self.layout.structured_cc:
            lab = impute_median(lab, self.stats.median)
        return normalize_lab(lab, self.stats.min, self.stats.max)

    def cc_features(self, record: PatientRecord) -> np.ndarray:
        if self.layout.structured_cc:
            return np.asarray(record.cc, dtype=np.float64)
        return np.asarray(pad_or_truncate_cc(record.cc, self.layout.n_cc), dtype=np.int64)

    def image_stack(self, record: PatientRecord, train: bool, rng: Optional[np.random.Generator]) -> np.ndarray:
        if train and self.augment:
            slices = [augment_train_image(img, rng, self.resize_size, self.image_size, self.area_range)
                      for img in record.images]
        else:
            slices = [preprocess_eval_image(img, self.resize_size, self.image_size) for img in record.images]
        return np.stack(slices)

    def collate(self, records: Sequence[PatientRecord], train: bool = False,
                rng: Optional[np.random.Generator] = None) -> ClinicalBatch:
        if not records:
            raise ContractError("cannot collate an empty batch")
        if train and self.augment and self.include_images and rng is None:
            raise ContractError("training-mode augmentation needs a seeded generator")
        for record in records:
            record.validate(self.layout)

        images = None
        if self.include_images:
            stacks = [self.image_stack(r, train, rng) for r in records]
            counts = {s.shape[0] for s in stacks}
            if len(counts) != 1:
                raise ShapeError(f"records in one batch must share a slice count, got {sorted(counts)}")
            images = np.stack(stacks).astype(np.float32)

        return ClinicalBatch(
            ids=[r.id for r in records],
            images=images,
            cc=np.stack([self.cc_features(r) for r in records]),
            lab=np.stack([self.lab_features(r.lab) for r in records]),
            sex=np.array([r.sex for r in records], dtype=np.float64),
            age=np.array([r.age for r in records], dtype=np.float64),
            labels=np.stack([np.asarray(r.labels, dtype=np.int64) for r in records]),
        )

    def batches(self, records: Sequence[PatientRecord], batch_size: int, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Iterator[ClinicalBatch]:
        """Shuffled when an rng is given, in record order otherwise"""
        if batch_size < 1:
            raise ContractError(f"batch_size must be positive, got {batch_size}")
        order: List[int] = list(rng.permutation(len(records))) if rng is not None else list(range(len(records)))
        for start in range(0, len(order), batch_size):
            chunk = [records[i] for i in order[start:start + batch_size]]
            yield self.collate(chunk, train, rng)
