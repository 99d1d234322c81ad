"""In-memory patient records and per-task token layouts."""

from dataclasses import dataclass, field
from datetime import date
from typing import List, Optional, Union

import numpy as np

from app.core.error_handling import ContractError, ShapeError


@dataclass(frozen=True)
class TaskLayout:
    """Token and label counts for one diagnostic task"""
    task: int
    n_cc: int
    n_lab: int
    class_count: int
    n_slices: int

    @property
    def structured_cc(self) -> bool:
        """Task 2 carries cc as a real vector instead of word ids"""
        return self.task == 2

    @property
    def text_tokens(self) -> int:
        return self.n_cc + self.n_lab + 2


TASK_LAYOUTS = {
    1: TaskLayout(task=1, n_cc=40, n_lab=92, class_count=8, n_slices=1),
    2: TaskLayout(task=2, n_cc=16, n_lab=19, class_count=3, n_slices=16),
}


def task_layout(task: int, n_cc: Optional[int] = None, n_lab: Optional[int] = None,
                class_count: Optional[int] = None, n_slices: Optional[int] = None) -> TaskLayout:
    """Task defaults with optional desk-scale overrides"""
    if task not in TASK_LAYOUTS:
        raise ContractError(f"task must be 1 or 2, got {task}")
    base = TASK_LAYOUTS[task]
    layout = TaskLayout(
        task=task,
        n_cc=n_cc or base.n_cc,
        n_lab=n_lab or base.n_lab,
        class_count=class_count or base.class_count,
        n_slices=n_slices or base.n_slices,
    )
    if min(layout.n_cc, layout.n_lab, layout.class_count, layout.n_slices) < 1:
        raise ContractError(f"layout counts must be positive: {layout}")
    return layout


@dataclass
class PatientRecord:
    """One case; missing lab values are NaN"""
    id: str
    admission_date: date
    images: List[np.ndarray]  # H x W x C float32 rasters, one per slice
    cc: Union[List[int], np.ndarray]  # word ids (task 1) or component values (task 2)
    lab: np.ndarray
    sex: int
    age: float
    labels: np.ndarray
    image_paths: List[str] = field(default_factory=list)

    def validate(self, layout: TaskLayout) -> None:
        if len(self.labels) != layout.class_count:
            raise ShapeError(f"record {self.id}: {len(self.labels)} labels, task expects {layout.class_count}")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ContractError(f"record {self.id}: labels must be 0/1")
        if len(self.lab) != layout.n_lab:
            raise ShapeError(f"record {self.id}: {len(self.lab)} lab values, task expects {layout.n_lab}")
        if layout.structured_cc and len(self.cc) != layout.n_cc:
            raise ShapeError(f"record {self.id}: {len(self.cc)} cc components, task expects {layout.n_cc}")
        if not layout.structured_cc and any(int(i) < 0 for i in self.cc):
            raise ContractError(f"record {self.id}: negative word id in cc")
        if not self.images:
            raise ShapeError(f"record {self.id}: no images")
        shapes = {image.shape for image in self.images}
        if len(shapes) != 1 or self.images[0].ndim != 3:
            raise ShapeError(f"record {self.id}: images must share one H x W x C shape, got {sorted(shapes)}")
        if self.sex not in (0, 1):
            raise ContractError(f"record {self.id}: sex must be 0 or 1, got {self.sex}")
        if not self.age >= 0:
            raise ContractError(f"record {self.id}: age must be nonnegative, got {self.age}")


@dataclass
class ClinicalBatch:
    """Model-ready arrays for a batch of records"""
    ids: List[str]
    images: Optional[np.ndarray]  # B x S x H x W x C, or None when the image is dropped
    cc: np.ndarray  # B x n_cc int64 word ids or float values
    lab: np.ndarray  # B x n_lab, normalised (-1 = missing for task 1)
    sex: np.ndarray  # B
    age: np.ndarray  # B, years
    labels: np.ndarray  # B x class_count

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def n_slices(self) -> int:
        return 1 if self.images is None else self.images.shape[1]
