"""Synthetic cohorts with planted image, text and cross-modal label signal.

Every class is driven by one mechanism:

* ``cross``: a positive case shows both the class's image motif and its text
  cue; a negative case shows exactly one of the two. Either modality alone
  ranks cases with AUROC 0.75, both together separate them perfectly.
* ``image``: the motif is the label, the text cue is a coin flip.
* ``text``: the text cue is the label, the motif is a coin flip.

The first round(fraction * class_count) classes are cross-modal; the rest
alternate image/text starting with image. Mechanisms are fixed per class, not
drawn per label: every class shares one prevalence, so the cross-modal share of
positive labels is round(fraction * class_count) / class_count in expectation.
With two classes a fraction of 0.7 rounds to one cross-modal class. Lab values
never carry signal.
"""

import logging
import math
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from app.core.error_handling import ContractError
from app.data.manifest import VOCAB_FILE, DatasetInfo, DatasetManifest, write_manifest, write_record
from app.data.records import PatientRecord, TaskLayout, task_layout
from app.models.tokenizers import Vocabulary

logger = logging.getLogger(__name__)

CROSS, IMAGE_CUE, TEXT_CUE = "cross", "image", "text"
BACKGROUND_LEVEL = 0.2
MOTIF_LEVEL = 1.0
STRUCTURED_CUE_VALUE = 2.0
LAB_MEAN, LAB_STD, LAB_MISSING_RATE = 50.0, 10.0, 0.1
MIN_WORDS, MAX_WORDS = 4, 48
DATE_SPAN_DAYS = 3 * 365


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    task: Literal[1, 2] = 1
    n_records: int = Field(default=2000, ge=1)
    class_count: Optional[int] = Field(default=None, ge=1)
    n_cc: Optional[int] = Field(default=None, ge=1)
    n_lab: Optional[int] = Field(default=None, ge=1)
    n_slices: Optional[int] = Field(default=None, ge=1)
    image_size: int = Field(default=32, ge=1)
    source_size: Optional[int] = Field(default=None, ge=1)
    channels: int = Field(default=1, ge=1)
    patch: int = Field(default=16, ge=1)
    vocab_size: int = Field(default=512, ge=3)
    cross_modal_fraction: float = Field(default=0.7, ge=0.0, le=1.0)
    noise: float = Field(default=0.1, ge=0.0)
    prevalence: float = Field(default=0.3, gt=0.0, lt=1.0)
    train_fraction: float = Field(default=0.7, gt=0.0, lt=1.0)
    val_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    seed: int = 0
    start_date: date = date(2018, 1, 1)

    @model_validator(mode="after")
    def validate_spec(self):
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch {self.patch}")
        if self.resolved_source_size < self.image_size:
            raise ValueError(f"source_size {self.resolved_source_size} is smaller than image_size {self.image_size}")
        if self.train_fraction + self.val_fraction >= 1.0:
            raise ValueError("train_fraction + val_fraction must leave room for a test split")
        layout = self.layout
        if layout.structured_cc and layout.n_cc < layout.class_count:
            raise ValueError(f"structured cc needs at least one component per class ({layout.class_count})")
        if not layout.structured_cc and self.vocab_size < 3 + layout.class_count:
            raise ValueError(f"vocab_size {self.vocab_size} leaves no background words for {layout.class_count} cue words")
        if not layout.structured_cc and layout.n_cc < layout.class_count:
            raise ValueError(f"n_cc {layout.n_cc} cannot hold all {layout.class_count} cue words")
        return self

    @property
    def layout(self) -> TaskLayout:
        return task_layout(self.task, self.n_cc, self.n_lab, self.class_count, self.n_slices)

    @property
    def resolved_source_size(self) -> int:
        """Stored raster size; eval preprocessing center-crops image_size out of it"""
        return self.source_size or int(round(self.image_size * 8 / 7))


@dataclass
class SyntheticCohort:
    """Generated records with the latent cue indicators that produced them"""
    spec: SyntheticSpec
    records: List[PatientRecord]
    motif: np.ndarray  # n x C bool
    cue: np.ndarray  # n x C bool
    mechanisms: List[str]
    split_boundaries: Tuple[date, date]

    @property
    def labels(self) -> np.ndarray:
        return np.stack([r.labels for r in self.records]).astype(np.int64)


def class_mechanisms(class_count: int, fraction: float) -> List[str]:
    """One mechanism per class; the cross-modal fraction is quantized to whole classes"""
    if class_count < 1:
        raise ContractError("class_count must be at least 1")
    n_cross = int(round(fraction * class_count))
    rest = [IMAGE_CUE if i % 2 == 0 else TEXT_CUE for i in range(class_count - n_cross)]
    return [CROSS] * n_cross + rest


def motif_box(class_index: int, image_size: int, class_count: int) -> Tuple[int, int, int]:
    """(top, left, side) of a class's motif in model-input coordinates"""
    cells = math.ceil(math.sqrt(class_count))
    cell = image_size // cells
    if cell < 1:
        raise ContractError(f"image_size {image_size} is too small for {class_count} motif locations")
    side = max(1, cell // 2)
    row, col = divmod(class_index, cells)
    inset = (cell - side) // 2
    return row * cell + inset, col * cell + inset, side


def _draw_cues(mechanism: str, label: int, rng: np.random.Generator) -> Tuple[bool, bool]:
    if mechanism == CROSS:
        if label:
            return True, True
        motif = bool(rng.random() < 0.5)
        return motif, not motif
    coin = bool(rng.random() < 0.5)
    if mechanism == IMAGE_CUE:
        return bool(label), coin
    return coin, bool(label)


def _render_image(spec: SyntheticSpec, motif: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = spec.resolved_source_size
    margin = (size - spec.image_size) // 2
    image = BACKGROUND_LEVEL + spec.noise * rng.standard_normal((size, size, spec.channels))
    for class_index in np.flatnonzero(motif):
        top, left, side = motif_box(int(class_index), spec.image_size, len(motif))
        image[margin + top:margin + top + side, margin + left:margin + left + side, :] = MOTIF_LEVEL
    return image.astype(np.float32)


def _render_cc(spec: SyntheticSpec, layout: TaskLayout, cue: np.ndarray, rng: np.random.Generator):
    if layout.structured_cc:
        values = rng.integers(0, 2, size=layout.n_cc).astype(np.float64)
        values[np.flatnonzero(cue)] = STRUCTURED_CUE_VALUE
        return values
    present = np.flatnonzero(cue)
    length = max(int(rng.integers(MIN_WORDS, MAX_WORDS + 1)), len(present))
    words = rng.integers(2 + layout.class_count, spec.vocab_size, size=length)
    # cue words land inside the kept prefix, one position each
    positions = rng.choice(min(layout.n_cc, length), size=len(present), replace=False)
    words[positions] = 2 + present
    return [int(w) for w in words]


def _render_lab(layout: TaskLayout, rng: np.random.Generator) -> np.ndarray:
    values = np.round(rng.normal(LAB_MEAN, LAB_STD, size=layout.n_lab), 2)
    values[rng.random(layout.n_lab) < LAB_MISSING_RATE] = np.nan
    return values


def _split_boundaries(dates: List[date], train_fraction: float, val_fraction: float) -> Tuple[date, date]:
    ordered = sorted(dates)
    n = len(ordered)
    first = ordered[max(0, math.ceil(train_fraction * n) - 1)]
    second = ordered[max(0, math.ceil((train_fraction + val_fraction) * n) - 1)]
    return first, second


def generate_synthetic_cohort(spec: SyntheticSpec, progress: bool = False) -> SyntheticCohort:
    """Deterministic in spec (seed included)"""
    layout = spec.layout
    rng = np.random.default_rng(spec.seed)
    mechanisms = class_mechanisms(layout.class_count, spec.cross_modal_fraction)

    records, motifs, cues = [], [], []
    for index in tqdm(range(spec.n_records), desc="Generating records", disable=not progress):
        labels = (rng.random(layout.class_count) < spec.prevalence).astype(np.int8)
        pairs = [_draw_cues(m, int(y), rng) for m, y in zip(mechanisms, labels)]
        motif = np.array([p[0] for p in pairs], dtype=bool)
        cue = np.array([p[1] for p in pairs], dtype=bool)
        images = [_render_image(spec, motif, rng) for _ in range(layout.n_slices)]
        records.append(PatientRecord(
            id=f"P{index:05d}",
            admission_date=spec.start_date + timedelta(days=int(rng.integers(0, DATE_SPAN_DAYS))),
            images=images,
            cc=_render_cc(spec, layout, cue, rng),
            lab=_render_lab(layout, rng),
            sex=int(rng.integers(0, 2)),
            age=float(np.round(rng.uniform(18.0, 90.0), 1)),
            labels=labels,
        ))
        motifs.append(motif)
        cues.append(cue)

    boundaries = _split_boundaries([r.admission_date for r in records], spec.train_fraction, spec.val_fraction)
    logger.info(
        f"Generated {len(records)} synthetic records: task={spec.task} classes={layout.class_count} "
        f"mechanisms={mechanisms}"
    )
    return SyntheticCohort(spec, records, np.array(motifs), np.array(cues), mechanisms, boundaries)


def dataset_info(cohort: SyntheticCohort) -> DatasetInfo:
    spec, layout = cohort.spec, cohort.spec.layout
    return DatasetInfo(
        task=spec.task,
        class_count=layout.class_count,
        n_cc=layout.n_cc,
        n_lab=layout.n_lab,
        n_slices=layout.n_slices,
        image_size=spec.image_size,
        source_size=spec.resolved_source_size,
        channels=spec.channels,
        patch=spec.patch,
        vocab_size=spec.vocab_size,
        n_records=len(cohort.records),
        split_boundaries=cohort.split_boundaries,
        seed=spec.seed,
        class_mechanisms=cohort.mechanisms,
    )


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir: Union[str, Path],
                               progress: bool = False) -> DatasetManifest:
    """Write images, vocabulary, dataset info and manifest under out_dir"""
    out_dir = Path(out_dir)
    cohort = generate_synthetic_cohort(spec, progress)
    entries = [write_record(out_dir, record) for record in cohort.records]
    Vocabulary.synthetic(spec.vocab_size).save(out_dir / VOCAB_FILE)
    manifest = write_manifest(out_dir, dataset_info(cohort), entries)
    logger.info(f"✅ Synthetic dataset ready at {out_dir}")
    return manifest


def bayes_scores(cohort: SyntheticCohort, view: Literal["image", "text", "joint"]) -> np.ndarray:
    """Posterior P(y=1 | cues visible in `view`) per case and class"""
    if view not in ("image", "text", "joint"):
        raise ContractError(f"view must be image, text or joint, got {view!r}")
    p = cohort.spec.prevalence
    scores = np.zeros(cohort.motif.shape, dtype=np.float64)
    for c, mechanism in enumerate(cohort.mechanisms):
        m, t = cohort.motif[:, c], cohort.cue[:, c]
        if view == "joint":
            scores[:, c] = (m & t) if mechanism == CROSS else (m if mechanism == IMAGE_CUE else t)
            continue
        seen = m if view == "image" else t
        if mechanism == CROSS:
            # a visible cue happens for every positive and half the negatives
            scores[:, c] = np.where(seen, p / (p + 0.5 * (1.0 - p)), 0.0)
        elif mechanism == (IMAGE_CUE if view == "image" else TEXT_CUE):
            scores[:, c] = seen
        else:
            scores[:, c] = p
    return scores
