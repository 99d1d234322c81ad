"""JSON-lines dataset manifests and record file I/O."""

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.error_handling import DatasetFormatError, handle_file_errors
from app.data.imageio import read_mimg, write_mimg
from app.data.records import PatientRecord, TaskLayout, task_layout

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.jsonl"
INFO_FILE = "dataset.json"
VOCAB_FILE = "vocab.jsonl"
IMAGE_DIR = "images"

_SAFE_NAME = re.compile(r"^[A-Za-z0-9_.-]+$")


class RecordEntry(BaseModel):
    """One manifest line"""
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    admission_date: date
    image_paths: List[str] = Field(min_length=1)
    cc: Union[List[int], List[float]]
    lab: List[Optional[float]]
    sex: int
    age: float = Field(ge=0)
    labels: List[int]

    @field_validator("sex")
    @classmethod
    def validate_sex(cls, v):
        if v not in (0, 1):
            raise ValueError("sex must be 0 or 1")
        return v

    @field_validator("labels")
    @classmethod
    def validate_labels(cls, v):
        if any(label not in (0, 1) for label in v):
            raise ValueError("labels must be 0/1")
        return v


class DatasetInfo(BaseModel):
    """Dataset-level facts written next to the manifest"""
    model_config = ConfigDict(extra="forbid")

    task: int
    class_count: int
    n_cc: int
    n_lab: int
    n_slices: int
    image_size: int
    source_size: int
    channels: int
    patch: int
    vocab_size: int
    n_records: int
    split_boundaries: Tuple[date, date]
    seed: Optional[int] = None
    class_mechanisms: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_boundaries(self):
        first, second = self.split_boundaries
        if first > second:
            raise ValueError(f"split boundaries out of order: {first} > {second}")
        return self

    @property
    def layout(self) -> TaskLayout:
        return task_layout(self.task, self.n_cc, self.n_lab, self.class_count, self.n_slices)


def image_file_name(record_id: str, index: int) -> str:
    stem = record_id if _SAFE_NAME.match(record_id) else hashlib.sha1(record_id.encode("utf-8")).hexdigest()[:16]
    return f"{IMAGE_DIR}/{stem}_{index:02d}.mimg"


def entry_from_record(record: PatientRecord, image_paths: List[str]) -> RecordEntry:
    lab = [None if np.isnan(v) else float(v) for v in np.asarray(record.lab, dtype=np.float64)]
    if isinstance(record.cc, np.ndarray) and np.issubdtype(record.cc.dtype, np.floating):
        cc: Union[List[int], List[float]] = [float(v) for v in record.cc]
    else:
        cc = [int(v) for v in record.cc]
    return RecordEntry(
        id=record.id,
        admission_date=record.admission_date,
        image_paths=image_paths,
        cc=cc,
        lab=lab,
        sex=int(record.sex),
        age=float(record.age),
        labels=[int(v) for v in record.labels],
    )


def record_from_entry(entry: RecordEntry, images: List[np.ndarray], structured_cc: bool) -> PatientRecord:
    cc = np.asarray(entry.cc, dtype=np.float64) if structured_cc else [int(v) for v in entry.cc]
    lab = np.array([np.nan if v is None else v for v in entry.lab], dtype=np.float64)
    return PatientRecord(
        id=entry.id,
        admission_date=entry.admission_date,
        images=images,
        cc=cc,
        lab=lab,
        sex=entry.sex,
        age=entry.age,
        labels=np.asarray(entry.labels, dtype=np.int8),
        image_paths=list(entry.image_paths),
    )


def write_record(root: Union[str, Path], record: PatientRecord) -> RecordEntry:
    """Write a record's images under root and return its manifest entry"""
    root = Path(root)
    paths = []
    for index, image in enumerate(record.images):
        relative = image_file_name(record.id, index)
        write_mimg(root / relative, image)
        paths.append(relative)
    return entry_from_record(record, paths)


def read_record(root: Union[str, Path], entry: RecordEntry, structured_cc: bool) -> PatientRecord:
    root = Path(root)
    images = []
    for relative in entry.image_paths:
        path = root / relative
        if not path.is_file():
            raise DatasetFormatError(f"record {entry.id}: image file not found: {path}")
        images.append(read_mimg(path))
    return record_from_entry(entry, images, structured_cc)


def _entry_line(entry: RecordEntry) -> str:
    return json.dumps(entry.model_dump(mode="json"), ensure_ascii=False)


@dataclass
class DatasetManifest:
    """Manifest entries plus dataset info, rooted at a directory"""
    root: Path
    info: DatasetInfo
    entries: List[RecordEntry]

    @property
    def layout(self) -> TaskLayout:
        return self.info.layout

    def entry(self, record_id: str) -> Optional[RecordEntry]:
        for entry in self.entries:
            if entry.id == record_id:
                return entry
        return None

    def load_records(self) -> List[PatientRecord]:
        layout = self.layout
        records = []
        for entry in self.entries:
            record = read_record(self.root, entry, layout.structured_cc)
            record.validate(layout)
            records.append(record)
        return records


@handle_file_errors
def write_manifest(root: Union[str, Path], info: DatasetInfo, entries: List[RecordEntry]) -> DatasetManifest:
    """Single writer; lines sorted by record id"""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ordered = sorted(entries, key=lambda e: e.id)
    ids = [e.id for e in ordered]
    if len(set(ids)) != len(ids):
        raise DatasetFormatError("record ids must be unique")
    with open(root / MANIFEST_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for entry in ordered:
            fh.write(_entry_line(entry) + "\n")
    (root / INFO_FILE).write_text(info.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"✅ Wrote manifest with {len(ordered)} records to {root / MANIFEST_FILE}")
    return DatasetManifest(root=root, info=info, entries=ordered)


@handle_file_errors
def read_manifest(root: Union[str, Path]) -> DatasetManifest:
    root = Path(root)
    try:
        info = DatasetInfo.model_validate_json((root / INFO_FILE).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DatasetFormatError(f"{root / INFO_FILE}: invalid dataset info: {e}") from e

    entries: List[RecordEntry] = []
    seen: Dict[str, int] = {}
    with open(root / MANIFEST_FILE, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entry = RecordEntry.model_validate(json.loads(line))
            except (json.JSONDecodeError, ValidationError) as e:
                raise DatasetFormatError(f"{root / MANIFEST_FILE}: line {line_no}: {e}") from e
            if entry.id in seen:
                raise DatasetFormatError(
                    f"{root / MANIFEST_FILE}: line {line_no}: duplicate id {entry.id!r} (first on line {seen[entry.id]})"
                )
            for relative in entry.image_paths:
                if not (root / relative).is_file():
                    raise DatasetFormatError(f"{root / MANIFEST_FILE}: line {line_no}: image not found: {root / relative}")
            seen[entry.id] = line_no
            entries.append(entry)
    return DatasetManifest(root=root, info=info, entries=entries)


def manifest_digest(root: Union[str, Path]) -> str:
    """SHA-256 of the manifest file bytes"""
    return hashlib.sha256((Path(root) / MANIFEST_FILE).read_bytes()).hexdigest()
