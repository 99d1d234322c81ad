"""Token embeddings for images and clinical text, plus the text preprocessing they rely on."""

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from app.core.error_handling import ContractError, DatasetFormatError, ShapeError, handle_file_errors
from app.data.records import ClinicalBatch, PatientRecord, TaskLayout
from app.engine import ops
from app.engine.module import Embedding, ForwardContext, Linear, Module, truncated_normal
from app.engine.tensor import Tensor, parameter

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
CC_LENGTH = 40
AGE_SCALE = 100.0

IMAGE, CC, LAB, SEX, AGE, CLS = "image", "cc", "lab", "sex", "age", "cls"
MODALITY_TAGS = (IMAGE, CC, LAB, SEX, AGE, CLS)


# --- vocabulary -------------------------------------------------------------

class Vocabulary:
    """Dense word ids with PAD=0 and UNK=1"""

    def __init__(self, words: Sequence[str]):
        self.words: List[str] = ["<pad>", "<unk>"] + [w for w in words if w not in ("<pad>", "<unk>")]
        self.word_to_id: Dict[str, int] = {}
        for index, word in enumerate(self.words):
            if word in self.word_to_id:
                raise ContractError(f"duplicate vocabulary word {word!r}")
            self.word_to_id[word] = index

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        if size < 3:
            raise ContractError(f"vocabulary needs at least 3 entries, got {size}")
        return cls([f"w{i:04d}" for i in range(2, size)])

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self.word_to_id.get(word, UNK_ID) for word in words]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.words[i] if 0 <= i < len(self.words) else self.words[UNK_ID] for i in ids]

    @handle_file_errors
    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        lines = [json.dumps({"word": word, "id": index}, ensure_ascii=False) for index, word in enumerate(self.words)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    @handle_file_errors
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        path = Path(path)
        rows = {}
        for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                item = json.loads(line)
                rows[int(item["id"])] = str(item["word"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError(f"{path}: line {line_no}: {e}") from e
        if sorted(rows) != list(range(len(rows))):
            raise DatasetFormatError(f"{path}: vocabulary ids are not dense in [0, {len(rows)})")
        if rows.get(PAD_ID) != "<pad>" or rows.get(UNK_ID) != "<unk>":
            raise DatasetFormatError(f"{path}: ids 0 and 1 must be <pad> and <unk>")
        return cls([rows[i] for i in range(2, len(rows))])


def pad_or_truncate_cc(word_ids: Sequence[int], length: int = CC_LENGTH) -> List[int]:
    """Keep the first `length` ids, pad the tail with PAD"""
    ids = [int(i) for i in word_ids[:length]]
    return ids + [PAD_ID] * (length - len(ids))


def mean_word_embedding(embedding: Embedding, word_ids: np.ndarray) -> Tensor:
    """Average of the non-PAD word embeddings per row [B x D]; all-PAD rows give zeros"""
    ids = np.asarray(word_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ShapeError(f"expected B x L word ids, got shape {ids.shape}")
    vectors = embedding(ids)
    present = (ids != PAD_ID).astype(vectors.dtype)
    weights = present / np.maximum(present.sum(axis=1, keepdims=True), 1.0)
    return ops.sum(ops.mul(vectors, weights[..., None]), axis=1)


# --- lab statistics ---------------------------------------------------------

@dataclass
class LabStats:
    """Training-split min/max/median per lab item"""
    min: np.ndarray
    max: np.ndarray
    median: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord]) -> "LabStats":
        if not records:
            raise ContractError("lab statistics need at least one training record")
        values = np.stack([np.asarray(r.lab, dtype=np.float64) for r in records])
        n_items = values.shape[1]
        lows, highs, medians = np.zeros(n_items), np.zeros(n_items), np.zeros(n_items)
        for item in range(n_items):
            present = values[:, item][~np.isnan(values[:, item])]
            if present.size:
                lows[item], highs[item], medians[item] = present.min(), present.max(), np.median(present)
            else:
                logger.warning(f"Lab item {item} has no observed training values; stats default to 0")
        return cls(min=lows, max=highs, median=medians)

    @handle_file_errors
    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        payload = {"min": self.min.tolist(), "max": self.max.tolist(), "median": self.median.tolist()}
        path.write_text(json.dumps(payload) + "\n", encoding="utf-8")
        return path

    @classmethod
    @handle_file_errors
    def load(cls, path: Union[str, Path]) -> "LabStats":
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            stats = cls(*(np.asarray(payload[k], dtype=np.float64) for k in ("min", "max", "median")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"{path}: invalid stats file: {e}") from e
        if not stats.min.shape == stats.max.shape == stats.median.shape:
            raise DatasetFormatError(f"{path}: min/max/median lengths differ")
        return stats


def normalize_lab(values: np.ndarray, train_min: np.ndarray, train_max: np.ndarray) -> np.ndarray:
    """Min-max scale present values into [0, 1]; missing -> -1; flat items -> 0"""
    values = np.asarray(values, dtype=np.float64)
    train_min = np.asarray(train_min, dtype=np.float64)
    train_max = np.asarray(train_max, dtype=np.float64)
    if not values.shape[-1:] == train_min.shape == train_max.shape:
        raise ShapeError(f"lab values {values.shape} do not match stats {train_min.shape}/{train_max.shape}")
    span = train_max - train_min
    flat = span <= 0
    scaled = (values - train_min) / np.where(flat, 1.0, span)
    scaled = np.clip(np.where(flat, 0.0, scaled), 0.0, 1.0)
    return np.where(np.isnan(values), -1.0, scaled)


def impute_median(values: np.ndarray, train_medians: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.where(np.isnan(values), np.asarray(train_medians, dtype=np.float64), values)


# --- token sequences --------------------------------------------------------

@dataclass
class TokenSequence:
    """Batched token embeddings [B x N x D] with one modality tag per token"""
    tokens: Tensor
    modality_tags: List[str]
    key_mask: Optional[np.ndarray] = None  # B x N, True = ignored as an attention key

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != len(self.modality_tags):
            raise ShapeError(
                f"{len(self.modality_tags)} modality tags for tokens of shape {self.tokens.shape}"
            )

    def __len__(self) -> int:
        return len(self.modality_tags)

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    def tag_counts(self) -> Dict[str, int]:
        return dict(Counter(self.modality_tags))

    def mask_or_none(self) -> Optional[np.ndarray]:
        if self.key_mask is None or not self.key_mask.any():
            return None
        return self.key_mask


def concat_sequences(sequences: Sequence[TokenSequence]) -> TokenSequence:
    tokens = ops.concat([s.tokens for s in sequences], axis=1)
    tags = [tag for s in sequences for tag in s.modality_tags]
    if any(s.key_mask is not None for s in sequences):
        masks = [
            s.key_mask if s.key_mask is not None else np.zeros(s.tokens.shape[:2], dtype=bool)
            for s in sequences
        ]
        return TokenSequence(tokens, tags, np.concatenate(masks, axis=1))
    return TokenSequence(tokens, tags)


def _scalar_tokens(projection: Linear, values: np.ndarray, dtype) -> Tensor:
    """Project each scalar of a B x L array to D through one shared map"""
    column = Tensor(np.asarray(values)[..., None], dtype=dtype)
    return projection(column)


class ImageTokenizer(Module):
    """Flattened patches -> linear map + learnable 1D positional embedding"""

    def __init__(self, image_size: int, patch: int, channels: int, dim: int, rng: np.random.Generator,
                 dropout: float = 0.0):
        super().__init__()
        if image_size % patch:
            raise ShapeError(f"image size {image_size} is not divisible by patch {patch}")
        self.image_size = image_size
        self.patch = patch
        self.channels = channels
        self.grid = image_size // patch
        self.projection = Linear(patch * patch * channels, dim, rng)
        self.position = parameter(truncated_normal((self.grid * self.grid, dim), rng))
        self.rate = dropout

    @property
    def token_count(self) -> int:
        return self.grid * self.grid

    def patchify(self, images: Union[np.ndarray, Tensor]) -> Tensor:
        images = ops.as_tensor(images)
        if images.ndim != 4:
            raise ShapeError(f"expected B x H x W x C images, got shape {images.shape}")
        batch, height, width, channels = images.shape
        if height % self.patch or width % self.patch:
            raise ShapeError(f"image {height}x{width} is not divisible by patch {self.patch}")
        if (height, width, channels) != (self.image_size, self.image_size, self.channels):
            raise ShapeError(
                f"image {height}x{width}x{channels} does not match configured "
                f"{self.image_size}x{self.image_size}x{self.channels}"
            )
        p, g = self.patch, self.grid
        x = images.reshape(batch, g, p, g, p, channels)
        x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
        return x.reshape(batch, g * g, p * p * channels)

    def forward(self, images: Union[np.ndarray, Tensor], ctx: ForwardContext) -> TokenSequence:
        tokens = ops.add(self.projection(self.patchify(images)), self.position)
        tokens = ctx.dropout(tokens, self.rate)
        return TokenSequence(tokens, [IMAGE] * self.token_count)


class ClinicalTextTokenizer(Module):
    """cc, lab, sex and age tokens concatenated in that order"""

    def __init__(self, layout: TaskLayout, dim: int, vocab_size: int, rng: np.random.Generator,
                 use_cc: bool = True, use_lab: bool = True, tokenized: bool = True,
                 position_embedding: bool = False, mask_padding: bool = False, dropout: float = 0.0):
        super().__init__()
        self.layout = layout
        self.dim = dim
        self.use_cc = use_cc
        self.use_lab = use_lab
        self.tokenized = tokenized
        self.mask_padding = mask_padding and tokenized and not layout.structured_cc
        self.rate = dropout
        if use_cc:
            if layout.structured_cc:
                self.cc_projection = Linear(1, dim, rng)
            else:
                self.cc_embedding = Embedding(vocab_size, dim, rng)
        if use_lab:
            self.lab_projection = Linear(1 if tokenized else layout.n_lab, dim, rng)
        self.sex_projection = Linear(1, dim, rng)
        self.age_projection = Linear(1, dim, rng)
        self.position = parameter(truncated_normal((self.token_count, dim), rng)) if position_embedding else None

    @property
    def token_counts(self) -> Dict[str, int]:
        counts = {}
        if self.use_cc:
            counts[CC] = self.layout.n_cc if self.tokenized else 1
        if self.use_lab:
            counts[LAB] = self.layout.n_lab if self.tokenized else 1
        counts[SEX] = 1
        counts[AGE] = 1
        return counts

    @property
    def token_count(self) -> int:
        return sum(self.token_counts.values())

    def _check(self, batch: ClinicalBatch) -> None:
        if batch.cc.shape[1:] != (self.layout.n_cc,):
            raise ShapeError(f"cc has shape {batch.cc.shape}, task expects {self.layout.n_cc} components")
        if batch.lab.shape[1:] != (self.layout.n_lab,):
            raise ShapeError(f"lab has shape {batch.lab.shape}, task expects {self.layout.n_lab} items")

    def _cc_tokens(self, batch: ClinicalBatch, dtype) -> Tensor:
        if self.layout.structured_cc:
            tokens = _scalar_tokens(self.cc_projection, batch.cc, dtype)
            return ops.mean(tokens, axis=1, keepdims=True) if not self.tokenized else tokens
        ids = np.asarray(batch.cc, dtype=np.int64)
        if self.tokenized:
            return self.cc_embedding(ids)
        return mean_word_embedding(self.cc_embedding, ids).reshape(batch.size, 1, self.dim)

    def forward(self, batch: ClinicalBatch, ctx: ForwardContext) -> TokenSequence:
        self._check(batch)
        dtype = self.sex_projection.weight.dtype
        parts, tags, masks = [], [], []
        size = batch.size
        if self.use_cc:
            parts.append(self._cc_tokens(batch, dtype))
            count = self.token_counts[CC]
            tags += [CC] * count
            if self.mask_padding:
                masks.append(np.asarray(batch.cc) == PAD_ID)
            else:
                masks.append(np.zeros((size, count), dtype=bool))
        if self.use_lab:
            if self.tokenized:
                parts.append(_scalar_tokens(self.lab_projection, batch.lab, dtype))
            else:
                parts.append(ops.reshape(self.lab_projection(Tensor(batch.lab, dtype=dtype)), (size, 1, self.dim)))
            tags += [LAB] * self.token_counts[LAB]
            masks.append(np.zeros((size, self.token_counts[LAB]), dtype=bool))
        parts.append(_scalar_tokens(self.sex_projection, np.asarray(batch.sex, dtype=np.float64)[:, None], dtype))
        parts.append(_scalar_tokens(self.age_projection, np.asarray(batch.age, dtype=np.float64)[:, None] / AGE_SCALE, dtype))
        tags += [SEX, AGE]
        masks.append(np.zeros((size, 2), dtype=bool))

        tokens = ops.concat(parts, axis=1)
        if self.position is not None:
            tokens = ops.add(tokens, self.position)
        tokens = ctx.dropout(tokens, self.rate)
        key_mask = np.concatenate(masks, axis=1) if self.mask_padding else None
        return TokenSequence(tokens, tags, key_mask)


def embed_image(tokenizer: ImageTokenizer, images: Union[np.ndarray, Tensor],
                ctx: Optional[ForwardContext] = None) -> TokenSequence:
    """Patch tokens for an N x H x W x C stack of slices"""
    return tokenizer(images, ctx or ForwardContext())


def embed_clinical_text(tokenizer: ClinicalTextTokenizer, batch: ClinicalBatch,
                        ctx: Optional[ForwardContext] = None) -> TokenSequence:
    """cc, lab, sex and age tokens; the count is fixed by the task layout"""
    return tokenizer(batch, ctx or ForwardContext())
