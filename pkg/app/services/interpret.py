"""Attention attribution: rollout to CLS, modality shares, cross-attention maps and heatmap export."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.core.error_handling import ContractError, ShapeError, handle_file_errors  # noqa: E402
from app.data.imageio import write_mimg  # noqa: E402
from app.data.records import ClinicalBatch  # noqa: E402
from app.engine.module import ForwardContext  # noqa: E402
from app.engine.tensor import backward, no_grad, reset_tape  # noqa: E402
from app.models.attention import TEXT_TO_IMAGE, UNIFIED, AttentionTrace  # noqa: E402
from app.models.tokenizers import AGE, CC, CLS, IMAGE, LAB, SEX  # noqa: E402

logger = logging.getLogger(__name__)

SHARE_GROUPS = {IMAGE: IMAGE, CC: CC, LAB: LAB, SEX: "demographics", AGE: "demographics"}
SHARE_ORDER = (IMAGE, CC, LAB, "demographics")


@dataclass
class RelevanceMap:
    """Per-token relevance to the CLS token over the unified bag"""
    relevance: np.ndarray  # N, float64
    tags: List[str]
    cls_index: Optional[int] = None
    grid_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.relevance.shape != (len(self.tags),):
            raise ShapeError(f"{self.relevance.shape[0]} relevance values for {len(self.tags)} tags")

    def indices(self, tag: str) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tags) if t == tag], dtype=np.int64)

    def values(self, tag: str) -> np.ndarray:
        return self.relevance[self.indices(tag)]

    def non_cls(self) -> np.ndarray:
        return np.array([v for i, v in enumerate(self.relevance) if i != self.cls_index], dtype=np.float64)


def capture_trace(model, batch: ClinicalBatch, grad_weighted: bool = False,
                  target_class: Optional[int] = None) -> Tuple[AttentionTrace, np.ndarray]:
    """Eval-mode forward that records attention; returns the trace and logits

    With grad_weighted, the logit of target_class (default: each case's top
    class) is backpropagated so per-head weights carry gradients.
    """
    trace = AttentionTrace()
    ctx = ForwardContext(training=False, trace=trace, retain_attention_grads=grad_weighted)
    if not grad_weighted:
        with no_grad():
            logits = model(batch, ctx)
        return trace, logits.data.astype(np.float64)

    reset_tape()
    model.zero_grad()
    logits = model(batch, ctx)
    classes = (np.full(batch.size, target_class) if target_class is not None
               else logits.data.argmax(axis=1))
    selector = np.zeros(logits.shape, dtype=logits.dtype)
    selector[np.arange(batch.size), classes] = 1
    backward((logits * selector).sum())
    model.zero_grad()
    return trace, logits.data.astype(np.float64)


def attention_rollout(trace: AttentionTrace, case: int = 0, slice_index: int = 0) -> RelevanceMap:
    """Relevance R[CLS] with R = A'_L ... A'_1 and A' = rownorm(A + I) over the unified stack"""
    if trace.cls_index is None:
        raise ContractError("rollout needs a CLS token; run the model with cls pooling")
    records = trace.stream(UNIFIED)
    if not records:
        raise ContractError("trace has no unified-bag attention to roll out")
    row = trace.row(case, slice_index)
    size = records[0].weights.shape[-1]
    rollout = np.eye(size)
    for record in records:
        weights = record.weights[row]
        if weights.shape != (size, size):
            raise ShapeError(f"block {record.block}: attention {weights.shape} is not {size}x{size}")
        augmented = weights + np.eye(size)
        augmented /= augmented.sum(axis=1, keepdims=True)
        rollout = augmented @ rollout
    return RelevanceMap(rollout[trace.cls_index].copy(), list(trace.modality_tags), trace.cls_index,
                        trace.grid_shape)


def modality_shares(relevance_map: RelevanceMap) -> Dict[str, float]:
    """Relevance fractions per modality group, CLS excluded"""
    sums = dict.fromkeys(SHARE_ORDER, 0.0)
    for index, (tag, value) in enumerate(zip(relevance_map.tags, relevance_map.relevance)):
        if index == relevance_map.cls_index or tag == CLS:
            continue
        sums[SHARE_GROUPS[tag]] += float(value)
    total = sum(sums.values())
    if total <= 0:
        raise ContractError("relevance is zero on every non-CLS token")
    return {group: value / total for group, value in sums.items()}


def demographic_shares(relevance_map: RelevanceMap) -> Dict[str, float]:
    """Sex and age relevance as fractions of all non-CLS relevance"""
    total = float(relevance_map.non_cls().sum())
    if total <= 0:
        raise ContractError("relevance is zero on every non-CLS token")
    return {SEX: float(relevance_map.values(SEX).sum()) / total,
            AGE: float(relevance_map.values(AGE).sum()) / total}


def lab_importance(relevance_map: RelevanceMap) -> np.ndarray:
    return relevance_map.values(LAB).copy()


def word_importance(relevance_map: RelevanceMap) -> np.ndarray:
    """cc token relevance min-max normalised within the cc group (flat -> zeros)"""
    values = relevance_map.values(CC)
    if values.size == 0:
        return values
    span = values.max() - values.min()
    return np.zeros_like(values) if span <= 0 else (values - values.min()) / span


def image_grid(relevance_map: RelevanceMap) -> np.ndarray:
    if relevance_map.grid_shape is None:
        raise ContractError("relevance map carries no image grid")
    values = relevance_map.values(IMAGE)
    rows, cols = relevance_map.grid_shape
    if values.size != rows * cols:
        raise ShapeError(f"{values.size} image tokens do not fill a {rows}x{cols} grid")
    return values.reshape(rows, cols)


def cross_attention_map(trace: AttentionTrace, word_index: int, case: int = 0, slice_index: int = 0,
                        grad_weighted: bool = False) -> np.ndarray:
    """Text-token -> image-patch attention averaged over heads and bidirectional blocks, as a grid"""
    records = trace.stream(TEXT_TO_IMAGE)
    if not records:
        raise ContractError("trace has no text-to-image attention (no bidirectional blocks with an image)")
    if trace.grid_shape is None:
        raise ContractError("trace carries no image grid")
    n_text = records[0].weights.shape[1]
    if not 0 <= word_index < n_text:
        raise ContractError(f"word index {word_index} out of range for {n_text} text tokens")
    row = trace.row(case, slice_index)

    maps = []
    for record in records:
        if not grad_weighted:
            maps.append(record.weights[row, word_index])
            continue
        if record.per_head is None or record.per_head.grad is None:
            raise ContractError("gradient-weighted maps need a trace captured with grad_weighted=True")
        weights = record.per_head.data[row, :, word_index].astype(np.float64)
        grads = record.per_head.grad[row, :, word_index].astype(np.float64)
        maps.append(np.maximum(weights * grads, 0.0).mean(axis=0))
    grid = np.mean(maps, axis=0)
    if grad_weighted and grid.sum() > 0:
        grid = grid / grid.sum()
    return grid.reshape(trace.grid_shape)


def top_quartile_mass(relevance: Union[RelevanceMap, np.ndarray], fraction: float = 0.25) -> float:
    """Sum of the largest ceil(fraction * N) non-CLS relevance values"""
    values = relevance.non_cls() if isinstance(relevance, RelevanceMap) else np.asarray(relevance, dtype=np.float64)
    if values.size < 4:
        raise ContractError(f"top-quartile mass needs at least 4 tokens, got {values.size}")
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction must lie in (0, 1], got {fraction}")
    count = math.ceil(fraction * values.size)
    return float(np.sort(values)[::-1][:count].sum())


def cross_attention_gain(with_cross: Union[RelevanceMap, np.ndarray],
                         without_cross: Union[RelevanceMap, np.ndarray], fraction: float = 0.25) -> float:
    """Top-quartile mass of a bidirectional model minus that of its uni-directional twin"""
    return top_quartile_mass(with_cross, fraction) - top_quartile_mass(without_cross, fraction)


def upsample_nearest(grid: np.ndarray, size: int) -> np.ndarray:
    rows, cols = grid.shape
    row_index = (np.arange(size) * rows) // size
    col_index = (np.arange(size) * cols) // size
    return grid[row_index][:, col_index]


def normalize_grid(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeError(f"heatmaps are 2-D grids, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ContractError("heatmap grid has non-finite values")
    span = grid.max() - grid.min()
    return np.zeros_like(grid) if span <= 0 else (grid - grid.min()) / span


@handle_file_errors
def export_heatmap(grid: np.ndarray, out_path: Union[str, Path], size: int,
                   title: Optional[str] = None) -> Tuple[Path, Path]:
    """Write a min-max normalised, nearest-upsampled heatmap as .mimg and .svg"""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    pixels = upsample_nearest(normalize_grid(grid), size).astype(np.float32)
    mimg_path = write_mimg(out_path.with_suffix(".mimg"), pixels[:, :, None])

    svg_path = out_path.with_suffix(".svg")
    with matplotlib.rc_context({"svg.hashsalt": "mdt", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(4, 3.4))
        image = ax.imshow(pixels, cmap="jet", vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04)
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    logger.debug(f"💾 Heatmap written to {mimg_path} and {svg_path}")
    return mimg_path, svg_path
