"""Training loop: BCE loss, AdamW with a step learning-rate drop, best-validation-loss checkpointing."""

import logging
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from app.core.error_handling import ContractError, NonFiniteError, ShapeError
from app.core.logger import get_logger_with_context
from app.data.pipeline import DataPipeline
from app.data.records import ClinicalBatch, PatientRecord
from app.engine import ops
from app.engine.checkpoint import save_checkpoint
from app.engine.module import ForwardContext, Module
from app.engine.optim import AdamW, clip_grad_norm
from app.engine.tensor import Tensor, backward, no_grad, reset_tape

logger = logging.getLogger(__name__)

LOG_FILE = "train_log.csv"
CHECKPOINT_FILE = "best.mdtc"
LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "lr"]


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(default=3e-5, gt=0)
    weight_decay: float = Field(default=1e-2, ge=0)
    epochs: int = Field(default=30, ge=1)
    lr_drop_epoch: Optional[int] = Field(default=20, ge=1)  # None keeps the rate constant
    lr_drop_factor: float = Field(default=10.0, gt=0)
    batch_size: int = Field(default=256, ge=1)
    seed: int = 0
    task: Literal[1, 2] = 1
    grad_clip: Optional[float] = Field(default=None, gt=0)
    progress: bool = False

    @model_validator(mode="after")
    def validate_schedule(self):
        if self.lr_drop_epoch is not None and self.lr_drop_epoch >= self.epochs:
            raise ValueError(f"lr_drop_epoch {self.lr_drop_epoch} must be smaller than epochs {self.epochs}")
        return self


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Rate for a 1-based epoch; the drop applies from lr_drop_epoch on"""
    if epoch < 1:
        raise ContractError(f"epochs are 1-based, got {epoch}")
    if config.lr_drop_epoch is not None and epoch >= config.lr_drop_epoch:
        return config.lr / config.lr_drop_factor
    return config.lr


def bce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise ShapeError(f"labels shape {labels.shape} does not match logits shape {logits.shape}")
    return ops.bce_with_logits(logits, labels)


def compute_loss(model: Module, batch: ClinicalBatch, ctx: ForwardContext) -> Tensor:
    return bce_loss(model(batch, ctx), batch.labels)


def train_task2_step(model: Module, batch: ClinicalBatch, ctx: Optional[ForwardContext] = None,
                     expected_slices: Optional[int] = None) -> Tensor:
    """Loss on the slice-averaged representation of multi-slice cases

    Any slice count of at least one is accepted unless expected_slices pins it.
    """
    if batch.images is None or batch.n_slices < 1:
        raise ShapeError("multi-slice training needs at least one image slice per case")
    if expected_slices is not None and batch.n_slices != expected_slices:
        raise ShapeError(f"expected {expected_slices} slices per case, got {batch.n_slices}")
    return compute_loss(model, batch, ctx or ForwardContext())


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    best_epoch: int
    best_val_loss: float
    history: List[EpochRecord] = field(default_factory=list)
    best_state: Dict[str, np.ndarray] = field(default_factory=dict)
    checkpoint_path: Optional[Path] = None
    log_path: Optional[Path] = None


def _weighted_mean(total: float, count: int) -> float:
    return total / count if count else float("nan")


def evaluate_loss(model: Module, pipeline: DataPipeline, records: Sequence[PatientRecord],
                  batch_size: int = 256) -> float:
    """Mean BCE with dropout off and eval preprocessing"""
    if not records:
        raise ContractError("cannot evaluate on an empty split")
    total, count = 0.0, 0
    ctx = ForwardContext(training=False)
    with no_grad():
        for batch in pipeline.batches(records, batch_size, train=False):
            total += compute_loss(model, batch, ctx).item() * batch.size
            count += batch.size
    return _weighted_mean(total, count)


def predict_proba(model: Module, pipeline: DataPipeline, records: Sequence[PatientRecord],
                  batch_size: int = 256) -> np.ndarray:
    """Sigmoid probabilities [N x C] in eval mode, in record order"""
    if not records:
        raise ContractError("cannot predict on an empty split")
    ctx = ForwardContext(training=False)
    outputs = []
    with no_grad():
        for batch in pipeline.batches(records, batch_size, train=False):
            outputs.append(ops.sigmoid(model(batch, ctx)))
    return np.concatenate(outputs, axis=0)


def _write_log(path: Path, history: List[EpochRecord]) -> None:
    frame = pd.DataFrame([vars(r) for r in history], columns=LOG_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n")


def train(model: Module, pipeline: DataPipeline, train_records: Sequence[PatientRecord],
          val_records: Sequence[PatientRecord], config: TrainConfig,
          out_dir: Optional[Union[str, Path]] = None, run_id: Optional[str] = None) -> TrainResult:
    """Train, keep the lowest-validation-loss weights (earlier epoch on ties) and load them back"""
    if not train_records:
        raise ContractError("training split is empty")
    if not val_records:
        raise ContractError("validation split is empty")
    train_ids = {r.id for r in train_records}
    overlap = train_ids.intersection(r.id for r in val_records)
    if overlap:
        raise ContractError(f"train and validation splits share {len(overlap)} records, e.g. {sorted(overlap)[0]}")

    run_id = run_id or uuid.uuid4().hex[:8]
    log = get_logger_with_context(__name__, run_id=run_id, seed=config.seed)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    params = model.parameters()
    optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    result = TrainResult(best_epoch=0, best_val_loss=float("inf"))
    log.info(f"🚀 Training {type(model).__name__} ({model.parameter_count()} parameters) on "
             f"{len(train_records)} records for {config.epochs} epochs")

    for epoch in range(1, config.epochs + 1):
        lr = learning_rate(config, epoch)
        optimizer.set_lr(lr)
        rng = np.random.default_rng([config.seed, epoch])
        total, count = 0.0, 0
        batches = pipeline.batches(train_records, config.batch_size, train=True, rng=rng)
        n_batches = -(-len(train_records) // config.batch_size)
        for index, batch in enumerate(tqdm(batches, total=n_batches, desc=f"epoch {epoch}",
                                           disable=not config.progress)):
            ctx = ForwardContext(training=True, rng=rng)
            reset_tape()
            optimizer.zero_grad()
            try:
                if config.task == 2 and batch.images is not None:
                    loss = train_task2_step(model, batch, ctx)
                else:
                    loss = compute_loss(model, batch, ctx)
                backward(loss)
                if config.grad_clip is not None:
                    clip_grad_norm(params, config.grad_clip)
                optimizer.step()
            except NonFiniteError as e:
                raise NonFiniteError(f"epoch {epoch} batch {index}: {e}") from e
            total += loss.item() * batch.size
            count += batch.size

        record = EpochRecord(epoch, _weighted_mean(total, count),
                             evaluate_loss(model, pipeline, val_records, config.batch_size), lr)
        result.history.append(record)
        log.info(f"epoch {epoch}: train_loss={record.train_loss:.6f} val_loss={record.val_loss:.6f} lr={lr:g}")

        if record.val_loss < result.best_val_loss:
            result.best_epoch, result.best_val_loss = epoch, record.val_loss
            result.best_state = model.state_dict()
            if out_path is not None:
                result.checkpoint_path = save_checkpoint(out_path / CHECKPOINT_FILE, result.best_state)
        if out_path is not None:
            result.log_path = out_path / LOG_FILE
            _write_log(result.log_path, result.history)

    model.load_state_dict(result.best_state)
    log.info(f"✅ Best epoch {result.best_epoch} with val_loss={result.best_val_loss:.6f}")
    return result
