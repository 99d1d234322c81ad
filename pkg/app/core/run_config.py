"""
Run configuration: one flat, typed set of knobs shared by every CLI command.

Values resolve as field defaults < config file < command-line flags.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Union, get_args

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.error_handling import ConfigError

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_FILE = "resolved_config.txt"
NONE_VALUES = {"none", "null", ""}

ModelKind = Literal["irene", "image-only", "early-fusion", "late-fusion"]


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # --- run selection ---
    model: ModelKind = "irene"
    ablation: Optional[str] = None
    seed: int = 0
    seeds: int = Field(default=5, ge=2)
    data_dir: str = "data"
    out_dir: str = "runs/latest"
    run_dir: Optional[str] = None

    # --- synthetic data ---
    task: Literal[1, 2] = 1
    n: int = Field(default=2000, ge=1)
    class_count: Optional[int] = Field(default=None, ge=1)
    n_cc: Optional[int] = Field(default=None, ge=1)
    n_lab: Optional[int] = Field(default=None, ge=1)
    n_slices: Optional[int] = Field(default=None, ge=1)
    image_size: int = Field(default=32, ge=1)
    source_size: Optional[int] = Field(default=None, ge=1)
    channels: int = Field(default=1, ge=1)
    patch: int = Field(default=16, ge=1)
    vocab_size: int = Field(default=512, ge=3)
    fraction: float = Field(default=0.7, ge=0.0, le=1.0)
    noise: float = Field(default=0.1, ge=0.0)
    prevalence: float = Field(default=0.3, gt=0.0, lt=1.0)
    train_fraction: float = Field(default=0.7, gt=0.0, lt=1.0)
    val_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)

    # --- preprocessing ---
    crop_area_min: float = Field(default=0.09, gt=0.0, le=1.0)
    augment: bool = True

    # --- unified model ---
    dim: int = Field(default=32, ge=1)
    heads: int = Field(default=4, ge=1)
    n_bidirectional: int = Field(default=2, ge=0)
    n_self: int = Field(default=10, ge=0)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    pooling: Literal["average", "cls"] = "average"
    lam: float = 1.0
    uni_directional: bool = False
    standard_residual: bool = False
    mask_padding: bool = False
    text_position_embedding: bool = False
    mlp_ratio: int = Field(default=4, ge=1)

    # --- baselines ---
    vit_depth: int = Field(default=12, ge=1)
    vit_dropout: float = Field(default=0.3, ge=0.0, lt=1.0)
    fusion_hidden: int = Field(default=1024, ge=1)
    branch_out: int = Field(default=512, ge=1)
    demo_hidden: int = Field(default=512, ge=1)

    # --- training ---
    lr: float = Field(default=3e-5, gt=0)
    weight_decay: float = Field(default=1e-2, ge=0)
    epochs: int = Field(default=30, ge=1)
    lr_drop_epoch: Optional[int] = Field(default=20, ge=1)
    lr_drop_factor: float = Field(default=10.0, gt=0)
    batch_size: int = Field(default=32, ge=1)
    grad_clip: Optional[float] = Field(default=None, gt=0)

    # --- evaluation and visualisation ---
    n_boot: int = Field(default=1000, ge=1)
    metric: Optional[Literal["auroc", "auprc"]] = None
    top_k: int = Field(default=3, ge=1)
    case_id: Optional[str] = None
    grad_weighted: bool = False
    progress: bool = False

    @field_validator("ablation")
    @classmethod
    def validate_ablation(cls, v):
        from app.models.baselines import ABLATIONS

        if v is not None and v not in ABLATIONS:
            raise ValueError(f"unknown ablation {v!r}; choose from {', '.join(ABLATIONS)}")
        return v

    @field_validator("task", mode="before")
    @classmethod
    def parse_task(cls, v):
        # CLI and file values arrive as strings
        return int(v) if isinstance(v, str) and v.strip().isdigit() else v

    def resolved_metric(self, task: int) -> str:
        return self.metric or ("auroc" if task == 1 else "auprc")

    @property
    def trained_run_dir(self) -> Path:
        return Path(self.run_dir or self.out_dir)

    # --- derived configs ---

    def to_synthetic_spec(self):
        from app.data.synthetic import SyntheticSpec

        return SyntheticSpec(
            task=self.task, n_records=self.n, class_count=self.class_count, n_cc=self.n_cc, n_lab=self.n_lab,
            n_slices=self.n_slices, image_size=self.image_size, source_size=self.source_size,
            channels=self.channels, patch=self.patch, vocab_size=self.vocab_size,
            cross_modal_fraction=self.fraction, noise=self.noise, prevalence=self.prevalence,
            train_fraction=self.train_fraction, val_fraction=self.val_fraction, seed=self.seed,
        )

    def to_mdt_config(self, info):
        """Architecture from this config, data shapes from the dataset info"""
        from app.models.mdt import MDTConfig

        return MDTConfig(
            task=info.task, dim=self.dim, heads=self.heads, n_bidirectional=self.n_bidirectional,
            n_self=self.n_self, dropout=self.dropout, pooling=self.pooling, uni_directional=self.uni_directional,
            standard_residual=self.standard_residual, lam=self.lam, class_count=info.class_count,
            n_cc=info.n_cc, n_lab=info.n_lab, vocab_size=info.vocab_size, image_size=info.image_size,
            patch=info.patch, channels=info.channels, mlp_ratio=self.mlp_ratio,
            mask_padding=self.mask_padding, text_position_embedding=self.text_position_embedding,
            init_seed=self.seed,
        )

    def to_vit_config(self, info):
        from app.models.baselines import ViTConfig

        return ViTConfig(
            task=info.task, dim=self.dim, heads=self.heads, depth=self.vit_depth, dropout=self.vit_dropout,
            mlp_ratio=self.mlp_ratio, image_size=info.image_size, patch=info.patch, channels=info.channels,
            class_count=info.class_count, init_seed=self.seed,
        )

    def to_fusion_config(self, info):
        from app.models.baselines import FusionConfig

        return FusionConfig(
            vit=self.to_vit_config(info), n_cc=info.n_cc, n_lab=info.n_lab, vocab_size=info.vocab_size,
            branch_hidden=self.fusion_hidden, branch_out=self.branch_out, demo_hidden=self.demo_hidden,
            fusion_hidden=self.fusion_hidden, dropout=self.vit_dropout,
        )

    def to_train_config(self, task: int):
        from app.services.trainer import TrainConfig

        return TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs, lr_drop_epoch=self.lr_drop_epoch,
            lr_drop_factor=self.lr_drop_factor, batch_size=self.batch_size, seed=self.seed, task=task,
            grad_clip=self.grad_clip, progress=self.progress,
        )


def config_key(name: str) -> str:
    return name.strip().lower().replace("-", "_")


def _clean(values: Mapping[str, Any], source: str) -> Dict[str, Any]:
    cleaned = {}
    for raw_key, value in values.items():
        key = config_key(raw_key)
        if key not in RunConfig.model_fields:
            raise ConfigError(f"{source}: unknown configuration key {raw_key!r}")
        if value is None or (isinstance(value, str) and value.strip().lower() in NONE_VALUES):
            value = None
        cleaned[key] = value
    return cleaned


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Flat key=value file; blank lines and # comments are ignored"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return _clean(dotenv_values(path, interpolate=False), str(path))


def _nullable(name: str) -> bool:
    return type(None) in get_args(RunConfig.model_fields[name].annotation)


def resolve_run_config(file_values: Optional[Mapping[str, Any]] = None,
                       cli_overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    merged = {**_clean(file_values or {}, "config file"), **_clean(cli_overrides or {}, "command line")}
    # "none" clears nullable fields; elsewhere it falls back to the default
    merged = {k: v for k, v in merged.items() if v is not None or _nullable(k)}
    return RunConfig.model_validate(merged)


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def write_resolved_config(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_FILE
    lines = [f"{key}={_format_value(value)}" for key, value in sorted(config.model_dump().items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug(f"💾 Resolved configuration written to {path}")
    return path


def load_resolved_config(run_dir: Union[str, Path]) -> RunConfig:
    path = Path(run_dir) / RESOLVED_CONFIG_FILE
    if not path.is_file():
        raise ConfigError(f"{run_dir} has no {RESOLVED_CONFIG_FILE}; is it a training run directory?")
    return resolve_run_config(load_config_file(path))
