"""
Experiment orchestration behind the CLI: data preparation, training runs, evaluation,
seed repeats, the ablation matrix and attention visualisation.
"""
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from app.core.error_handling import ConfigError, ContractError, handle_file_errors
from app.core.logger import get_logger_with_context
from app.core.run_config import RunConfig, load_resolved_config, write_resolved_config
from app.data.manifest import VOCAB_FILE, DatasetInfo, DatasetManifest, read_manifest
from app.data.pipeline import DataPipeline
from app.data.preprocessing import split_by_date
from app.data.records import PatientRecord
from app.data.synthetic import generate_synthetic_dataset
from app.engine.checkpoint import load_checkpoint, save_trace
from app.engine.module import Module
from app.models.attention import TEXT_TO_IMAGE
from app.models.baselines import (
    ABLATIONS, EarlyFusion, ImageOnlyViT, TextClassifier, ablation_spec, build_ablation, late_fusion_forward,
)
from app.models.mdt import MDT
from app.models.tokenizers import CC, PAD_ID, LabStats, Vocabulary
from app.services.interpret import (
    SHARE_ORDER, attention_rollout, capture_trace, cross_attention_gain, cross_attention_map, demographic_shares,
    export_heatmap, image_grid, lab_importance, modality_shares, top_quartile_mass, word_importance,
)
from app.services.metrics import EvalReport, evaluate_predictions, two_sample_ttest
from app.services.trainer import CHECKPOINT_FILE, TrainResult, predict_proba, train

logger = logging.getLogger(__name__)

STATS_FILE = "stats.json"
EVAL_DIR = "eval"
VIZ_DIR = "viz"
REPORT_CSV = "report.csv"
REPORT_JSON = "report.json"
SUMMARY_CSV = "ablation_summary.csv"
TTEST_CSV = "ablation_ttest.csv"
TOP_QUARTILE_CSV = "top_quartile.csv"
REFERENCE_VARIANT = "ha2"
IMAGE_ONLY = "image-only"

# component name -> (model, needs images); "" is the run directory itself
Components = Dict[str, Tuple[Module, bool]]


@dataclass
class PreparedData:
    manifest: DatasetManifest
    train: List[PatientRecord]
    val: List[PatientRecord]
    test: List[PatientRecord]
    stats: LabStats
    crop_area_min: float
    augment: bool

    @property
    def info(self) -> DatasetInfo:
        return self.manifest.info

    @property
    def records(self) -> List[PatientRecord]:
        return [*self.train, *self.val, *self.test]

    def pipeline(self, include_images: bool = True) -> DataPipeline:
        return DataPipeline(self.info.layout, self.stats, self.info.image_size, self.info.source_size,
                            crop_area_min=self.crop_area_min, augment=self.augment, include_images=include_images)


def prepare_data(config: RunConfig, stats: Optional[LabStats] = None) -> PreparedData:
    """Read the dataset, split it by admission date and fix the lab statistics

    Statistics are fitted on the training split unless a trained run supplies its own.
    """
    manifest = read_manifest(config.data_dir)
    train_records, val_records, test_records = split_by_date(manifest.load_records(),
                                                             manifest.info.split_boundaries)
    if stats is None:
        if not train_records:
            raise ContractError(f"{config.data_dir}: training split is empty")
        stats = DataPipeline.fit(train_records, manifest.layout, manifest.info.image_size,
                                 manifest.info.source_size).stats
    return PreparedData(manifest, train_records, val_records, test_records, stats,
                        config.crop_area_min, config.augment)


def build_components(config: RunConfig, info: DatasetInfo) -> Components:
    if config.model != "irene" and config.ablation is not None:
        raise ConfigError(f"ablations apply to the irene model, not {config.model}")
    if config.model == "irene":
        base = config.to_mdt_config(info)
        model = build_ablation(ablation_spec(config.ablation), base) if config.ablation else MDT(base)
        return {"": (model, model.config.use_image)}
    if config.model == "image-only":
        return {"": (ImageOnlyViT(config.to_vit_config(info)), True)}
    if config.model == "early-fusion":
        return {"": (EarlyFusion(config.to_fusion_config(info)), True)}
    text = TextClassifier(info.layout, config.dim, info.vocab_size, hidden=config.fusion_hidden,
                          dropout=config.vit_dropout, init_seed=config.seed)
    return {"image": (ImageOnlyViT(config.to_vit_config(info)), True), "text": (text, False)}


def _run_label(config: RunConfig) -> str:
    return f"{config.model}{'-' + config.ablation if config.ablation else ''}-s{config.seed}"


# --- commands ---------------------------------------------------------------

def run_generate(config: RunConfig) -> DatasetManifest:
    manifest = generate_synthetic_dataset(config.to_synthetic_spec(), config.data_dir, progress=config.progress)
    write_resolved_config(config, config.data_dir)
    return manifest


def run_training(config: RunConfig) -> Dict[str, TrainResult]:
    """Train every component of the selected model into out_dir"""
    run_dir = Path(config.out_dir)
    data = prepare_data(config)
    write_resolved_config(config, run_dir)
    data.stats.save(run_dir / STATS_FILE)

    train_config = config.to_train_config(data.info.task)
    results = {}
    for name, (model, with_images) in build_components(config, data.info).items():
        label = _run_label(config) + (f"-{name}" if name else "")
        results[name] = train(model, data.pipeline(with_images), data.train, data.val, train_config,
                              out_dir=run_dir / name, run_id=label)
    return results


@dataclass
class TrainedRun:
    config: RunConfig
    components: Components
    stats: LabStats


def load_trained(run_dir: Path, info: DatasetInfo) -> TrainedRun:
    run_dir = Path(run_dir)
    trained = load_resolved_config(run_dir)
    components = build_components(trained, info)
    for name, (model, _) in components.items():
        model.load_state_dict(load_checkpoint(run_dir / name / CHECKPOINT_FILE))
    logger.debug(f"Loaded {trained.model} run from {run_dir}")
    return TrainedRun(trained, components, LabStats.load(run_dir / STATS_FILE))


def predict_run(run: TrainedRun, data: PreparedData, records: Sequence[PatientRecord],
                batch_size: int) -> np.ndarray:
    if set(run.components) == {"image", "text"}:
        if not records:
            raise ContractError("cannot predict on an empty split")
        image_model, _ = run.components["image"]
        text_model, _ = run.components["text"]
        return np.concatenate([late_fusion_forward(batch, image_model, text_model)
                               for batch in data.pipeline().batches(records, batch_size, train=False)], axis=0)
    model, with_images = run.components[""]
    return predict_proba(model, data.pipeline(with_images), records, batch_size)


def run_evaluation(config: RunConfig, run_dir: Optional[Path] = None) -> EvalReport:
    """Score the test split of a trained run with bootstrap CIs

    Reports land in <run_dir>/eval next to the resolved evaluation config.
    """
    run_dir = Path(run_dir or config.trained_run_dir)
    info = read_manifest(config.data_dir).info
    run = load_trained(run_dir, info)
    data = prepare_data(config, stats=run.stats)
    if not data.test:
        raise ContractError(f"{config.data_dir}: test split is empty")

    probs = predict_run(run, data, data.test, config.batch_size)
    labels = np.stack([np.asarray(r.labels, dtype=np.int64) for r in data.test])
    report = evaluate_predictions(probs, labels, config.resolved_metric(info.task), config.n_boot, config.seed)

    out_dir = run_dir / EVAL_DIR
    write_resolved_config(config, out_dir)
    report.to_csv(out_dir / REPORT_CSV)
    report.to_json(out_dir / REPORT_JSON)
    logger.info(f"✅ Evaluation report written to {out_dir}")
    return report


# --- repeated seeds and ablations -------------------------------------------

def variant_config(config: RunConfig, variant: Optional[str], seed: int, out_dir: Path) -> RunConfig:
    """A copy of config for one (variant, seed) run; image-only swaps the model, others are ablations"""
    overrides = {"seed": seed, "out_dir": str(out_dir), "run_dir": None}
    if variant == IMAGE_ONLY:
        overrides.update(model=IMAGE_ONLY, ablation=None)
    elif variant is not None:
        overrides.update(model="irene", ablation=variant)
    return RunConfig.model_validate({**config.model_dump(), **overrides})


def run_seed_repeats(config: RunConfig, seeds: Sequence[int], variant: Optional[str] = None,
                     out_root: Optional[Path] = None) -> List[Tuple[int, float]]:
    """Train and evaluate one variant per seed; returns (seed, mean metric) pairs"""
    out_root = Path(out_root or config.out_dir)
    values = []
    for seed in seeds:
        run_config = variant_config(config, variant, seed, out_root / f"seed_{seed}")
        run_training(run_config)
        report = run_evaluation(run_config)
        values.append((seed, report.mean.value))
    return values


def _test_rollouts(run: TrainedRun, data: PreparedData, batch_size: int) -> List:
    model, with_images = run.components[""]
    relevance = []
    for batch in data.pipeline(with_images).batches(data.test, batch_size):
        trace, _ = capture_trace(model, batch)
        relevance.extend(attention_rollout(trace, case) for case in range(batch.size))
    return relevance


def cross_attention_gains(config: RunConfig, seeds: Sequence[int], out_root: Path) -> pd.DataFrame:
    """Per seed: mean top-quartile rollout mass of ha2 and uni over the test split, and their gap"""
    info = read_manifest(config.data_dir).info
    rows = []
    for seed in seeds:
        with_cross = load_trained(out_root / REFERENCE_VARIANT / f"seed_{seed}", info)
        without_cross = load_trained(out_root / "uni" / f"seed_{seed}", info)
        data = prepare_data(config, stats=with_cross.stats)
        pairs = list(zip(_test_rollouts(with_cross, data, config.batch_size),
                         _test_rollouts(without_cross, data, config.batch_size)))
        rows.append({
            "seed": seed,
            "ha2": float(np.mean([top_quartile_mass(a) for a, _ in pairs])),
            "uni": float(np.mean([top_quartile_mass(b) for _, b in pairs])),
            "gain": float(np.mean([cross_attention_gain(a, b) for a, b in pairs])),
        })
    return pd.DataFrame(rows, columns=["seed", "ha2", "uni", "gain"])


@handle_file_errors
def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.6f")
    return path


def run_ablation_matrix(config: RunConfig) -> pd.DataFrame:
    """Every ablation plus image-only over config.seeds seeds, with t-tests against ha2

    Every variant trains with cls pooling; the top-quartile table is computed on rollouts to the CLS token.
    """
    out_root = Path(config.out_dir)
    log = get_logger_with_context(__name__, command="ablate")
    if config.pooling != "cls":
        log.warning(f"Ablation matrix switches pooling from {config.pooling} to cls")
        config = config.model_copy(update={"pooling": "cls"})
    write_resolved_config(config, out_root)
    seeds = list(range(config.seed, config.seed + config.seeds))
    variants = [*ABLATIONS, IMAGE_ONLY]
    log.info(f"🚀 Ablation matrix: {len(variants)} variants x {len(seeds)} seeds")

    rows = []
    for variant in variants:
        for seed, value in run_seed_repeats(config, seeds, variant, out_root / variant):
            rows.append({"variant": variant, "seed": seed, "mean_metric": value})
    summary = pd.DataFrame(rows, columns=["variant", "seed", "mean_metric"])
    _write_frame(summary, out_root / SUMMARY_CSV)

    reference = summary.loc[summary.variant == REFERENCE_VARIANT, "mean_metric"].to_numpy()
    tests = []
    for variant in variants:
        if variant == REFERENCE_VARIANT:
            continue
        values = summary.loc[summary.variant == variant, "mean_metric"].to_numpy()
        result = two_sample_ttest(reference, values)
        tests.append({"variant": variant, "mean": values.mean(), "reference_mean": reference.mean(),
                      "statistic": result.statistic, "p_value": result.p_value, "df": result.df})
    _write_frame(pd.DataFrame(tests), out_root / TTEST_CSV)

    _write_frame(cross_attention_gains(config, seeds, out_root), out_root / TOP_QUARTILE_CSV)
    log.info(f"✅ Ablation summaries written to {out_root}")
    return summary


# --- visualisation ------------------------------------------------------------

def _find_case(data: PreparedData, case_id: Optional[str]) -> PatientRecord:
    if case_id is None:
        if not data.test:
            raise ContractError("test split is empty; pass --case-id")
        return data.test[0]
    for record in data.records:
        if record.id == case_id:
            return record
    raise ConfigError(f"unknown case id {case_id!r}")


def _ranked_cc_positions(cc: np.ndarray, cc_tokens: int, structured: bool,
                         importance: Optional[np.ndarray]) -> List[int]:
    """cc token positions, most relevant first; PAD words are never ranked"""
    positions = list(range(cc_tokens))
    if not structured and cc_tokens == cc.size:
        positions = [p for p in positions if int(cc[p]) != PAD_ID]
    if importance is not None:
        positions.sort(key=lambda p: (-importance[p], p))
    return positions


def _word_labels(data_dir: str, cc: np.ndarray, cc_tokens: int, structured: bool) -> List[str]:
    if structured:
        return [f"component_{i}" if cc_tokens == cc.size else "<mean>" for i in range(cc_tokens)]
    if cc_tokens != cc.size:
        return ["<mean>"]
    ids = [int(i) for i in cc]
    vocab_path = Path(data_dir) / VOCAB_FILE
    return Vocabulary.load(vocab_path).decode(ids) if vocab_path.is_file() else [str(i) for i in ids]


def run_visualization(config: RunConfig, run_dir: Optional[Path] = None) -> Dict:
    """Rollout shares, per-item relevance, heatmaps and the raw attention trace for one case"""
    run_dir = Path(run_dir or config.trained_run_dir)
    info = read_manifest(config.data_dir).info
    run = load_trained(run_dir, info)
    if run.config.model != "irene":
        raise ConfigError(f"viz needs an irene run, {run_dir} holds {run.config.model}")
    model, with_images = run.components[""]
    if model.config.pooling != "cls":
        raise ConfigError(f"viz needs a cls-pooled run for attention rollout, {run_dir} was trained with "
                          f"pooling={model.config.pooling}; retrain with --pooling cls")
    data = prepare_data(config, stats=run.stats)
    record = _find_case(data, config.case_id)

    out_dir = run_dir / VIZ_DIR / re.sub(r"[^A-Za-z0-9_.-]", "_", record.id)
    write_resolved_config(config, out_dir)
    batch = data.pipeline(with_images).collate([record], train=False)
    trace, logits = capture_trace(model, batch, grad_weighted=config.grad_weighted)

    structured = info.layout.structured_cc
    cc_tokens = trace.text_tags.count(CC)
    cc_ids = np.asarray(batch.cc[0])
    words = _word_labels(config.data_dir, cc_ids, cc_tokens, structured)
    summary = {
        "case_id": record.id,
        "labels": [int(v) for v in record.labels],
        "probabilities": [float(v) for v in expit(logits[0])],
        "pooling": model.config.pooling,
        "grad_weighted": config.grad_weighted,
    }

    relevance = attention_rollout(trace)
    shares = modality_shares(relevance)
    _write_frame(pd.DataFrame({"modality": list(SHARE_ORDER), "share": [shares[k] for k in SHARE_ORDER]}),
                 out_dir / "shares.csv")
    labs = lab_importance(relevance)
    _write_frame(pd.DataFrame({"item": range(labs.size), "relevance": labs}), out_dir / "lab_importance.csv")
    importance = word_importance(relevance)
    _write_frame(pd.DataFrame({"position": range(importance.size), "word": words[:importance.size],
                               "importance": importance}), out_dir / "word_importance.csv")
    if trace.grid_shape is not None:
        export_heatmap(image_grid(relevance), out_dir / "heatmap_pixels", info.image_size, title="rollout")
    summary["shares"] = shares
    summary["demographics"] = demographic_shares(relevance)
    summary["top_quartile_mass"] = top_quartile_mass(relevance)

    heatmaps = []
    if trace.stream(TEXT_TO_IMAGE) and cc_tokens:
        for rank, position in enumerate(_ranked_cc_positions(cc_ids, cc_tokens, structured, importance)[:config.top_k], 1):
            grid = cross_attention_map(trace, position, grad_weighted=config.grad_weighted)
            export_heatmap(grid, out_dir / f"heatmap_word_{rank}", info.image_size, title=words[position])
            heatmaps.append({"rank": rank, "position": position, "word": words[position]})
    summary["word_heatmaps"] = heatmaps

    save_trace(out_dir / "attention.attn",
               [(f"{r.block}:{r.stream}", r.weights) for r in trace.records], trace.modality_tags, trace.cls_index)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"✅ Attention artifacts for {record.id} written to {out_dir}")
    return summary
