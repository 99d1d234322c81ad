"""Ranking metrics, bootstrap confidence intervals and the pooled two-sample t-test."""

import json
import logging
import math
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import rankdata, ttest_ind
from sklearn.metrics import average_precision_score

from app.core.error_handling import ContractError, ShapeError, UndefinedMetricError, handle_file_errors

logger = logging.getLogger(__name__)

MetricName = Literal["auroc", "auprc"]
MetricFn = Callable[[np.ndarray, np.ndarray], float]


def _binary_inputs(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("labels must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise ContractError("scores must be finite")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney form: P(s+ > s-) + P(s+ == s-) / 2, ties by midrank"""
    scores, labels = _binary_inputs(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUROC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision; equal scores form one threshold"""
    scores, labels = _binary_inputs(scores, labels)
    if labels.sum() == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    return float(average_precision_score(labels, scores))


METRICS = {"auroc": auroc, "auprc": auprc}


def metric_fn(name: str) -> MetricFn:
    try:
        return METRICS[name]
    except KeyError:
        raise ContractError(f"unknown metric {name!r}; choose auroc or auprc") from None


def mean_metric(metric: MetricFn) -> MetricFn:
    """Class-averaged metric over N x C score/label matrices"""
    def apply(scores: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean([metric(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]))
    return apply


def percentile_indices(n_boot: int) -> Tuple[int, int]:
    """Positions of the 2.5th and 97.5th percentiles in n_boot sorted values"""
    lo = max((25 * n_boot + 999) // 1000 - 1, 0)
    hi = (975 * n_boot + 999) // 1000 - 1
    return lo, hi


def bootstrap_ci(metric: MetricFn, scores, labels, n_boot: int = 1000, seed: int = 0) -> Tuple[float, float]:
    """Percentile CI over case resamples; resample b draws from default_rng(seed + b)

    Resamples where the metric is undefined are redrawn from the same stream.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape[0] != labels.shape[0]:
        raise ShapeError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    if n_boot < 1:
        raise ContractError(f"n_boot must be positive, got {n_boot}")
    metric(scores, labels)  # must be defined on the full sample

    n = scores.shape[0]
    values = np.empty(n_boot, dtype=np.float64)
    undefined = 0
    for b in range(n_boot):
        rng = np.random.default_rng(seed + b)
        while True:
            rows = rng.integers(0, n, size=n)
            try:
                values[b] = metric(scores[rows], labels[rows])
                break
            except UndefinedMetricError:
                undefined += 1
                if undefined > n_boot / 2:
                    raise UndefinedMetricError(
                        f"metric undefined on {undefined} resamples (n_boot={n_boot}, n={n}, "
                        f"positives={int(np.asarray(labels).sum())}); the sample is too small or too imbalanced"
                    )
    if undefined:
        logger.debug(f"Bootstrap redrew {undefined} single-class resamples")
    values.sort()
    lo, hi = percentile_indices(n_boot)
    return float(values[lo]), float(values[hi])


class TTestResult(BaseModel):
    statistic: float
    p_value: float
    df: int


def two_sample_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided equal-variance (pooled) t-test"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ContractError(f"t-test needs at least 2 values per sample, got {a.size} and {b.size}")
    df = a.size + b.size - 2
    if np.var(a) == 0 and np.var(b) == 0:
        gap = a.mean() - b.mean()
        if gap == 0:
            return TTestResult(statistic=0.0, p_value=1.0, df=df)
        return TTestResult(statistic=math.copysign(math.inf, gap), p_value=0.0, df=df)
    result = ttest_ind(a, b, equal_var=True)
    return TTestResult(statistic=float(result.statistic), p_value=float(result.pvalue), df=df)


class MetricEntry(BaseModel):
    name: str
    value: float
    lo: float
    hi: float


class EvalReport(BaseModel):
    """Per-class metric with bootstrap CIs plus the class mean"""
    model_config = ConfigDict(extra="forbid")

    metric: MetricName
    classes: List[MetricEntry]
    mean: MetricEntry
    n_bootstrap: int = Field(ge=1)
    seed: int
    n_cases: int

    def rows(self) -> List[MetricEntry]:
        return [*self.classes, self.mean]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.model_dump() for e in self.rows()], columns=["name", "value", "lo", "hi"])

    @handle_file_errors
    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path

    @handle_file_errors
    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.model_dump(), indent=2) + "\n", encoding="utf-8")
        return path


def evaluate_predictions(probs: np.ndarray, labels: np.ndarray, metric: MetricName = "auroc",
                         n_boot: int = 1000, seed: int = 0,
                         class_names: Optional[Sequence[str]] = None) -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ShapeError(f"probabilities {probs.shape} and labels {labels.shape} must be matching N x C arrays")
    names = list(class_names) if class_names is not None else [f"class_{c}" for c in range(probs.shape[1])]
    if len(names) != probs.shape[1]:
        raise ShapeError(f"{len(names)} class names for {probs.shape[1]} classes")

    fn = metric_fn(metric)
    entries = []
    for c, name in enumerate(names):
        try:
            value = fn(probs[:, c], labels[:, c])
        except UndefinedMetricError as e:
            raise UndefinedMetricError(f"{name}: {e}") from e
        lo, hi = bootstrap_ci(fn, probs[:, c], labels[:, c], n_boot, seed)
        entries.append(MetricEntry(name=name, value=value, lo=lo, hi=hi))

    averaged = mean_metric(fn)
    lo, hi = bootstrap_ci(averaged, probs, labels, n_boot, seed)
    mean = MetricEntry(name="mean", value=averaged(probs, labels), lo=lo, hi=hi)
    logger.info(f"{metric.upper()} mean={mean.value:.4f} ({mean.lo:.4f}, {mean.hi:.4f}) over {probs.shape[0]} cases")
    return EvalReport(metric=metric, classes=entries, mean=mean, n_bootstrap=n_boot, seed=seed,
                      n_cases=probs.shape[0])
