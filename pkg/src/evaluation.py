"""Confusion counts, classification metrics, ROC curves and AUC."""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class MetricError(Exception):
    """Base class for evaluation errors."""


class UndefinedAUCError(MetricError):
    """AUC needs at least one positive and one negative label."""


class ReportError(MetricError):
    """Report cannot be rendered."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    def mirrored(self) -> "ConfusionCounts":
        """Counts for the complementary class of a binary problem."""
        return ConfusionCounts(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


def _as_matrix(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr[:, None] if arr.ndim == 1 else arr


def confusion(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> List[ConfusionCounts]:
    """Per-column counts; a score equal to ``threshold`` counts as positive."""
    s = _as_matrix(scores)
    y = _as_matrix(labels)
    if s.shape != y.shape:
        raise MetricError(f"scores shape {s.shape} does not match labels shape {y.shape}")
    pred = s >= threshold
    truth = y > 0.5
    out = []
    for c in range(s.shape[1]):
        p, t = pred[:, c], truth[:, c]
        out.append(
            ConfusionCounts(
                tp=int(np.sum(p & t)),
                fp=int(np.sum(p & ~t)),
                fn=int(np.sum(~p & t)),
                tn=int(np.sum(~p & ~t)),
            )
        )
    return out


def binary_confusion(
    abnormal_scores: np.ndarray, abnormal_targets: np.ndarray, threshold: float = 0.5
) -> List[ConfusionCounts]:
    """Counts for [Normal, Abnormal] from the abnormal-class score alone."""
    abnormal = confusion(abnormal_scores, abnormal_targets, threshold)[0]
    return [abnormal.mirrored(), abnormal]


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def precision(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fp)


def recall(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fn)


def specificity(counts: ConfusionCounts) -> float:
    return _ratio(counts.tn, counts.tn + counts.fp)


def npv(counts: ConfusionCounts) -> float:
    return _ratio(counts.tn, counts.tn + counts.fn)


def accuracy(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp + counts.tn, counts.total)


sensitivity = recall
ppv = precision


def degenerate_metrics(counts: ConfusionCounts) -> List[str]:
    """Names of metrics whose denominator is zero (reported as 0.0)."""
    dens = {
        "precision": counts.tp + counts.fp,
        "recall": counts.tp + counts.fn,
        "specificity": counts.tn + counts.fp,
        "npv": counts.tn + counts.fn,
        "accuracy": counts.total,
    }
    return [name for name, den in dens.items() if den == 0]


def f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class RocResult:
    """ROC points over all distinct thresholds plus both AUC estimates."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    auc_pairwise: float


def _binary_labels(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("ROC labels must be 0/1")
    return y


def auc_pairwise(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney statistic with ties credited 0.5, via average ranks."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary_labels(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"AUC undefined with {n_pos} positive(s) and {n_neg} negative(s)")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg_rank = ends - (counts - 1) / 2.0
    rank_sum = float(avg_rank[inverse][y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> RocResult:
    """ROC curve and trapezoidal AUC, cross-checked against pair counting."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary_labels(labels)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"AUC undefined with {n_pos} positive(s) and {n_neg} negative(s)")

    values, inverse = np.unique(s, return_inverse=True)
    pos_per = np.bincount(inverse, weights=y, minlength=values.size)
    neg_per = np.bincount(inverse, weights=1.0 - y, minlength=values.size)
    # Walk thresholds from the highest score down.
    tpr = np.concatenate([[0.0], np.cumsum(pos_per[::-1]) / n_pos])
    fpr = np.concatenate([[0.0], np.cumsum(neg_per[::-1]) / n_neg])
    thresholds = np.concatenate([[np.inf], values[::-1]])
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(fpr, tpr, thresholds, area, auc_pairwise(s, y))


@dataclass
class ClassMetrics:
    """One report row."""

    name: str
    counts: ConfusionCounts
    precision: float
    recall: float
    specificity: float
    npv: float
    f1: float
    accuracy: float
    auc: Optional[float]
    degenerate: List[str] = field(default_factory=list)

    @property
    def ppv(self) -> float:
        return self.precision

    @property
    def sensitivity(self) -> float:
        return self.recall

    @classmethod
    def from_counts(cls, name: str, counts: ConfusionCounts, auc: Optional[float]) -> "ClassMetrics":
        p, r = precision(counts), recall(counts)
        return cls(
            name=name,
            counts=counts,
            precision=p,
            recall=r,
            specificity=specificity(counts),
            npv=npv(counts),
            f1=f1(p, r),
            accuracy=accuracy(counts),
            auc=auc,
            degenerate=degenerate_metrics(counts),
        )

    def to_dict(self) -> Dict[str, Any]:
        data = {k: v for k, v in asdict(self).items() if k != "counts"}
        data["counts"] = asdict(self.counts)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ClassMetrics":
        fields = dict(data)
        fields["counts"] = ConfusionCounts(**fields["counts"])
        return cls(**fields)


METRIC_COLUMNS = ("precision", "recall", "f1", "auc", "specificity", "npv", "accuracy")


@dataclass
class EvalReport:
    """Per-class metrics at one threshold with macro averages."""

    kind: str
    threshold: float
    rows: List[ClassMetrics]
    n_samples: int

    @property
    def class_names(self) -> List[str]:
        return [row.name for row in self.rows]

    @property
    def macro(self) -> Dict[str, Optional[float]]:
        out: Dict[str, Optional[float]] = {}
        for column in METRIC_COLUMNS:
            values = [getattr(r, column) for r in self.rows if getattr(r, column) is not None]
            out[column] = float(np.mean(values)) if values else None
        return out

    def row(self, name: str) -> ClassMetrics:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "threshold": self.threshold,
            "n_samples": self.n_samples,
            "rows": [r.to_dict() for r in self.rows],
            "macro": self.macro,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        return cls(
            kind=data["kind"],
            threshold=float(data["threshold"]),
            rows=[ClassMetrics.from_dict(r) for r in data["rows"]],
            n_samples=int(data["n_samples"]),
        )


def _safe_auc(scores: np.ndarray, labels: np.ndarray, name: str) -> Optional[float]:
    try:
        return roc_auc(scores, labels).auc
    except UndefinedAUCError as e:
        logger.warning(f"AUC for '{name}' not reported: {e}")
        return None


def evaluate_triage(
    probs: np.ndarray,
    abnormal_targets: np.ndarray,
    threshold: float = 0.5,
    class_names: Sequence[str] = ("Normal", "Abnormal"),
) -> EvalReport:
    """Stage-1 report; the Normal row mirrors the Abnormal row."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(abnormal_targets, dtype=np.float64).ravel()
    if probs.ndim != 2 or probs.shape[1] != 2 or probs.shape[0] != targets.size:
        raise MetricError(f"expected ({targets.size}, 2) probabilities, got {probs.shape}")
    normal_counts, abnormal_counts = binary_confusion(probs[:, 1], targets, threshold)
    auc = _safe_auc(probs[:, 1], targets, class_names[1])
    rows = [
        ClassMetrics.from_counts(class_names[0], normal_counts, auc),
        ClassMetrics.from_counts(class_names[1], abnormal_counts, auc),
    ]
    return EvalReport("triage", threshold, rows, int(targets.size))


def evaluate_multilabel(
    scores: np.ndarray, labels: np.ndarray, class_names: Sequence[str], threshold: float = 0.5
) -> EvalReport:
    """One-vs-rest report per class for sigmoid outputs."""
    s = _as_matrix(scores)
    y = _as_matrix(labels)
    if s.shape[1] != len(class_names):
        raise MetricError(f"{s.shape[1]} score columns for {len(class_names)} class names")
    counts = confusion(s, y, threshold)
    rows = [
        ClassMetrics.from_counts(name, c, _safe_auc(s[:, i], y[:, i], name))
        for i, (name, c) in enumerate(zip(class_names, counts))
    ]
    return EvalReport("pathology", threshold, rows, int(s.shape[0]))


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AUC over columns where it is defined; NaN when none is."""
    s = _as_matrix(scores)
    y = _as_matrix(labels)
    values = []
    for c in range(s.shape[1]):
        try:
            values.append(roc_auc(s[:, c], y[:, c]).auc)
        except UndefinedAUCError:
            continue
    return float(np.mean(values)) if values else float("nan")


def threshold_sweep(
    scores: np.ndarray,
    labels: np.ndarray,
    grid: Sequence[float],
    class_names: Sequence[str],
) -> List[Dict[str, Any]]:
    """Metric rows for every (threshold, class) pair.

    Thresholds above every score leave all samples negative.
    """
    s = _as_matrix(scores)
    y = _as_matrix(labels)
    rows = []
    for threshold in grid:
        for name, c in zip(class_names, confusion(s, y, float(threshold))):
            m = ClassMetrics.from_counts(name, c, None)
            rows.append(
                {
                    "threshold": float(threshold),
                    "class": name,
                    "tp": c.tp,
                    "fp": c.fp,
                    "fn": c.fn,
                    "tn": c.tn,
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "specificity": m.specificity,
                    "npv": m.npv,
                    "accuracy": m.accuracy,
                }
            )
    return rows


def default_grid(step: float = 0.05) -> List[float]:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(1, n)]


def counts_table(counts: ConfusionCounts) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """2x2 matrix laid out as ((TN, FP), (FN, TP))."""
    return ((counts.tn, counts.fp), (counts.fn, counts.tp))
