"""Evaluation statistics: mechanism precision, detection PRF, Wilson/bootstrap CIs, ROC-AUC, AP."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .exceptions import UndefinedMetricError

logger = logging.getLogger(__name__)


def exact_mechanism_precision(y_pred, y_true) -> float:
    """Fraction of pairs whose top-scoring relation equals the true relation."""
    y_pred, y_true = np.asarray(y_pred), np.asarray(y_true)
    if y_pred.shape != y_true.shape:
        raise ValueError(f"shape mismatch: {y_pred.shape} vs {y_true.shape}")
    if y_pred.size == 0:
        raise UndefinedMetricError("exact-mechanism precision of an empty prediction set")
    return float(np.mean(y_pred == y_true))


def binary_prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Detection precision, recall and F1. A zero denominator yields 0 (logged)."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    if tp == fp == fn == 0:
        raise UndefinedMetricError("precision/recall/F1 undefined with all-zero counts")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        logger.info("binary_prf: precision and recall both 0, F1 set to 0")
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def wilson_ci(p_hat: float, n: int, z: float = 1.96) -> tuple[float, float]:
    if n <= 0:
        raise UndefinedMetricError("Wilson interval needs n >= 1")
    if not (0.0 <= p_hat <= 1.0):
        raise ValueError(f"p_hat must lie in [0, 1], got {p_hat}")
    z2 = z * z
    center = p_hat + z2 / (2 * n)
    half = z * math.sqrt(p_hat * (1 - p_hat) / n + z2 / (4 * n * n))
    denom = 1 + z2 / n
    low, high = (center - half) / denom, (center + half) / denom
    return max(0.0, low), min(1.0, high)


def bootstrap_ci(values, iterations: int = 1000, seed: int = 0, statistic=np.mean,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval.

    ``values`` is either an array resampled with replacement (``statistic``
    applied to each resample) or a callable ``resample(rng) -> float``.
    """
    if iterations < 100:
        raise ValueError("bootstrap needs at least 100 iterations")
    rng = np.random.default_rng(seed)
    if callable(values):
        stats = np.array([values(rng) for _ in range(iterations)], dtype=float)
    else:
        arr = np.asarray(values)
        if arr.size == 0:
            raise UndefinedMetricError("bootstrap of an empty sample")
        idx = rng.integers(0, len(arr), size=(iterations, len(arr)))
        if statistic is np.mean:
            stats = arr[idx].mean(axis=1)
        else:
            stats = np.array([statistic(arr[i]) for i in idx], dtype=float)
    tail = (1.0 - level) / 2.0 * 100.0
    low, high = np.percentile(stats, [tail, 100.0 - tail])
    return float(low), float(high)


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores vs {labels.shape[0]} labels")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties worth one half (Mann-Whitney)."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes")
    ranks = rankdata(scores)  # midranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision_stepwise(scores, labels) -> float:
    """Sum over score thresholds of precision times recall increment.

    Tied scores form one threshold block (the same convention as
    ``sklearn.metrics.average_precision_score``).
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_block = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_block]
    pp = (np.arange(len(s)) + 1)[last_of_block]
    precision = tp / pp
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * recall_gain))


def prevalence(labels) -> float:
    labels = np.asarray(labels).astype(bool)
    if labels.size == 0:
        raise UndefinedMetricError("prevalence of an empty set")
    return float(labels.mean())


def relative_fp_reduction(p_fusion: float, p_base: float) -> float:
    """``1 - (1/p_fusion - 1) / (1/p_base - 1)``: share of baseline false positives removed at equal TP."""
    for name, p in (("p_fusion", p_fusion), ("p_base", p_base)):
        if not (0.0 < p <= 1.0):
            raise ValueError(f"{name} must lie in (0, 1], got {p}")
    if p_base == 1.0:
        raise ZeroDivisionError("baseline precision is 1: no false positives to reduce")
    return 1.0 - (1.0 / p_fusion - 1.0) / (1.0 / p_base - 1.0)


def confusion_at(scores, labels, theta: float) -> tuple[int, int, int, int]:
    """``(tp, fp, fn, tn)`` when alerting on ``score >= theta``."""
    scores, labels = _check_binary(scores, labels)
    fired = scores >= theta
    tp = int(np.sum(fired & labels))
    fp = int(np.sum(fired & ~labels))
    fn = int(np.sum(~fired & labels))
    return tp, fp, fn, len(labels) - tp - fp - fn


def roc_curve_points(scores, labels):
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return np.r_[0.0, fp / max(fp[-1], 1)], np.r_[0.0, tp / max(tp[-1], 1)]


def pr_curve_points(scores, labels):
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    pp = (np.arange(len(s)) + 1)[last]
    return tp / max(labels.sum(), 1), tp / pp


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class EvalReport:
    """Metrics for one model under one regime (single seed or pooled)."""

    model: str
    regime: str
    seeds: list
    exact_precision: float
    wilson_ci: tuple
    bootstrap_ci: tuple
    detection_precision: float
    recall: float
    f1: float
    roc_auc: float
    ap_stepwise: float
    ap_baseline: float
    threshold: float
    n: dict = field(default_factory=dict)
    pool_checksums: dict = field(default_factory=dict)
    config_hash: str = ""
    spread: dict = field(default_factory=dict)

    def check(self) -> None:
        for name in ("exact_precision", "detection_precision", "recall", "f1", "roc_auc",
                     "ap_stepwise", "ap_baseline"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("wilson_ci", "bootstrap_ci"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} has low > high")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wilson_ci"] = list(self.wilson_ci)
        d["bootstrap_ci"] = list(self.bootstrap_ci)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["wilson_ci"] = tuple(d["wilson_ci"])
        d["bootstrap_ci"] = tuple(d["bootstrap_ci"])
        return cls(**d)


TABLE_COLUMNS = [("roc_auc", "ROC-AUC"), ("ap_stepwise", "AP (stepwise)"), ("ap_baseline", "AP (baseline)"),
                 ("f1", "F1 (detection)"), ("exact_precision", "Precision")]


def format_report_table(reports) -> str:
    """Plain-text table, one row per report, ``mean ± std`` where a spread is recorded."""
    header = ["Model", "Regime"] + [label for _, label in TABLE_COLUMNS] + ["Wilson 95% CI"]
    rows = []
    for r in reports:
        cells = [r.model, r.regime]
        for key, _ in TABLE_COLUMNS:
            v = getattr(r, key)
            sd = r.spread.get(key)
            cells.append(f"{v:.4f} ± {sd:.4f}" if sd is not None else f"{v:.4f}")
        cells.append(f"[{r.wilson_ci[0]:.4f}, {r.wilson_ci[1]:.4f}]")
        rows.append(cells)
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)
