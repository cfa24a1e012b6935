"""Detection -> mechanism inference with a validation-calibrated alert threshold."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.utils.validation import check_is_fitted

from .exceptions import UndefinedMetricError

logger = logging.getLogger(__name__)

NO_ALERT = -1


def mechanism_logits(model, X) -> np.ndarray:
    return np.asarray(model.decision_function(X), float)


class LogitBinaryHead(ClassifierMixin, BaseEstimator):
    """Separately trained detector: logistic regression over a scorer's relation logits.

    ``fit(X, y)`` takes drug pairs with binary interaction labels. The wrapped
    scorer is used as-is and never refitted; its logits stay the mechanism head.
    """

    def __init__(self, scorer=None, C=1.0):
        self.scorer = scorer
        self.C = C

    def fit(self, X, y):
        y = np.asarray(y).astype(int)
        if set(np.unique(y)) != {0, 1}:
            raise UndefinedMetricError("the binary head needs both interacting and non-interacting pairs")
        self.head_ = LogisticRegression(C=self.C, max_iter=1000).fit(mechanism_logits(self.scorer, X), y)
        self.classes_ = self.head_.classes_
        return self

    def detection_score(self, X):
        check_is_fitted(self, "head_")
        return self.head_.decision_function(mechanism_logits(self.scorer, X))

    def decision_function(self, X):
        return mechanism_logits(self.scorer, X)

    def predict(self, X):
        return (self.detection_score(X) >= 0).astype(int)


def detection_score(X, model) -> np.ndarray:
    """Per-pair alert score; defaults to the maximum relation logit."""
    if hasattr(model, "detection_score"):
        return np.asarray(model.detection_score(X), float)
    return mechanism_logits(model, X).max(axis=1)


@dataclass
class Threshold:
    theta_star: float
    target_tpr: float
    achieved_tpr: float
    achieved_precision: float
    degenerate: bool = False

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Threshold":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def calibrate_threshold(val_scores, val_labels, target_tpr: float = 0.90) -> Threshold:
    """Pick the alert cut-off on validation data.

    Candidates are the distinct validation scores (alert when
    ``score >= theta``). Among those reaching ``TPR >= target_tpr`` the one
    with the highest precision wins, ties going to the higher threshold. If
    none reaches the target, the lowest score is returned with a warning.
    """
    s = np.asarray(val_scores, float).reshape(-1)
    y = np.asarray(val_labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise UndefinedMetricError("calibration needs at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    cands = s_sorted[last]                      # descending distinct scores
    tp = np.cumsum(y_sorted)[last]
    fired = (np.arange(len(s)) + 1)[last]
    tpr = tp / n_pos
    prec = tp / fired
    degenerate = len(cands) == 1
    if degenerate:
        logger.warning("calibrate_threshold: all validation scores are equal; single candidate threshold")
    ok = np.flatnonzero(tpr >= target_tpr - 1e-12)
    if ok.size == 0:
        logger.warning("calibrate_threshold: no threshold reaches TPR %.3f; using the minimum score",
                       target_tpr)
        i = len(cands) - 1
    else:
        best = prec[ok].max()
        # ok is ordered from high to low threshold, so the first maximiser is the highest theta
        i = int(ok[np.flatnonzero(prec[ok] == best)[0]])
    return Threshold(float(cands[i]), float(target_tpr), float(tpr[i]), float(prec[i]), degenerate)


@dataclass
class Alert:
    pair: tuple
    score: float
    fired: bool
    mechanism: int | None
    mechanism_scores: np.ndarray = field(repr=False)

    def to_record(self) -> dict:
        return {"h": int(self.pair[0]), "t": int(self.pair[1]), "score": float(self.score),
                "fired": bool(self.fired), "mechanism": self.mechanism}


def infer(pair, detector, classifier, theta) -> Alert:
    """Alert when the detector score reaches ``theta``; then report the top mechanism.

    ``np.argmax`` breaks exact ties toward the lowest relation index.
    """
    return infer_batch(np.asarray([pair]), detector, classifier, theta)[0]


def infer_batch(pairs, detector, classifier, theta) -> list[Alert]:
    theta = theta.theta_star if isinstance(theta, Threshold) else float(theta)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    scores = detection_score(pairs, detector)
    logits = mechanism_logits(classifier, pairs)
    fired = scores >= theta
    mech = np.argmax(logits, axis=1)
    return [Alert((int(h), int(t)), float(sc), bool(f), int(m) if f else None, z)
            for (h, t), sc, f, m, z in zip(pairs.tolist(), scores, fired, mech, logits)]


class TwoHeadClassifier(ClassifierMixin, BaseEstimator):
    """Meta-estimator: calibrate a detector on validation pairs, classify fired alerts.

    ``fit(X_val, y_val)`` only calibrates; both heads must already be
    fitted. ``y_val`` is 1 for interacting pairs, 0 otherwise. ``predict``
    returns the mechanism index for fired alerts and -1 elsewhere.
    """

    def __init__(self, detector=None, classifier=None, target_tpr=0.90):
        self.detector = detector
        self.classifier = classifier
        self.target_tpr = target_tpr

    def fit(self, X, y):
        clf = self.classifier if self.classifier is not None else self.detector
        self.classifier_ = clf
        self.threshold_ = calibrate_threshold(detection_score(X, self.detector), y, self.target_tpr)
        self.classes_ = np.arange(-1, mechanism_logits(clf, np.asarray(X)[:1]).shape[1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "threshold_")
        return detection_score(X, self.detector)

    def alerts(self, X):
        check_is_fitted(self, "threshold_")
        return self.decision_function(X) >= self.threshold_.theta_star

    def predict(self, X):
        fired = self.alerts(X)
        mech = np.argmax(mechanism_logits(self.classifier_, X), axis=1)
        return np.where(fired, mech, NO_ALERT)
