"""Feature-only relation MLP, soft-target distillation, and the feature-MLP baseline.

The student maps a pairwise feature vector ``x`` to ``R`` relation logits
with one hidden ReLU layer. Distillation converts cached teacher logits into
per-relation sigmoid targets and mixes two mean-over-relations BCE terms,
one against those soft targets and one against the one-hot hard label.
Samples with no hard label contribute only the weighted KD term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit, log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.pipeline import Pipeline
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import ConfigError, TrainingError
from .features import PairFeaturizer
from .graph import SplitPlan, verify_no_leakage
from .optim import make_optimizer, minibatches
from .teacher import finite_difference_check

logger = logging.getLogger(__name__)

UNLABELED = -1       # no hard label: KD term only
NO_INTERACTION = -2  # known non-interacting pair: hard target is the all-zero vector


@dataclass
class StudentParams:
    W1: np.ndarray  # (H_s, |x|)
    b1: np.ndarray  # (H_s,)
    W2: np.ndarray  # (R, H_s)
    b2: np.ndarray  # (R,)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "StudentParams":
        return StudentParams(**{k: v.copy() for k, v in self.as_dict().items()})

    @property
    def n_relations(self) -> int:
        return self.W2.shape[0]

    @classmethod
    def initialize(cls, n_inputs: int, hidden: int, n_relations: int, rng=None) -> "StudentParams":
        rng = np.random.default_rng(rng)

        def xavier(fan_out, fan_in):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, (fan_out, fan_in))

        return cls(W1=xavier(hidden, n_inputs), b1=np.zeros(hidden),
                   W2=xavier(n_relations, hidden), b2=np.zeros(n_relations))


def _hidden(x, params):
    return np.maximum(x @ params.W1.T + params.b1, 0.0)


def student_forward(x, params: StudentParams) -> np.ndarray:
    """``W2 relu(W1 x + b1) + b2`` for a single vector or a row batch."""
    x = np.asarray(x, float)
    if x.shape[-1] != params.W1.shape[1]:
        raise ValueError(f"feature width {x.shape[-1]} does not match W1 ({params.W1.shape[1]} columns)")
    return _hidden(x, params) @ params.W2.T + params.b2


def soft_targets(z_t, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return expit(np.asarray(z_t, float) / tau)


def bce_with_logits(z, target) -> np.ndarray:
    """Elementwise ``-t log sigmoid(z) - (1-t) log(1-sigmoid(z))`` computed from logits."""
    z = np.asarray(z, float)
    return np.logaddexp(0.0, z) - z * target


def kd_loss(z_s, q):
    """Mean-over-relations BCE against soft targets; per row for 2-D input."""
    z_s, q = np.asarray(z_s, float), np.asarray(q, float)
    if z_s.shape != q.shape:
        raise ValueError(f"shape mismatch: {z_s.shape} vs {q.shape}")
    out = bce_with_logits(z_s, q).mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def one_hot(y, n_relations: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if np.any((y < 0) | (y >= n_relations)):
        raise ValueError(f"relation label outside [0, {n_relations})")
    out = np.zeros(y.shape + (n_relations,))
    np.put_along_axis(out, y[..., None], 1.0, axis=-1)
    return out


def hard_targets(y, n_relations: int) -> np.ndarray:
    """One-hot rows for relation labels, all-zero rows for ``NO_INTERACTION``."""
    y = np.asarray(y, dtype=np.int64)
    none = y == NO_INTERACTION
    out = one_hot(np.where(none, 0, y), n_relations)
    out[none] = 0.0
    return out


def sup_loss(z_s, y):
    """Mean-over-relations BCE against the hard label (one-hot, or zeros for ``NO_INTERACTION``)."""
    z_s = np.asarray(z_s, float)
    out = bce_with_logits(z_s, hard_targets(y, z_s.shape[-1])).mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy_bernoulli(q) -> float | np.ndarray:
    """Mean per-relation Bernoulli entropy of ``q``: the minimum of :func:`kd_loss`."""
    q = np.asarray(q, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(q > 0, q * np.log(q), 0.0) + np.where(q < 1, (1 - q) * np.log1p(-q), 0.0))
    out = h.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class DistillTargets:
    q: np.ndarray
    y: object = None
    tau: float = 1.0

    @classmethod
    def from_logits(cls, z_t, y=None, tau: float = 1.0) -> "DistillTargets":
        return cls(q=soft_targets(z_t, tau), y=y, tau=tau)


def combined_loss(z_s, targets: DistillTargets, alpha: float = 0.5):
    """``alpha * L_KD + (1 - alpha) * L_sup``; reduces to ``alpha * L_KD`` without a label.

    For batches, ``targets.y`` may hold ``UNLABELED`` (-1) entries; those rows
    get exactly ``alpha * kd_loss``.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    z_s = np.asarray(z_s, float)
    kd = alpha * kd_loss(z_s, targets.q)
    if targets.y is None:
        return kd
    y = np.asarray(targets.y, dtype=np.int64)
    labeled = y != UNLABELED
    if z_s.ndim == 1:
        return kd + (1.0 - alpha) * sup_loss(z_s, int(y)) if labeled else kd
    sup = np.zeros(len(y))
    if labeled.any():
        sup[labeled] = sup_loss(z_s[labeled], y[labeled])
    return np.where(labeled, kd + (1.0 - alpha) * sup, kd)


def _loss_and_dz(z, y, q, alpha, kd_mode="bce", z_t=None, tau=1.0):
    """Mean loss over rows and ``dL/dz``.

    ``y`` codes: ``r >= 0`` one-hot target, ``NO_INTERACTION`` all-zero
    target, ``UNLABELED`` no hard target. With ``q`` None the objective is
    plain supervised BCE and unlabeled rows contribute nothing.
    """
    n, R = z.shape
    y = np.asarray(y, dtype=np.int64)
    labeled = y != UNLABELED
    mech = y >= 0
    hard = np.zeros_like(z)
    if mech.any():
        hard[mech] = one_hot(y[mech], R)
    p = expit(z)
    if q is None:
        w = labeled.astype(float)
        losses = w * bce_with_logits(z, hard).mean(axis=1)
        dz = w[:, None] * (p - hard) / R
    else:
        sup_w = np.where(labeled, 1.0 - alpha, 0.0)[:, None]
        sup = bce_with_logits(z, hard).mean(axis=1)
        if kd_mode == "kl":
            pt = softmax(z_t / tau, axis=1)
            ls = log_softmax(z, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                kd = np.sum(np.where(pt > 0, pt * (np.log(pt) - ls), 0.0), axis=1)
            d_kd = softmax(z, axis=1) - pt
        else:
            kd = bce_with_logits(z, q).mean(axis=1)
            d_kd = (p - q) / R
        losses = alpha * kd + sup_w[:, 0] * sup
        dz = alpha * d_kd + sup_w * (p - hard) / R
    return float(losses.mean()), dz / n


def student_loss_and_grads(params: StudentParams, x, y, q=None, alpha=0.5, kd_mode="bce",
                           z_t=None, tau=1.0):
    x = np.asarray(x, float)
    pre = x @ params.W1.T + params.b1
    hid = np.maximum(pre, 0.0)
    z = hid @ params.W2.T + params.b2
    loss, dz = _loss_and_dz(z, y, q, alpha, kd_mode, z_t, tau)
    dhid = (dz @ params.W2) * (pre > 0)
    grads = {"W2": dz.T @ hid, "b2": dz.sum(axis=0), "W1": dhid.T @ x, "b1": dhid.sum(axis=0)}
    return loss, grads


def gradient_check_student(params: StudentParams, sample, epsilon: float = 1e-4,
                           alpha: float = 0.5, grads: dict | None = None) -> float:
    """Worst per-tensor relative error of the analytic student gradient.

    ``sample`` is ``(x, y, q)``; ``q`` may be None for the supervised-only
    objective.
    """
    x, y, q = sample
    params = params.copy()
    if grads is None:
        _, grads = student_loss_and_grads(params, x, y, q, alpha)

    def loss_fn():
        z = student_forward(x, params)
        return _loss_and_dz(z, y, q, alpha)[0]

    return max(finite_difference_check(loss_fn, params.as_dict(), grads, epsilon).values())


class RelationMLP(ClassifierMixin, BaseEstimator):
    """One-hidden-layer MLP over pairwise features, trained with per-relation BCE.

    ``y`` holds relation indices; ``NO_INTERACTION`` (-2) marks pairs known
    not to interact (all-zero target) and ``UNLABELED`` (-1) rows carry no
    supervised target. This is the feature-only baseline;
    :class:`DistilledStudent` adds the distillation term.
    """

    def __init__(self, n_relations=None, hidden=128, lr=0.1, weight_decay=1e-4, batch_size=1024,
                 epochs=30, optimizer="sgd", seed=0, verbose=False):
        self.n_relations = n_relations
        self.hidden = hidden
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.optimizer = optimizer
        self.seed = seed
        self.verbose = verbose

    def _setup(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
        R = self.n_relations if self.n_relations is not None else int(y.max()) + 1
        if np.any((y < NO_INTERACTION) | (y >= R)):
            raise ValueError(f"labels must lie in [{NO_INTERACTION}, {R})")
        self.n_relations_ = R
        self.classes_ = np.arange(R)
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(self.seed)
        self.params_ = StudentParams.initialize(X.shape[1], self.hidden, R, rng)
        return X, y, rng

    def _fit_loop(self, X, y, rng, q=None, z_t=None):
        opt = make_optimizer(self.optimizer, self.params_.as_dict(), self.lr, self.weight_decay)
        self.loss_trace_ = []
        for epoch in range(self.epochs):
            total = 0.0
            for b in minibatches(len(y), self.batch_size, rng):
                loss, grads = self._batch_grads(X[b], y[b], None if q is None else q[b],
                                                None if z_t is None else z_t[b])
                if not np.isfinite(loss):
                    raise TrainingError(f"{type(self).__name__}: non-finite loss at epoch {epoch}")
                opt.step(grads)
                total += loss * len(b)
            self.loss_trace_.append(total / max(len(y), 1))
            if self.verbose:
                logger.info("%s epoch %d loss %.6f", type(self).__name__, epoch, self.loss_trace_[-1])

    def _batch_grads(self, X, y, q, z_t):
        return student_loss_and_grads(self.params_, X, y)

    def fit(self, X, y):
        X, y, rng = self._setup(X, y)
        self._fit_loop(X, y, rng)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64, ensure_min_samples=0)
        return student_forward(X, self.params_)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def predict_proba(self, X):
        """Independent per-relation probabilities (rows need not sum to 1)."""
        return expit(self.decision_function(X))

    def detection_score(self, X):
        return self.decision_function(X).max(axis=1)

    _kind = "feature_mlp"

    def save(self, directory, extra=None):
        check_is_fitted(self, "params_")
        return save_checkpoint(directory, self._kind, self.params_.as_dict(), {
            "R": self.n_relations_, "n_features_in": self.n_features_in_, "seed": self.seed,
            "epoch": len(self.loss_trace_), "loss_trace": self.loss_trace_,
            "hyperparameters": self.get_params(), **(extra or {})})

    @classmethod
    def load(cls, directory):
        arrays, m = load_checkpoint(directory)
        if m["kind"] != cls._kind:
            raise ValueError(f"{directory} holds a {m['kind']!r} checkpoint, not {cls._kind!r}")
        model = cls(**m["hyperparameters"])
        model.params_ = StudentParams(**arrays)
        model.n_relations_ = m["R"]
        model.n_features_in_ = m["n_features_in"]
        model.classes_ = np.arange(model.n_relations_)
        model.loss_trace_ = m["loss_trace"]
        return model, m


class DistilledStudent(RelationMLP):
    """Feature-only student trained on cached teacher logits.

    ``fit(X, y, teacher_logits=Z)``: rows with ``y == UNLABELED`` have no hard
    label and contribute ``alpha * L_KD`` only; ``NO_INTERACTION`` rows mix
    KD with an all-zero hard target. ``kd_mode="kl"`` swaps the BCE
    distillation term for KL between softmax distributions (ablation only).
    """

    _kind = "student"

    def __init__(self, n_relations=None, hidden=128, lr=0.1, weight_decay=1e-4, batch_size=1024,
                 epochs=30, optimizer="sgd", alpha=0.5, tau=1.0, kd_mode="bce", seed=0,
                 verbose=False):
        super().__init__(n_relations=n_relations, hidden=hidden, lr=lr, weight_decay=weight_decay,
                         batch_size=batch_size, epochs=epochs, optimizer=optimizer, seed=seed,
                         verbose=verbose)
        self.alpha = alpha
        self.tau = tau
        self.kd_mode = kd_mode

    def fit(self, X, y, teacher_logits=None):
        if teacher_logits is None:
            raise ValueError("DistilledStudent.fit needs teacher_logits")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.kd_mode not in ("bce", "kl"):
            raise ConfigError(f"kd_mode must be 'bce' or 'kl', got {self.kd_mode!r}")
        X, y, rng = self._setup(X, y)
        z_t = np.asarray(teacher_logits, float)
        if z_t.shape != (len(X), self.n_relations_):
            raise ValueError(f"teacher logits have shape {z_t.shape}, expected {(len(X), self.n_relations_)}")
        q = soft_targets(z_t, self.tau)
        self._fit_loop(X, y, rng, q=q, z_t=z_t)
        return self

    def _batch_grads(self, X, y, q, z_t):
        return student_loss_and_grads(self.params_, X, y, q, self.alpha, self.kd_mode, z_t, self.tau)


def distill(teacher, plan: SplitPlan, feat_table, negatives=None, negative_label="zeros",
            mode="concat", normalize=True, overlap=None, **student_params) -> Pipeline:
    """Train a feature-only student from a frozen teacher on training pairs only.

    Positives are ``plan.train_edges`` (with hard labels); ``negatives`` are
    optional ``(h, t)`` pairs from the training pool, carrying the all-zero
    hard target (``negative_label="zeros"``) or no hard target
    (``negative_label="none"``). The leakage
    checks run first and a failure raises :class:`LeakageError` before any
    teacher logit is computed. Returns ``Pipeline([featurizer, student])``
    operating on ``(n, 2)`` drug pairs.
    """
    report = verify_no_leakage(plan, plan.train_edges, overlap=overlap, extra_pairs=negatives)
    report.raise_for_failure()
    pairs = plan.train_edges.pairs
    y = plan.train_edges.relations
    if negatives is not None and len(negatives):
        negatives = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
        pairs = np.concatenate([pairs, negatives])
        code = {"zeros": NO_INTERACTION, "none": UNLABELED}[negative_label]
        y = np.concatenate([y, np.full(len(negatives), code)])
    z_t = teacher.decision_function(pairs)
    featurizer = PairFeaturizer(feat_table, mode=mode, normalize=normalize).fit()
    student_params.setdefault("n_relations", plan.num_relations)
    student = DistilledStudent(**student_params)
    student.fit(featurizer.transform(pairs), y, teacher_logits=z_t)
    return Pipeline([("features", featurizer), ("student", student)])
