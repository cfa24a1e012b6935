"""Gated KG+feature fusion teacher and the plain DistMult KG-only scorer.

Per drug ``i`` the teacher projects its KG embedding ``e_i`` and feature
vector ``v_i`` into a common ``d``-space, mixes them with a per-dimension
sigmoid gate, and scores every relation with a diagonal bilinear head::

    e_hat = P_k e_i            v_hat = P_e v_i
    g     = sigmoid(W_2 relu(W_1 [e_hat || v_hat]))
    e_til = g * e_hat + (1 - g) * v_hat
    s_r   = sum_k e_til_h[k] * rel[r, k] * e_til_t[k]

Training minimises softmax cross-entropy over the ``R`` relation logits.
Backpropagation is written out by hand; :func:`gradient_check_teacher`
compares it against central finite differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit, logsumexp, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import TrainingError
from .features import EmbeddingTable, l2_normalize
from .optim import make_optimizer, minibatches

logger = logging.getLogger(__name__)


@dataclass
class TeacherParams:
    entity_emb: np.ndarray    # (num_drugs, d)
    relation_emb: np.ndarray  # (R, d)
    P_k: np.ndarray           # (d, d)
    P_e: np.ndarray           # (d, D)
    gate_W1: np.ndarray       # (H, 2d)
    gate_W2: np.ndarray       # (d, H)

    @property
    def dim(self) -> int:
        return self.relation_emb.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.P_e.shape[1]

    @property
    def gate_hidden(self) -> int:
        return self.gate_W1.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation_emb.shape[0]

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "TeacherParams":
        return TeacherParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def validate(self) -> None:
        d, D, H, R = self.dim, self.feat_dim, self.gate_hidden, self.n_relations
        expected = {"entity_emb": (self.entity_emb.shape[0], d), "relation_emb": (R, d),
                    "P_k": (d, d), "P_e": (d, D), "gate_W1": (H, 2 * d), "gate_W2": (d, H)}
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def initialize(cls, num_drugs: int, n_relations: int, dim: int, feat_dim: int,
                   gate_hidden: int | None = None, rng=None) -> "TeacherParams":
        """Embeddings ~ U(-1/sqrt(d), 1/sqrt(d)); projections and gate weights Xavier-uniform."""
        rng = np.random.default_rng(rng)
        H = dim if gate_hidden is None else gate_hidden
        b = 1.0 / np.sqrt(dim)
        return cls(
            entity_emb=rng.uniform(-b, b, (num_drugs, dim)),
            relation_emb=rng.uniform(-b, b, (n_relations, dim)),
            P_k=_xavier(rng, dim, dim),
            P_e=_xavier(rng, dim, feat_dim),
            gate_W1=_xavier(rng, H, 2 * dim),
            gate_W2=_xavier(rng, dim, H),
        )


def _xavier(rng, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, (fan_out, fan_in))


def _check_last_dim(name, x, d):
    if np.shape(x)[-1] != d:
        raise ValueError(f"{name} has trailing dimension {np.shape(x)[-1]}, expected {d}")


# -- forward pieces ---------------------------------------------------------

def gate(e_hat, v_hat, W1, W2) -> np.ndarray:
    """Per-dimension mixing weights in (0, 1); accepts single vectors or row batches."""
    e_hat, v_hat = np.asarray(e_hat, float), np.asarray(v_hat, float)
    d = W2.shape[0]
    _check_last_dim("e_hat", e_hat, d)
    _check_last_dim("v_hat", v_hat, d)
    if W1.shape[1] != 2 * d:
        raise ValueError(f"W1 expects input width {W1.shape[1]}, gate input is {2 * d}")
    c = np.concatenate([e_hat, v_hat], axis=-1)
    hidden = np.maximum(c @ W1.T, 0.0)
    return expit(hidden @ W2.T)


def fuse(e_hat, v_hat, g) -> np.ndarray:
    e_hat, v_hat, g = (np.asarray(a, float) for a in (e_hat, v_hat, g))
    if not (e_hat.shape == v_hat.shape == g.shape):
        raise ValueError(f"shape mismatch: {e_hat.shape}, {v_hat.shape}, {g.shape}")
    return g * e_hat + (1.0 - g) * v_hat


def score_relations(e_h, e_t, relation_emb) -> np.ndarray:
    """DistMult head: ``s_r = sum_k e_h[k] rel[r, k] e_t[k]`` for every relation."""
    e_h, e_t = np.asarray(e_h, float), np.asarray(e_t, float)
    relation_emb = np.asarray(relation_emb, float)
    if e_h.shape != e_t.shape:
        raise ValueError(f"shape mismatch: {e_h.shape} vs {e_t.shape}")
    _check_last_dim("e_h", e_h, relation_emb.shape[1])
    return (e_h * e_t) @ relation_emb.T


def _side_forward(params: TeacherParams, idx, V, gate_override=None):
    e = params.entity_emb[idx]
    e_hat = e @ params.P_k.T
    v_hat = V @ params.P_e.T
    c = np.concatenate([e_hat, v_hat], axis=1)
    a = c @ params.gate_W1.T
    hid = np.maximum(a, 0.0)
    g = expit(hid @ params.gate_W2.T)
    if gate_override is not None:
        g = np.full_like(g, float(gate_override))
    e_til = g * e_hat + (1.0 - g) * v_hat
    return {"idx": idx, "e": e, "V": V, "e_hat": e_hat, "v_hat": v_hat, "c": c, "a": a,
            "hid": hid, "g": g, "e_til": e_til}


def teacher_forward(pairs, params: TeacherParams, features, gate_override=None,
                    return_cache: bool = False):
    """Relation logits ``(n, R)`` for drug pairs.

    ``features`` is a dense ``(num_drugs, D)`` matrix (zero rows for drugs
    without vectors). ``gate_override`` pins every gate component to a
    constant, which is how the fusion-collapse diagnostic is run.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    F = np.asarray(features, float)
    if F.shape[1] != params.feat_dim:
        raise ValueError(f"features have dim {F.shape[1]}, teacher expects {params.feat_dim}")
    h, t = pairs[:, 0], pairs[:, 1]
    ch = _side_forward(params, h, F[h], gate_override)
    ct = _side_forward(params, t, F[t], gate_override)
    s = score_relations(ch["e_til"], ct["e_til"], params.relation_emb)
    if return_cache:
        return s, (ch, ct)
    return s


def teacher_loss(logits, y) -> float | np.ndarray:
    """Softmax cross-entropy ``-log softmax(s)[y]``; vectorised over rows."""
    s = np.asarray(logits, float)
    y = np.asarray(y)
    R = s.shape[-1]
    if np.any((y < 0) | (y >= R)):
        raise ValueError(f"label outside [0, {R})")
    if s.ndim == 1:
        return float(logsumexp(s) - s[int(y)])
    return logsumexp(s, axis=1) - s[np.arange(len(s)), y]


# -- backward ---------------------------------------------------------------

def _side_backward(params: TeacherParams, cache, d_etil, grads, freeze_gate=False):
    g, e_hat, v_hat = cache["g"], cache["e_hat"], cache["v_hat"]
    d = params.dim
    d_ehat = d_etil * g
    d_vhat = d_etil * (1.0 - g)
    if not freeze_gate:
        dg = d_etil * (e_hat - v_hat)
        dz2 = dg * g * (1.0 - g)
        grads["gate_W2"] += dz2.T @ cache["hid"]
        da = (dz2 @ params.gate_W2) * (cache["a"] > 0)
        grads["gate_W1"] += da.T @ cache["c"]
        dc = da @ params.gate_W1
        d_ehat = d_ehat + dc[:, :d]
        d_vhat = d_vhat + dc[:, d:]
    grads["P_k"] += d_ehat.T @ cache["e"]
    grads["P_e"] += d_vhat.T @ cache["V"]
    np.add.at(grads["entity_emb"], cache["idx"], d_ehat @ params.P_k)


def teacher_loss_and_grads(params: TeacherParams, pairs, y, features, gate_override=None):
    """Mean cross-entropy over the batch and its gradient for every parameter tensor."""
    y = np.asarray(y, dtype=np.int64)
    s, (ch, ct) = teacher_forward(pairs, params, features, gate_override, return_cache=True)
    n = len(y)
    losses = teacher_loss(s, y)
    ds = softmax(s, axis=1)
    ds[np.arange(n), y] -= 1.0
    ds /= n
    grads = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    eh, et = ch["e_til"], ct["e_til"]
    grads["relation_emb"] = ds.T @ (eh * et)
    M = ds @ params.relation_emb
    frozen_gate = gate_override is not None
    _side_backward(params, ch, M * et, grads, frozen_gate)
    _side_backward(params, ct, M * eh, grads, frozen_gate)
    return float(np.mean(losses)), grads


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def finite_difference_check(loss_fn, params: dict, analytic: dict, epsilon: float) -> dict:
    """Central-difference gradient of ``loss_fn()`` w.r.t. each array in ``params``.

    Arrays are perturbed in place and restored. Returns per-tensor relative
    error ``||a - n|| / (||a|| + ||n||)`` (0 when both vanish).
    """
    if not (1e-6 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    errors = {}
    for name, p in params.items():
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + epsilon
            fp = loss_fn()
            p[i] = old - epsilon
            fm = loss_fn()
            p[i] = old
            num[i] = (fp - fm) / (2.0 * epsilon)
        errors[name] = _relative_error(analytic[name], num)
    return errors


def gradient_check_teacher(params: TeacherParams, sample, epsilon: float = 1e-4,
                           grads: dict | None = None) -> float:
    """Worst per-tensor relative error between analytic and numerical gradients.

    ``sample`` is ``(pairs, labels, features)``. Pass ``grads`` to check a
    gradient other than the one computed here (e.g. a corrupted copy).
    """
    pairs, y, features = sample
    params = params.copy()
    if grads is None:
        _, grads = teacher_loss_and_grads(params, pairs, y, features)
    arrays = params.as_dict()

    def loss_fn():
        return float(np.mean(teacher_loss(teacher_forward(pairs, params, features), y)))

    return max(finite_difference_check(loss_fn, arrays, grads, epsilon).values())


# -- estimators -------------------------------------------------------------

def _validate_pairs(X, n_drugs=None) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValueError(f"expected (n, 2) drug-index pairs, got shape {X.shape}")
    if X.size and not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError("drug indices must be integers")
    X = X.astype(np.int64)
    if X.size and X.min() < 0:
        raise ValueError("negative drug index")
    if n_drugs is not None and X.size and X.max() >= n_drugs:
        raise ValueError(f"drug index {int(X.max())} outside the fitted range [0, {n_drugs})")
    return X


def _validate_labels(y, n_relations) -> np.ndarray:
    y = np.asarray(y).astype(np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= n_relations):
        raise ValueError(f"relation label outside [0, {n_relations})")
    return y


class _PairScorer(ClassifierMixin, BaseEstimator):
    """Shared inference surface for models that score ``(h, t)`` index pairs."""

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = _validate_pairs(X, self.n_drugs_)
        return self._logits(X)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def detection_score(self, X):
        """Alert score per pair: the largest relation logit."""
        return self.decision_function(X).max(axis=1)

    def _resolve_sizes(self, X, y):
        R = self.n_relations if self.n_relations is not None else int(y.max()) + 1
        N = self.n_drugs
        if N is None:
            N = int(X.max()) + 1 if X.size else 0
            if getattr(self, "features", None) is not None and len(self.features):
                N = max(N, int(self.features.drugs.max()) + 1)
        return N, R

    def _train_loop(self, X, y, rng, frozen=()):
        opt = make_optimizer(self.optimizer, self.params_.as_dict() if hasattr(self.params_, "as_dict")
                             else self.params_, self.lr, frozen=frozen)
        self.loss_trace_ = []
        for epoch in range(self.epochs):
            total = 0.0
            for batch in minibatches(len(y), self.batch_size, rng):
                loss, grads = self._loss_and_grads(X[batch], y[batch])
                if not np.isfinite(loss):
                    raise TrainingError(f"{type(self).__name__}: non-finite loss at epoch {epoch}")
                opt.step(grads)
                total += loss * len(batch)
            self.loss_trace_.append(total / max(len(y), 1))
            if self.verbose:
                logger.info("%s epoch %d loss %.6f", type(self).__name__, epoch, self.loss_trace_[-1])


class FusionTeacher(_PairScorer):
    """Gated KG+feature fusion scorer over ``R`` relations.

    Parameters
    ----------
    features : EmbeddingTable
        Per-drug feature vectors ``v_i``. Drugs without a row use a zero
        vector (counted in ``n_missing_features_``).
    n_relations, n_drugs : int or None
        Inferred from the training data when None.
    dim : int
        Shared embedding width ``d``.
    gate_hidden : int or None
        Gate hidden width ``H``; defaults to ``dim``.
    normalize_features : bool
        L2-normalise feature vectors first.
    entity_init : EmbeddingTable or None
        Pretrained KG entity embeddings to start from (rows for listed drugs
        only; the rest keep their random initialisation).
    freeze_entities : bool
        Keep entity embeddings fixed during training.
    """

    def __init__(self, features=None, n_relations=None, n_drugs=None, dim=64, gate_hidden=None,
                 lr=1e-3, epochs=10, batch_size=1024, optimizer="adam", normalize_features=False,
                 entity_init=None, freeze_entities=False, seed=0, verbose=False):
        self.features = features
        self.n_relations = n_relations
        self.n_drugs = n_drugs
        self.dim = dim
        self.gate_hidden = gate_hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.normalize_features = normalize_features
        self.entity_init = entity_init
        self.freeze_entities = freeze_entities
        self.seed = seed
        self.verbose = verbose

    def _prepare_features(self, n_drugs):
        if self.features is None:
            raise ValueError("FusionTeacher needs a feature table")
        table = l2_normalize(self.features) if self.normalize_features else self.features
        F, present = table.dense(n_drugs)
        self.feature_matrix_ = F
        self.n_missing_features_ = int((~present).sum())
        if self.n_missing_features_:
            logger.info("FusionTeacher: %d drug(s) without features use a zero vector",
                        self.n_missing_features_)

    def fit(self, X, y):
        X = _validate_pairs(X)
        N, R = self._resolve_sizes(X, np.asarray(y))
        y = _validate_labels(y, R)
        self.n_drugs_, self.n_relations_ = N, R
        self.classes_ = np.arange(R)
        self._prepare_features(N)
        rng = np.random.default_rng(self.seed)
        self.params_ = TeacherParams.initialize(N, R, self.dim, self.feature_matrix_.shape[1],
                                                self.gate_hidden, rng)
        if self.entity_init is not None:
            rows = self.entity_init.drugs < N
            self.params_.entity_emb[self.entity_init.drugs[rows]] = self.entity_init.matrix[rows]
        frozen = ("entity_emb",) if self.freeze_entities else ()
        self._train_loop(X, y, rng, frozen)
        return self

    def _loss_and_grads(self, X, y):
        return teacher_loss_and_grads(self.params_, X, y, self.feature_matrix_)

    def _logits(self, X):
        return teacher_forward(X, self.params_, self.feature_matrix_)

    def gate_values(self, drugs) -> np.ndarray:
        """Gate vectors ``g_i`` for the given drugs (1 = fully KG, 0 = fully feature)."""
        check_is_fitted(self, "params_")
        c = _side_forward(self.params_, np.asarray(drugs, np.int64), self.feature_matrix_[drugs])
        return c["g"]

    def save(self, directory, extra=None):
        check_is_fitted(self, "params_")
        hp = {k: v for k, v in self.get_params().items() if k not in ("features", "entity_init")}
        return save_checkpoint(directory, "teacher", self.params_.as_dict(), {
            "d": self.params_.dim, "D": self.params_.feat_dim, "H": self.params_.gate_hidden,
            "R": self.n_relations_, "num_drugs": self.n_drugs_, "seed": self.seed,
            "epoch": len(self.loss_trace_), "loss_trace": self.loss_trace_,
            "hyperparameters": hp, **(extra or {})})

    @classmethod
    def load(cls, directory, features: EmbeddingTable):
        arrays, m = load_checkpoint(directory)
        if m["kind"] != "teacher":
            raise ValueError(f"{directory} holds a {m['kind']!r} checkpoint, not a teacher")
        model = cls(features=features, **m["hyperparameters"])
        model.params_ = TeacherParams(**arrays)
        model.n_drugs_, model.n_relations_ = m["num_drugs"], m["R"]
        model.classes_ = np.arange(model.n_relations_)
        model.loss_trace_ = m["loss_trace"]
        model._prepare_features(model.n_drugs_)
        return model


class DistMultKG(_PairScorer):
    """KG-only DistMult baseline: ``s_r = sum_k e_h[k] rel[r, k] e_t[k]``.

    Drugs never seen in training keep their random initial embedding, so
    scores for them carry no learned signal.
    """

    def __init__(self, n_relations=None, n_drugs=None, dim=64, lr=1e-3, epochs=10, batch_size=1024,
                 optimizer="adam", seed=0, verbose=False):
        self.n_relations = n_relations
        self.n_drugs = n_drugs
        self.dim = dim
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.seed = seed
        self.verbose = verbose

    def fit(self, X, y):
        X = _validate_pairs(X)
        N, R = self._resolve_sizes(X, np.asarray(y))
        y = _validate_labels(y, R)
        self.n_drugs_, self.n_relations_ = N, R
        self.classes_ = np.arange(R)
        rng = np.random.default_rng(self.seed)
        b = 1.0 / np.sqrt(self.dim)
        self.params_ = {"entity_emb": rng.uniform(-b, b, (N, self.dim)),
                        "relation_emb": rng.uniform(-b, b, (R, self.dim))}
        self._train_loop(X, y, rng)
        return self

    def _logits(self, X):
        E, Rel = self.params_["entity_emb"], self.params_["relation_emb"]
        return score_relations(E[X[:, 0]], E[X[:, 1]], Rel)

    def _loss_and_grads(self, X, y):
        E, Rel = self.params_["entity_emb"], self.params_["relation_emb"]
        eh, et = E[X[:, 0]], E[X[:, 1]]
        s = score_relations(eh, et, Rel)
        n = len(y)
        loss = float(np.mean(teacher_loss(s, y)))
        ds = softmax(s, axis=1)
        ds[np.arange(n), y] -= 1.0
        ds /= n
        M = ds @ Rel
        gE = np.zeros_like(E)
        np.add.at(gE, X[:, 0], M * et)
        np.add.at(gE, X[:, 1], M * eh)
        return loss, {"entity_emb": gE, "relation_emb": ds.T @ (eh * et)}

    def save(self, directory, extra=None):
        check_is_fitted(self, "params_")
        return save_checkpoint(directory, "distmult", self.params_, {
            "d": self.dim, "R": self.n_relations_, "num_drugs": self.n_drugs_, "seed": self.seed,
            "epoch": len(self.loss_trace_), "loss_trace": self.loss_trace_,
            "hyperparameters": self.get_params(), **(extra or {})})

    @classmethod
    def load(cls, directory):
        arrays, m = load_checkpoint(directory)
        if m["kind"] != "distmult":
            raise ValueError(f"{directory} holds a {m['kind']!r} checkpoint, not a DistMult model")
        model = cls(**m["hyperparameters"])
        model.params_ = arrays
        model.n_drugs_, model.n_relations_ = m["num_drugs"], m["R"]
        model.classes_ = np.arange(model.n_relations_)
        model.loss_trace_ = m["loss_trace"]
        return model
