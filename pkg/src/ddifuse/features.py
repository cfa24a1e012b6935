"""Per-drug vector tables and pairwise feature construction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .exceptions import FormatError, MissingDrugError

logger = logging.getLogger(__name__)


class PairMode(str, Enum):
    CONCAT = "concat"
    EXTENDED = "extended"


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Dense vectors for a subset of drugs.

    ``drugs[i]`` owns row ``matrix[i]``. Drugs absent from the table raise
    :class:`MissingDrugError` on lookup.
    """

    drugs: np.ndarray
    matrix: np.ndarray
    normalized: bool = False
    zero_rows: int = field(default=0, compare=False)

    def __post_init__(self):
        drugs = np.asarray(self.drugs, dtype=np.int64).reshape(-1)
        mat = np.asarray(self.matrix, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != drugs.shape[0]:
            raise ValueError(f"matrix shape {mat.shape} does not match {drugs.shape[0]} drugs")
        if len(np.unique(drugs)) != len(drugs):
            vals, counts = np.unique(drugs, return_counts=True)
            raise ValueError(f"duplicate drug index {int(vals[counts > 1][0])}")
        order = np.argsort(drugs, kind="stable")
        drugs, mat = drugs[order].copy(), mat[order].copy()
        drugs.setflags(write=False)
        mat.setflags(write=False)
        object.__setattr__(self, "drugs", drugs)
        object.__setattr__(self, "matrix", mat)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.drugs)

    def __contains__(self, drug) -> bool:
        i = np.searchsorted(self.drugs, drug)
        return bool(i < len(self.drugs) and self.drugs[i] == drug)

    def rows(self, drugs) -> np.ndarray:
        """Row positions of ``drugs``; raises on the first missing one."""
        drugs = np.asarray(drugs, dtype=np.int64)
        pos = np.searchsorted(self.drugs, drugs)
        pos_c = np.minimum(pos, max(len(self.drugs) - 1, 0))
        ok = (pos < len(self.drugs)) & (self.drugs[pos_c] == drugs) if len(self.drugs) else np.zeros_like(drugs, bool)
        if not np.all(ok):
            raise MissingDrugError(int(drugs[~ok].flat[0]))
        return pos

    def lookup(self, drugs) -> np.ndarray:
        return self.matrix[self.rows(drugs)]

    def vector(self, drug: int) -> np.ndarray:
        return self.lookup(np.asarray([drug]))[0]

    def dense(self, num_drugs: int) -> tuple[np.ndarray, np.ndarray]:
        """``(num_drugs, D)`` matrix with zero rows for absent drugs, plus presence mask."""
        out = np.zeros((num_drugs, self.dim))
        present = np.zeros(num_drugs, dtype=bool)
        keep = self.drugs < num_drugs
        out[self.drugs[keep]] = self.matrix[keep]
        present[self.drugs[keep]] = True
        return out, present

    @classmethod
    def from_dense(cls, matrix, drugs=None, normalized: bool = False) -> "EmbeddingTable":
        matrix = np.asarray(matrix, dtype=np.float64)
        if drugs is None:
            drugs = np.arange(matrix.shape[0])
        return cls(np.asarray(drugs), matrix, normalized=normalized)


def load_embedding_table(path, expected_dim: int | None = None) -> EmbeddingTable:
    """Read ``drug_index v_1 ... v_D`` rows; an optional ``#dim D`` header fixes D."""
    dim = expected_dim
    drugs, rows, seen = [], [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "dim":
                    header_dim = int(parts[1])
                    if dim is not None and header_dim != dim:
                        raise FormatError(f"header declares dim {header_dim}, expected {dim}", path, lineno)
                    dim = header_dim
                continue
            toks = line.split()
            try:
                drug = int(toks[0])
                vec = [float(x) for x in toks[1:]]
            except ValueError as exc:
                raise FormatError(f"unparseable row ({exc})", path, lineno) from None
            if dim is None:
                dim = len(vec)
            if len(vec) != dim:
                raise FormatError(f"row for drug {drug} has {len(vec)} values, expected {dim}", path, lineno)
            if drug in seen:
                raise FormatError(f"duplicate drug index {drug} (first seen on line {seen[drug]})",
                                  path, lineno)
            seen[drug] = lineno
            drugs.append(drug)
            rows.append(vec)
    mat = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim or 0)
    return EmbeddingTable(np.asarray(drugs, dtype=np.int64), mat)


def save_embedding_table(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dim {table.dim}\n")
        for drug, vec in zip(table.drugs.tolist(), table.matrix):
            fh.write(str(drug) + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def l2_normalize(table: EmbeddingTable) -> EmbeddingTable:
    """Scale each nonzero row to unit norm. Zero rows stay zero and are counted."""
    norms = np.linalg.norm(table.matrix, axis=1)
    zero = norms == 0.0
    if zero.any():
        logger.warning("l2_normalize: %d zero vector(s) left unnormalized", int(zero.sum()))
    scale = np.where(zero, 1.0, norms)
    return EmbeddingTable(table.drugs, table.matrix / scale[:, None], normalized=True,
                          zero_rows=int(zero.sum()))


def concat_tables(a: EmbeddingTable, b: EmbeddingTable) -> EmbeddingTable:
    """Per-drug concatenation ``[a_i || b_i]`` over drugs present in both tables."""
    common = np.intersect1d(a.drugs, b.drugs)
    return EmbeddingTable(common, np.hstack([a.lookup(common), b.lookup(common)]))


def pair_feature_matrix(table: EmbeddingTable, pairs, mode=PairMode.CONCAT) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    vh = table.lookup(pairs[:, 0])
    vt = table.lookup(pairs[:, 1])
    if PairMode(mode) is PairMode.CONCAT:
        return np.hstack([vh, vt])
    return np.hstack([vh, vt, np.abs(vh - vt), vh * vt])


def pair_features(table: EmbeddingTable, h: int, t: int, mode=PairMode.CONCAT) -> np.ndarray:
    """Feature vector for one ordered pair: ``[v_h || v_t]`` or the 4-block extended form."""
    return pair_feature_matrix(table, [[h, t]], mode)[0]


def feature_width(dim: int, mode=PairMode.CONCAT) -> int:
    return (2 if PairMode(mode) is PairMode.CONCAT else 4) * dim


class PairFeaturizer(TransformerMixin, BaseEstimator):
    """Map ``(n, 2)`` drug-index pairs to pairwise feature rows.

    Parameters
    ----------
    table : EmbeddingTable
        Per-drug vectors.
    mode : {"concat", "extended"}
    normalize : bool
        L2-normalise the per-drug vectors before pairing.
    """

    def __init__(self, table=None, mode="concat", normalize=True):
        self.table = table
        self.mode = mode
        self.normalize = normalize

    def fit(self, X=None, y=None):
        if self.table is None:
            raise ValueError("PairFeaturizer needs an EmbeddingTable")
        self.mode_ = PairMode(self.mode)
        self.table_ = l2_normalize(self.table) if self.normalize else self.table
        self.n_features_out_ = feature_width(self.table.dim, self.mode_)
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.int64, ensure_min_samples=0)
        if X.shape[1] != 2:
            raise ValueError(f"expected (n, 2) drug pairs, got {X.shape}")
        return pair_feature_matrix(self.table_, X, self.mode_)
