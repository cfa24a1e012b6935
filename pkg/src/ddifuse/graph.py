"""Triple storage, vocabulary handling, edge/node hold-out splits and leakage checks."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .exceptions import ConfigError, FormatError, IndexRangeError, LeakageError

logger = logging.getLogger(__name__)


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Regime(str, Enum):
    EDGE = "edge"
    NODE = "node"


def _as_triple_array(triples) -> np.ndarray:
    arr = np.asarray(triples, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"triples must have shape (n, 3), got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class TripleSet:
    """Immutable set of ``(head, relation, tail)`` integer triples.

    Stored as an ``(n, 3)`` int64 array in insertion order. Construction
    rejects self-loops, exact duplicates and out-of-range indices.
    """

    triples: np.ndarray
    num_drugs: int
    num_relations: int
    dropped: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        arr = _as_triple_array(self.triples).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "triples", arr)
        if len(arr):
            if arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= self.num_drugs:
                raise IndexRangeError(f"drug index outside [0, {self.num_drugs})")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= self.num_relations:
                raise IndexRangeError(f"relation index outside [0, {self.num_relations})")
            if np.any(arr[:, 0] == arr[:, 2]):
                raise ValueError("self-loop triples are not allowed")
            if len(np.unique(arr, axis=0)) != len(arr):
                raise ValueError("duplicate triples are not allowed")

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self) -> Iterator[Triple]:
        for h, r, t in self.triples.tolist():
            yield Triple(h, r, t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TripleSet):
            return NotImplemented
        return (
            self.num_drugs == other.num_drugs
            and self.num_relations == other.num_relations
            and np.array_equal(self.triples, other.triples)
        )

    @property
    def heads(self) -> np.ndarray:
        return self.triples[:, 0]

    @property
    def relations(self) -> np.ndarray:
        return self.triples[:, 1]

    @property
    def tails(self) -> np.ndarray:
        return self.triples[:, 2]

    @property
    def pairs(self) -> np.ndarray:
        """``(n, 2)`` array of (head, tail)."""
        return self.triples[:, [0, 2]]

    def subset(self, mask_or_index) -> "TripleSet":
        return TripleSet(self.triples[mask_or_index], self.num_drugs, self.num_relations)

    def nodes(self) -> np.ndarray:
        return np.unique(self.triples[:, [0, 2]])


def deduplicate(triples, num_drugs: int, num_relations: int) -> TripleSet:
    """Drop self-loops and repeated triples, keeping first occurrences."""
    arr = _as_triple_array(triples)
    loops = arr[:, 0] == arr[:, 2]
    arr = arr[~loops]
    _, first = np.unique(arr, axis=0, return_index=True)
    keep = np.sort(first)
    n_dup = len(arr) - len(keep)
    ts = TripleSet(arr[keep], num_drugs, num_relations,
                   dropped={"duplicates": int(n_dup), "self_loops": int(loops.sum())})
    return ts


def merge_inverse(ts: TripleSet) -> TripleSet:
    """Drop ``(t, r, h)`` whenever ``(h, r, t)`` appears earlier in the set."""
    seen = set()
    keep = []
    for i, (h, r, t) in enumerate(ts.triples.tolist()):
        if (t, r, h) in seen:
            continue
        seen.add((h, r, t))
        keep.append(i)
    return ts.subset(np.asarray(keep, dtype=np.int64))


# -- vocabulary -------------------------------------------------------------

def load_vocabulary(path) -> dict[str, int]:
    vocab: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError("expected 'string_id<TAB>index'", path, lineno)
            try:
                vocab[parts[0]] = int(parts[1])
            except ValueError:
                raise FormatError(f"bad index {parts[1]!r}", path, lineno) from None
    if len(set(vocab.values())) != len(vocab):
        raise FormatError("vocabulary maps two ids to one index", path)
    return vocab


def save_vocabulary(vocab: dict[str, int], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, idx in sorted(vocab.items(), key=lambda kv: kv[1]):
            fh.write(f"{key}\t{idx}\n")


# -- triple files -----------------------------------------------------------

def _parse_header(line: str, meta: dict) -> None:
    body = line[1:].strip().split()
    if len(body) == 2 and body[0] in ("num_drugs", "num_relations"):
        try:
            meta[body[0]] = int(body[1])
        except ValueError:
            pass


def load_triples(path, num_relations: int | None = None, num_drugs: int | None = None,
                 vocab_path=None) -> TripleSet:
    """Read a tab-separated ``head relation tail`` file.

    Drug columns may be integers or string ids. String ids are resolved through
    ``vocab_path``; if that file does not exist yet it is built from the ids in
    order of first appearance and written out. Header comments
    ``#num_drugs N`` / ``#num_relations R`` are honoured unless overridden.
    Duplicates and self-loops are dropped and counted in ``TripleSet.dropped``.
    """
    path = Path(path)
    meta: dict = {}
    vocab = None
    grow_vocab = False
    if vocab_path is not None:
        if Path(vocab_path).exists():
            vocab = load_vocabulary(vocab_path)
        else:
            vocab, grow_vocab = {}, True

    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                _parse_header(line, meta)
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"expected 3 tab-separated fields, got {len(parts)}", path, lineno)
            try:
                rel = int(parts[1])
            except ValueError:
                raise FormatError(f"relation {parts[1]!r} is not an integer", path, lineno) from None
            ends = []
            for tok in (parts[0], parts[2]):
                tok = tok.strip()
                try:
                    ends.append(int(tok))
                    continue
                except ValueError:
                    pass
                if vocab is None:
                    raise FormatError(f"drug id {tok!r} is not an integer and no vocabulary was given",
                                      path, lineno)
                if tok not in vocab:
                    if not grow_vocab:
                        raise FormatError(f"drug id {tok!r} not in vocabulary", path, lineno)
                    vocab[tok] = len(vocab)
                ends.append(vocab[tok])
            R = num_relations if num_relations is not None else meta.get("num_relations")
            if rel < 0 or (R is not None and rel >= R):
                raise IndexRangeError(f"relation {rel} outside [0, {R})", path, lineno)
            rows.append((ends[0], rel, ends[1]))

    if grow_vocab:
        save_vocabulary(vocab, vocab_path)
    arr = _as_triple_array(rows)
    R = num_relations if num_relations is not None else meta.get("num_relations")
    if R is None:
        R = int(arr[:, 1].max()) + 1 if len(arr) else 0
    N = num_drugs if num_drugs is not None else meta.get("num_drugs")
    if N is None:
        if vocab:
            N = max(vocab.values()) + 1
        else:
            N = int(arr[:, [0, 2]].max()) + 1 if len(arr) else 0
    if len(arr) and (arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= N):
        raise IndexRangeError(f"drug index outside [0, {N})", path)
    ts = deduplicate(arr, N, R)
    if ts.dropped["duplicates"] or ts.dropped["self_loops"]:
        logger.warning("%s: dropped %d duplicate(s) and %d self-loop(s)", path,
                       ts.dropped["duplicates"], ts.dropped["self_loops"])
    return ts


def write_triples(ts: TripleSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#num_drugs {ts.num_drugs}\n#num_relations {ts.num_relations}\n")
        for h, r, t in ts.triples.tolist():
            fh.write(f"{h}\t{r}\t{t}\n")


# -- splits -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SplitPlan:
    regime: Regime
    train_edges: TripleSet
    valid_edges: TripleSet
    test_edges: TripleSet
    train_nodes: np.ndarray
    valid_nodes: np.ndarray
    test_nodes: np.ndarray
    seed: int
    train_frac: float
    test_frac: float

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        for name in ("train_nodes", "valid_nodes", "test_nodes"):
            arr = np.unique(np.asarray(getattr(self, name), dtype=np.int64))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_drugs(self) -> int:
        return self.train_edges.num_drugs

    @property
    def num_relations(self) -> int:
        return self.train_edges.num_relations

    def all_edges(self) -> np.ndarray:
        return np.concatenate([self.train_edges.triples, self.valid_edges.triples,
                               self.test_edges.triples])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SplitPlan):
            return NotImplemented
        return (self.regime == other.regime and self.seed == other.seed
                and self.train_edges == other.train_edges
                and self.valid_edges == other.valid_edges
                and self.test_edges == other.test_edges
                and np.array_equal(self.train_nodes, other.train_nodes)
                and np.array_equal(self.valid_nodes, other.valid_nodes)
                and np.array_equal(self.test_nodes, other.test_nodes))


def _check_fractions(train_frac: float, test_frac: float) -> None:
    for name, f in (("train_frac", train_frac), ("test_frac", test_frac)):
        if not (0.0 < f <= 1.0):
            raise ConfigError(f"{name} must lie in (0, 1], got {f}")
    if train_frac + test_frac > 1.0 + 1e-12:
        raise ConfigError(f"train_frac + test_frac = {train_frac + test_frac} exceeds 1")


def _floor_count(frac: float, n: int) -> int:
    # round first so 0.57 * 100 does not floor to 56
    return int(math.floor(round(frac * n, 9)))


def edge_holdout_split(ts: TripleSet, train_frac: float = 0.8, test_frac: float = 0.1,
                       seed: int = 0) -> SplitPlan:
    """Random edge partition; every drug stays visible to training."""
    _check_fractions(train_frac, test_frac)
    n = len(ts)
    n_train, n_test = _floor_count(train_frac, n), _floor_count(test_frac, n)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:n_train + n_test])
    valid_idx = np.sort(perm[n_train + n_test:])
    return SplitPlan(
        regime=Regime.EDGE,
        train_edges=ts.subset(train_idx),
        valid_edges=ts.subset(valid_idx),
        test_edges=ts.subset(test_idx),
        train_nodes=np.arange(ts.num_drugs),
        valid_nodes=np.zeros(0, dtype=np.int64),
        test_nodes=np.zeros(0, dtype=np.int64),
        seed=seed, train_frac=train_frac, test_frac=test_frac,
    )


def partition_by_nodes(ts: TripleSet, train_nodes, valid_nodes, test_nodes, seed: int = 0,
                       train_frac: float = float("nan"),
                       test_frac: float = float("nan")) -> SplitPlan:
    """Assign edges given explicit node sets.

    An edge touching any test node is a test edge; otherwise one touching a
    validation node is a validation edge; the rest (both endpoints in
    ``train_nodes``) are training edges.
    """
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    valid_nodes = np.asarray(valid_nodes, dtype=np.int64)
    test_nodes = np.asarray(test_nodes, dtype=np.int64)
    if np.intersect1d(train_nodes, test_nodes).size or np.intersect1d(train_nodes, valid_nodes).size \
            or np.intersect1d(valid_nodes, test_nodes).size:
        raise ConfigError("node sets must be pairwise disjoint")
    h, t = ts.heads, ts.tails
    is_test = np.isin(h, test_nodes) | np.isin(t, test_nodes)
    is_valid = ~is_test & (np.isin(h, valid_nodes) | np.isin(t, valid_nodes))
    is_train = ~is_test & ~is_valid
    uncovered = is_train & ~(np.isin(h, train_nodes) & np.isin(t, train_nodes))
    if uncovered.any():
        raise ConfigError(f"{int(uncovered.sum())} edge(s) touch drugs outside every node set")
    if not is_test.any():
        logger.warning("node hold-out: no edge touches the %d test drug(s); test edge set is empty",
                       len(test_nodes))
    return SplitPlan(
        regime=Regime.NODE,
        train_edges=ts.subset(is_train),
        valid_edges=ts.subset(is_valid),
        test_edges=ts.subset(is_test),
        train_nodes=train_nodes, valid_nodes=valid_nodes, test_nodes=test_nodes,
        seed=seed, train_frac=train_frac, test_frac=test_frac,
    )


def node_holdout_split(ts: TripleSet, train_frac: float = 0.8, test_frac: float = 0.1,
                       seed: int = 0) -> SplitPlan:
    """Hold out a random set of drugs together with every incident edge."""
    _check_fractions(train_frac, test_frac)
    n = ts.num_drugs
    n_train, n_test = _floor_count(train_frac, n), _floor_count(test_frac, n)
    if n_train < 2 or n_test < 1:
        raise ConfigError(f"{n} drugs cannot be split into {train_frac:g}/{test_frac:g} "
                          f"with at least 2 train and 1 test drug")
    perm = np.random.default_rng(seed).permutation(n)
    test_nodes = perm[:n_test]
    train_nodes = perm[n_test:n_test + n_train]
    valid_nodes = perm[n_test + n_train:]
    return partition_by_nodes(ts, train_nodes, valid_nodes, test_nodes, seed=seed,
                              train_frac=train_frac, test_frac=test_frac)


def check_split_invariants(plan: SplitPlan) -> list[str]:
    """Return human-readable violations of the split invariants (empty if none)."""
    problems = []
    parts = [plan.train_edges.triples, plan.valid_edges.triples, plan.test_edges.triples]
    keys = [set(map(tuple, p.tolist())) for p in parts]
    if keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2]:
        problems.append("edge partitions overlap")
    if plan.regime is Regime.NODE:
        if np.intersect1d(plan.train_nodes, plan.test_nodes).size:
            problems.append("train and test node sets intersect")
        tr = plan.train_edges
        if len(tr) and not np.all(np.isin(tr.heads, plan.train_nodes) & np.isin(tr.tails, plan.train_nodes)):
            problems.append("a train edge touches a non-train drug")
        te = plan.test_edges
        if len(te) and not np.all(np.isin(te.heads, plan.test_nodes) | np.isin(te.tails, plan.test_nodes)):
            problems.append("a test edge touches no test drug")
    return problems


# -- leakage ----------------------------------------------------------------

@dataclass
class CheckResult:
    passed: bool
    detail: str
    offending: list = field(default_factory=list)
    count: int = 0


@dataclass
class LeakageReport:
    checks: dict[str, CheckResult]
    n_checked: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def summary(self) -> str:
        return "; ".join(f"{name}: {'OK' if c.passed else 'FAIL'} ({c.detail})"
                         for name, c in self.checks.items())

    def raise_for_failure(self) -> None:
        if not self.passed:
            raise LeakageError(self)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_checked": self.n_checked,
            "checks": {k: {"passed": c.passed, "detail": c.detail,
                           "offending": [list(map(int, o)) for o in c.offending]}
                       for k, c in self.checks.items()},
        }


def verify_no_leakage(plan: SplitPlan, kd_edges, overlap: Iterable[int] | None = None,
                      extra_pairs=None) -> LeakageReport:
    """Run the four pre-distillation checks on a KD edge set.

    1. remap: every endpoint maps into the overlap index space (drugs present
       in both the graph and the feature table; defaults to all drugs).
    2. dedup: repeated triples are removed and counted (never a failure).
    3. range: drug and relation indices are in bounds.
    4. endpoints: both endpoints of every KD edge are training drugs.

    ``extra_pairs`` are unlabelled ``(h, t)`` pairs (e.g. KD negatives) that
    go through the remap, range and endpoint checks too. Failures are
    reported, never raised; call :meth:`LeakageReport.raise_for_failure`.
    """
    arr = kd_edges.triples if isinstance(kd_edges, TripleSet) else _as_triple_array(kd_edges)
    pairs = arr[:, [0, 2]]
    if extra_pairs is not None:
        extra = np.asarray(extra_pairs, dtype=np.int64).reshape(-1, 2)
        pairs = np.concatenate([pairs, extra])
    N, R = plan.num_drugs, plan.num_relations
    checks: dict[str, CheckResult] = {}

    overlap_idx = np.arange(N) if overlap is None else np.unique(np.asarray(list(overlap), dtype=np.int64))
    bad_remap = ~(np.isin(pairs[:, 0], overlap_idx) & np.isin(pairs[:, 1], overlap_idx))
    checks["remap"] = CheckResult(not bad_remap.any(),
                                  f"{int(bad_remap.sum())} pair(s) outside the overlap space",
                                  pairs[bad_remap].tolist())

    n_loops = int((arr[:, 0] == arr[:, 2]).sum()) if len(arr) else 0
    n_dups = len(arr) - len(np.unique(arr, axis=0)) if len(arr) else 0
    checks["dedup"] = CheckResult(True, f"{n_dups} duplicate(s) and {n_loops} self-loop(s) removed",
                                  count=n_dups + n_loops)

    bad_range = (pairs < 0).any(axis=1) | (pairs >= N).any(axis=1)
    rel_bad = (arr[:, 1] < 0) | (arr[:, 1] >= R)
    offending = pairs[bad_range].tolist() + arr[rel_bad].tolist()
    checks["range"] = CheckResult(not (bad_range.any() or rel_bad.any()),
                                  f"{len(offending)} index(es) out of range", offending)

    if len(arr):
        bad_edge = ~(np.isin(arr[:, 0], plan.train_nodes) & np.isin(arr[:, 2], plan.train_nodes))
    else:
        bad_edge = np.zeros(0, dtype=bool)
    extra_bad = []
    if extra_pairs is not None and len(extra):
        eb = ~(np.isin(extra[:, 0], plan.train_nodes) & np.isin(extra[:, 1], plan.train_nodes))
        extra_bad = extra[eb].tolist()
    offending = arr[bad_edge].tolist() + extra_bad
    checks["endpoints"] = CheckResult(not offending,
                                      f"{len(offending)} KD item(s) touch non-train drugs", offending)
    return LeakageReport(checks, n_checked=len(arr) + (len(extra) if extra_pairs is not None else 0))


# -- persistence ------------------------------------------------------------

_SPLIT_FILES = {"train_edges": "train.tsv", "valid_edges": "valid.tsv", "test_edges": "test.tsv"}


def save_split(plan: SplitPlan, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for attr, fname in _SPLIT_FILES.items():
        write_triples(getattr(plan, attr), d / fname)
    manifest = {
        "regime": plan.regime.value,
        "seed": plan.seed,
        "train_frac": plan.train_frac,
        "test_frac": plan.test_frac,
        "num_drugs": plan.num_drugs,
        "num_relations": plan.num_relations,
        "train_nodes": plan.train_nodes.tolist(),
        "valid_nodes": plan.valid_nodes.tolist(),
        "test_nodes": plan.test_nodes.tolist(),
    }
    with open(d / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return d


def load_split(directory) -> SplitPlan:
    """Read a split directory written by :func:`save_split`.

    Invariants are deliberately not enforced here; a tampered directory is
    caught by :func:`verify_no_leakage` before distillation.
    """
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise FormatError("split directory has no manifest.json", os.fspath(d))
    with open(d / "manifest.json", encoding="utf-8") as fh:
        m = json.load(fh)
    parts = {attr: load_triples(d / fname, num_relations=m["num_relations"], num_drugs=m["num_drugs"])
             for attr, fname in _SPLIT_FILES.items()}
    return SplitPlan(regime=Regime(m["regime"]), seed=m["seed"], train_frac=m["train_frac"],
                     test_frac=m["test_frac"], train_nodes=m["train_nodes"],
                     valid_nodes=m["valid_nodes"], test_nodes=m["test_nodes"], **parts)
