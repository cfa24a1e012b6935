"""Leakage-safe negative pair pools, frozen to disk with checksums."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .checkpoint import file_sha256
from .exceptions import ChecksumError, ConfigError, FormatError
from .graph import Regime, SplitPlan, TripleSet

logger = logging.getLogger(__name__)

MAX_ATTEMPTS_PER_SAMPLE = 200


class PoolRole(str, Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class NegativePool:
    pairs: np.ndarray  # (n, 2) ordered (h, t)
    k: int
    fold_seed: int
    role: PoolRole
    n_positives: int
    shortfall: int = 0
    checksum: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "pairs", arr)
        object.__setattr__(self, "role", PoolRole(self.role))

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def target_size(self) -> int:
        return self.k * self.n_positives


def _pair_keys(h: np.ndarray, t: np.ndarray, n: int) -> np.ndarray:
    """Direction-free integer key per pair."""
    lo, hi = np.minimum(h, t), np.maximum(h, t)
    return lo * n + hi


def _role_mask(plan: SplitPlan, role: PoolRole, h: np.ndarray, t: np.ndarray) -> np.ndarray:
    if plan.regime is Regime.EDGE:
        return np.ones(len(h), dtype=bool)
    if role is PoolRole.TRAIN:
        return np.isin(h, plan.train_nodes) & np.isin(t, plan.train_nodes)
    in_test = np.isin(h, plan.test_nodes) | np.isin(t, plan.test_nodes)
    if role is PoolRole.TEST:
        return in_test
    in_valid = np.isin(h, plan.valid_nodes) | np.isin(t, plan.valid_nodes)
    return in_valid & ~in_test


def admissible_mask(plan: SplitPlan, role, pairs, extra_positives: TripleSet | None = None) -> np.ndarray:
    """Which ``(h, t)`` pairs may appear in a pool of the given role."""
    role = PoolRole(role)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    h, t = pairs[:, 0], pairs[:, 1]
    n = plan.num_drugs
    pos = plan.all_edges()
    if extra_positives is not None and len(extra_positives):
        pos = np.concatenate([pos, extra_positives.triples])
    forbidden = np.unique(_pair_keys(pos[:, 0], pos[:, 2], n))
    ok = (h != t) & ~np.isin(_pair_keys(h, t, n), forbidden)
    return ok & _role_mask(plan, role, h, t)


def build_pool(plan: SplitPlan, positives: TripleSet, k: int, role, seed: int) -> NegativePool:
    """Rejection-sample ``k`` negatives per positive, uniformly over admissible pairs.

    A pair is inadmissible if it (in either direction) is an edge of any
    split or of ``positives``, is a self-loop, or repeats an earlier draw in
    either direction. Under node hold-out, train pools stay inside the
    training drugs, validation pools touch a validation drug and no test drug,
    and test pools touch at least one test drug. Sampling stops after
    ``200 * k * |positives|`` draws; any deficit is recorded as ``shortfall``.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    role = PoolRole(role)
    n = plan.num_drugs
    target = k * len(positives)
    budget = MAX_ATTEMPTS_PER_SAMPLE * target
    rng = np.random.default_rng(seed)
    pos = np.concatenate([plan.all_edges(), positives.triples])
    forbidden = set(_pair_keys(pos[:, 0], pos[:, 2], n).tolist())
    chosen: list[tuple[int, int]] = []
    taken: set[int] = set()
    attempts = 0
    while len(chosen) < target and attempts < budget and n > 1:
        batch = int(min(budget - attempts, max(1024, 4 * (target - len(chosen)))))
        draws = rng.integers(0, n, size=(batch, 2))
        attempts += batch
        h, t = draws[:, 0], draws[:, 1]
        ok = (h != t) & _role_mask(plan, role, h, t)
        keys = _pair_keys(h, t, n)
        for hh, tt, key in zip(h[ok].tolist(), t[ok].tolist(), keys[ok].tolist()):
            if key in forbidden or key in taken:
                continue
            taken.add(key)
            chosen.append((hh, tt))
            if len(chosen) == target:
                break
    shortfall = target - len(chosen)
    if shortfall:
        logger.warning("negative pool (%s): admissible space exhausted, %d of %d pairs missing",
                       role.value, shortfall, target)
    return NegativePool(np.asarray(chosen, dtype=np.int64).reshape(-1, 2), k=k, fold_seed=seed,
                        role=role, n_positives=len(positives), shortfall=shortfall)


def freeze_pool(pool: NegativePool, directory, name: str | None = None) -> Path:
    """Write ``<name>.tsv`` and ``<name>.manifest.json``; return the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    name = name or pool.role.value
    data_path = d / f"{name}.tsv"
    with open(data_path, "w", encoding="utf-8") as fh:
        for h, t in pool.pairs.tolist():
            fh.write(f"{h}\t{t}\n")
    manifest = {"name": name, "file": data_path.name, "k": pool.k, "seed": pool.fold_seed,
                "role": pool.role.value, "n_pairs": len(pool), "n_positives": pool.n_positives,
                "shortfall": pool.shortfall, "checksum": file_sha256(data_path)}
    mpath = d / f"{name}.manifest.json"
    with open(mpath, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return mpath


def load_pool(manifest_path) -> NegativePool:
    """Reload a frozen pool, refusing it if the data file no longer matches its checksum."""
    mpath = Path(manifest_path)
    with open(mpath, encoding="utf-8") as fh:
        m = json.load(fh)
    data_path = mpath.parent / m["file"]
    actual = file_sha256(data_path)
    if actual != m["checksum"]:
        raise ChecksumError(f"pool {m['name']!r} ({data_path}) fails its checksum: "
                            f"manifest {m['checksum'][:12]}..., file {actual[:12]}...")
    rows = []
    with open(data_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if len(parts) != 2:
                raise FormatError("expected 'h<TAB>t'", str(data_path), lineno)
            rows.append((int(parts[0]), int(parts[1])))
    return NegativePool(np.asarray(rows, dtype=np.int64).reshape(-1, 2), k=m["k"], fold_seed=m["seed"],
                        role=m["role"], n_positives=m["n_positives"], shortfall=m["shortfall"],
                        checksum=m["checksum"])


def candidate_set(positives: TripleSet, pool: NegativePool):
    """Evaluation candidates: positives first, then pool negatives, in file order.

    Returns ``(pairs, is_positive, relation)`` with relation ``-1`` for negatives.
    """
    pairs = np.concatenate([positives.pairs, pool.pairs]).astype(np.int64)
    labels = np.concatenate([np.ones(len(positives), dtype=np.int64),
                             np.zeros(len(pool), dtype=np.int64)])
    rel = np.concatenate([positives.relations, np.full(len(pool), -1, dtype=np.int64)])
    return pairs, labels, rel
