"""Synthetic drug worlds with planted bilinear mechanisms.

Each drug gets a latent vector ``u_i``; each relation a diagonal core
``m_r``. A pair interacts when its best relation score
``sum_k u_h[k] m_r[k] u_t[k]`` clears ``edge_threshold`` and is labelled with
that best relation, so every positive pair has exactly one mechanism.
Observed features are a noisy linear image of the latents,
``v_i = A u_i + eps``, so feature-only models can recover the mechanism only
as well as the noise allows.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError
from .features import EmbeddingTable, save_embedding_table
from .graph import TripleSet, write_triples


@dataclass(frozen=True)
class WorldSpec:
    num_drugs: int = 500
    num_relations: int = 10
    latent_dim: int = 8
    feature_dim: int = 32
    feature_noise_sigma: float = 0.3
    edge_threshold: float = 6.0
    alt_feature_dim: int = 0
    alt_noise_sigma: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.num_relations < 2:
            raise ConfigError("a world needs at least 2 relations")
        if self.num_drugs < 2:
            raise ConfigError("a world needs at least 2 drugs")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.feature_noise_sigma < 0 or self.alt_noise_sigma < 0:
            raise ConfigError("noise scales must be non-negative")


@dataclass(frozen=True, eq=False)
class SynthWorld:
    spec: WorldSpec
    kg: TripleSet
    kg_embeddings: EmbeddingTable  # true latents u_i
    features: EmbeddingTable       # v_i = A u_i + eps
    alt_features: EmbeddingTable | None
    label_matrix: np.ndarray       # (N, N) relation index or -1, symmetric

    def oracle_label(self, h: int, t: int) -> int | None:
        """Planted relation of the pair ``(h, t)`` or None."""
        n = self.spec.num_drugs
        for d in (h, t):
            if not (0 <= d < n):
                raise KeyError(f"unknown drug {d}")
        r = int(self.label_matrix[h, t])
        return None if r < 0 else r

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_triples(self.kg, d / "triples.tsv")
        save_embedding_table(self.kg_embeddings, d / "kg_emb.txt")
        save_embedding_table(self.features, d / "features.txt")
        files = {"triples": "triples.tsv", "kg_embeddings": "kg_emb.txt", "features": "features.txt"}
        if self.alt_features is not None:
            save_embedding_table(self.alt_features, d / "alt_features.txt")
            files["alt_features"] = "alt_features.txt"
        with open(d / "world.json", "w", encoding="utf-8") as fh:
            json.dump({"spec": asdict(self.spec), "files": files, "num_edges": len(self.kg)},
                      fh, indent=1, sort_keys=True)
            fh.write("\n")
        return d


def relation_scores(U: np.ndarray, cores: np.ndarray) -> np.ndarray:
    """``(R, N, N)`` tensor of ``sum_k U[h,k] cores[r,k] U[t,k]``."""
    return np.einsum("hk,rk,tk->rht", U, cores, U, optimize=True)


def generate(spec: WorldSpec) -> SynthWorld:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    N, R, L, D = spec.num_drugs, spec.num_relations, spec.latent_dim, spec.feature_dim
    U = rng.normal(size=(N, L))
    cores = rng.normal(size=(R, L))
    A = rng.normal(size=(D, L)) / np.sqrt(L)
    V = U @ A.T + spec.feature_noise_sigma * rng.normal(size=(N, D))
    alt = None
    if spec.alt_feature_dim > 0:
        B = rng.normal(size=(spec.alt_feature_dim, L)) / np.sqrt(L)
        alt = U @ B.T + spec.alt_noise_sigma * rng.normal(size=(N, spec.alt_feature_dim))

    S = relation_scores(U, cores)
    best = S.argmax(axis=0)
    top = S.max(axis=0)
    hs, ts = np.triu_indices(N, k=1)
    planted = top[hs, ts] > spec.edge_threshold
    if not planted.any():
        raise ConfigError(f"edge_threshold {spec.edge_threshold} plants no edges; lower it "
                          f"(largest pair score is {top[hs, ts].max():.3f})")
    hs, ts = hs[planted], ts[planted]
    rels = best[hs, ts]
    flip = rng.random(len(hs)) < 0.5
    heads = np.where(flip, ts, hs)
    tails = np.where(flip, hs, ts)
    kg = TripleSet(np.stack([heads, rels, tails], axis=1), N, R)

    labels = np.full((N, N), -1, dtype=np.int64)
    labels[hs, ts] = rels
    labels[ts, hs] = rels
    ids = np.arange(N)
    return SynthWorld(
        spec=spec, kg=kg,
        kg_embeddings=EmbeddingTable(ids, U),
        features=EmbeddingTable(ids, V),
        alt_features=None if alt is None else EmbeddingTable(ids, alt),
        label_matrix=labels,
    )


def oracle_label(world: SynthWorld, h: int, t: int) -> int | None:
    return world.oracle_label(h, t)
