"""Fingerprint database with chart embeddings, exact kNN retrieval, and WKNN.

All retrieval is an exact linear scan. Ties in distance are broken by
ascending database index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel_sim import CsiDataset
from .csi_features import ProfileIndex

WKNN_EPS = 1e-9


@dataclass(frozen=True)
class RetrievalResult:
    indices: np.ndarray
    distances: np.ndarray
    metric: str  # "latent" | "adp" | "physical"

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class FingerprintDb:
    """Labeled CSI + positions + chart embeddings; treat as immutable after ``build_db``."""

    csi: np.ndarray
    positions: np.ndarray
    embeddings: np.ndarray
    encoder_id: str = ""
    _profiles: ProfileIndex | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("csi", "positions", "embeddings"):
            view = np.asarray(getattr(self, name)).view()
            view.setflags(write=False)
            setattr(self, name, view)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def profiles(self) -> ProfileIndex:
        """Unit ADP profiles of every entry, computed once on first use."""
        if self._profiles is None:
            self._profiles = ProfileIndex(self.csi)
        return self._profiles

    def subset(self, idx) -> "FingerprintDb":
        idx = np.asarray(idx)
        return FingerprintDb(self.csi[idx], self.positions[idx], self.embeddings[idx], self.encoder_id)


def build_db(samples, model) -> FingerprintDb:
    """Embed every labeled sample with ``model`` (a chart with ``encode_many``)."""
    if not isinstance(samples, CsiDataset):
        samples = CsiDataset.from_samples(list(samples))
    if len(samples) < 1:
        raise ValueError("fingerprint db needs at least one sample")
    expected = tuple(model.config.input_shape)
    if samples.csi.shape[1:] != expected:
        raise ValueError(f"sample CSI shape {samples.csi.shape[1:]} does not match encoder input {expected}")
    emb = np.asarray(model.encode_many(samples.csi), dtype=np.float64)
    return FingerprintDb(np.array(samples.csi), np.array(samples.positions, dtype=np.float64), emb,
                         model.fingerprint())


def top_k(distances: np.ndarray, k: int, metric: str, exclude: int | None = None) -> RetrievalResult:
    d = np.asarray(distances, dtype=np.float64)
    n = len(d) - (exclude is not None)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    if exclude is not None:
        d = d.copy()
        d[exclude] = np.inf
    order = np.argsort(d, kind="stable")[:k]
    return RetrievalResult(order, d[order], metric)


def latent_distances(db: FingerprintDb, z_query) -> np.ndarray:
    diff = db.embeddings - np.asarray(z_query, dtype=np.float64)[None, :]
    return np.sqrt(np.sum(diff * diff, axis=1))


def retrieve_latent(db: FingerprintDb, z_query, k: int, exclude: int | None = None) -> RetrievalResult:
    return top_k(latent_distances(db, z_query), k, "latent", exclude)


def retrieve_adp(db: FingerprintDb, h_query, k: int, exclude: int | None = None) -> RetrievalResult:
    return top_k(db.profiles.query(h_query), k, "adp", exclude)


def retrieve_physical(db: FingerprintDb, position, k: int, exclude: int | None = None) -> RetrievalResult:
    """Oracle retrieval by true distance; evaluation harnesses only."""
    diff = db.positions - np.asarray(position, dtype=np.float64)[None, :]
    return top_k(np.sqrt(np.sum(diff * diff, axis=1)), k, "physical", exclude)


def weighted_mean(positions: np.ndarray, distances: np.ndarray, eps: float = WKNN_EPS) -> np.ndarray:
    w = 1.0 / (np.asarray(distances, dtype=np.float64) + eps)
    w = w / w.sum()
    return w @ np.asarray(positions, dtype=np.float64)


def wknn_estimate(db: FingerprintDb, h_query, k: int = 20, exclude: int | None = None) -> np.ndarray:
    res = retrieve_adp(db, h_query, k, exclude)
    return weighted_mean(db.positions[res.indices], res.distances)


def wknn_batch(db: FingerprintDb, queries: np.ndarray, k: int = 20, exclude=None) -> np.ndarray:
    """``exclude[i]`` (optional) is the db index to leave out for query i."""
    queries = np.asarray(queries)
    ex = [None] * len(queries) if exclude is None else [int(e) for e in exclude]
    return np.stack([wknn_estimate(db, h, k, e) for h, e in zip(queries, ex)])
