"""Retrieval timing: latent kNN (encode + scan) vs brute-force ADP scan vs WKNN."""

from __future__ import annotations

import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .csi_features import ProfileIndex
from .retrieval import FingerprintDb, build_db, retrieve_adp, retrieve_latent, weighted_mean

MIN_QUERIES = 100


@dataclass
class MethodTiming:
    construct_s: float
    per_query_ms: float
    per_query_ms_std: float
    n_queries: int


@dataclass
class BenchReport:
    csi_shape: tuple[int, int, int]
    n_lab: int
    k: int
    warmup: int
    methods: dict[str, MethodTiming] = field(default_factory=dict)
    machine: dict = field(default_factory=dict)

    @property
    def speedup(self) -> float:
        """Mean ADP retrieval time over mean latent retrieval time."""
        return self.methods["adp"].per_query_ms / self.methods["latent"].per_query_ms

    def to_dict(self) -> dict:
        d = asdict(self)
        d["csi_shape"] = list(self.csi_shape)
        d["speedup_adp_over_latent"] = self.speedup
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def machine_info() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


def _time_queries(fn, queries, warmup: int) -> np.ndarray:
    for q in queries[:warmup]:
        fn(q)
    out = np.empty(len(queries))
    for i, q in enumerate(queries):
        t0 = time.perf_counter()
        fn(q)
        out[i] = time.perf_counter() - t0
    return out * 1e3


def run_bench(db_csi: np.ndarray, db_positions: np.ndarray, queries: np.ndarray, chart, k: int = 20,
              warmup: int = 10, threads: int | None = 1) -> BenchReport:
    """Time per-query retrieval for each method; ``threads`` pins BLAS pools (None leaves them alone)."""
    queries = np.asarray(queries)
    if len(queries) < MIN_QUERIES:
        raise ValueError(f"need at least {MIN_QUERIES} queries for stable statistics, got {len(queries)}")
    with threadpool_limits(limits=threads):
        # construct: latent = embed the whole db, adp = precompute unit profiles
        t0 = time.perf_counter()
        lat_db = build_db_raw(db_csi, db_positions, chart)
        t_lat = time.perf_counter() - t0
        t0 = time.perf_counter()
        adp_db = FingerprintDb(db_csi, db_positions, lat_db.embeddings, lat_db.encoder_id,
                               _profiles=ProfileIndex(db_csi))
        t_adp = time.perf_counter() - t0

        def latent(h):
            z = chart.encode_many(h[None])[0]
            return retrieve_latent(lat_db, z, k)

        def adp(h):
            return retrieve_adp(adp_db, h, k)

        def wknn(h):
            res = retrieve_adp(adp_db, h, k)
            return weighted_mean(adp_db.positions[res.indices], res.distances)

        report = BenchReport(tuple(int(v) for v in db_csi.shape[1:]), len(db_csi), k, warmup,
                             machine={**machine_info(), "threads": threads})
        for name, fn, construct in (("latent", latent, t_lat), ("adp", adp, t_adp), ("wknn", wknn, t_adp)):
            ms = _time_queries(fn, queries, warmup)
            report.methods[name] = MethodTiming(construct, float(ms.mean()), float(ms.std()), len(ms))
    return report


def build_db_raw(csi: np.ndarray, positions: np.ndarray, chart) -> FingerprintDb:
    from .channel_sim import CsiDataset

    return build_db(CsiDataset(csi, positions), chart)
