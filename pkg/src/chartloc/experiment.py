"""Experiment configuration, seed fan-out, and the staged pipeline used by the CLI and scripts."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .channel_sim import ConfigError, CsiDataset, ScenarioConfig, generate_dataset
from .charting import VARIANTS, EncoderConfig, IsomapChart, train_chart
from .csi_features import pairwise_dissimilarity
from .gat_loc import LocConfig, evaluate, train_localizer
from .retrieval import build_db, wknn_batch

log = logging.getLogger(__name__)

CHART_VARIANTS = VARIANTS + ("isomap",)


def component_seed(seed: int, name: str) -> int:
    """Derive an independent 32-bit seed for a named component."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    # key=value scenario file; scenario keys may also appear inline in the experiment file
    scenario: str = ""
    n_total: int = 3000
    n_labeled: int = 1000
    chart_variant: str = "siamese"
    k: int = 20
    chart_epochs: int = 30
    chart_pairs: int = 6000
    chart_lr: float = 1e-3
    chart_batch: int = 64
    isomap_neighbors: int = 10
    loc_epochs: int = 150
    loc_lr: float = 2e-3
    loc_batch: int = 32
    edge_bias: bool = False
    retrieval: str = "latent"
    n_queries: int = 200
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_total < 2:
            raise ConfigError(f"n_total must be >= 2, got {self.n_total}")
        if not 1 <= self.n_labeled <= self.n_total:
            raise ConfigError(f"n_labeled must be in [1, n_total={self.n_total}], got {self.n_labeled}")
        if not 1 <= self.k < self.n_labeled:
            raise ConfigError(f"k must be in [1, n_labeled), got k={self.k}, n_labeled={self.n_labeled}")
        if self.chart_variant not in CHART_VARIANTS:
            raise ConfigError(f"chart_variant must be one of {CHART_VARIANTS}, got {self.chart_variant!r}")
        if self.retrieval not in ("latent", "adp"):
            raise ConfigError(f"retrieval must be 'latent' or 'adp', got {self.retrieval!r}")
        if self.n_queries < 1:
            raise ConfigError(f"n_queries must be >= 1, got {self.n_queries}")

    def encoder_config(self, input_shape) -> EncoderConfig:
        return EncoderConfig(input_shape=input_shape, epochs=self.chart_epochs, lr=self.chart_lr,
                             batch_size=self.chart_batch, pairs_per_epoch=self.chart_pairs or None,
                             seed=component_seed(self.seed, "chart"))

    def loc_config(self, input_shape) -> LocConfig:
        return LocConfig(input_shape=input_shape, k=self.k, epochs=self.loc_epochs, lr=self.loc_lr,
                         batch_size=self.loc_batch, edge_bias=self.edge_bias, retrieval=self.retrieval,
                         seed=component_seed(self.seed, "loc"))


def load_configs(path: str | Path | None, overrides: dict | None = None) -> tuple[ExperimentConfig, ScenarioConfig]:
    """Read an experiment file holding experiment and/or scenario keys.

    A ``scenario = path`` entry pulls scenario keys from a second file
    (relative to the first); inline scenario keys override it.
    """
    from .io import parse_kv

    exp_names = {f.name for f in fields(ExperimentConfig)}
    scen_names = {f.name for f in fields(ScenarioConfig)}
    exp_kw, scen_kw = {}, {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        lines_exp, lines_scen = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            key = line.split("#", 1)[0].split("=", 1)[0].strip()
            if not key:
                continue
            if key in exp_names:
                lines_exp.append(line)
            elif key in scen_names:
                lines_scen.append(line)
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        exp_kw = parse_kv("\n".join(lines_exp), ExperimentConfig(), str(path)) if lines_exp else {}
        if exp_kw.get("scenario"):
            scen_path = Path(str(exp_kw["scenario"]))
            scen_path = scen_path if scen_path.is_absolute() else path.parent / scen_path
            try:
                scen_kw = parse_kv(scen_path.read_text(), source=str(scen_path))
            except OSError as exc:
                raise ConfigError(f"cannot read scenario config {scen_path}: {exc}") from exc
        scen_kw.update(parse_kv("\n".join(lines_scen), source=str(path)))
    exp_kw.update(overrides or {})
    return ExperimentConfig(**exp_kw), ScenarioConfig(**scen_kw)


def split_indices(exp: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Labeled / test index split of the generated dataset."""
    perm = np.random.default_rng(component_seed(exp.seed, "split")).permutation(exp.n_total)
    return np.sort(perm[:exp.n_labeled]), np.sort(perm[exp.n_labeled:])


def make_dataset(exp: ExperimentConfig, scen: ScenarioConfig) -> CsiDataset:
    return generate_dataset(scen, exp.n_total, seed=component_seed(exp.seed, "data"))


def fit_chart(exp: ExperimentConfig, csi: np.ndarray):
    """Stage one: self-supervised chart on every sample (labels unused)."""
    cfg = exp.encoder_config(csi.shape[1:])
    d = None if exp.chart_variant == "autoencoder" else pairwise_dissimilarity(csi)
    if exp.chart_variant == "isomap":
        return IsomapChart.fit(csi, d, exp.isomap_neighbors, cfg.dim)
    return train_chart(exp.chart_variant, csi, cfg, d)


@dataclass
class RunResult:
    chart: object
    db: object
    model: object
    gat: dict
    wknn: dict
    timings: dict
    # chart fingerprint right after stage one and after stage two
    fingerprints: tuple[str, str] = ("", "")


def run_pipeline(exp: ExperimentConfig, scen: ScenarioConfig, ds: CsiDataset | None = None) -> RunResult:
    """Generate -> chart -> db -> localizer -> evaluate, with the WKNN baseline on the same split."""
    from .gat_loc import error_metrics

    timings = {}
    t0 = time.perf_counter()
    ds = make_dataset(exp, scen) if ds is None else ds
    lab, test = split_indices(exp)
    timings["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    chart = fit_chart(exp, ds.csi)
    timings["chart"] = time.perf_counter() - t0

    db = build_db(ds[lab], chart)
    fp_before = chart.fingerprint()
    t0 = time.perf_counter()
    model = train_localizer(db, chart, exp.loc_config(scen.csi_shape))
    timings["loc"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    gat = evaluate(model, chart, db, ds[test], exp.k, exp.retrieval)
    wk = error_metrics(wknn_batch(db, ds.csi[test], exp.k), ds.positions[test])
    timings["evaluate"] = time.perf_counter() - t0
    log.info("gat mae %.4f, wknn mae %.4f", gat["mae"], wk["mae"])
    return RunResult(chart, db, model, gat, wk, timings, (fp_before, chart.fingerprint()))
