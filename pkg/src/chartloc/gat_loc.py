"""Query graphs and the graph-attention localizer (stage two, chart frozen).

A query graph has K+1 nodes: node 0 is the query CSI with a zero position
placeholder, nodes 1..K are retrieved reference points with their known
positions. Attention at each layer runs over all *other* nodes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .charting import Backbone, featurize
from .channel_sim import ConfigError
from .csi_features import ProfileIndex, pairwise_dissimilarity
from .nn import AdamState, Dense, Module, NonFiniteGradient, Parameter, adam_step, glorot_uniform, no_grad
from .nn import ops as T
from .nn.checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from .retrieval import FingerprintDb, retrieve_adp, retrieve_latent, retrieve_physical

log = logging.getLogger(__name__)

EDGE_EPS = 1e-6
EDGE_CAP = 1e6
MASK = -1e30

# Layer table at width factor 1: (output width, heads); hidden widths scale.
GAT_TABLE = ((512, 4), (2048, 8), (64, 1))

RETRIEVAL_VARIANTS = ("latent", "adp", "physical")


class ContractError(ValueError):
    pass


@dataclass
class QueryGraph:
    node_csi: np.ndarray          # (K+1, n_bs, n_rx, n_sc); node 0 is the query
    node_features: np.ndarray     # (K+1, n_bs, n_rx, n_sc) featurized ADP stacks
    edge_weights: np.ndarray      # (K+1, K+1), zero diagonal
    rp_positions: np.ndarray      # (K, 2)
    query_truth: np.ndarray | None = None
    rp_indices: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.node_csi)

    def node_positions(self) -> np.ndarray:
        """(K+1, 2) with the query placeholder row of zeros."""
        return np.vstack([np.zeros((1, 2)), self.rp_positions])


def edge_weights_from(dissim: np.ndarray) -> np.ndarray:
    w = np.minimum(1.0 / (np.asarray(dissim) + EDGE_EPS), EDGE_CAP)
    np.fill_diagonal(w, 0.0)
    return w


def build_graph(h_query, refs, query_truth=None) -> QueryGraph:
    """``refs`` is a sequence of (csi, position) pairs."""
    refs = list(refs)
    if not refs:
        raise ValueError("build_graph needs at least one reference")
    h_query = np.asarray(h_query)
    ref_csi = [np.asarray(c) for c, _ in refs]
    for i, c in enumerate(ref_csi):
        if c.shape != h_query.shape:
            raise ValueError(f"reference {i} CSI shape {c.shape} != query shape {h_query.shape}")
    csi = np.stack([h_query, *ref_csi])
    return QueryGraph(csi, featurize(csi), edge_weights_from(pairwise_dissimilarity(csi)),
                      np.array([np.asarray(p, dtype=float) for _, p in refs]),
                      None if query_truth is None else np.asarray(query_truth, dtype=float))


@dataclass
class LocConfig:
    input_shape: tuple[int, int, int] = (2, 8, 64)
    conv_channels: tuple[int, ...] = (8, 16)
    feat_dim: int = 256
    width_factor: float = 0.25
    k: int = 20
    edge_bias: bool = False
    leaky_slope: float = 0.2
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    lr_floor: float = 0.05
    seed: int = 0
    retrieval: str = "latent"
    # affine map from meters to the normalized frame fed to the position MLP
    pos_center: tuple[float, float] = (0.0, 0.0)
    pos_scale: float = 1.0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        self.pos_center = tuple(float(v) for v in self.pos_center)
        if self.retrieval not in RETRIEVAL_VARIANTS:
            raise ValueError(f"retrieval must be one of {RETRIEVAL_VARIANTS}, got {self.retrieval!r}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")

    def gat_dims(self) -> list[tuple[int, int, int]]:
        """(fan_in, heads, per-head width) per layer."""
        dims, fan_in = [], self.feat_dim
        for i, (out, heads) in enumerate(GAT_TABLE):
            if i < len(GAT_TABLE) - 1:
                out = max(heads, int(round(out * self.width_factor)))
            per_head = max(1, out // heads)
            dims.append((fan_in, heads, per_head))
            fan_in = heads * per_head
        return dims


class GatLayer(Module):
    def __init__(self, fan_in: int, heads: int, per_head: int, rng: np.random.Generator, name: str,
                 slope: float = 0.2):
        if heads < 1:
            raise ValueError("heads must be >= 1")
        self.heads, self.per_head, self.slope = heads, per_head, slope
        self.weight = Parameter(glorot_uniform(rng, (fan_in, heads * per_head), fan_in, heads * per_head),
                                f"{name}.W")
        self.attn = Parameter(glorot_uniform(rng, (heads, 2 * per_head), 2 * per_head, 1), f"{name}.a")

    def __call__(self, x, bias: np.ndarray | None = None, return_attention: bool = False):
        """x: (B, N, F_in) -> (B, N, heads * per_head); ``bias`` (B, N, N) is added to scores."""
        x = T.as_tensor(x)
        if x.ndim != 3:
            raise ContractError(f"gat_layer expects (B, N, F), got {x.shape}")
        b, n, _ = x.shape
        if n < 2:
            raise ContractError("gat_layer needs at least 2 nodes (empty neighborhood otherwise)")
        h, f = self.heads, self.per_head
        wx = T.transpose(T.reshape(T.matmul(x, self.weight), (b, n, h, f)), (0, 2, 1, 3))  # (B,H,N,F)
        a_src = T.reshape(T.slice_(self.attn, (slice(None), slice(0, f))), (1, h, 1, f))
        a_dst = T.reshape(T.slice_(self.attn, (slice(None), slice(f, 2 * f))), (1, h, 1, f))
        s_src = T.sum_(T.mul(wx, a_src), axis=-1)  # (B,H,N)
        s_dst = T.sum_(T.mul(wx, a_dst), axis=-1)
        e = T.leaky_relu(T.add(T.reshape(s_src, (b, h, n, 1)), T.reshape(s_dst, (b, h, 1, n))), self.slope)
        mask = np.where(np.eye(n, dtype=bool), MASK, 0.0)
        if bias is not None:
            mask = mask + np.asarray(bias).reshape(b, 1, n, n)
        alpha = T.softmax(T.add(e, mask), axis=-1)
        out = T.elu(T.matmul(alpha, wx))  # (B,H,N,F)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, h * f))
        return (out, alpha) if return_attention else out


def gat_layer(features, params: GatLayer, bias=None, return_attention: bool = False):
    """Single-graph convenience wrapper: (N, F_in) -> (N, heads * per_head)."""
    x = T.as_tensor(features)
    x3 = T.reshape(x, (1, *x.shape))
    res = params(x3, None if bias is None else np.asarray(bias)[None], return_attention)
    if return_attention:
        out, alpha = res
        return T.reshape(out, out.shape[1:]), alpha
    return T.reshape(res, res.shape[1:])


class LocModel(Module):
    def __init__(self, cfg: LocConfig):
        rng = np.random.default_rng([cfg.seed, 0x10C])
        self.config = cfg
        self.phi1 = Backbone(cfg.input_shape, cfg.conv_channels, cfg.feat_dim, rng, "phi1")
        self.phi2 = Dense(2, cfg.feat_dim, rng, "phi2")
        self.layers = [GatLayer(fi, h, f, rng, f"gat{i}", cfg.leaky_slope)
                       for i, (fi, h, f) in enumerate(cfg.gat_dims())]
        last = cfg.gat_dims()[-1]
        self.head = Dense(last[1] * last[2], 2, rng, "head")

    def meta(self) -> dict:
        return {"kind": "loc", "config": asdict(self.config)}

    def normalize(self, pos: np.ndarray) -> np.ndarray:
        return (np.asarray(pos, dtype=float) - np.asarray(self.config.pos_center)) / self.config.pos_scale

    def node_init(self, feats: np.ndarray, node_pos_norm: np.ndarray):
        """feats (B, N, C, H, W), node_pos_norm (B, N, 2) with zeros at node 0 -> (B, N, feat_dim)."""
        b, n = feats.shape[:2]
        x1 = T.reshape(self.phi1(feats.reshape(b * n, *feats.shape[2:])), (b, n, self.config.feat_dim))
        return T.add(x1, self.phi2(node_pos_norm))

    def forward(self, feats: np.ndarray, node_pos_norm: np.ndarray, edge_w: np.ndarray | None = None):
        """Batched forward -> (B, 2) positions in meters."""
        x = self.node_init(feats, node_pos_norm)
        bias = None
        if self.config.edge_bias:
            if edge_w is None:
                raise ContractError("edge_bias mode needs edge weights")
            with np.errstate(divide="ignore"):
                bias = np.where(edge_w > 0, np.log(np.maximum(edge_w, 1e-300)), 0.0)
        for layer in self.layers:
            x = layer(x, bias)
        q = T.reshape(T.slice_(x, (slice(None), 0)), (x.shape[0], x.shape[2]))
        out = self.head(q)
        return T.add(T.mul(out, self.config.pos_scale), np.asarray(self.config.pos_center))


def save_loc(path, model: LocModel) -> None:
    save_checkpoint(path, model.parameters(), model.meta())


def load_loc(path) -> LocModel:
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "loc":
        raise CheckpointError(f"{path}: not a localizer checkpoint (kind={meta.get('kind')!r})")
    model = LocModel(LocConfig(**meta["config"]))
    load_into(model.parameters(), tensors)
    return model


def _graph_inputs(model: LocModel, graph: QueryGraph):
    pos = model.normalize(graph.node_positions())
    pos[0] = 0.0
    return graph.node_features[None], pos[None], graph.edge_weights[None]


def node_init(model: LocModel, graph: QueryGraph):
    feats, pos, _ = _graph_inputs(model, graph)
    x = model.node_init(feats, pos)
    return T.reshape(x, x.shape[1:])


def localize(model: LocModel, graph: QueryGraph) -> np.ndarray:
    with no_grad():
        return model.forward(*_graph_inputs(model, graph)).data[0]


# ---------------------------------------------------------------- training


def _retrieve(variant: str, db: FingerprintDb, k: int, *, z=None, csi=None, position=None, exclude=None):
    if variant == "latent":
        return retrieve_latent(db, z, k, exclude)
    if variant == "adp":
        return retrieve_adp(db, csi, k, exclude)
    return retrieve_physical(db, position, k, exclude)


def neighbor_table(db: FingerprintDb, k: int, variant: str = "latent") -> np.ndarray:
    """Leave-one-out top-k reference indices for every db entry, (N, k)."""
    return np.stack([
        _retrieve(variant, db, k, z=db.embeddings[j], csi=db.csi[j], position=db.positions[j], exclude=j).indices
        for j in range(len(db))
    ])


@dataclass
class _BatchSource:
    feats: np.ndarray      # (M, C, H, W) featurized ADP of every node candidate
    pos_norm: np.ndarray   # (M, 2)
    profiles: object = None

    def gather(self, node_idx: np.ndarray, query_feats: np.ndarray | None = None):
        feats = self.feats[node_idx]
        if query_feats is not None:
            feats[:, 0] = query_feats
        pos = self.pos_norm[node_idx]
        pos[:, 0] = 0.0
        return feats, pos


def _edge_batch(units_q: np.ndarray, db: FingerprintDb, nbrs: np.ndarray) -> np.ndarray:
    out = []
    for uq, nb in zip(units_q, nbrs):
        u = np.concatenate([uq[None], db.profiles.units[nb]])
        g = sum(u[:, b] @ u[:, b].T for b in range(u.shape[1]))
        d = np.maximum(u.shape[1] - g, 0.0)
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
        out.append(edge_weights_from(d))
    return np.stack(out)


def _lr_at(cfg: LocConfig, epoch: int) -> float:
    if cfg.epochs <= 1:
        return cfg.lr
    t = epoch / (cfg.epochs - 1)
    return cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * t)))


class FreezeViolation(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: LocModel
    history: list[float] = field(default_factory=list)


def default_normalization(positions: np.ndarray) -> tuple[tuple[float, float], float]:
    lo, hi = positions.min(axis=0), positions.max(axis=0)
    center = (lo + hi) / 2.0
    scale = float(max(np.max(hi - lo) / 2.0, 1e-6))
    return (float(center[0]), float(center[1])), scale


def train_localizer(db: FingerprintDb, chart, cfg: LocConfig, on_epoch=None) -> LocModel:
    """Supervised stage: leave-one-out retrieval over the db, MSE on positions.

    The chart is only read (through the db embeddings); its parameter
    fingerprint is checked before and after.
    """
    if cfg.k >= len(db):
        raise ConfigError(f"k={cfg.k} must be smaller than the db size {len(db)}")
    before = chart.fingerprint() if chart is not None else None
    if cfg.pos_scale == 1.0 and cfg.pos_center == (0.0, 0.0):
        center, scale = default_normalization(db.positions)
        cfg = replace(cfg, pos_center=center, pos_scale=scale)
    model = LocModel(cfg)
    params = model.parameters()
    nbrs = neighbor_table(db, cfg.k, cfg.retrieval)
    if np.any(nbrs == np.arange(len(db))[:, None]):
        raise AssertionError("leave-one-out retrieval returned the query itself")
    src = _BatchSource(featurize(db.csi), model.normalize(db.positions))
    node_idx = np.concatenate([np.arange(len(db))[:, None], nbrs], axis=1)
    opt = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    history = []
    n = len(db)
    for epoch in range(cfg.epochs):
        opt.lr = _lr_at(cfg, epoch)
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            q = order[start:start + cfg.batch_size]
            feats, pos = src.gather(node_idx[q])
            edge_w = _edge_batch(db.profiles.units[q], db, nbrs[q]) if cfg.edge_bias else None
            pred = model.forward(feats, pos, edge_w)
            loss = T.mean(T.sum_(T.square(T.sub(pred, db.positions[q])), axis=-1))
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite localization loss at epoch {epoch}, batch {b}")
            model.zero_grad()
            loss.backward()
            try:
                adam_step(opt, params)
            except NonFiniteGradient as exc:
                raise FloatingPointError(f"{exc} at epoch {epoch}, batch {b}") from exc
            total += value * len(q)
        history.append(total / n)
        log.info("localizer epoch %d mse %.5g", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, model)
    if chart is not None and chart.fingerprint() != before:
        raise FreezeViolation("chart encoder parameters changed during localizer training")
    model.history = history
    return model


# ---------------------------------------------------------------- evaluation


def predict(model: LocModel, chart, db: FingerprintDb, test_csi: np.ndarray, k: int | None = None,
            retrieval: str = "latent", test_positions: np.ndarray | None = None, batch: int = 64,
            exclude=None):
    """Retrieve + localize each test CSI; returns (predictions (M, 2), neighbor indices (M, k)).

    ``exclude[i]`` leaves db entry i out of query i's neighborhood (leave-one-out
    scoring of db members, matching how the localizer was trained).
    """
    k = k or model.config.k
    test_csi = np.asarray(test_csi)
    ex = [None] * len(test_csi) if exclude is None else [int(e) for e in exclude]
    if retrieval == "latent":
        z = chart.encode_many(test_csi)
        nbrs = np.stack([retrieve_latent(db, zq, k, e).indices for zq, e in zip(z, ex)])
    elif retrieval == "adp":
        nbrs = np.stack([retrieve_adp(db, h, k, e).indices for h, e in zip(test_csi, ex)])
    elif retrieval == "physical":
        if test_positions is None:
            raise ValueError("physical retrieval needs the true test positions")
        nbrs = np.stack([retrieve_physical(db, p, k, e).indices for p, e in zip(test_positions, ex)])
    else:
        raise ValueError(f"unknown retrieval {retrieval!r}")
    src = _BatchSource(featurize(db.csi), model.normalize(db.positions))
    q_feats = featurize(test_csi)
    preds = []
    with no_grad():
        for s in range(0, len(test_csi), batch):
            nb = nbrs[s:s + batch]
            idx = np.concatenate([np.zeros((len(nb), 1), dtype=int), nb], axis=1)
            feats, pos = src.gather(idx, q_feats[s:s + batch])
            edge_w = None
            if model.config.edge_bias:
                units = ProfileIndex(test_csi[s:s + batch]).units
                edge_w = _edge_batch(units, db, nb)
            preds.append(model.forward(feats, pos, edge_w).data)
    return np.concatenate(preds), nbrs


def error_metrics(pred: np.ndarray, truth: np.ndarray) -> dict:
    err = np.sqrt(np.sum((np.asarray(pred) - np.asarray(truth)) ** 2, axis=1))
    if len(err) == 0:
        raise ValueError("empty test set")
    return {
        "mae": float(np.sum(err) / len(err)),
        "p50": float(np.percentile(err, 50)),
        "p90": float(np.percentile(err, 90)),
        "n_test": int(len(err)),
        "errors": err,
    }


def evaluate(model: LocModel, chart, db: FingerprintDb, test, k: int | None = None,
             retrieval: str = "latent", exclude=None) -> dict:
    """MAE and error percentiles of the full retrieve-then-localize pipeline."""
    csi = np.asarray(test.csi)
    truth = np.asarray(test.positions)
    if len(truth) == 0:
        raise ValueError("empty test set")
    pred, _ = predict(model, chart, db, csi, k, retrieval, truth, exclude=exclude)
    out = error_metrics(pred, truth)
    out["predictions"] = pred
    out["retrieval_variant"] = retrieval
    out["K"] = int(k or model.config.k)
    return out
