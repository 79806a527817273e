"""Channel-chart encoders (autoencoder, Siamese, triplet) and classical Isomap.

Encoders see per-BS angle-delay magnitude profiles stacked as image
channels, max-normalized per sample, so embeddings are invariant to the
global CSI phase and to positive rescaling.
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .csi_features import adp_transform
from .nn import AdamState, Conv2d, Dense, Module, NonFiniteGradient, adam_step, no_grad
from .nn.checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from .nn import ops as T

log = logging.getLogger(__name__)

VARIANTS = ("autoencoder", "siamese", "triplet")


class TrainingError(FloatingPointError):
    pass


def featurize(csi: np.ndarray) -> np.ndarray:
    """(..., n_bs, n_rx, n_sc) complex -> real ADP stack scaled to max 1 per sample.

    The angle axis is fftshifted so neighboring angle bins are adjacent for
    the convolutions.
    """
    prof = np.fft.fftshift(adp_transform(csi), axes=-2)
    peak = prof.max(axis=(-3, -2, -1), keepdims=True)
    return prof / np.where(peak > 0, peak, 1.0)


@dataclass
class EncoderConfig:
    input_shape: tuple[int, int, int] = (2, 8, 64)
    conv_channels: tuple[int, ...] = (8, 16)
    hidden: int = 128
    dim: int = 2
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    # pairs / triplets per epoch; None -> number of training samples
    pairs_per_epoch: int | None = None
    margin: float = 1.0
    rho_eps: float = 1e-6
    # cosine learning-rate decay to lr * lr_floor over the run
    lr_floor: float = 0.05

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        if self.dim < 2:
            raise ValueError(f"embedding dim must be >= 2, got {self.dim}")
        if min(self.conv_channels, default=1) < 1 or self.hidden < 1:
            raise ValueError("layer widths must be >= 1")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (n_bs, n_rx, n_sc), got {self.input_shape}")


class Backbone(Module):
    """Strided 3x3 convolutions over the ADP stack, flattened, then one dense layer."""

    def __init__(self, input_shape, channels, out_dim: int, rng: np.random.Generator, name: str):
        c, h, w = input_shape
        self.convs = []
        for i, c_out in enumerate(channels):
            conv = Conv2d(c, c_out, rng, f"{name}.conv{i}")
            h, w = conv.out_hw(h, w)
            self.convs.append(conv)
            c = c_out
        self.flat_dim = c * h * w
        self.fc = Dense(self.flat_dim, out_dim, rng, f"{name}.fc")

    def __call__(self, x):
        for conv in self.convs:
            x = T.elu(conv(x))
        x = T.reshape(x, (x.shape[0], self.flat_dim))
        return self.fc(x)


class ChartEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.backbone = Backbone(cfg.input_shape, cfg.conv_channels, cfg.hidden, rng, "enc")
        self.head = Dense(cfg.hidden, cfg.dim, rng, "enc.head")

    def __call__(self, feats):
        return self.head(T.elu(self.backbone(feats)))


class Decoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.fc1 = Dense(cfg.dim, cfg.hidden, rng, "dec.fc1")
        self.fc2 = Dense(cfg.hidden, int(np.prod(cfg.input_shape)), rng, "dec.fc2")

    def __call__(self, z):
        return self.fc2(T.elu(self.fc1(z)))


@dataclass
class ChartModel:
    encoder: ChartEncoder
    config: EncoderConfig
    variant: str
    history: list[float] = field(default_factory=list)

    def parameters(self):
        return self.encoder.parameters()

    def fingerprint(self) -> str:
        return self.encoder.fingerprint()

    def meta(self) -> dict:
        return {"kind": "chart", "variant": self.variant, "config": asdict(self.config)}

    def encode_features(self, feats: np.ndarray, batch: int = 512) -> np.ndarray:
        with no_grad():
            outs = [self.encoder(feats[i:i + batch]).data for i in range(0, len(feats), batch)]
        return np.concatenate(outs) if outs else np.zeros((0, self.config.dim))

    def encode_many(self, csi: np.ndarray) -> np.ndarray:
        csi = np.asarray(csi)
        if csi.shape[1:] != self.config.input_shape:
            raise ValueError(f"CSI shape {csi.shape[1:]} does not match encoder input {self.config.input_shape}")
        return self.encode_features(featurize(csi))


def new_chart(cfg: EncoderConfig, variant: str) -> ChartModel:
    if variant not in VARIANTS:
        raise ValueError(f"unknown chart variant {variant!r}; expected one of {VARIANTS}")
    return ChartModel(ChartEncoder(cfg, np.random.default_rng([cfg.seed, 0xE1C])), cfg, variant)


def encode(model, csi: np.ndarray) -> np.ndarray:
    """Embed one CSI tensor (n_bs, n_rx, n_sc) -> (d,)."""
    csi = np.asarray(csi)
    if csi.shape != model.config.input_shape:
        raise ValueError(f"CSI shape {csi.shape} does not match encoder input {model.config.input_shape}")
    return model.encode_many(csi[None])[0]


# ---------------------------------------------------------------- losses


def siamese_loss(z_i, z_j, d_csi: np.ndarray, rho_eps: float = 1e-6):
    """Mean of rho * (||z_i - z_j|| - d)^2 with rho = 1 / (d + eps)."""
    rho = 1.0 / (np.asarray(d_csi) + rho_eps)
    dist = T.l2_norm(T.sub(z_i, z_j), axis=-1, eps=1e-12)
    return T.mean(T.mul(T.square(T.sub(dist, d_csi)), rho))


def triplet_loss(z_a, z_p, z_n, margin: float = 1.0):
    """Mean of [||z_a - z_p||^2 - ||z_a - z_n||^2 + margin]_+."""
    dp = T.sum_(T.square(T.sub(z_a, z_p)), axis=-1)
    dn = T.sum_(T.square(T.sub(z_a, z_n)), axis=-1)
    return T.mean(T.relu(T.add(T.sub(dp, dn), margin)))


def reconstruction_loss(decoded, target: np.ndarray):
    return T.mse(decoded, target.reshape(len(target), -1))


# ---------------------------------------------------------------- training


def _lr_at(cfg: EncoderConfig, epoch: int) -> float:
    if cfg.epochs <= 1:
        return cfg.lr
    t = epoch / (cfg.epochs - 1)
    return cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * t)))


def _step(loss, params, opt: AdamState, epoch: int, batch: int) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch}")
    for p in params.values():
        p.grad = None
    loss.backward()
    try:
        adam_step(opt, params)
    except NonFiniteGradient as exc:
        raise TrainingError(f"{exc} at epoch {epoch}, batch {batch}") from exc
    return value


MONITOR_SIZE = 1024


def _monitor(loss_fn) -> float:
    """End-of-epoch loss on a fixed monitor set; this is what ``history`` records."""
    with no_grad():
        return float(loss_fn().data)


def _check_input(samples, cfg: EncoderConfig, minimum: int = 2) -> np.ndarray:
    samples = np.asarray(samples)
    if len(samples) < minimum:
        raise ValueError(f"need at least {minimum} samples, got {len(samples)}")
    if samples.shape[1:] != cfg.input_shape:
        raise ValueError(f"CSI shape {samples.shape[1:]} does not match encoder input {cfg.input_shape}")
    return samples


def train_autoencoder(samples, cfg: EncoderConfig) -> ChartModel:
    samples = _check_input(samples, cfg)
    feats = featurize(samples)
    model = new_chart(cfg, "autoencoder")
    decoder = Decoder(cfg, np.random.default_rng([cfg.seed, 0xDEC]))
    params = {**model.parameters(), **decoder.parameters()}
    opt = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0xA0E])
    n = len(feats)
    mon = feats[np.random.default_rng([cfg.seed, 0x30]).permutation(n)[:MONITOR_SIZE]]
    for epoch in range(cfg.epochs):
        opt.lr = _lr_at(cfg, epoch)
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = feats[idx]
            loss = reconstruction_loss(decoder(model.encoder(x)), x)
            total += _step(loss, params, opt, epoch, b) * len(idx)
        model.history.append(_monitor(lambda: reconstruction_loss(decoder(model.encoder(mon)), mon)))
        log.info("autoencoder epoch %d train %.6g monitor %.6g", epoch, total / n, model.history[-1])
    return model


def _pair_batches(n: int, count: int, batch: int, rng: np.random.Generator):
    i = rng.integers(0, n, size=count)
    j = (i + rng.integers(1, n, size=count)) % n
    for s in range(0, count, batch):
        yield i[s:s + batch], j[s:s + batch]


def train_siamese(samples, pairwise_d: np.ndarray, cfg: EncoderConfig) -> ChartModel:
    samples = _check_input(samples, cfg)
    pairwise_d = np.asarray(pairwise_d, dtype=float)
    if pairwise_d.shape != (len(samples), len(samples)):
        raise ValueError(f"pairwise_d shape {pairwise_d.shape} inconsistent with {len(samples)} samples")
    feats = featurize(samples)
    model = new_chart(cfg, "siamese")
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x51A])
    n = len(feats)
    count = cfg.pairs_per_epoch or n
    mi, mj = next(_pair_batches(n, MONITOR_SIZE, MONITOR_SIZE, np.random.default_rng([cfg.seed, 0x30])))

    def monitor_loss():
        z = model.encoder(np.concatenate([feats[mi], feats[mj]]))
        return siamese_loss(T.slice_(z, slice(0, len(mi))), T.slice_(z, slice(len(mi), None)),
                            pairwise_d[mi, mj], cfg.rho_eps)

    for epoch in range(cfg.epochs):
        opt.lr = _lr_at(cfg, epoch)
        total = 0.0
        for b, (i, j) in enumerate(_pair_batches(n, count, cfg.batch_size, rng)):
            z = model.encoder(np.concatenate([feats[i], feats[j]]))
            zi, zj = T.slice_(z, slice(0, len(i))), T.slice_(z, slice(len(i), None))
            loss = siamese_loss(zi, zj, pairwise_d[i, j], cfg.rho_eps)
            total += _step(loss, params, opt, epoch, b) * len(i)
        model.history.append(_monitor(monitor_loss))
        log.info("siamese epoch %d train %.6g monitor %.6g", epoch, total / count, model.history[-1])
    return model


def mine_triplets(pairwise_d: np.ndarray, n_triplets: int, rng: np.random.Generator) -> np.ndarray:
    """Random (anchor, positive, negative) index triples with d(a,p) < d(a,n).

    Each draw picks an anchor and two distinct others; the closer one (in
    pairwise_d) becomes the positive. Tied draws are discarded, so fewer than
    ``n_triplets`` rows may come back.
    """
    pairwise_d = np.asarray(pairwise_d)
    n = len(pairwise_d)
    if n < 3:
        raise ValueError(f"triplet mining needs at least 3 samples, got {n}")
    a = rng.integers(0, n, size=n_triplets)
    o1 = (a + rng.integers(1, n, size=n_triplets)) % n
    # second partner distinct from both anchor and o1
    step = rng.integers(1, n - 1, size=n_triplets)
    o2 = o1.copy()
    for k in range(n_triplets):
        cand = (o1[k] + step[k]) % n
        if cand == a[k]:
            cand = (cand + 1) % n
            if cand == o1[k]:
                cand = (cand + 1) % n
        o2[k] = cand
    d1 = pairwise_d[a, o1]
    d2 = pairwise_d[a, o2]
    keep = d1 != d2
    pos = np.where(d1 < d2, o1, o2)
    neg = np.where(d1 < d2, o2, o1)
    out = np.column_stack([a, pos, neg])[keep]
    if len(out) == 0 and n_triplets > 0:
        warnings.warn("all sampled triplets were ties; no triplets produced", RuntimeWarning, stacklevel=2)
    return out


def train_triplet(samples, pairwise_d: np.ndarray, cfg: EncoderConfig, margin: float | None = None) -> ChartModel:
    samples = _check_input(samples, cfg, minimum=3)
    pairwise_d = np.asarray(pairwise_d, dtype=float)
    if pairwise_d.shape != (len(samples), len(samples)):
        raise ValueError(f"pairwise_d shape {pairwise_d.shape} inconsistent with {len(samples)} samples")
    margin = cfg.margin if margin is None else margin
    feats = featurize(samples)
    model = new_chart(cfg, "triplet")
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x781])
    n = len(feats)
    count = cfg.pairs_per_epoch or n
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mon = mine_triplets(pairwise_d, MONITOR_SIZE, np.random.default_rng([cfg.seed, 0x30]))

    def monitor_loss():
        m = len(mon)
        z = model.encoder(feats[mon.T.reshape(-1)])
        return triplet_loss(T.slice_(z, slice(0, m)), T.slice_(z, slice(m, 2 * m)),
                            T.slice_(z, slice(2 * m, None)), margin)

    for epoch in range(cfg.epochs):
        opt.lr = _lr_at(cfg, epoch)
        trip = mine_triplets(pairwise_d, count, rng)
        total = 0.0
        for b, start in enumerate(range(0, len(trip), cfg.batch_size)):
            t = trip[start:start + cfg.batch_size]
            m = len(t)
            z = model.encoder(feats[t.T.reshape(-1)])
            loss = triplet_loss(T.slice_(z, slice(0, m)), T.slice_(z, slice(m, 2 * m)),
                                T.slice_(z, slice(2 * m, None)), margin)
            total += _step(loss, params, opt, epoch, b) * m
        model.history.append(_monitor(monitor_loss) if len(mon) else 0.0)
        log.info("triplet epoch %d train %.6g monitor %.6g", epoch, total / max(len(trip), 1), model.history[-1])
    return model


def train_chart(variant: str, samples, cfg: EncoderConfig, pairwise_d: np.ndarray | None = None) -> ChartModel:
    if variant == "autoencoder":
        return train_autoencoder(samples, cfg)
    if pairwise_d is None:
        raise ValueError(f"{variant} training needs the pairwise ADP dissimilarity matrix")
    if variant == "siamese":
        return train_siamese(samples, pairwise_d, cfg)
    if variant == "triplet":
        return train_triplet(samples, pairwise_d, cfg)
    raise ValueError(f"unknown chart variant {variant!r}")


# ---------------------------------------------------------------- Isomap


class DisconnectedGraphError(ValueError):
    def __init__(self, sizes):
        super().__init__(f"kNN graph is disconnected; component sizes {sorted(sizes, reverse=True)}")
        self.sizes = sizes


def isomap_chart(pairwise_d: np.ndarray, k_neighbors: int, d_out: int = 2) -> np.ndarray:
    """Classical Isomap on a precomputed dissimilarity matrix -> (n, d_out) coordinates.

    Eigenvector signs are fixed so each column's largest-magnitude entry is
    positive, which makes repeated runs agree exactly.
    """
    d = np.asarray(pairwise_d, dtype=float)
    n = len(d)
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    k = min(k_neighbors, n - 1)
    order = np.argsort(d + np.diag(np.full(n, np.inf)), axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = order.reshape(-1)
    w = d[rows, cols]
    graph = np.zeros((n, n))
    graph[rows, cols] = np.where(w > 0, w, 1e-300)
    graph = np.maximum(graph, graph.T)
    sparse = csr_matrix(graph)
    n_comp, labels = connected_components(sparse, directed=False)
    if n_comp > 1:
        raise DisconnectedGraphError(np.bincount(labels).tolist())
    geo = shortest_path(sparse, method="D", directed=False)
    sq = geo ** 2
    j = np.eye(n) - 1.0 / n
    b = -0.5 * j @ sq @ j
    evals, evecs = np.linalg.eigh(b)
    top = np.argsort(evals)[::-1][:d_out]
    vecs = evecs[:, top]
    signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs * np.sqrt(np.maximum(evals[top], 0.0))


def _csi_key(csi: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(csi).tobytes()).hexdigest()


class IsomapChart:
    """Transductive chart: looks up Isomap coordinates of CSI seen at fit time.

    Isomap has no out-of-sample map, so unseen CSI raises KeyError.
    """

    variant = "isomap"

    def __init__(self, csi: np.ndarray, coords: np.ndarray, k_neighbors: int):
        self._table = {_csi_key(h): c for h, c in zip(np.asarray(csi), coords)}
        self.coords = coords
        self.k_neighbors = k_neighbors
        self.config = EncoderConfig(input_shape=np.asarray(csi).shape[1:], dim=coords.shape[1])

    @classmethod
    def fit(cls, csi: np.ndarray, pairwise_d: np.ndarray, k_neighbors: int = 10, d_out: int = 2) -> "IsomapChart":
        return cls(csi, isomap_chart(pairwise_d, k_neighbors, d_out), k_neighbors)

    def encode_many(self, csi: np.ndarray) -> np.ndarray:
        try:
            return np.stack([self._table[_csi_key(h)] for h in np.asarray(csi)])
        except KeyError:
            raise KeyError("Isomap chart cannot embed CSI outside its fitted set") from None

    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.coords).tobytes()).hexdigest()


# ---------------------------------------------------------------- persistence


def save_chart(path, model) -> None:
    """NNCK1 checkpoint with a variant tag and the config block in the metadata."""
    if isinstance(model, IsomapChart):
        save_checkpoint(path, {"coords": model.coords},
                        {"kind": "chart", "variant": "isomap", "k_neighbors": model.k_neighbors,
                         "input_shape": list(model.config.input_shape), "keys": list(model._table)})
        return
    save_checkpoint(path, model.parameters(), model.meta())


def load_chart(path):
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "chart":
        raise CheckpointError(f"{path}: not a chart checkpoint (kind={meta.get('kind')!r})")
    if meta.get("variant") == "isomap":
        chart = IsomapChart.__new__(IsomapChart)
        chart.coords = tensors["coords"]
        chart.k_neighbors = int(meta["k_neighbors"])
        chart._table = dict(zip(meta["keys"], chart.coords))
        chart.config = EncoderConfig(input_shape=meta["input_shape"], dim=chart.coords.shape[1])
        return chart
    model = new_chart(EncoderConfig(**meta["config"]), meta["variant"])
    load_into(model.parameters(), tensors)
    return model


# ---------------------------------------------------------------- chart quality


def _pdist(z: np.ndarray) -> np.ndarray:
    diff = z[:, None, :] - z[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def distance_correlation(z: np.ndarray, pairwise_d: np.ndarray) -> float:
    """Pearson correlation between embedding distances and dissimilarities over all pairs i < j."""
    z = np.asarray(z, dtype=float)
    iu = np.triu_indices(len(z), 1)
    return float(np.corrcoef(_pdist(z)[iu], np.asarray(pairwise_d)[iu])[0, 1])


def triplet_satisfaction(z: np.ndarray, triplets: np.ndarray) -> float:
    """Fraction of (a, p, n) with ||z_a - z_p|| < ||z_a - z_n||."""
    z = np.asarray(z, dtype=float)
    t = np.asarray(triplets)
    if len(t) == 0:
        raise ValueError("no triplets to score")
    dp = np.linalg.norm(z[t[:, 0]] - z[t[:, 1]], axis=1)
    dn = np.linalg.norm(z[t[:, 0]] - z[t[:, 2]], axis=1)
    return float(np.mean(dp < dn))
