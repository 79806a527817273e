"""Angle-delay profiles and the ADP cosine dissimilarity.

Transform convention: unnormalized DFT along the antenna axis, 1/N_SC
inverse DFT along subcarriers. Hence ||ADP_b||_F^2 = (N_r / N_SC) ||H_b||_F^2.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class UndefinedMetricError(ValueError):
    """A per-BS profile has zero norm, so the cosine term is undefined."""

    def __init__(self, msg: str, pair: tuple[int, int] | None = None, bs: int | None = None):
        super().__init__(msg)
        self.pair = pair
        self.bs = bs


def angle_delay(csi: np.ndarray) -> np.ndarray:
    """Complex angle-delay transform over the last two axes (rx, sc)."""
    return np.fft.ifft(np.fft.fft(csi, axis=-2), axis=-1)


def adp_transform(csi: np.ndarray) -> np.ndarray:
    """Magnitude angle-delay profiles; (..., n_bs, n_rx, n_sc) -> same shape, real >= 0."""
    return np.abs(angle_delay(csi))


def _unit_profiles(csi: np.ndarray, complex_inner: bool = False) -> np.ndarray:
    """Per-BS Frobenius-normalized profiles flattened to (..., n_bs, n_rx*n_sc)."""
    ad = angle_delay(csi)
    prof = ad if complex_inner else np.abs(ad)
    flat = prof.reshape(*prof.shape[:-2], -1)
    norms = np.sqrt(np.sum(np.abs(flat) ** 2, axis=-1, keepdims=True))
    if np.any(norms == 0):
        bad = np.argwhere(norms[..., 0] == 0)[0]
        raise UndefinedMetricError(f"zero-norm angle-delay profile at index {tuple(int(v) for v in bad)}",
                                   pair=(int(bad[0]), -1) if len(bad) > 1 else None, bs=int(bad[-1]))
    return flat / norms


def adp_dissimilarity(h_i: np.ndarray, h_j: np.ndarray, complex_inner: bool = False) -> float:
    """Sum over BSs of 1 - cosine similarity between angle-delay profiles.

    With magnitude profiles (default) the result lies in [0, N_BS]. With
    ``complex_inner`` the real part of the complex Frobenius inner product is
    used instead, giving [0, 2 N_BS].
    """
    h_i = np.asarray(h_i)
    h_j = np.asarray(h_j)
    if h_i.shape != h_j.shape:
        raise ValueError(f"CSI shape mismatch: {h_i.shape} vs {h_j.shape}")
    u = _unit_profiles(h_i, complex_inner)
    v = _unit_profiles(h_j, complex_inner)
    # 1 - <u, v> == ||u - v||^2 / 2 for unit vectors; exact zero when u == v
    return float(np.sum(0.5 * np.sum(np.abs(u - v) ** 2, axis=-1)))


class ProfileIndex:
    """Precomputed unit profiles for fast one-vs-many and many-vs-many ADP distances."""

    def __init__(self, csi: np.ndarray, complex_inner: bool = False):
        self.complex_inner = complex_inner
        self.units = _unit_profiles(np.asarray(csi), complex_inner)  # (N, n_bs, F)

    def __len__(self) -> int:
        return len(self.units)

    def query(self, h: np.ndarray) -> np.ndarray:
        u = _unit_profiles(np.asarray(h), self.complex_inner)  # (n_bs, F)
        diff = self.units - u[None]
        return 0.5 * np.sum(np.sum(np.abs(diff) ** 2, axis=-1), axis=-1)

    def query_units(self, u: np.ndarray) -> np.ndarray:
        diff = self.units - u[None]
        return 0.5 * np.sum(np.sum(np.abs(diff) ** 2, axis=-1), axis=-1)

    def submatrix(self, idx: np.ndarray) -> np.ndarray:
        return _gram_dissimilarity(self.units[np.asarray(idx)])


def _gram_dissimilarity(units: np.ndarray) -> np.ndarray:
    n, n_bs, _ = units.shape
    m = np.zeros((n, n))
    for b in range(n_bs):
        u = units[:, b, :]
        g = (u @ u.conj().T).real
        m += 1.0 - g
    m = np.maximum(m, 0.0)
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 0.0)
    return m


def pairwise_dissimilarity(samples, complex_inner: bool = False, chunk: int | None = None) -> np.ndarray:
    """Dense symmetric ADP dissimilarity matrix with zero diagonal."""
    samples = np.asarray(samples)
    if len(samples) < 2:
        raise ValueError("pairwise_dissimilarity needs at least 2 samples")
    try:
        units = _unit_profiles(samples, complex_inner)
    except UndefinedMetricError as exc:
        i = exc.pair[0]
        pair = (i, 1 if i == 0 else 0)
        raise UndefinedMetricError(f"zero-norm profile of sample {i} at BS {exc.bs}; pair {pair} "
                                   f"(and every pair involving sample {i}) is undefined",
                                   pair=pair, bs=exc.bs) from exc
    if chunk is None:
        return _gram_dissimilarity(units)
    return np.vstack(list(iter_dissimilarity_rows(units, chunk)))


def iter_dissimilarity_rows(units: np.ndarray, chunk: int = 256):
    """Yield row blocks of the dissimilarity matrix from unit profiles (streaming mode)."""
    n, n_bs, _ = units.shape
    for start in range(0, n, chunk):
        block = units[start:start + chunk]
        rows = np.zeros((len(block), n))
        for b in range(n_bs):
            rows += 1.0 - (block[:, b, :] @ units[:, b, :].conj().T).real
        rows = np.maximum(rows, 0.0)
        for r in range(len(block)):
            rows[r, start + r] = 0.0
        yield rows


# ---------------------------------------------------------------- ADPM1 cache

ADPM_MAGIC = b"ADPM1"


def save_adpm(path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected square matrix, got {m.shape}")
    Path(path).write_bytes(ADPM_MAGIC + struct.pack("<I", m.shape[0]) + np.ascontiguousarray(m).tobytes())


def load_adpm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:5] != ADPM_MAGIC:
        raise ValueError(f"{path}: not an ADPM1 file")
    (n,) = struct.unpack_from("<I", buf, 5)
    if len(buf) != 9 + 4 * n * n:
        raise ValueError(f"{path}: truncated ADPM1 payload")
    return np.frombuffer(buf, dtype="<f4", offset=9).reshape(n, n).astype(np.float64)
