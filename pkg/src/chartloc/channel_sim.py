"""Multi-BS OFDM CSI synthesis from LOS + single-bounce scatterer geometry.

CSI tensors are plain complex128 arrays of shape (n_bs, n_rx, n_sc). The
delay-domain transform uses numpy's inverse FFT convention (1/N_SC on the
inverse), so a flat spectrum of ones maps to a unit impulse at tap 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
REFLECTION_LOSS = 0.3


class ConfigError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    n_bs: int = 2
    n_rx: int = 8
    n_sc: int = 64
    carrier_freq: float = 3.5e9
    subcarrier_spacing: float = 120e3
    antenna_spacing_over_lambda: float = 0.5
    # (x_min, y_min, x_max, y_max), meters
    area: tuple[float, float, float, float] = (0.0, 0.0, 20.0, 20.0)
    bs_positions: list[tuple[float, float]] = field(default_factory=lambda: [(-20.0, 10.0), (10.0, -20.0)])
    # broadside direction of each array, radians from +x
    bs_orientations: list[float] = field(default_factory=lambda: [0.0, np.pi / 2])
    n_scatterers: int = 6
    # per-entry complex AWGN std (E|n|^2 = noise_std^2); ~20 dB SNR at 30 m LOS
    noise_std: float = 3e-3
    path_gain: float = 1.0
    scatterer_margin: float = 10.0
    trajectory: bool = False
    step_length: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        self.area = tuple(float(v) for v in self.area)
        self.bs_positions = [tuple(float(c) for c in p) for p in self.bs_positions]
        self.bs_orientations = [float(o) for o in self.bs_orientations]
        self.validate()

    def validate(self) -> None:
        if self.n_bs < 1:
            raise ConfigError(f"n_bs must be >= 1, got {self.n_bs}")
        if self.n_rx < 1:
            raise ConfigError(f"n_rx must be >= 1, got {self.n_rx}")
        if self.n_sc < 2:
            raise ConfigError(f"n_sc must be >= 2, got {self.n_sc}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if len(self.bs_positions) != self.n_bs:
            raise ConfigError(f"bs_positions has {len(self.bs_positions)} entries for n_bs={self.n_bs}")
        if len(self.bs_orientations) != self.n_bs:
            raise ConfigError(f"bs_orientations has {len(self.bs_orientations)} entries for n_bs={self.n_bs}")
        if len(self.area) != 4 or self.area[2] <= self.area[0] or self.area[3] <= self.area[1]:
            raise ConfigError(f"area must be (x_min, y_min, x_max, y_max), got {self.area}")
        if self.n_scatterers < 0:
            raise ConfigError(f"n_scatterers must be >= 0, got {self.n_scatterers}")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def csi_shape(self) -> tuple[int, int, int]:
        return (self.n_bs, self.n_rx, self.n_sc)

    def subcarrier_freqs(self) -> np.ndarray:
        # f_l = f_c + (l-1) * df for 1-based l
        return self.carrier_freq + np.arange(self.n_sc) * self.subcarrier_spacing

    def contains(self, pos) -> bool:
        x0, y0, x1, y1 = self.area
        return x0 <= pos[0] <= x1 and y0 <= pos[1] <= y1


def los_scenario(bs_distance: float = 120.0, **overrides) -> ScenarioConfig:
    """Scatterer-free variant of the default scene with both BSs pulled ``bs_distance`` m out.

    Far arrays see the whole area within one beamwidth, which keeps the
    magnitude-ADP ordering free of sidelobe aliasing.
    """
    kw = dict(n_scatterers=0, bs_positions=[(-bs_distance, 10.0), (10.0, -bs_distance)])
    kw.update(overrides)
    return ScenarioConfig(**kw)


@dataclass(frozen=True)
class PathComponent:
    gain: complex
    delay: float
    aoa: float


@dataclass(frozen=True)
class LabeledSample:
    csi: np.ndarray
    position: np.ndarray


@dataclass
class CsiDataset:
    """Columnar sample store; indexing yields ``LabeledSample``."""

    csi: np.ndarray        # (N, n_bs, n_rx, n_sc) complex128
    positions: np.ndarray  # (N, 2) float64

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return LabeledSample(self.csi[i], self.positions[i])
        return CsiDataset(self.csi[i], self.positions[i])

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> "CsiDataset":
        return cls(np.stack([s.csi for s in samples]), np.stack([np.asarray(s.position, float) for s in samples]))


@dataclass(frozen=True)
class Scene:
    scatterers: np.ndarray  # (n_scatterers, 2)
    phases: np.ndarray      # (n_bs, 1 + n_scatterers), radians, fixed per path


def array_response(aoa: float, n_rx: int, spacing_over_lambda: float = 0.5) -> np.ndarray:
    m = np.arange(n_rx)
    phase = -2.0 * np.pi * spacing_over_lambda * m * np.sin(aoa)
    out = np.exp(1j * phase)
    out[0] = 1.0
    return out


def _bearing(src, dst) -> float:
    return float(np.arctan2(dst[1] - src[1], dst[0] - src[0]))


def _wrap(angle: float) -> float:
    return float((angle + np.pi) % (2.0 * np.pi) - np.pi)


def make_scene(config: ScenarioConfig) -> Scene:
    """Draw the static scatterer layout and per-path phases from the config seed."""
    rng = np.random.default_rng([config.rng_seed, 0x5CE7E])
    x0, y0, x1, y1 = config.area
    m = config.scatterer_margin
    pts = np.column_stack([rng.uniform(x0 - m, x1 + m, config.n_scatterers),
                           rng.uniform(y0 - m, y1 + m, config.n_scatterers)])
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(config.n_bs, 1 + config.n_scatterers))
    return Scene(pts, phases)


def generate_paths(ue_pos, config: ScenarioConfig, scatterers=(), phases=None) -> list[list[PathComponent]]:
    """LOS plus one single-bounce path per scatterer, for every BS.

    Gains are ``A / length * exp(j*theta)`` with reflection loss 0.3 on
    bounce paths; ``phases`` (n_bs, 1 + n_scatterers) supplies theta and
    defaults to zero.
    """
    ue = np.asarray(ue_pos, dtype=float)
    scatterers = np.asarray(scatterers, dtype=float).reshape(-1, 2)
    if phases is None:
        phases = np.zeros((config.n_bs, 1 + len(scatterers)))
    max_delay = 1.0 / config.subcarrier_spacing
    out = []
    for b, (bs, orient) in enumerate(zip(config.bs_positions, config.bs_orientations)):
        bs = np.asarray(bs)
        d_los = float(np.hypot(*(ue - bs)))
        if d_los <= 1e-9:
            raise GeometryError(f"UE at {tuple(ue)} coincides with BS {b}")
        paths = [PathComponent(config.path_gain / d_los * np.exp(1j * phases[b, 0]),
                               d_los / SPEED_OF_LIGHT,
                               _wrap(_bearing(bs, ue) - orient))]
        for s, sc in enumerate(scatterers):
            leg1 = float(np.hypot(*(sc - ue)))
            leg2 = float(np.hypot(*(bs - sc)))
            if leg2 <= 1e-9:
                raise GeometryError(f"scatterer {s} coincides with BS {b}")
            length = leg1 + leg2
            paths.append(PathComponent(REFLECTION_LOSS * config.path_gain / length * np.exp(1j * phases[b, 1 + s]),
                                       length / SPEED_OF_LIGHT,
                                       _wrap(_bearing(bs, sc) - orient)))
        for p in paths:
            if p.delay >= max_delay:
                raise GeometryError(f"path delay {p.delay:.3e}s exceeds OFDM ambiguity 1/df = {max_delay:.3e}s")
        out.append(paths)
    return out


def synth_channel(paths_per_bs: Sequence[Sequence[PathComponent]], config: ScenarioConfig,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    if len(paths_per_bs) != config.n_bs:
        raise ConfigError(f"got paths for {len(paths_per_bs)} BSs, config has n_bs={config.n_bs}")
    freqs = config.subcarrier_freqs()
    h = np.zeros(config.csi_shape, dtype=np.complex128)
    for b, paths in enumerate(paths_per_bs):
        if not paths:
            continue
        gains = np.array([p.gain for p in paths], dtype=np.complex128)
        delays = np.array([p.delay for p in paths])
        steer = np.stack([array_response(p.aoa, config.n_rx, config.antenna_spacing_over_lambda) for p in paths])
        freq_resp = np.exp(-2j * np.pi * np.outer(delays, freqs))  # (P, n_sc)
        h[b] = np.einsum("p,pm,pl->ml", gains, steer, freq_resp)
    if config.noise_std > 0:
        if rng is None:
            raise ConfigError("noise_std > 0 requires an rng")
        s = config.noise_std / np.sqrt(2.0)
        h += s * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    return h


def to_delay_domain(csi: np.ndarray) -> np.ndarray:
    """IDFT along the subcarrier axis, scaled by 1/N_SC."""
    return np.fft.ifft(csi, axis=-1)


def sample_positions(config: ScenarioConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    x0, y0, x1, y1 = config.area
    if not config.trajectory:
        return np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    # smooth random walk: heading drifts slowly, walls reflect
    pos = np.empty((n, 2))
    p = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
    heading = rng.uniform(0, 2 * np.pi)
    for i in range(n):
        pos[i] = p
        heading += rng.normal(0.0, 0.3)
        p = p + config.step_length * np.array([np.cos(heading), np.sin(heading)])
        for ax, lo, hi in ((0, x0, x1), (1, y0, y1)):
            if p[ax] < lo:
                p[ax] = 2 * lo - p[ax]
                heading = np.pi - heading if ax == 0 else -heading
            elif p[ax] > hi:
                p[ax] = 2 * hi - p[ax]
                heading = np.pi - heading if ax == 0 else -heading
        p = np.clip(p, [x0, y0], [x1, y1])
    return pos


def generate_dataset(config: ScenarioConfig, n_samples: int, seed: int | None = None) -> CsiDataset:
    """Draw ``n_samples`` labeled CSI tensors; noise uses a per-sample stream (seed, index)."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    seed = config.rng_seed if seed is None else seed
    scene = make_scene(config)
    positions = sample_positions(config, n_samples, np.random.default_rng([seed, 0x9051]))
    csi = np.empty((n_samples, *config.csi_shape), dtype=np.complex128)
    for i, pos in enumerate(positions):
        paths = generate_paths(pos, config, scene.scatterers, scene.phases)
        csi[i] = synth_channel(paths, config, np.random.default_rng([seed, 0xC51, i]))
    return CsiDataset(csi, positions)
