"""
Multipath channel simulator for a mixed-resolution massive MIMO uplink

Generates ground-truth multipath parameters, the desired frequency-domain
channel H, the half-array measurement H_c taken by the full-resolution RF
chains, and reproducible datasets.
"""
import logging
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import List, Tuple

import numpy as np
from joblib import Parallel, delayed

logger = logging.getLogger(__name__)

# 163 ns maximum excess delay mapped onto 24 delay taps
DEFAULT_TAU_MAX_S = 163e-9
DEFAULT_TAP_SECONDS = DEFAULT_TAU_MAX_S / 24
DELAY_COLLISION_TAPS = 1e-6


class ChannelKind(Enum):
    DESIRED = "desired"
    CONSTRAINED = "constrained"
    EXPANDED = "expanded"
    NOISY_EXPANDED = "noisy_expanded"
    GENERATED = "generated"
    RECONSTRUCTED = "reconstructed"


class IndexConvention(IntEnum):
    """Which 0-based antenna rows own a full-resolution RF chain"""
    FRF_EVEN = 0  # rows 0, 2, 4, ...
    FRF_ODD = 1   # rows 1, 3, 5, ... (1st, 3rd, ... zeroed in 1-based numbering)


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform linear array; spacing is in wavelengths"""
    num_antennas: int
    spacing: float = 0.5

    def __post_init__(self):
        if self.num_antennas < 1:
            raise ValueError(f"num_antennas must be >= 1, got {self.num_antennas}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")


@dataclass
class MultipathParams:
    """Ground-truth MPC list; delays are in (fractional) delay taps"""
    delays: np.ndarray
    amplitudes: np.ndarray
    doas: np.ndarray

    def __post_init__(self):
        self.delays = np.asarray(self.delays, dtype=float).ravel()
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex).ravel()
        self.doas = np.asarray(self.doas, dtype=float).ravel()
        if not (len(self.delays) == len(self.amplitudes) == len(self.doas)):
            raise ValueError("delays, amplitudes and doas must have equal length")
        if len(self.delays) < 1:
            raise ValueError("at least one multipath component is required")

    @property
    def num_paths(self) -> int:
        return len(self.delays)

    def triplets(self) -> List[Tuple[float, complex, float]]:
        return list(zip(self.delays.tolist(), self.amplitudes.tolist(), self.doas.tolist()))

    def union(self, other: "MultipathParams") -> "MultipathParams":
        return MultipathParams(
            delays=np.concatenate([self.delays, other.delays]),
            amplitudes=np.concatenate([self.amplitudes, other.amplitudes]),
            doas=np.concatenate([self.doas, other.doas]),
        )


@dataclass
class ChannelMatrix:
    """Complex [rows x N_sub] frequency-domain channel"""
    entries: np.ndarray
    kind: ChannelKind = ChannelKind.DESIRED

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=complex)
        if self.entries.ndim != 2:
            raise ValueError(f"channel matrix must be 2-D, got shape {self.entries.shape}")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("channel matrix contains non-finite entries")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape


@dataclass
class DatasetSpec:
    num_samples: int
    num_paths: int
    num_antennas: int = 8
    num_subcarriers: int = 1200
    spacing: float = 0.5
    tau_max_s: float = DEFAULT_TAU_MAX_S
    tap_seconds: float = DEFAULT_TAP_SECONDS
    doa_range: Tuple[float, float] = (0.0, float(np.pi / 4))
    snr_db: float = 20.0
    rng_seed: int = 0
    rayleigh_scale: float = float(1 / np.sqrt(2))
    convention: IndexConvention = IndexConvention.FRF_ODD

    def __post_init__(self):
        self.doa_range = tuple(float(v) for v in self.doa_range)
        self.convention = IndexConvention(self.convention)

    @property
    def tau_max_taps(self) -> float:
        return seconds_to_taps(self.tau_max_s, self.tap_seconds)

    @property
    def geometry(self) -> ArrayGeometry:
        return ArrayGeometry(self.num_antennas, self.spacing)

    def validate(self) -> List[str]:
        """Return a list of issues (empty when the dataset can be sampled)"""
        issues = []
        if self.num_samples < 1:
            issues.append("num_samples must be at least 1")
        if self.num_paths < 1:
            issues.append("num_paths must be at least 1")
        if self.num_antennas < 2 or self.num_antennas % 2:
            issues.append("num_antennas must be even (half the array is full resolution)")
        if not np.isfinite(self.snr_db):
            issues.append("snr_db must be finite")
        if self.tau_max_taps >= self.num_subcarriers:
            issues.append("tau_max must map to fewer taps than num_subcarriers")
        low, high = self.doa_range
        if not (0.0 <= low <= high < np.pi / 2):
            issues.append("doa_range must lie inside [0, pi/2)")
        return issues


def seconds_to_taps(tau_s, tap_seconds: float = DEFAULT_TAP_SECONDS):
    if np.ndim(tau_s):
        return np.asarray(tau_s, dtype=float) / tap_seconds
    return float(tau_s) / tap_seconds


def constrained_geometry(geom: ArrayGeometry) -> ArrayGeometry:
    """Geometry seen by the full-resolution half of the array: M/2 elements at 2d"""
    if geom.num_antennas % 2:
        raise ValueError(f"array size must be even, got {geom.num_antennas}")
    return ArrayGeometry(geom.num_antennas // 2, 2 * geom.spacing)


def full_resolution_rows(num_antennas: int, convention: IndexConvention = IndexConvention.FRF_ODD) -> np.ndarray:
    if num_antennas % 2:
        raise ValueError(f"array size must be even, got {num_antennas}")
    return np.arange(int(convention), num_antennas, 2)


def steering_vector(theta: float, spacing: float, num_antennas: int) -> np.ndarray:
    """ULA response e^{j m mu}, mu = 2 pi d cos(theta)"""
    if num_antennas < 1:
        raise ValueError(f"num_antennas must be >= 1, got {num_antennas}")
    mu = 2 * np.pi * spacing * np.cos(theta)
    return np.exp(1j * mu * np.arange(num_antennas))


def steering_matrix(doas: np.ndarray, spacing: float, num_antennas: int) -> np.ndarray:
    mu = 2 * np.pi * spacing * np.cos(np.asarray(doas, dtype=float))
    return np.exp(1j * np.outer(np.arange(num_antennas), mu))


def delay_matrix(delays: np.ndarray, num_subcarriers: int) -> np.ndarray:
    """[L x N_sub] phase ramps e^{-j 2 pi n tau / N_sub}"""
    n = np.arange(num_subcarriers)
    return np.exp(-2j * np.pi * np.outer(np.asarray(delays, dtype=float), n) / num_subcarriers)


def channel_subcarrier(params: MultipathParams, n: int, geom: ArrayGeometry, num_subcarriers: int) -> np.ndarray:
    if not 0 <= n < num_subcarriers:
        raise ValueError(f"subcarrier index {n} outside [0, {num_subcarriers})")
    ramps = params.amplitudes * np.exp(-2j * np.pi * n * params.delays / num_subcarriers)
    return steering_matrix(params.doas, geom.spacing, geom.num_antennas) @ ramps


def full_channel(params: MultipathParams, geom: ArrayGeometry, num_subcarriers: int) -> ChannelMatrix:
    a = steering_matrix(params.doas, geom.spacing, geom.num_antennas)
    d = delay_matrix(params.delays, num_subcarriers)
    return ChannelMatrix(a @ (params.amplitudes[:, None] * d), ChannelKind.DESIRED)


def noise_like(entries: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Circular complex Gaussian noise referenced to the mean entry power of `entries`"""
    if np.isinf(snr_db) and snr_db > 0:
        return np.zeros_like(entries, dtype=complex)
    power = float(np.mean(np.abs(entries) ** 2))
    variance = power / 10 ** (snr_db / 10)
    shape = entries.shape
    return np.sqrt(variance / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def add_awgn(H: ChannelMatrix, snr_db: float, rng: np.random.Generator) -> ChannelMatrix:
    kind = ChannelKind.NOISY_EXPANDED if H.kind == ChannelKind.EXPANDED else H.kind
    return ChannelMatrix(H.entries + noise_like(H.entries, snr_db, rng), kind)


def constrained_channel(params: MultipathParams, geom: ArrayGeometry, num_subcarriers: int,
                        snr_db: float, rng: np.random.Generator,
                        convention: IndexConvention = IndexConvention.FRF_ODD) -> ChannelMatrix:
    """
    Half-array measurement H_c. `geom` is the full array; the measured
    sub-array has M/2 elements at twice the spacing.
    """
    rows = full_resolution_rows(geom.num_antennas, convention)
    clean = full_channel(params, geom, num_subcarriers).entries[rows]
    return ChannelMatrix(clean + noise_like(clean, snr_db, rng), ChannelKind.CONSTRAINED)


def expand_zero_rows(H_c: ChannelMatrix, convention: IndexConvention = IndexConvention.FRF_ODD) -> ChannelMatrix:
    half, num_sub = H_c.shape
    out = np.zeros((2 * half, num_sub), dtype=complex)
    out[full_resolution_rows(2 * half, convention)] = H_c.entries
    return ChannelMatrix(out, ChannelKind.EXPANDED)


def subsample_rows(H: ChannelMatrix, convention: IndexConvention = IndexConvention.FRF_ODD) -> ChannelMatrix:
    return ChannelMatrix(H.entries[full_resolution_rows(H.shape[0], convention)], ChannelKind.CONSTRAINED)


def simulate_measurement(H: ChannelMatrix, snr_db: float, rng: np.random.Generator,
                         convention: IndexConvention = IndexConvention.FRF_ODD) -> Tuple[np.ndarray, ChannelMatrix]:
    """
    Draw one full-array noise realization Z and return (Z, H_c) with
    H_c the full-resolution rows of H + Z.
    """
    Z = noise_like(H.entries, snr_db, rng)
    rows = full_resolution_rows(H.shape[0], convention)
    return Z, ChannelMatrix((H.entries + Z)[rows], ChannelKind.CONSTRAINED)


def sample_rng(seed: int, sample_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(sample_index)])


def measurement_rng(seed: int, sample_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(sample_index), 1])


def _distinct_delays(rng: np.random.Generator, count: int, tau_max: float) -> np.ndarray:
    delays = rng.uniform(0.0, tau_max, count)
    while True:
        order = np.argsort(delays)
        close = np.diff(delays[order]) < DELAY_COLLISION_TAPS
        if not close.any():
            return delays
        redraw = order[1:][close]
        delays[redraw] = rng.uniform(0.0, tau_max, len(redraw))


def draw_multipath(spec: DatasetSpec, rng: np.random.Generator) -> MultipathParams:
    """Rayleigh magnitudes, uniform phases, distinct uniform delays, uniform DoAs"""
    low, high = spec.doa_range
    if not (0.0 <= low <= high < np.pi / 2):
        raise ValueError(f"doa_range {spec.doa_range} must lie inside [0, pi/2)")
    L = spec.num_paths
    magnitude = rng.rayleigh(spec.rayleigh_scale, L)
    phase = rng.uniform(0.0, 2 * np.pi, L)
    delays = _distinct_delays(rng, L, spec.tau_max_taps)
    doas = rng.uniform(low, high, L)
    return MultipathParams(delays=delays, amplitudes=magnitude * np.exp(1j * phase), doas=doas)


def _sample_one(spec: DatasetSpec, index: int) -> Tuple[MultipathParams, ChannelMatrix]:
    params = draw_multipath(spec, sample_rng(spec.rng_seed, index))
    return params, full_channel(params, spec.geometry, spec.num_subcarriers)


def sample_dataset(spec: DatasetSpec, n_jobs: int = 1) -> List[Tuple[MultipathParams, ChannelMatrix]]:
    """Generate a dataset; every sample uses its own (seed, index) stream"""
    issues = spec.validate()
    if issues:
        raise ValueError(f"invalid dataset spec: {'; '.join(issues)}")
    logger.info("Sampling %d channels with %d MPCs (seed %d)", spec.num_samples, spec.num_paths, spec.rng_seed)
    if n_jobs == 1:
        return [_sample_one(spec, i) for i in range(spec.num_samples)]
    return Parallel(n_jobs=n_jobs)(delayed(_sample_one)(spec, i) for i in range(spec.num_samples))
