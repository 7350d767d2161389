"""
Deterministic signal transforms between raw channels and ML-ready tensors

Covers normalization and re/im stacking for the cGAN, the time-domain
chain used by the LSTM (IFFT, profiling, random-sequence mixing, 1-bit
quantization) and the magnitude/phase split and recombination.
"""
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Union

import numpy as np
from scipy import fft as sp_fft

from channel_sim import ChannelMatrix

DEFAULT_OVERSAMPLE = 4
DEFAULT_WINDOW = 256
DEFAULT_WINDOW_OFFSET = -64

ArrayLike = Union[np.ndarray, ChannelMatrix]


def as_array(H: ArrayLike) -> np.ndarray:
    return H.entries if isinstance(H, ChannelMatrix) else np.asarray(H)


@dataclass
class ScaleRecord:
    frobenius_norm: float
    scale_factor: float

    @property
    def gain(self) -> float:
        return self.scale_factor / self.frobenius_norm


@dataclass
class StackedChannel:
    """Real [M x N_sub x 2] tensor plus the record needed to undo normalization"""
    data: np.ndarray
    scale_record: ScaleRecord


class CirSource(Enum):
    TRUTH = "truth"
    NOISY_MEASUREMENT = "noisy"
    GENERATED = "generated"
    QUANTIZED = "quantized"


@dataclass
class ProfiledCIR:
    taps: np.ndarray
    source: CirSource = CirSource.TRUTH
    window_offset: int = 0
    oversample_factor: int = 1

    def __len__(self) -> int:
        return len(self.taps)


@dataclass
class MixingSequence:
    s: np.ndarray
    seed: int

    def conjugate(self) -> "MixingSequence":
        return MixingSequence(np.conj(self.s), self.seed)


def stack_reim(H: ArrayLike) -> np.ndarray:
    H = as_array(H)
    return np.stack([H.real, H.imag], axis=-1)


def unstack_reim(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T)
    if T.shape[-1] != 2:
        raise ValueError(f"last axis must hold (re, im), got shape {T.shape}")
    return T[..., 0] + 1j * T[..., 1]


def default_scale_factor(shape) -> float:
    return float(np.sqrt(shape[0] * shape[1]))


def normalize_scale(H: ArrayLike, scale_factor: Optional[float] = None,
                    record: Optional[ScaleRecord] = None) -> StackedChannel:
    """
    Divide by the Frobenius norm, multiply by `scale_factor` and stack re/im.
    Passing `record` reuses another matrix's normalization.
    """
    H = as_array(H)
    if record is None:
        norm = float(np.linalg.norm(H))
        if norm == 0.0:
            raise ValueError("cannot normalize an all-zero channel matrix")
        if scale_factor is None:
            scale_factor = default_scale_factor(H.shape)
        record = ScaleRecord(norm, float(scale_factor))
    return StackedChannel(stack_reim(H * record.gain), record)


def denormalize(stacked: StackedChannel) -> np.ndarray:
    return unstack_reim(stacked.data) / stacked.scale_record.gain


def build_gan_pair(H_ce: ArrayLike, H: ArrayLike, scale_factor: Optional[float] = None):
    """Input and label share the input's scale record, which is all inference sees"""
    x = normalize_scale(H_ce, scale_factor)
    y = normalize_scale(H, record=x.scale_record)
    return x, y


def ifft_rows(H: ArrayLike) -> np.ndarray:
    return sp_fft.ifft(as_array(H), axis=-1, norm="ortho")


def fft_rows(cir: np.ndarray) -> np.ndarray:
    return sp_fft.fft(np.asarray(cir), axis=-1, norm="ortho")


def _window_indices(length: int, window: int, offset: int) -> np.ndarray:
    return (offset + np.arange(window)) % length


def profile_rows(cir: np.ndarray, oversample: int = DEFAULT_OVERSAMPLE, window: int = DEFAULT_WINDOW,
                 offset: int = DEFAULT_WINDOW_OFFSET) -> np.ndarray:
    """
    Oversample each CIR row by spectral zero padding and keep `window`
    contiguous taps from `offset` (negative offsets wrap around).
    Original-grid samples are reproduced exactly at multiples of `oversample`.
    """
    cir = np.atleast_2d(np.asarray(cir))
    num_sub = cir.shape[-1]
    if oversample < 1:
        raise ValueError(f"oversample factor must be >= 1, got {oversample}")
    long_len = oversample * num_sub
    if window > long_len:
        raise ValueError(f"window {window} exceeds oversampled length {long_len}")
    spectrum = sp_fft.fft(cir, axis=-1, norm="ortho")
    padded = np.zeros(cir.shape[:-1] + (long_len,), dtype=complex)
    padded[..., :num_sub] = spectrum
    oversampled = sp_fft.ifft(padded, axis=-1, norm="ortho") * np.sqrt(oversample)
    return oversampled[..., _window_indices(long_len, window, offset)]


def profile(cir_row: np.ndarray, oversample: int = DEFAULT_OVERSAMPLE, window: int = DEFAULT_WINDOW,
            offset: int = DEFAULT_WINDOW_OFFSET, source: CirSource = CirSource.TRUTH) -> ProfiledCIR:
    taps = profile_rows(np.asarray(cir_row).ravel(), oversample, window, offset)[0]
    return ProfiledCIR(taps, source, offset, oversample)


def gen_sequence(length: int, seed: int) -> MixingSequence:
    phases = np.random.default_rng(seed).uniform(0.0, 2 * np.pi, length)
    return MixingSequence(np.exp(1j * phases), seed)


def apply_sequence(p: Union[ProfiledCIR, np.ndarray], seq: MixingSequence):
    """F^-1{ F{p} * s } along the last axis"""
    taps = p.taps if isinstance(p, ProfiledCIR) else np.asarray(p)
    if taps.shape[-1] != len(seq.s):
        raise ValueError(f"sequence length {len(seq.s)} does not match signal length {taps.shape[-1]}")
    mixed = sp_fft.ifft(sp_fft.fft(taps, axis=-1, norm="ortho") * seq.s, axis=-1, norm="ortho")
    if isinstance(p, ProfiledCIR):
        return ProfiledCIR(mixed, p.source, p.window_offset, p.oversample_factor)
    return mixed


def quantize_1bit(x: np.ndarray) -> np.ndarray:
    """(sign(Re) + j sign(Im)) / sqrt(2) with sign(0) = +1"""
    x = np.asarray(x)
    re = np.where(np.real(x) >= 0, 1.0, -1.0)
    im = np.where(np.imag(x) >= 0, 1.0, -1.0)
    return (re + 1j * im) / np.sqrt(2)


def phase_of(x: np.ndarray) -> np.ndarray:
    """Angle in (-pi, pi]; phase_of(0) = 0"""
    phi = np.angle(np.asarray(x))
    return np.where(phi <= -np.pi, np.pi, phi)


def combine_mag_phase(mag: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return np.asarray(mag) * np.exp(1j * np.asarray(phi))


def time_domain_chain(H: ArrayLike, seq: MixingSequence, oversample: int = DEFAULT_OVERSAMPLE,
                      window: int = DEFAULT_WINDOW, offset: int = DEFAULT_WINDOW_OFFSET) -> np.ndarray:
    """Frequency-domain matrix -> mixed, profiled CIR rows [M x K]"""
    return apply_sequence(profile_rows(ifft_rows(H), oversample, window, offset), seq)


@dataclass
class LstmSequences:
    """One sequence per antenna row: inputs [B, K, 2], labels [B, K]"""
    inputs: np.ndarray
    labels: np.ndarray
    generated: np.ndarray   # mixed profiled cGAN output, complex [B, K]
    reference: np.ndarray   # mixed profiled label chain, complex [B, K]
    measured: np.ndarray    # mixed profiled noisy chain, complex [B, K]

    def __len__(self) -> int:
        return len(self.labels)


def build_lstm_inputs(H_g: ArrayLike, H: ArrayLike, Z: np.ndarray, seq: Union[int, MixingSequence],
                      oversample: int = DEFAULT_OVERSAMPLE, window: int = DEFAULT_WINDOW,
                      offset: int = DEFAULT_WINDOW_OFFSET, label_source: str = "truth") -> LstmSequences:
    H_g, H, Z = as_array(H_g), as_array(H), np.asarray(Z)
    if not (H_g.shape == H.shape == Z.shape):
        raise ValueError(f"shape mismatch: H_g {H_g.shape}, H {H.shape}, Z {Z.shape}")
    if label_source not in ("truth", "noisy"):
        raise ValueError(f"label_source must be 'truth' or 'noisy', got {label_source!r}")
    if isinstance(seq, (int, np.integer)):
        seq = gen_sequence(window, int(seq))

    truth = time_domain_chain(H, seq, oversample, window, offset)
    noisy = time_domain_chain(H + Z, seq, oversample, window, offset)
    generated = time_domain_chain(H_g, seq, oversample, window, offset)
    quantized = quantize_1bit(noisy)

    reference = truth if label_source == "truth" else noisy
    inputs = np.stack([phase_of(generated), phase_of(quantized)], axis=-1)
    return LstmSequences(inputs, phase_of(reference), generated, reference, noisy)


def concat_sequences(parts: List[LstmSequences]) -> LstmSequences:
    return LstmSequences(*(np.concatenate([getattr(p, name) for p in parts])
                           for name in ("inputs", "labels", "generated", "reference", "measured")))


def nse(reference: np.ndarray, estimate: np.ndarray, axis=None) -> np.ndarray:
    """||reference - estimate||^2 / ||reference||^2, optionally per slice along `axis`"""
    reference = as_array(reference)
    estimate = as_array(estimate)
    if reference.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {estimate.shape}")
    energy = np.sum(np.abs(reference) ** 2, axis=axis)
    if np.any(energy == 0):
        raise ValueError("NSE is undefined for an all-zero reference")
    return np.sum(np.abs(reference - estimate) ** 2, axis=axis) / energy
