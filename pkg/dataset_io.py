"""
Binary envelope for datasets, model checkpoints and tensor bundles

Every file starts with the magic b"MRCE1" and one kind byte, then a
little-endian payload:

- Dataset (b"D"): header {M, N_sub, L, num_samples (u32), seed (u64),
  index convention (u8)}, then per sample L x (tau, Re alpha, Im alpha, theta)
  as float64 followed by H as interleaved re/im float64, row-major.
- Checkpoint (b"C") and tensor bundle (b"T"): count (u32), then per array
  {name, dtype, shape, values}. Checkpoint values are stored as float32.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from channel_sim import ChannelKind, ChannelMatrix, DatasetSpec, IndexConvention, MultipathParams

logger = logging.getLogger(__name__)

MAGIC = b"MRCE1"
KIND_DATASET = b"D"
KIND_CHECKPOINT = b"C"
KIND_TENSORS = b"T"

_DATASET_HEADER = struct.Struct("<IIIIQB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<c16"), 3: np.dtype("<i8")}
_DTYPE_CODES = {dt: code for code, dt in _DTYPES.items()}

PathLike = Union[str, Path]
Sample = Tuple[MultipathParams, ChannelMatrix]


class DatasetHeader:
    def __init__(self, num_antennas: int, num_subcarriers: int, num_paths: int,
                 num_samples: int, seed: int, convention: IndexConvention):
        self.num_antennas = num_antennas
        self.num_subcarriers = num_subcarriers
        self.num_paths = num_paths
        self.num_samples = num_samples
        self.seed = seed
        self.convention = IndexConvention(convention)

    @classmethod
    def from_spec(cls, spec: DatasetSpec) -> "DatasetHeader":
        return cls(spec.num_antennas, spec.num_subcarriers, spec.num_paths,
                   spec.num_samples, spec.rng_seed, spec.convention)

    def __repr__(self):
        return (f"DatasetHeader(M={self.num_antennas}, N_sub={self.num_subcarriers}, L={self.num_paths}, "
                f"samples={self.num_samples}, seed={self.seed}, convention={self.convention.name})")


def _write_envelope(path: PathLike, kind: bytes, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + kind + payload)


def _read_envelope(path: PathLike, kind: bytes) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not an MRCE1 file")
    found = raw[len(MAGIC):len(MAGIC) + 1]
    if found != kind:
        raise ValueError(f"{path} holds kind {found!r}, expected {kind!r}")
    return raw[len(MAGIC) + 1:]


def encode_dataset(samples: List[Sample], header: DatasetHeader) -> bytes:
    if len(samples) != header.num_samples:
        raise ValueError(f"header announces {header.num_samples} samples, got {len(samples)}")
    parts = [_DATASET_HEADER.pack(header.num_antennas, header.num_subcarriers, header.num_paths,
                                  header.num_samples, header.seed, int(header.convention))]
    for params, H in samples:
        if params.num_paths != header.num_paths:
            raise ValueError(f"sample has {params.num_paths} MPCs, header says {header.num_paths}")
        if H.shape != (header.num_antennas, header.num_subcarriers):
            raise ValueError(f"sample channel shape {H.shape} does not match header")
        triplets = np.column_stack([params.delays, params.amplitudes.real, params.amplitudes.imag, params.doas])
        parts.append(triplets.astype("<f8").tobytes())
        parts.append(np.ascontiguousarray(H.entries).astype("<c16").tobytes())
    return b"".join(parts)


def decode_dataset(payload: bytes) -> Tuple[DatasetHeader, List[Sample]]:
    M, N, L, count, seed, convention = _DATASET_HEADER.unpack_from(payload, 0)
    header = DatasetHeader(M, N, L, count, seed, convention)
    offset = _DATASET_HEADER.size
    triplet_bytes = L * 4 * 8
    channel_bytes = M * N * 16
    expected = offset + count * (triplet_bytes + channel_bytes)
    if len(payload) != expected:
        raise ValueError(f"dataset payload is {len(payload)} bytes, expected {expected}")
    samples = []
    for _ in range(count):
        t = np.frombuffer(payload, "<f8", L * 4, offset).reshape(L, 4)
        offset += triplet_bytes
        H = np.frombuffer(payload, "<c16", M * N, offset).reshape(M, N)
        offset += channel_bytes
        params = MultipathParams(delays=t[:, 0].copy(), amplitudes=t[:, 1] + 1j * t[:, 2], doas=t[:, 3].copy())
        samples.append((params, ChannelMatrix(H.copy(), ChannelKind.DESIRED)))
    return header, samples


def write_dataset(path: PathLike, samples: List[Sample], header: DatasetHeader):
    _write_envelope(path, KIND_DATASET, encode_dataset(samples, header))
    logger.info("Wrote %d samples to %s", len(samples), path)


def read_dataset(path: PathLike) -> Tuple[DatasetHeader, List[Sample]]:
    header, samples = decode_dataset(_read_envelope(path, KIND_DATASET))
    logger.info("Read %r from %s", header, path)
    return header, samples


def encode_arrays(arrays: Dict[str, np.ndarray], force_dtype=None) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, values in arrays.items():
        values = np.asarray(values)
        dt = np.dtype(force_dtype) if force_dtype is not None else values.dtype
        dt = dt.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise ValueError(f"array {name!r} has unsupported dtype {values.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(np.ascontiguousarray(values).astype(dt).tobytes())
    return b"".join(parts)


def decode_arrays(payload: bytes) -> Dict[str, np.ndarray]:
    (count,) = struct.unpack_from("<I", payload, 0)
    offset = 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack_from("<BB", payload, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", payload, offset)
        offset += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(payload, dt, size, offset).reshape(shape).copy()
        offset += size * dt.itemsize
    if offset != len(payload):
        raise ValueError(f"{len(payload) - offset} trailing bytes after {count} arrays")
    return arrays


def write_checkpoint(path: PathLike, params: Dict[str, np.ndarray]):
    _write_envelope(path, KIND_CHECKPOINT, encode_arrays(params, force_dtype=np.float32))


def read_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    return decode_arrays(_read_envelope(path, KIND_CHECKPOINT))


def write_tensors(path: PathLike, arrays: Dict[str, np.ndarray]):
    _write_envelope(path, KIND_TENSORS, encode_arrays(arrays))


def read_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    return decode_arrays(_read_envelope(path, KIND_TENSORS))
