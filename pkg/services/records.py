"""
Beamsim Record Service
Binary channel record files and network checkpoints (see docs/file-formats.md)
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from services.channel import ChannelSample
from services.errors import CheckpointError, ConfigError
from services.logging import get_logger
from services.nets import Mlp
from services.scenario import ScenarioBatch

logger = get_logger(__name__)

CHANNEL_MAGIC = b"BSCH"
CHECKPOINT_MAGIC = b"BSCK"
FORMAT_VERSION = 1

_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<c16")}
_CODES = {np.dtype("float64"): 1, np.dtype("complex128"): 2}
_SAMPLE_FIELDS = ("H_bar", "sigma2", "H", "H_tilde", "delta_H", "user_angles")

PathLike = Union[str, Path]


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Magic, version, count, then per array: name, dtype code, shape and little-endian data"""
    parts = [CHANNEL_MAGIC, struct.pack("<HH", FORMAT_VERSION, len(arrays))]
    for name, array in arrays.items():
        array = np.asarray(array)
        code = _CODES.get(array.dtype)
        if code is None:
            array = array.astype(np.complex128 if np.iscomplexobj(array) else np.float64)
            code = _CODES[array.dtype]
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_arrays(data: bytes) -> Dict[str, np.ndarray]:
    """Inverse of encode_arrays"""
    if data[:4] != CHANNEL_MAGIC:
        raise ConfigError("not a channel record file (bad magic)")
    try:
        version, count = struct.unpack_from("<HH", data, 4)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported channel record version {version}")
        offset = 8
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + length].decode("utf-8")
            offset += length
            code, ndim = struct.unpack_from("<BB", data, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            dtype = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + size > len(data):
                raise ConfigError(f"channel record truncated in array {name!r}")
            arrays[name] = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=offset) \
                .reshape(shape).astype(dtype.newbyteorder("="))
            offset += size
    except (struct.error, KeyError) as e:
        raise ConfigError(f"malformed channel record: {e}") from e
    return arrays


def batch_arrays(batch: ScenarioBatch) -> Dict[str, np.ndarray]:
    """Named arrays of a batch in record order, with the analog matrix for hybrid scenarios"""
    arrays = {name: getattr(batch.sample, name) for name in _SAMPLE_FIELDS if getattr(batch.sample, name) is not None}
    if batch.analog is not None:
        arrays["analog"] = batch.analog
    return arrays


def encode_channel_records(batch: ScenarioBatch) -> bytes:
    """BSCH bytes of a batch"""
    return encode_arrays(batch_arrays(batch))


def records_sha256(batch: ScenarioBatch) -> str:
    """Hash of the record bytes, used to pin test sets in manifests"""
    return hashlib.sha256(encode_channel_records(batch)).hexdigest()


def save_channel_records(path: PathLike, batch: ScenarioBatch) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_channel_records(batch)
    path.write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    logger.info("channel_records_saved", path=str(path), samples=batch.batch_size, sha256=digest)
    return digest


def load_channel_records(path: PathLike) -> ScenarioBatch:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"channel record file not found: {path}")
    arrays = decode_arrays(path.read_bytes())
    missing = [name for name in _SAMPLE_FIELDS[:5] if name not in arrays]
    if missing:
        raise ConfigError(f"channel record {path} lacks arrays {missing}")
    sample = ChannelSample(**{name: arrays.get(name) for name in _SAMPLE_FIELDS})
    return ScenarioBatch(sample=sample, analog=arrays.get("analog"))


def save_checkpoint(path: PathLike, networks: Mapping[str, Mlp], meta: Optional[dict] = None) -> Path:
    """Magic, version, JSON header (descriptors, metadata, parameter manifest), float64 payload"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    payload = []
    for net_name, net in networks.items():
        for name, value in net.state_dict().items():
            manifest.append([net_name, name, list(value.shape)])
            payload.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    header = {
        "descriptors": {name: net.descriptor for name, net in networks.items()},
        "meta": meta or {},
        "params": manifest,
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<HI", FORMAT_VERSION, len(encoded)) + encoded + b"".join(payload))
    logger.info("checkpoint_saved", path=str(path), networks=list(networks))
    return path


def load_checkpoint(
    path: PathLike,
    expected_descriptors: Optional[Mapping[str, dict]] = None,
) -> Tuple[Dict[str, Dict[str, np.ndarray]], dict]:
    """State dicts per network and the header; rejects mismatched architectures"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    try:
        version, length = struct.unpack_from("<HI", data, 4)
        header = json.loads(data[10:10 + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint header in {path}: {e}") from e
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    if expected_descriptors is not None:
        for name, descriptor in expected_descriptors.items():
            stored = header["descriptors"].get(name)
            if stored != json.loads(json.dumps(descriptor)):
                raise CheckpointError(f"architecture of {name!r} does not match the checkpoint: {stored} vs {descriptor}")

    offset = 10 + length
    states: Dict[str, Dict[str, np.ndarray]] = {name: {} for name in header["descriptors"]}
    for net_name, name, shape in header["params"]:
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(data):
            raise CheckpointError(f"checkpoint {path} is truncated at {net_name}.{name}")
        states[net_name][name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise CheckpointError(f"checkpoint {path} has {len(data) - offset} trailing bytes")
    return states, header
