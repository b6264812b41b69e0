"""
Checkpoints
Learner state (parameters, optimizer moments, duals, step count, learner
walltime, rng) plus run counters, written atomically with a CRC32 over the body.

Layout: magic | u16 format version | f64 timestamp | u32 crc | u64 body length | body
The timestamp sits outside the CRC so two saves of the same state differ only there.
"""

import logging
import os
import struct
import tempfile
import time
import zlib
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from errors import ChecksumError
from neural import scalar

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ALCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHdIQ")
_TENSOR_HEADER = struct.Struct("<HBB")

DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}

COUNTER_PREFIX = "counter/"


def _dtype_code(array: np.ndarray) -> int:
    if array.dtype == np.uint8 or array.dtype == np.bool_:
        return 2
    if array.dtype.kind in ("i", "u"):
        return 1
    if array.dtype.kind == "f":
        return 0
    raise ValueError(f"unsupported checkpoint dtype {array.dtype}")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        array = np.asarray(tensors[name])
        code = _dtype_code(array)
        data = np.ascontiguousarray(array, dtype=DTYPES[code])
        encoded_name = name.encode("utf-8")
        parts.append(_TENSOR_HEADER.pack(len(encoded_name), code, data.ndim))
        parts.append(encoded_name)
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def decode_tensors(body: bytes) -> Dict[str, np.ndarray]:
    try:
        (count,) = struct.unpack_from("<I", body, 0)
        offset = 4
        tensors = {}
        for _ in range(count):
            name_length, code, ndim = _TENSOR_HEADER.unpack_from(body, offset)
            offset += _TENSOR_HEADER.size
            name = body[offset:offset + name_length].decode("utf-8")
            offset += name_length
            shape = struct.unpack_from(f"<{ndim}I", body, offset)
            offset += 4 * ndim
            dtype = DTYPES[code]
            size = int(np.prod(shape)) * dtype.itemsize
            if offset + size > len(body):
                raise ChecksumError("checkpoint body is truncated")
            tensors[name] = np.frombuffer(body, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape).copy()
            offset += size
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise ChecksumError(f"malformed checkpoint body: {e}")
    return tensors


def save_checkpoint(path: str, learner, counters: Optional[Mapping[str, int]] = None,
                    timestamp: Optional[float] = None) -> str:
    """Write learner.state_dict() and counters to `path` via a temp file and rename"""
    state = dict(learner.state_dict())
    for name, value in (counters or {}).items():
        state[COUNTER_PREFIX + name] = np.array(value, dtype=np.int64)
    body = encode_tensors(state)
    header = _HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, time.time() if timestamp is None else timestamp,
                          zlib.crc32(body), len(body))
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=directory, prefix=".checkpoint-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(body)
            f.flush()
            os.fsync(f.fileno())
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise
    logger.info(f"Checkpoint written to {path} at learner step {int(scalar(state.get('learner_steps', 0)))}")
    return path


def read_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, int], float]:
    """Returns (learner state, counters, timestamp); ChecksumError on any corruption"""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise ChecksumError(f"{path} is too short to be a checkpoint")
    magic, version, timestamp, crc, length = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ChecksumError(f"{path} is not a checkpoint")
    if version != FORMAT_VERSION:
        raise ChecksumError(f"{path} has unsupported checkpoint version {version}")
    body = data[_HEADER.size:]
    if len(body) != length or zlib.crc32(body) != crc:
        raise ChecksumError(f"{path} failed its checksum")
    tensors = decode_tensors(body)
    counters = {name[len(COUNTER_PREFIX):]: int(scalar(value)) for name, value in tensors.items()
                if name.startswith(COUNTER_PREFIX)}
    state = {name: value for name, value in tensors.items() if not name.startswith(COUNTER_PREFIX)}
    return state, counters, timestamp


def restore_checkpoint(path: str, learner) -> Dict[str, int]:
    state, counters, _ = read_checkpoint(path)
    learner.load_state_dict(state)
    logger.info(f"Restored learner from {path} at step {learner.learner_steps}")
    return counters
