"""
Payload codec for replay items and dataset records.

Record layout (little-endian):
    u16 schema tag, u16 field count, then per field:
    u8 ndim, ndim x u32 dims, prod(dims) x f64 values.
Field order is fixed per schema.
"""

import logging
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from errors import SchemaMismatchError

logger = logging.getLogger(__name__)

TRANSITION_TAG = 1
SEQUENCE_TAG = 2
EPISODE_TAG = 3

_HEADER = struct.Struct("<HH")


@dataclass
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: float
    discount: float
    next_observation: np.ndarray
    n_actual: int = 1

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("transition reward must be finite")
        if not (self.discount == 0.0 or 0.0 < self.discount <= 1.0):
            raise ValueError(f"discount {self.discount} outside {{0}} U (0, 1]")
        if self.n_actual < 1:
            raise ValueError("n_actual must be >= 1")


@dataclass
class SequenceSlice:
    """Fixed-length slice; observations carry one extra bootstrap entry"""
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    discounts: np.ndarray
    mask: np.ndarray
    start_state: np.ndarray
    burn_in_length: int = 0
    is_episode_start: bool = False
    behavior_log_probs: Optional[np.ndarray] = None

    def __post_init__(self):
        length = len(self.rewards)
        if self.behavior_log_probs is None:
            self.behavior_log_probs = np.zeros(length)
        consistent = (len(self.observations) == length + 1 and len(self.actions) == length
                      and len(self.discounts) == length and len(self.mask) == length
                      and len(self.behavior_log_probs) == length)
        if not consistent:
            raise ValueError("sequence slice arrays are not length-consistent")
        if not 0 <= self.burn_in_length < max(length, 1):
            raise ValueError("burn_in_length must lie in [0, L)")

    @property
    def length(self) -> int:
        return len(self.rewards)


@dataclass
class Episode:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    search_policies: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    truncated: bool = False

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


Item = Union[Transition, SequenceSlice, Episode]


def _pack_fields(tag: int, fields: List[np.ndarray]) -> bytes:
    chunks = [_HEADER.pack(tag, len(fields))]
    for value in fields:
        array = np.ascontiguousarray(value, dtype="<f8")
        chunks.append(struct.pack("<B", array.ndim))
        if array.ndim:
            chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def _unpack_fields(payload: bytes) -> Tuple[int, List[np.ndarray]]:
    tag, count = _HEADER.unpack_from(payload, 0)
    offset = _HEADER.size
    fields = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, offset) if ndim else ()
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        array = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * size
        fields.append(array)
    if offset != len(payload):
        raise ValueError(f"payload has {len(payload) - offset} trailing bytes")
    return tag, fields


def peek_tag(payload: bytes) -> int:
    return _HEADER.unpack_from(payload, 0)[0]


def encode(item: Item) -> bytes:
    if isinstance(item, Transition):
        return _pack_fields(TRANSITION_TAG, [
            item.observation, np.asarray(item.action, dtype=np.float64), np.float64(item.reward),
            np.float64(item.discount), item.next_observation, np.float64(item.n_actual)])
    if isinstance(item, SequenceSlice):
        return _pack_fields(SEQUENCE_TAG, [
            item.observations, np.asarray(item.actions, dtype=np.float64), item.rewards, item.discounts,
            item.mask, item.start_state, np.float64(item.burn_in_length),
            np.float64(item.is_episode_start), item.behavior_log_probs])
    if isinstance(item, Episode):
        return _pack_fields(EPISODE_TAG, [
            item.observations, np.asarray(item.actions, dtype=np.float64), item.rewards,
            item.search_policies, np.float64(item.truncated)])
    raise TypeError(f"cannot encode {type(item).__name__}")


def decode(payload: bytes, expected_tag: Optional[int] = None) -> Item:
    tag, fields = _unpack_fields(payload)
    if expected_tag is not None and tag != expected_tag:
        raise SchemaMismatchError(expected_tag, tag)
    if tag == TRANSITION_TAG:
        obs, action, reward, discount, next_obs, n_actual = fields
        return Transition(obs, action, float(reward), float(discount), next_obs, int(n_actual))
    if tag == SEQUENCE_TAG:
        obs, actions, rewards, discounts, mask, start_state, burn_in, is_start, behavior = fields
        return SequenceSlice(obs, actions, rewards, discounts, mask, start_state,
                             int(burn_in), bool(is_start), behavior)
    if tag == EPISODE_TAG:
        obs, actions, rewards, policies, truncated = fields
        return Episode(obs, actions, rewards, policies, bool(truncated))
    raise SchemaMismatchError(expected_tag if expected_tag is not None else TRANSITION_TAG, tag)


def decode_batch(payloads: List[bytes], expected_tag: int) -> List[Item]:
    return [decode(payload, expected_tag) for payload in payloads]
