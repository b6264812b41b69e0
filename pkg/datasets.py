"""
Datasets
Learner-side views over experience: replay tables, demonstration mixing and
fixed dataset files in the adder payload format.
"""

import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import codec
from adders import Adder
from codec import Episode, Item
from core import restart, termination, transition, truncation
from errors import ChecksumError, ConfigurationError, SchemaMismatchError

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"RLDS"
_DATASET_HEADER = struct.Struct("<4sHHQ")
_RECORD_LENGTH = struct.Struct("<I")


@dataclass
class Batch:
    items: List[Item]
    keys: List[int]
    probabilities: np.ndarray
    table_sizes: np.ndarray
    is_demo: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    def importance_weights(self, exponent: float) -> np.ndarray:
        """(N p)^-exponent normalised by the batch maximum; all ones for uniform sampling"""
        weights = (self.table_sizes * self.probabilities) ** (-exponent)
        return weights / np.max(weights)


class ReplayDataset:
    def __init__(self, table, batch_size: int, expected_tag: int, timeout: Optional[float] = None):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.table = table
        self.batch_size = batch_size
        self.expected_tag = expected_tag
        self.timeout = timeout

    def _draw(self, table, count: int, demo: bool) -> Batch:
        sample = table.sample(count, timeout=self.timeout)
        return Batch(items=codec.decode_batch(sample.payloads, self.expected_tag), keys=sample.keys,
                     probabilities=sample.probabilities, table_sizes=np.full(len(sample), float(sample.table_size)),
                     is_demo=np.full(len(sample), demo))

    def sample(self) -> Batch:
        return self._draw(self.table, self.batch_size, demo=False)

    def can_sample(self) -> bool:
        return self.table.can_sample(self.batch_size)

    def update_priorities(self, batch: Batch, priorities: Sequence[float]):
        self.table.update_priorities(batch.keys, priorities)


def demo_count(batch_size: int, demo_ratio: float) -> int:
    return int(math.ceil(round(demo_ratio * batch_size, 9)))


class MixedDataset(ReplayDataset):
    """ceil(demo_ratio * B) items from the demonstration table, the rest from the agent table"""

    def __init__(self, table, demo_table, batch_size: int, demo_ratio: float, expected_tag: int,
                 timeout: Optional[float] = None):
        super().__init__(table, batch_size, expected_tag, timeout)
        if not 0.0 <= demo_ratio <= 1.0:
            raise ValueError("demo_ratio must lie in [0, 1]")
        self.demo_table = demo_table
        self.demo_ratio = demo_ratio
        self.num_demo = demo_count(batch_size, demo_ratio)
        self.num_agent = batch_size - self.num_demo
        if self.num_demo and (demo_table is None or len(demo_table) == 0):
            raise ConfigurationError("demo_ratio > 0 needs a non-empty demonstration table")

    def sample(self) -> Batch:
        parts = []
        if self.num_agent:
            parts.append(self._draw(self.table, self.num_agent, demo=False))
        if self.num_demo:
            parts.append(self._draw(self.demo_table, self.num_demo, demo=True))
        if len(parts) == 1:
            return parts[0]
        return Batch(items=parts[0].items + parts[1].items, keys=parts[0].keys + parts[1].keys,
                     probabilities=np.concatenate([p.probabilities for p in parts]),
                     table_sizes=np.concatenate([p.table_sizes for p in parts]),
                     is_demo=np.concatenate([p.is_demo for p in parts]))

    def can_sample(self) -> bool:
        return self.num_agent == 0 or self.table.can_sample(self.num_agent)

    def update_priorities(self, batch: Batch, priorities: Sequence[float]):
        priorities = np.asarray(priorities, dtype=np.float64)
        agent = ~batch.is_demo
        if np.any(agent):
            self.table.update_priorities([k for k, d in zip(batch.keys, batch.is_demo) if not d], priorities[agent])
        if np.any(batch.is_demo):
            self.demo_table.update_priorities([k for k, d in zip(batch.keys, batch.is_demo) if d],
                                              priorities[batch.is_demo])


class FileDataset:
    """Shuffled minibatches over a fixed set of records, reshuffled every epoch"""

    def __init__(self, payloads: Sequence[bytes], batch_size: int, expected_tag: int, seed: int = 0):
        if not payloads:
            raise ConfigurationError("dataset is empty")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.items = codec.decode_batch(list(payloads), expected_tag)
        self.batch_size = batch_size
        self.expected_tag = expected_tag
        self._rng = np.random.default_rng(seed)
        self._order = self._rng.permutation(len(self.items))
        self._cursor = 0

    @classmethod
    def from_file(cls, path: str, batch_size: int, expected_tag: int, seed: int = 0) -> "FileDataset":
        _, payloads = read_dataset(path, expected_tag)
        logger.info(f"Loaded {len(payloads)} records from {path}")
        return cls(payloads, batch_size, expected_tag, seed)

    def __len__(self) -> int:
        return len(self.items)

    def sample(self) -> Batch:
        indices = []
        while len(indices) < self.batch_size:
            if self._cursor == len(self._order):
                self._order = self._rng.permutation(len(self.items))
                self._cursor = 0
            take = min(self.batch_size - len(indices), len(self._order) - self._cursor)
            indices.extend(int(i) for i in self._order[self._cursor:self._cursor + take])
            self._cursor += take
        size = float(len(self.items))
        return Batch(items=[self.items[i] for i in indices], keys=indices,
                     probabilities=np.full(len(indices), 1.0 / size), table_sizes=np.full(len(indices), size),
                     is_demo=np.zeros(len(indices), dtype=bool))

    def can_sample(self) -> bool:
        return True

    def update_priorities(self, batch: Batch, priorities: Sequence[float]):
        pass


def write_dataset(path: str, tag: int, payloads: Iterable[bytes]) -> int:
    """Atomically write a dataset file; returns the record count"""
    payloads = list(payloads)
    for payload in payloads:
        found = codec.peek_tag(payload)
        if found != tag:
            raise SchemaMismatchError(tag, found, what="dataset record")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=directory, prefix=".dataset-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_DATASET_HEADER.pack(DATASET_MAGIC, tag, 0, len(payloads)))
            for payload in payloads:
                f.write(_RECORD_LENGTH.pack(len(payload)))
                f.write(payload)
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise
    logger.info(f"Wrote {len(payloads)} records to {path}")
    return len(payloads)


def read_dataset(path: str, expected_tag: Optional[int] = None) -> Tuple[int, List[bytes]]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _DATASET_HEADER.size:
        raise ChecksumError(f"{path} is too short to be a dataset file")
    magic, tag, _, count = _DATASET_HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise ChecksumError(f"{path} is not a dataset file")
    if expected_tag is not None and tag != expected_tag:
        raise SchemaMismatchError(expected_tag, tag, what="dataset")
    offset = _DATASET_HEADER.size
    payloads = []
    for _ in range(count):
        if offset + _RECORD_LENGTH.size > len(data):
            raise ChecksumError(f"{path} is truncated")
        (length,) = _RECORD_LENGTH.unpack_from(data, offset)
        offset += _RECORD_LENGTH.size
        if offset + length > len(data):
            raise ChecksumError(f"{path} is truncated")
        payloads.append(data[offset:offset + length])
        offset += length
    return tag, payloads


def replay_episode(episode: Episode, adder: Adder, recurrent_state_dim: int = 0) -> List[Item]:
    """Feed a recorded episode through an adder; recurrent users get zero states"""
    zeros = np.zeros(recurrent_state_dim)
    state_args = (zeros,) if recurrent_state_dim else ()
    emitted = []
    adder.add_first(restart(episode.observations[0]), *state_args)
    length = episode.length
    for t in range(length):
        reward, observation = float(episode.rewards[t]), episode.observations[t + 1]
        if t < length - 1:
            timestep = transition(reward, observation)
        elif episode.truncated:
            timestep = truncation(reward, observation)
        else:
            timestep = termination(reward, observation)
        action = episode.actions[t]
        if recurrent_state_dim:
            emitted.extend(adder.add(action, timestep, zeros))
        else:
            emitted.extend(adder.add(action, timestep))
    return emitted


def episodes_to_payloads(episodes: Sequence[Episode], adder_factory: Callable[[], Adder],
                         recurrent_state_dim: int = 0) -> List[bytes]:
    payloads = []
    for episode in episodes:
        payloads.extend(codec.encode(item) for item in replay_episode(episode, adder_factory(), recurrent_state_dim))
    return payloads


def episode_statistics(episodes: Sequence[Episode]) -> pd.DataFrame:
    """Per-episode return/length table used to summarise generated datasets"""
    return pd.DataFrame({
        "episode_return": [episode.episode_return for episode in episodes],
        "episode_length": [episode.length for episode in episodes],
        "truncated": [episode.truncated for episode in episodes],
    })
