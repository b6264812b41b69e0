"""
Replay Store
Capacity-bounded experience tables with pluggable samplers and removers,
priority updates, queue mode and a samples-per-insert rate limiter.
"""

import enum
import heapq
import logging
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ClosedTableError

logger = logging.getLogger(__name__)


class SamplerKind(str, enum.Enum):
    FIFO = "fifo"
    LIFO = "lifo"
    UNIFORM = "uniform"
    PRIORITY = "priority"


class RemoverKind(str, enum.Enum):
    FIFO = "fifo"
    LIFO = "lifo"
    LOWEST_PRIORITY = "lowest_priority"


CONSUMING_SAMPLERS = (SamplerKind.FIFO, SamplerKind.LIFO)


@dataclass(frozen=True)
class RateLimiterConfig:
    samples_per_insert: float
    tolerance: float = 1.0
    min_size_to_sample: int = 1

    def __post_init__(self):
        if self.samples_per_insert <= 0:
            raise ValueError("samples_per_insert must be > 0")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.min_size_to_sample < 1:
            raise ValueError("min_size_to_sample must be >= 1")


@dataclass(frozen=True)
class TableConfig:
    capacity: int = 1_000_000
    sampler: SamplerKind = SamplerKind.UNIFORM
    priority_exponent: float = 0.6
    remover: RemoverKind = RemoverKind.FIFO
    rate_limiter: Optional[RateLimiterConfig] = None
    min_size_to_sample: int = 1
    seed: Optional[int] = None
    name: str = "replay"

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 1 <= self.min_size_to_sample <= self.capacity:
            raise ValueError("min_size_to_sample must lie in [1, capacity]")
        if self.priority_exponent < 0:
            raise ValueError("priority exponent must be >= 0")


@dataclass
class ReplayItem:
    key: int
    priority: float
    payload: bytes
    insert_index: int
    times_sampled: int = 0


@dataclass
class SampleBatch:
    items: List[Tuple[int, bytes]]
    probabilities: np.ndarray
    table_size: int

    @property
    def keys(self) -> List[int]:
        return [key for key, _ in self.items]

    @property
    def payloads(self) -> List[bytes]:
        return [payload for _, payload in self.items]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class TableStats:
    size: int
    total_inserts: int
    total_sampled_items: int
    current_ratio: float
    evictions: int
    capacity: int


class RateLimiter:
    """Linear-band admission control around the line S = SPI * I.

    A sample is admitted while (S + 1) <= SPI * I + buffer; an insert while
    S > SPI * (I - 1) - buffer, where buffer = max(tolerance * SPI, 1). Inserts are
    always admitted while the table is below min_size_to_sample.

    The buffer is floored at one item: with tolerance * SPI < 1 the configured band
    would be narrower than a single sample and the insert and sample windows could
    stop overlapping, leaving both sides blocked. Such configurations therefore run
    with a band one item wide on each side of the line.
    """

    def __init__(self, config: RateLimiterConfig):
        self.config = config
        self.samples_per_insert = config.samples_per_insert
        self.buffer = max(config.tolerance * config.samples_per_insert, 1.0)
        self.min_size_to_sample = config.min_size_to_sample
        self.inserts = 0
        self.samples = 0

    def can_insert(self, size: int) -> bool:
        if size < self.min_size_to_sample:
            return True
        return self.samples > self.samples_per_insert * (self.inserts - 1) - self.buffer

    def can_sample(self, size: int, num_samples: int = 1) -> bool:
        if size < self.min_size_to_sample:
            return False
        return self.samples + num_samples <= self.samples_per_insert * self.inserts + self.buffer


def rate_limiter_admit(config: Optional[RateLimiterConfig], event: str, inserts: int,
                       samples: int, size: int) -> bool:
    """Pure admission decision for an 'insert' or 'sample' event; True means Allow"""
    if config is None:
        return True
    limiter = RateLimiter(config)
    limiter.inserts = inserts
    limiter.samples = samples
    if event == "insert":
        return limiter.can_insert(size)
    if event == "sample":
        return limiter.can_sample(size)
    raise ValueError(f"unknown rate limiter event {event!r}")


class SumTree:
    """Binary sum tree over dense item slots; grows by doubling"""

    def __init__(self, capacity: int = 1024):
        size = 1
        while size < capacity:
            size *= 2
        self._capacity = size
        self._tree = np.zeros(2 * size, dtype=np.float64)

    def _grow(self):
        leaves = self._tree[self._capacity:].copy()
        self._capacity *= 2
        self._tree = np.zeros(2 * self._capacity, dtype=np.float64)
        self._tree[self._capacity:self._capacity + len(leaves)] = leaves
        for idx in range(self._capacity - 1, 0, -1):
            self._tree[idx] = self._tree[2 * idx] + self._tree[2 * idx + 1]

    def set(self, index: int, value: float):
        while index >= self._capacity:
            self._grow()
        idx = index + self._capacity
        self._tree[idx] = value
        idx //= 2
        while idx >= 1:
            self._tree[idx] = self._tree[2 * idx] + self._tree[2 * idx + 1]
            idx //= 2

    def get(self, index: int) -> float:
        if index >= self._capacity:
            return 0.0
        return float(self._tree[index + self._capacity])

    def total(self) -> float:
        return float(self._tree[1])

    def find(self, mass: float) -> int:
        """Smallest leaf index whose inclusive prefix sum exceeds `mass`"""
        idx = 1
        while idx < self._capacity:
            left = 2 * idx
            if mass < self._tree[left]:
                idx = left
            else:
                mass -= self._tree[left]
                idx = left + 1
        return idx - self._capacity


class ReplayTable:
    """Thread-safe replay table.

    Every public method may be called concurrently from any worker. Blocking
    calls wait on a condition variable and never hold the lock while waiting.
    """

    def __init__(self, config: Optional[TableConfig] = None):
        self.config = config or TableConfig()
        self.name = self.config.name
        self._cond = threading.Condition(threading.Lock())
        self._rng = np.random.default_rng(self.config.seed)
        self._items: "OrderedDict[int, ReplayItem]" = OrderedDict()
        self._dense_keys: List[int] = []
        self._dense_pos: Dict[int, int] = {}
        self._weights = SumTree()
        self._heap: List[Tuple[float, int, int]] = []
        self._limiter = RateLimiter(self.config.rate_limiter) if self.config.rate_limiter else None
        self._total_inserts = 0
        self._total_sampled = 0
        self._evictions = 0
        self._closed = False

    # ------------------------------------------------------------------
    # public API
    # ------------------------------------------------------------------

    def insert(self, payload: bytes, priority: float = 1.0, timeout: Optional[float] = None) -> int:
        self._check_priority(priority)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            self._wait(lambda: self._limiter is None or self._limiter.can_insert(len(self._items)), deadline)
            if len(self._items) >= self.config.capacity:
                self._evict_one()
            key = self._new_key()
            item = ReplayItem(key=key, priority=float(priority), payload=bytes(payload),
                              insert_index=self._total_inserts)
            self._items[key] = item
            self._dense_pos[key] = len(self._dense_keys)
            self._dense_keys.append(key)
            self._weights.set(self._dense_pos[key], self._weight(item.priority))
            if self.config.remover == RemoverKind.LOWEST_PRIORITY:
                heapq.heappush(self._heap, (item.priority, item.insert_index, key))
            self._total_inserts += 1
            if self._limiter is not None:
                self._limiter.inserts += 1
            self._cond.notify_all()
            return key

    def sample(self, batch_size: int, timeout: Optional[float] = None) -> SampleBatch:
        """Sample `batch_size` items, blocking until the limiter admits them.

        Consuming samplers (FIFO/LIFO queues) admit the whole batch at once and only
        then pop it, so a timeout or close never removes items. Other samplers admit
        items one at a time; a batch that fails part way has its accounting undone.
        """
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        deadline = None if timeout is None else time.monotonic() + timeout
        items: List[Tuple[int, bytes]] = []
        probabilities: List[float] = []
        with self._cond:
            if self.config.sampler in CONSUMING_SAMPLERS:
                self._wait(lambda: self._can_sample_locked(batch_size), deadline)
                for _ in range(batch_size):
                    self._take(items, probabilities)
            else:
                try:
                    while len(items) < batch_size:
                        self._wait(lambda: self._can_sample_locked(1), deadline)
                        self._take(items, probabilities)
                except (TimeoutError, ClosedTableError):
                    self._undo_samples(items)
                    raise
            self._cond.notify_all()
            size = len(self._items)
        return SampleBatch(items=items, probabilities=np.asarray(probabilities, dtype=np.float64), table_size=size)

    def can_sample(self, batch_size: int = 1) -> bool:
        """Non-blocking check that a full batch would be admitted right now"""
        with self._cond:
            if self._closed:
                return False
            size = len(self._items)
            if self.config.sampler in CONSUMING_SAMPLERS and size < batch_size:
                return False
            if size < max(self.config.min_size_to_sample, 1):
                return False
            return self._limiter is None or self._limiter.can_sample(size, batch_size)

    def update_priorities(self, keys: Sequence[int], priorities: Sequence[float]) -> int:
        priorities = [float(p) for p in priorities]
        if len(keys) != len(priorities):
            raise ValueError("keys and priorities differ in length")
        for priority in priorities:
            self._check_priority(priority)
        updated = 0
        with self._cond:
            if self._closed:
                raise ClosedTableError(f"table {self.name} is closed")
            for key, priority in zip(keys, priorities):
                item = self._items.get(int(key))
                if item is None:
                    continue
                item.priority = priority
                self._weights.set(self._dense_pos[item.key], self._weight(priority))
                if self.config.remover == RemoverKind.LOWEST_PRIORITY:
                    heapq.heappush(self._heap, (priority, item.insert_index, item.key))
                updated += 1
            self._compact_heap()
            self._cond.notify_all()
        return updated

    def stats(self) -> TableStats:
        with self._cond:
            ratio = self._total_sampled / self._total_inserts if self._total_inserts else 0.0
            return TableStats(size=len(self._items), total_inserts=self._total_inserts,
                              total_sampled_items=self._total_sampled, current_ratio=ratio,
                              evictions=self._evictions, capacity=self.config.capacity)

    def priorities(self) -> Dict[int, float]:
        with self._cond:
            return {key: item.priority for key, item in self._items.items()}

    def keys(self) -> List[int]:
        with self._cond:
            return list(self._items.keys())

    def close(self):
        with self._cond:
            if not self._closed:
                logger.info(f"Closing replay table {self.name}")
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)

    # ------------------------------------------------------------------
    # internals (lock held)
    # ------------------------------------------------------------------

    @staticmethod
    def _check_priority(priority: float):
        if not np.isfinite(priority) or priority < 0:
            raise ValueError(f"priority must be finite and >= 0, got {priority}")

    def _weight(self, priority: float) -> float:
        if self.config.sampler != SamplerKind.PRIORITY:
            return 1.0
        if priority == 0.0:
            return 0.0
        return float(priority) ** self.config.priority_exponent

    def _wait(self, predicate: Callable[[], bool], deadline: Optional[float]):
        while True:
            if self._closed:
                raise ClosedTableError(f"table {self.name} is closed")
            if predicate():
                return
            if deadline is None:
                self._cond.wait()
            else:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError(f"timed out waiting on table {self.name}")
                self._cond.wait(remaining)

    def _can_sample_locked(self, num: int) -> bool:
        size = len(self._items)
        if size < max(self.config.min_size_to_sample, num):
            return False
        return self._limiter is None or self._limiter.can_sample(size, num)

    def _take(self, items: List[Tuple[int, bytes]], probabilities: List[float]):
        item, probability = self._select()
        item.times_sampled += 1
        items.append((item.key, item.payload))
        probabilities.append(probability)
        self._total_sampled += 1
        if self._limiter is not None:
            self._limiter.samples += 1
        if self.config.sampler in CONSUMING_SAMPLERS:
            self._remove(item.key)
        # a sampler blocked mid-batch must wake inserters waiting on the new count
        self._cond.notify_all()

    def _undo_samples(self, items: List[Tuple[int, bytes]]):
        for key, _ in items:
            item = self._items.get(key)
            if item is not None:
                item.times_sampled -= 1
        self._total_sampled -= len(items)
        if self._limiter is not None:
            self._limiter.samples -= len(items)
        self._cond.notify_all()

    def _new_key(self) -> int:
        while True:
            key = int(self._rng.integers(1, 2 ** 63 - 1))
            if key not in self._items:
                return key

    def _select(self) -> Tuple[ReplayItem, float]:
        size = len(self._items)
        sampler = self.config.sampler
        if sampler == SamplerKind.FIFO:
            return next(iter(self._items.values())), 1.0
        if sampler == SamplerKind.LIFO:
            return next(reversed(self._items.values())), 1.0
        if sampler == SamplerKind.PRIORITY:
            total = self._weights.total()
            if total > 0.0:
                for _ in range(8):
                    index = self._weights.find(self._rng.random() * total)
                    weight = self._weights.get(index)
                    if index < size and weight > 0.0:
                        return self._items[self._dense_keys[index]], weight / total
                # floating point drift: fall back to the heaviest live slot
                weights = [self._weights.get(i) for i in range(size)]
                index = int(np.argmax(weights))
                return self._items[self._dense_keys[index]], weights[index] / total
        index = int(self._rng.integers(size))
        return self._items[self._dense_keys[index]], 1.0 / size

    def _evict_one(self):
        remover = self.config.remover
        if remover == RemoverKind.FIFO:
            key = next(iter(self._items))
        elif remover == RemoverKind.LIFO:
            key = next(reversed(self._items))
        else:
            key = None
            while self._heap:
                priority, _, candidate = heapq.heappop(self._heap)
                item = self._items.get(candidate)
                if item is not None and item.priority == priority:
                    key = candidate
                    break
            if key is None:
                key = next(iter(self._items))
        self._remove(key)
        self._evictions += 1

    def _remove(self, key: int):
        del self._items[key]
        index = self._dense_pos.pop(key)
        last_index = len(self._dense_keys) - 1
        last_key = self._dense_keys[last_index]
        if index != last_index:
            self._dense_keys[index] = last_key
            self._dense_pos[last_key] = index
            self._weights.set(index, self._weights.get(last_index))
        self._dense_keys.pop()
        self._weights.set(last_index, 0.0)

    def _compact_heap(self):
        if self.config.remover != RemoverKind.LOWEST_PRIORITY or len(self._heap) <= 4 * len(self._items) + 64:
            return
        self._heap = [(item.priority, item.insert_index, key) for key, item in self._items.items()]
        heapq.heapify(self._heap)


def table_stats(table: ReplayTable) -> TableStats:
    return table.stats()
