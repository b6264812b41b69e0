import threading
import time

import numpy as np
import pytest

from errors import ClosedTableError
from replay import (RateLimiter, RateLimiterConfig, RemoverKind, ReplayTable, SamplerKind, SumTree, TableConfig,
                    rate_limiter_admit, table_stats)


def payload(i: int) -> bytes:
    return i.to_bytes(4, "little")


def fill(table: ReplayTable, count: int, priority: float = 1.0):
    return [table.insert(payload(i), priority) for i in range(count)]


class TestSumTree:
    def test_total_and_find(self):
        tree = SumTree(4)
        for i, value in enumerate([1.0, 2.0, 3.0, 4.0]):
            tree.set(i, value)
        assert tree.total() == 10.0
        assert tree.find(0.5) == 0
        assert tree.find(1.0) == 1
        assert tree.find(2.99) == 1
        assert tree.find(9.99) == 3

    def test_grows_past_initial_capacity(self):
        tree = SumTree(2)
        for i in range(9):
            tree.set(i, 1.0)
        assert tree.total() == 9.0
        assert tree.get(8) == 1.0
        assert tree.find(8.5) == 8


class TestSamplers:
    def test_uniform_reports_exact_probability(self):
        table = ReplayTable(TableConfig(capacity=10, seed=1))
        fill(table, 4)
        batch = table.sample(16)
        assert len(batch) == 16
        assert np.all(batch.probabilities == 0.25)
        assert batch.table_size == 4

    def test_priority_frequencies(self):
        table = ReplayTable(TableConfig(capacity=10, sampler=SamplerKind.PRIORITY, priority_exponent=1.0, seed=3))
        low = table.insert(payload(0), 1.0)
        high = table.insert(payload(1), 3.0)
        draws = 100_000
        keys = []
        for _ in range(draws // 1000):
            keys.extend(table.sample(1000).keys)
        freq_high = keys.count(high) / draws
        sigma = np.sqrt(0.75 * 0.25 / draws)
        assert abs(freq_high - 0.75) < 3 * sigma
        assert keys.count(low) + keys.count(high) == draws

    def test_priority_probabilities_match_weights(self):
        table = ReplayTable(TableConfig(capacity=10, sampler=SamplerKind.PRIORITY, priority_exponent=0.5, seed=0))
        a = table.insert(payload(0), 4.0)
        table.insert(payload(1), 16.0)
        batch = table.sample(50)
        for key, probability in zip(batch.keys, batch.probabilities):
            expected = 2.0 / 6.0 if key == a else 4.0 / 6.0
            assert probability == pytest.approx(expected)

    def test_zero_priority_is_never_sampled(self):
        table = ReplayTable(TableConfig(capacity=10, sampler=SamplerKind.PRIORITY, seed=0))
        zero = table.insert(payload(0), 0.0)
        table.insert(payload(1), 1.0)
        assert zero not in table.sample(200).keys

    def test_fifo_consumes_in_insertion_order(self):
        table = ReplayTable(TableConfig(capacity=10, sampler=SamplerKind.FIFO))
        keys = fill(table, 5)
        batch = table.sample(3)
        assert batch.keys == keys[:3]
        assert len(table) == 2

    def test_lifo_consumes_newest_first(self):
        table = ReplayTable(TableConfig(capacity=10, sampler=SamplerKind.LIFO))
        keys = fill(table, 4)
        assert table.sample(2).keys == [keys[3], keys[2]]

    def test_consuming_queue_cannot_sample_more_than_it_holds(self):
        table = ReplayTable(TableConfig(capacity=10, sampler=SamplerKind.FIFO))
        keys = fill(table, 2)
        assert not table.can_sample(3)
        with pytest.raises(TimeoutError):
            table.sample(3, timeout=0.05)
        assert len(table) == 2
        assert table.stats().total_sampled_items == 0
        assert table.sample(2).keys == keys

    def test_queue_min_size_gates_the_batch_not_each_item(self):
        table = ReplayTable(TableConfig(capacity=10, sampler=SamplerKind.FIFO, min_size_to_sample=2))
        keys = fill(table, 2)
        assert table.can_sample(2)
        assert table.sample(2, timeout=1.0).keys == keys
        assert len(table) == 0

    def test_queue_batch_waits_for_a_full_batch(self):
        table = ReplayTable(TableConfig(capacity=10, sampler=SamplerKind.LIFO, min_size_to_sample=3))
        fill(table, 2)
        result = []
        thread = threading.Thread(target=lambda: result.append(table.sample(3, timeout=5.0)))
        thread.start()
        time.sleep(0.05)
        assert len(table) == 2 and not result
        table.insert(payload(9))
        thread.join(5.0)
        assert len(result[0]) == 3 and len(table) == 0

    def test_close_mid_wait_keeps_queued_items(self):
        table = ReplayTable(TableConfig(capacity=10, sampler=SamplerKind.FIFO))
        fill(table, 2)
        raised = []

        def wait():
            try:
                table.sample(4)
            except ClosedTableError as e:
                raised.append(e)

        thread = threading.Thread(target=wait)
        thread.start()
        time.sleep(0.05)
        table.close()
        thread.join(2.0)
        assert raised and len(table) == 2


class TestCapacity:
    def test_fifo_eviction(self):
        table = ReplayTable(TableConfig(capacity=3))
        keys = fill(table, 5)
        assert table.keys() == keys[2:]
        stats = table.stats()
        assert stats.size == 3
        assert stats.evictions == 2
        assert stats.total_inserts == 5

    def test_lifo_eviction(self):
        table = ReplayTable(TableConfig(capacity=2, remover=RemoverKind.LIFO))
        keys = fill(table, 3)
        assert table.keys() == [keys[0], keys[2]]

    def test_lowest_priority_eviction(self):
        table = ReplayTable(TableConfig(capacity=3, remover=RemoverKind.LOWEST_PRIORITY))
        a = table.insert(payload(0), 5.0)
        b = table.insert(payload(1), 1.0)
        c = table.insert(payload(2), 3.0)
        table.update_priorities([a], [0.5])
        d = table.insert(payload(3), 2.0)
        assert set(table.keys()) == {b, c, d}

    def test_size_never_exceeds_capacity(self):
        table = ReplayTable(TableConfig(capacity=7, sampler=SamplerKind.PRIORITY, seed=2))
        rng = np.random.default_rng(0)
        for i in range(100):
            table.insert(payload(i), float(rng.uniform(0.1, 2.0)))
            assert len(table) <= 7
        assert table_stats(table).evictions == 93


class TestPriorities:
    def test_update_ignores_missing_keys(self):
        table = ReplayTable(TableConfig(capacity=2))
        keys = fill(table, 3)
        assert table.update_priorities(keys, [2.0, 2.0, 2.0]) == 2
        assert table.priorities() == {keys[1]: 2.0, keys[2]: 2.0}

    @pytest.mark.parametrize("bad", [-1.0, float("nan"), float("inf")])
    def test_invalid_priorities_rejected(self, bad):
        table = ReplayTable()
        with pytest.raises(ValueError):
            table.insert(b"x", bad)
        key = table.insert(b"x", 1.0)
        with pytest.raises(ValueError):
            table.update_priorities([key], [bad])

    def test_length_mismatch(self):
        table = ReplayTable()
        with pytest.raises(ValueError):
            table.update_priorities([1, 2], [1.0])


class TestRateLimiter:
    def test_buffer_floor(self):
        assert RateLimiter(RateLimiterConfig(samples_per_insert=0.5, tolerance=1.0)).buffer == 1.0
        assert RateLimiter(RateLimiterConfig(samples_per_insert=32, tolerance=2.0)).buffer == 64.0

    def test_admission_band(self):
        config = RateLimiterConfig(samples_per_insert=2.0, tolerance=1.0, min_size_to_sample=1)
        # buffer = 2: sample while S + 1 <= 2I + 2, insert while S > 2(I - 1) - 2
        assert rate_limiter_admit(config, "insert", inserts=0, samples=0, size=0)
        assert not rate_limiter_admit(config, "sample", inserts=0, samples=0, size=0)
        assert rate_limiter_admit(config, "sample", inserts=1, samples=3, size=1)
        assert not rate_limiter_admit(config, "sample", inserts=1, samples=4, size=1)
        assert rate_limiter_admit(config, "insert", inserts=3, samples=3, size=3)
        assert not rate_limiter_admit(config, "insert", inserts=3, samples=2, size=3)

    def test_min_size_always_admits_inserts(self):
        config = RateLimiterConfig(samples_per_insert=1.0, min_size_to_sample=5)
        assert rate_limiter_admit(config, "insert", inserts=100, samples=0, size=4)
        assert not rate_limiter_admit(config, "sample", inserts=100, samples=0, size=4)

    def test_no_limiter_admits_everything(self):
        assert rate_limiter_admit(None, "sample", inserts=0, samples=10, size=0)

    def test_unknown_event(self):
        with pytest.raises(ValueError):
            rate_limiter_admit(RateLimiterConfig(1.0), "delete", 0, 0, 0)

    def test_insert_blocks_when_sampler_lags(self):
        table = ReplayTable(TableConfig(rate_limiter=RateLimiterConfig(samples_per_insert=1.0, tolerance=1.0)))
        table.insert(b"a")
        table.insert(b"b")
        with pytest.raises(TimeoutError):
            table.insert(b"c", timeout=0.05)
        table.sample(1)
        table.insert(b"c", timeout=0.05)

    def test_sample_blocks_when_inserter_lags(self):
        table = ReplayTable(TableConfig(rate_limiter=RateLimiterConfig(samples_per_insert=1.0, tolerance=1.0)))
        table.insert(b"a")
        table.sample(2)
        assert not table.can_sample()
        with pytest.raises(TimeoutError):
            table.sample(1, timeout=0.05)

    def test_blocked_insert_resumes_after_sample(self):
        table = ReplayTable(TableConfig(rate_limiter=RateLimiterConfig(samples_per_insert=1.0, tolerance=1.0)))
        table.insert(b"a")
        table.insert(b"b")
        done = threading.Event()

        def insert():
            table.insert(b"c", timeout=5.0)
            done.set()

        thread = threading.Thread(target=insert)
        thread.start()
        time.sleep(0.05)
        assert not done.is_set()
        table.sample(1)
        thread.join(5.0)
        assert done.is_set()

    def test_partial_batch_is_undone(self):
        table = ReplayTable(TableConfig(rate_limiter=RateLimiterConfig(samples_per_insert=1.0, tolerance=1.0)))
        table.insert(b"a")
        with pytest.raises(TimeoutError):
            table.sample(3, timeout=0.05)
        assert table.stats().total_sampled_items == 0
        assert table.can_sample(2)
        assert len(table.sample(2)) == 2

    def test_narrow_tolerance_keeps_a_one_item_band(self):
        config = RateLimiterConfig(samples_per_insert=0.5, tolerance=0.5, min_size_to_sample=1)
        assert RateLimiter(config).buffer == 1.0
        assert rate_limiter_admit(config, "sample", inserts=1, samples=0, size=1)
        assert not rate_limiter_admit(config, "sample", inserts=1, samples=1, size=1)
        assert rate_limiter_admit(config, "insert", inserts=2, samples=0, size=2)
        assert not rate_limiter_admit(config, "insert", inserts=3, samples=0, size=3)

        table = ReplayTable(TableConfig(capacity=100, rate_limiter=config))
        for i in range(50):
            table.insert(payload(i), timeout=0.05)
            while table.can_sample(1):
                table.sample(1)
        assert 0.45 <= table.stats().current_ratio <= 0.53

    def test_ratio_holds_under_concurrency(self):
        spi = 32.0
        table = ReplayTable(TableConfig(capacity=10_000, seed=0,
                                        rate_limiter=RateLimiterConfig(samples_per_insert=spi, tolerance=1.0)))
        errors = []

        def inserter(offset):
            try:
                for i in range(250):
                    table.insert(payload(offset + i), timeout=30.0)
            except Exception as e:
                errors.append(e)

        def sampler():
            try:
                while True:
                    table.sample(8)
            except ClosedTableError:
                pass
            except Exception as e:
                errors.append(e)

        inserters = [threading.Thread(target=inserter, args=(1000 * i,)) for i in range(4)]
        samplers = [threading.Thread(target=sampler) for _ in range(2)]
        for thread in inserters + samplers:
            thread.start()
        for thread in inserters:
            thread.join(60.0)
        deadline = time.monotonic() + 30.0
        while table.can_sample(8) and time.monotonic() < deadline:
            time.sleep(0.01)
        table.close()
        for thread in samplers:
            thread.join(5.0)
        assert not errors
        stats = table.stats()
        assert stats.total_inserts == 1000
        assert 31.0 <= stats.current_ratio <= 33.0


class TestClose:
    def test_close_releases_blocked_sampler(self):
        table = ReplayTable(TableConfig(min_size_to_sample=1))
        raised = []

        def wait():
            try:
                table.sample(1)
            except ClosedTableError as e:
                raised.append(e)

        thread = threading.Thread(target=wait)
        thread.start()
        time.sleep(0.05)
        table.close()
        thread.join(2.0)
        assert raised and not thread.is_alive()

    def test_operations_after_close(self):
        table = ReplayTable()
        key = table.insert(b"x")
        table.close()
        assert table.closed
        assert not table.can_sample()
        with pytest.raises(ClosedTableError):
            table.insert(b"y")
        with pytest.raises(ClosedTableError):
            table.update_priorities([key], [1.0])


def test_config_validation():
    with pytest.raises(ValueError):
        TableConfig(capacity=0)
    with pytest.raises(ValueError):
        TableConfig(capacity=4, min_size_to_sample=5)
    with pytest.raises(ValueError):
        RateLimiterConfig(samples_per_insert=0)
