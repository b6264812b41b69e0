import numpy as np
import pytest

from core import ParameterSnapshot, VariableClient
from errors import TransientError
from learners import DQNLearner
from neural import DenseNet, Optimizer
from variable_source import ParameterServer, snapshot_from_bytes, snapshot_to_bytes


class FakeRedis:
    def __init__(self, fail_reads=False):
        self.values = {}
        self.fail_reads = fail_reads

    def set(self, key, value):
        self.values[key] = value

    def get(self, key):
        if self.fail_reads:
            raise ConnectionError("connection reset")
        return self.values.get(key)


def snapshot(version, value=1.0):
    return ParameterSnapshot.from_params(version, {"w": np.full((2, 2), value), "b": np.zeros(2)})


class TestMemoryStore:
    def test_newer_versions_only(self):
        store = ParameterServer()
        assert store.backend == "memory"
        assert store.get_snapshot() is None
        assert store.publish(snapshot(2))
        assert not store.publish(snapshot(2, 5.0))
        assert not store.publish(snapshot(1, 5.0))
        assert store.get_snapshot().version == 2
        assert store.publish(snapshot(3, 7.0))
        assert dict(store.get_snapshot().tensors)["w"][0, 0] == 7.0

    def test_publish_from_learner(self):
        learner = DQNLearner(DenseNet([2, 3]), None, Optimizer(), seed=0)
        store = ParameterServer()
        assert store.publish_from(learner)
        assert not store.publish_from(learner)
        client = VariableClient(store)
        assert client.update(wait=True)
        np.testing.assert_array_equal(client.params["w0"], learner.params["w0"])


class TestRedisStore:
    def test_bytes_round_trip(self):
        restored = snapshot_from_bytes(snapshot_to_bytes(snapshot(9, 3.0)))
        assert restored.version == 9
        assert set(restored.names) == {"w", "b"}
        np.testing.assert_array_equal(dict(restored.tensors)["w"], np.full((2, 2), 3.0))

    def test_reads_go_through_redis(self):
        store = ParameterServer()
        store.redis_client = FakeRedis()
        assert store.backend == "redis"
        store.publish(snapshot(4, 2.0))
        assert store.get_snapshot().version == 4
        assert len(store.redis_client.values) == 1

    def test_unreachable_redis_is_transient(self):
        store = ParameterServer()
        store.redis_client = FakeRedis(fail_reads=True)
        with pytest.raises(TransientError):
            store.get_snapshot()

    def test_falls_back_to_memory(self):
        store = ParameterServer("redis", host="127.0.0.1", port=1)
        assert store.backend == "memory"
        assert store.publish(snapshot(0))
        assert store.get_snapshot().version == 0
