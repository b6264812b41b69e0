import time

import numpy as np
import pytest

from checkpoint import decode_tensors, encode_tensors, read_checkpoint, restore_checkpoint, save_checkpoint
from errors import ChecksumError
from learners import DQNLearner
from neural import DenseNet, Optimizer

# magic (4) + format version (2) precede the 8-byte timestamp
TIMESTAMP_SLICE = slice(6, 14)


def make_learner(seed: int) -> DQNLearner:
    return DQNLearner(DenseNet([3, 8, 2]), None, Optimizer(0.01), seed=seed)


class TestTensorEncoding:
    def test_dtypes_and_shapes_survive(self):
        tensors = {"w": np.arange(6.0).reshape(2, 3), "steps": np.array(7, dtype=np.int64),
                   "rng": np.frombuffer(b"state", dtype=np.uint8), "flags": np.array([True, False])}
        decoded = decode_tensors(encode_tensors(tensors))
        np.testing.assert_array_equal(decoded["w"], tensors["w"])
        assert decoded["steps"].dtype == np.int64 and int(decoded["steps"]) == 7
        assert bytes(decoded["rng"]) == b"state"
        assert decoded["flags"].dtype == np.uint8

    def test_unsupported_dtype(self):
        with pytest.raises(ValueError):
            encode_tensors({"z": np.array([1j])})

    def test_truncated_body(self):
        body = encode_tensors({"w": np.ones(4)})
        with pytest.raises(ChecksumError):
            decode_tensors(body[:-8])


class TestCheckpointFiles:
    def test_round_trip_restores_learner(self, tmp_path):
        source = make_learner(0)
        source.params["w0"][0, 0] = 42.0
        path = save_checkpoint(str(tmp_path / "run" / "checkpoint.ckpt"), source, {"actor_steps": 120})
        target = make_learner(5)
        counters = restore_checkpoint(path, target)
        assert counters == {"actor_steps": 120}
        expected, restored = source.state_dict(), target.state_dict()
        for name in expected:
            if name != "learner_walltime":
                np.testing.assert_array_equal(restored[name], expected[name])
        assert target.get_snapshot().as_dict()["w0"][0, 0] == 42.0

    def test_saves_differ_only_in_timestamp(self, tmp_path):
        learner = make_learner(1)
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(str(first), learner, timestamp=1.0)
        save_checkpoint(str(second), learner, timestamp=2.0)
        a, b = first.read_bytes(), second.read_bytes()
        assert a[TIMESTAMP_SLICE] != b[TIMESTAMP_SLICE]
        assert a[:TIMESTAMP_SLICE.start] == b[:TIMESTAMP_SLICE.start]
        assert a[TIMESTAMP_SLICE.stop:] == b[TIMESTAMP_SLICE.stop:]
        assert read_checkpoint(str(first))[2] == 1.0

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(str(path), make_learner(2))
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            read_checkpoint(str(path))
        path.write_bytes(bytes(data[:-10]))
        with pytest.raises(ChecksumError):
            read_checkpoint(str(path))
        path.write_bytes(b"NOPE" + bytes(data[4:]))
        with pytest.raises(ChecksumError):
            read_checkpoint(str(path))
        path.write_bytes(b"AL")
        with pytest.raises(ChecksumError):
            read_checkpoint(str(path))

    def test_mismatched_architecture(self, tmp_path):
        path = str(tmp_path / "d.ckpt")
        save_checkpoint(path, make_learner(3))
        other = DQNLearner(DenseNet([3, 8, 8, 2]), None, Optimizer(0.01), seed=0)
        with pytest.raises(ValueError):
            restore_checkpoint(path, other)

    def test_walltime_persists_across_restore(self, tmp_path):
        source = make_learner(4)
        source.clock.walltime = 3.5
        path = save_checkpoint(str(tmp_path / "e.ckpt"), source)
        target = make_learner(4)
        restore_checkpoint(path, target)
        assert target.clock.walltime == 3.5
        time.sleep(0.01)
        target.clock.tick()
        assert target.clock.walltime > 3.5
