"""
Variable Source
Shared parameter store between the learner and remote actors. Snapshots live
in memory, or in Redis when the store is configured for it and reachable.
"""

import io
import logging
import os
import threading
from typing import Optional

import numpy as np

from core import Learner, ParameterSnapshot, VariableSource
from errors import TransientError
from neural import scalar

logger = logging.getLogger(__name__)

# Redis imports for the shared store
try:
    import redis
    REDIS_AVAILABLE = True
except ImportError:
    REDIS_AVAILABLE = False

SNAPSHOT_KEY = "actorloop:snapshot"


def snapshot_to_bytes(snapshot: ParameterSnapshot) -> bytes:
    buffer = io.BytesIO()
    np.savez(buffer, __version__=np.array(snapshot.version, dtype=np.int64), **snapshot.as_dict())
    return buffer.getvalue()


def snapshot_from_bytes(data: bytes) -> ParameterSnapshot:
    with np.load(io.BytesIO(data), allow_pickle=False) as archive:
        version = int(scalar(archive["__version__"]))
        params = {name: archive[name] for name in archive.files if name != "__version__"}
    return ParameterSnapshot.from_params(version, params)


class ParameterServer(VariableSource):
    """Latest-snapshot store; publishing an older or equal version is ignored"""

    def __init__(self, backend: str = "memory", host: Optional[str] = None, port: Optional[int] = None,
                 key: str = SNAPSHOT_KEY):
        self._lock = threading.Lock()
        self._snapshot: Optional[ParameterSnapshot] = None
        self._key = key
        self.redis_client = None
        if backend == "redis":
            host = host or os.environ.get("REDIS_HOST", "localhost")
            port = int(port or os.environ.get("REDIS_PORT", 6379))
            if REDIS_AVAILABLE:
                try:
                    self.redis_client = redis.Redis(host=host, port=port, db=0)
                    self.redis_client.ping()
                    logger.info(f"Redis parameter store connected at {host}:{port}")
                except Exception as e:
                    logger.error(f"Failed to connect to Redis: {e}")
                    self.redis_client = None
            else:
                logger.warning("Redis not available, using memory parameter store")

    @property
    def backend(self) -> str:
        return "redis" if self.redis_client is not None else "memory"

    def publish(self, snapshot: ParameterSnapshot) -> bool:
        with self._lock:
            if self._snapshot is not None and snapshot.version <= self._snapshot.version:
                return False
            self._snapshot = snapshot
        if self.redis_client is not None:
            try:
                self.redis_client.set(self._key, snapshot_to_bytes(snapshot))
            except Exception as e:
                logger.error(f"Error publishing snapshot {snapshot.version} to Redis: {e}")
        return True

    def publish_from(self, learner: Learner) -> bool:
        snapshot = learner.get_snapshot()
        return snapshot is not None and self.publish(snapshot)

    def get_snapshot(self) -> Optional[ParameterSnapshot]:
        if self.redis_client is None:
            with self._lock:
                return self._snapshot
        try:
            data = self.redis_client.get(self._key)
        except Exception as e:
            raise TransientError(f"Redis parameter store unreachable: {e}")
        if data is None:
            with self._lock:
                return self._snapshot
        return snapshot_from_bytes(data)
