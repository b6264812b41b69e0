"""
Replay Server
Exposes a ReplayTable over a local TCP socket. Frames are a 1-byte opcode (or
status on replies) followed by a 4-byte big-endian body length and the body.
ReplayClient mirrors the table interface so adders and datasets accept either.
"""

import logging
import socket
import socketserver
import struct
import threading
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import ClosedTableError
from replay import ReplayTable, SampleBatch, TableStats

logger = logging.getLogger(__name__)

_FRAME = struct.Struct(">BI")

OP_INSERT = 1
OP_SAMPLE = 2
OP_CAN_SAMPLE = 3
OP_UPDATE_PRIORITIES = 4
OP_STATS = 5
OP_SIZE = 6
OP_CLOSE = 7

STATUS_OK = 0
STATUS_CLOSED = 1
STATUS_TIMEOUT = 2
STATUS_INVALID = 3

NO_TIMEOUT = -1.0


def _encode_timeout(timeout: Optional[float]) -> float:
    return NO_TIMEOUT if timeout is None else float(timeout)


def _decode_timeout(value: float) -> Optional[float]:
    return None if value < 0 else value


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks = []
    remaining = size
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("replay connection closed")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_frame(sock: socket.socket, code: int, body: bytes = b""):
    sock.sendall(_FRAME.pack(code, len(body)) + body)


def recv_frame(sock: socket.socket) -> Tuple[int, bytes]:
    code, length = _FRAME.unpack(_recv_exact(sock, _FRAME.size))
    return code, _recv_exact(sock, length) if length else b""


def encode_sample(batch: SampleBatch) -> bytes:
    parts = [struct.pack(">QI", batch.table_size, len(batch))]
    for (key, payload), probability in zip(batch.items, batch.probabilities):
        parts.append(struct.pack(">QdI", key, float(probability), len(payload)))
        parts.append(payload)
    return b"".join(parts)


def decode_sample(body: bytes) -> Tuple[List[int], List[bytes], np.ndarray, int]:
    table_size, count = struct.unpack_from(">QI", body, 0)
    offset = struct.calcsize(">QI")
    keys, payloads, probabilities = [], [], []
    for _ in range(count):
        key, probability, length = struct.unpack_from(">QdI", body, offset)
        offset += struct.calcsize(">QdI")
        keys.append(key)
        probabilities.append(probability)
        payloads.append(body[offset:offset + length])
        offset += length
    return keys, payloads, np.asarray(probabilities), table_size


class _ReplayHandler(socketserver.BaseRequestHandler):
    def handle(self):
        table: ReplayTable = self.server.table
        while True:
            try:
                opcode, body = recv_frame(self.request)
            except (ConnectionError, OSError):
                return
            try:
                reply = self._dispatch(table, opcode, body)
                send_frame(self.request, STATUS_OK, reply)
            except ClosedTableError as e:
                send_frame(self.request, STATUS_CLOSED, str(e).encode("utf-8"))
            except TimeoutError as e:
                send_frame(self.request, STATUS_TIMEOUT, str(e).encode("utf-8"))
            except (ValueError, struct.error) as e:
                send_frame(self.request, STATUS_INVALID, str(e).encode("utf-8"))

    @staticmethod
    def _dispatch(table: ReplayTable, opcode: int, body: bytes) -> bytes:
        if opcode == OP_INSERT:
            priority, timeout = struct.unpack_from(">dd", body, 0)
            key = table.insert(body[16:], priority, timeout=_decode_timeout(timeout))
            return struct.pack(">Q", key)
        if opcode == OP_SAMPLE:
            count, timeout = struct.unpack(">Id", body)
            return encode_sample(table.sample(count, timeout=_decode_timeout(timeout)))
        if opcode == OP_CAN_SAMPLE:
            (count,) = struct.unpack(">I", body)
            return struct.pack(">B", table.can_sample(count))
        if opcode == OP_UPDATE_PRIORITIES:
            (count,) = struct.unpack_from(">I", body, 0)
            keys = struct.unpack_from(f">{count}Q", body, 4)
            priorities = struct.unpack_from(f">{count}d", body, 4 + 8 * count)
            return struct.pack(">I", table.update_priorities(list(keys), list(priorities)))
        if opcode == OP_STATS:
            s = table.stats()
            return struct.pack(">QQQdQQ", s.size, s.total_inserts, s.total_sampled_items, s.current_ratio,
                               s.evictions, s.capacity)
        if opcode == OP_SIZE:
            return struct.pack(">Q", len(table))
        if opcode == OP_CLOSE:
            table.close()
            return b""
        raise ValueError(f"unknown replay opcode {opcode}")


class _ThreadingServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class ReplayServer:
    """Serves one table on localhost; port 0 picks a free port"""

    def __init__(self, table: ReplayTable, host: str = "127.0.0.1", port: int = 0):
        self.table = table
        self._server = _ThreadingServer((host, port), _ReplayHandler)
        self._server.table = table
        self.thread: Optional[threading.Thread] = None

    @property
    def address(self) -> Tuple[str, int]:
        return self._server.server_address[:2]

    def start(self):
        if self.thread is None:
            self.thread = threading.Thread(target=self._server.serve_forever, name="replay-server", daemon=True)
            self.thread.start()
            logger.info(f"Replay server for table {self.table.name!r} listening on {self.address}")
        return self

    def stop(self):
        self.table.close()
        self._server.shutdown()
        self._server.server_close()
        if self.thread:
            self.thread.join()
        logger.info("Replay server stopped")


class ReplayClient:
    """Socket client with the ReplayTable call surface; one connection per client, calls serialized"""

    def __init__(self, address: Tuple[str, int], name: str = "replay"):
        self.name = name
        self._sock = socket.create_connection(address)
        self._lock = threading.Lock()

    def _call(self, opcode: int, body: bytes = b"") -> bytes:
        with self._lock:
            send_frame(self._sock, opcode, body)
            status, reply = recv_frame(self._sock)
        if status == STATUS_CLOSED:
            raise ClosedTableError(reply.decode("utf-8"))
        if status == STATUS_TIMEOUT:
            raise TimeoutError(reply.decode("utf-8"))
        if status == STATUS_INVALID:
            raise ValueError(reply.decode("utf-8"))
        return reply

    def insert(self, payload: bytes, priority: float = 1.0, timeout: Optional[float] = None) -> int:
        reply = self._call(OP_INSERT, struct.pack(">dd", priority, _encode_timeout(timeout)) + payload)
        return struct.unpack(">Q", reply)[0]

    def sample(self, batch_size: int, timeout: Optional[float] = None) -> SampleBatch:
        keys, payloads, probabilities, table_size = decode_sample(
            self._call(OP_SAMPLE, struct.pack(">Id", batch_size, _encode_timeout(timeout))))
        return SampleBatch(items=list(zip(keys, payloads)), probabilities=probabilities, table_size=table_size)

    def can_sample(self, batch_size: int = 1) -> bool:
        return bool(struct.unpack(">B", self._call(OP_CAN_SAMPLE, struct.pack(">I", batch_size)))[0])

    def update_priorities(self, keys: Sequence[int], priorities: Sequence[float]) -> int:
        count = len(keys)
        body = struct.pack(f">I{count}Q{count}d", count, *[int(k) for k in keys], *[float(p) for p in priorities])
        return struct.unpack(">I", self._call(OP_UPDATE_PRIORITIES, body))[0]

    def stats(self) -> TableStats:
        size, inserts, sampled, ratio, evictions, capacity = struct.unpack(">QQQdQQ", self._call(OP_STATS))
        return TableStats(size=size, total_inserts=inserts, total_sampled_items=sampled, current_ratio=ratio,
                          evictions=evictions, capacity=capacity)

    def close(self):
        """Shut the remote table down, releasing every blocked caller"""
        self._call(OP_CLOSE)

    def disconnect(self):
        self._sock.close()

    def __len__(self) -> int:
        return struct.unpack(">Q", self._call(OP_SIZE))[0]
