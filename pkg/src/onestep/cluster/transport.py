"""Transports between the coordinator and its workers.

Both transports expose the same three calls used by the coordinator:
``send(machine_id, msg)``, ``gather(machine_ids)`` (the round barrier,
returning one reply per machine) and ``close()``.
"""

import logging
import socket
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor

from ..errors import MalformedFrame, OneStepError, TransportError
from .messages import ASSIGN_SHARD, DONE, Message, deserialize_message, read_message, serialize_message, write_message

log = logging.getLogger(__name__)


class InProcessTransport:
    """Calls worker objects directly; replies queue up until gathered.

    With ``wire=True`` every message is pushed through the frame codec,
    which exercises serialization without sockets.
    """

    tag = "inproc"

    def __init__(self, workers, wire=False):
        self.workers = {w.machine_id: w for w in workers}
        self.wire = wire
        self._inbox = {mid: deque() for mid in self.workers}

    def _through_wire(self, msg):
        return deserialize_message(serialize_message(msg)) if self.wire else msg

    def send(self, machine_id, msg):
        try:
            worker = self.workers[machine_id]
        except KeyError:
            raise TransportError(machine_id, "no such worker") from None
        reply = worker.handle(self._through_wire(msg))
        if reply is not None:
            self._inbox[machine_id].append(self._through_wire(reply))

    def gather(self, machine_ids):
        out = {}
        for mid in machine_ids:
            if not self._inbox[mid]:
                raise TransportError(mid, "worker sent no reply")
            out[mid] = self._inbox[mid].popleft()
        return out

    def close(self):
        self._inbox.clear()


class TcpTransport:
    """Coordinator end of the TCP deployment.

    Workers connect and register by sending an ``AssignShard`` frame whose
    payload is ``{"register": true}``; after that the connection carries
    protocol messages in both directions.
    """

    tag = "tcp"

    def __init__(self, host="127.0.0.1", port=0, timeout=120.0):
        self.timeout = timeout
        self._server = socket.create_server((host, port))
        self._server.settimeout(timeout)
        self._conns = {}

    @property
    def address(self):
        return self._server.getsockname()[:2]

    def accept(self, machine_ids):
        """Block until every machine in ``machine_ids`` has registered."""
        expected = set(machine_ids)
        while set(self._conns) != expected:
            try:
                conn, peer = self._server.accept()
            except socket.timeout:
                missing = sorted(expected - set(self._conns))
                raise TransportError(missing[0], f"did not register within {self.timeout}s") from None
            conn.settimeout(self.timeout)
            try:
                hello = read_message(conn)
            except (OSError, OneStepError) as exc:
                conn.close()
                log.warning("dropping connection from %s: %s", peer, exc)
                continue
            mid = hello.machine_id
            if hello.kind != ASSIGN_SHARD or not hello.payload.get("register"):
                conn.close()
                raise TransportError(mid, f"expected a registration frame, got {hello.kind}")
            if mid not in expected or mid in self._conns:
                conn.close()
                raise TransportError(mid, "unexpected or duplicate registration")
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns[mid] = conn
            log.info("machine %d registered from %s", mid, peer)

    def send(self, machine_id, msg):
        try:
            write_message(self._conns[machine_id], msg)
        except KeyError:
            raise TransportError(machine_id, "not connected") from None
        except OSError as exc:
            raise TransportError(machine_id, f"send failed: {exc}") from None

    def _recv(self, machine_id):
        try:
            return read_message(self._conns[machine_id])
        except (OSError, MalformedFrame) as exc:
            raise TransportError(machine_id, f"receive failed: {exc}") from None

    def gather(self, machine_ids):
        # replies may arrive in any order; each connection is read on its own thread
        machine_ids = list(machine_ids)
        with ThreadPoolExecutor(max_workers=max(1, len(machine_ids))) as pool:
            replies = list(pool.map(self._recv, machine_ids))
        return dict(zip(machine_ids, replies))

    def close(self):
        for conn in self._conns.values():
            try:
                conn.close()
            except OSError:
                pass
        self._conns.clear()
        self._server.close()


def serve_worker(address, worker, timeout=120.0):
    """Run ``worker`` against a coordinator at ``address`` until ``Done``."""
    with socket.create_connection(tuple(address), timeout=timeout) as sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        write_message(sock, Message(ASSIGN_SHARD, worker.machine_id, 1, {"register": True}))
        while True:
            msg = read_message(sock)
            reply = worker.handle(msg)
            if reply is not None:
                write_message(sock, reply)
            if msg.kind == DONE:
                return


class WorkerThreads:
    """Local worker threads for a loopback TCP run."""

    def __init__(self, address, workers, timeout=120.0):
        self.errors = {}
        self.threads = [
            threading.Thread(target=self._run, args=(address, w, timeout), daemon=True, name=f"worker-{w.machine_id}")
            for w in workers
        ]
        for t in self.threads:
            t.start()

    def _run(self, address, worker, timeout):
        try:
            serve_worker(address, worker, timeout)
        except Exception as exc:  # surfaced by join()
            self.errors[worker.machine_id] = exc

    def join(self, timeout=None):
        for t in self.threads:
            t.join(timeout)
        if self.errors:
            mid = min(self.errors)
            raise TransportError(mid, f"worker thread failed: {self.errors[mid]}")
