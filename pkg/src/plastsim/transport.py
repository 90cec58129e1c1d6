"""Rank communication: all-to-all exchange, emulated one-sided fetch,
synchronization, and byte accounting.

Two interchangeable backends exist.  The in-process backend drives all
ranks in lockstep inside one process: collectives are a matrix transpose
through :class:`LocalBackend` and a fetch is a direct read of the owning
rank's registered resolver, which the owner's (suspended) control flow
never notices -- one-sided semantics by construction.  The TCP backend
gives each rank a full socket mesh; a dedicated responder thread answers
fetches so the owner's main loop is never involved.

Counters track payload bytes only; payloads a rank addresses to itself
bypass the network and the counters.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field

TAG_BARRIER = 0
TAG_SPIKES = 1
TAG_FREQUENCIES = 2
TAG_DELETE_AXON = 3
TAG_DELETE_DENDRITE = 4
TAG_BRANCH = 5
TAG_REQUESTS = 6
TAG_RESPONSES = 7
TAG_GATHER = 8
TAG_FETCH = 9
TAG_FETCH_REPLY = 10

ACTIVITY_TAGS = (TAG_SPIKES, TAG_FREQUENCIES)

FETCH_RECORD_ACCOUNTED_BYTES = 64

_FRAME_HEADER = struct.Struct("<IB")
_NODE_ID = struct.Struct("<Q")


class TransportError(RuntimeError):
    pass


class UnknownNodeError(TransportError):
    pass


@dataclass
class CommStats:
    """Per-rank communication counters (monotone, payload bytes only)."""

    bytes_sent: int = 0
    bytes_remotely_accessed: int = 0
    messages_sent: int = 0
    sync_points: int = 0
    exchanges_by_tag: dict[int, int] = field(default_factory=dict)

    @property
    def activity_exchanges(self) -> int:
        return sum(self.exchanges_by_tag.get(t, 0) for t in ACTIVITY_TAGS)

    def account_send(self, rank: int, rows: list[bytes], tag: int) -> None:
        for j, payload in enumerate(rows):
            if j == rank:
                continue
            self.bytes_sent += len(payload)
            if payload:
                self.messages_sent += 1
        self.sync_points += 1
        self.exchanges_by_tag[tag] = self.exchanges_by_tag.get(tag, 0) + 1

    def snapshot(self) -> "CommStats":
        return CommStats(self.bytes_sent, self.bytes_remotely_accessed,
                         self.messages_sent, self.sync_points,
                         dict(self.exchanges_by_tag))


class LocalBackend:
    """Collective engine and fetch registry for the in-process backend."""

    def __init__(self, rank_count: int):
        self.k = rank_count
        self.stats = [CommStats() for _ in range(rank_count)]
        self._fetch_handlers: list = [None] * rank_count

    def exchange(self, rows_by_rank: list[list[bytes]], tag: int,
                 accounted: bool = True) -> list[list[bytes]]:
        """Deliver rows_by_rank[i][j] (rank i -> rank j); returns inboxes."""
        if len(rows_by_rank) != self.k or any(len(r) != self.k for r in rows_by_rank):
            raise TransportError("exchange rows must form a k x k matrix")
        if accounted:
            for i, rows in enumerate(rows_by_rank):
                self.stats[i].account_send(i, rows, tag)
        return [list(col) for col in zip(*rows_by_rank)]

    def barrier(self) -> None:
        for s in self.stats:
            s.sync_points += 1

    def set_fetch_handler(self, rank: int, handler) -> None:
        self._fetch_handlers[rank] = handler

    def fetch(self, requester: int, owner: int, node_id: int) -> bytes:
        handler = self._fetch_handlers[owner]
        if handler is None:
            raise TransportError(f"rank {owner} has no fetch handler")
        record = handler(node_id)
        if record is None:
            raise UnknownNodeError(
                f"rank {owner} does not own node {node_id:#x}")
        self.stats[requester].bytes_remotely_accessed += FETCH_RECORD_ACCOUNTED_BYTES
        return record


def _recv_exact(reader, n: int) -> bytes:
    data = reader.read(n)
    if data is None or len(data) != n:
        raise TransportError("peer closed connection mid-frame")
    return data


def _read_frame(reader) -> tuple[int, bytes]:
    header = _recv_exact(reader, _FRAME_HEADER.size)
    length, tag = _FRAME_HEADER.unpack(header)
    payload = _recv_exact(reader, length) if length else b""
    return tag, payload


def _frame(tag: int, payload: bytes) -> bytes:
    return _FRAME_HEADER.pack(len(payload), tag) + payload


class _PeerSender(threading.Thread):
    """Drains a queue of frames into one socket so collective sends can
    never deadlock against simultaneous sends from the peer."""

    def __init__(self, sock: socket.socket):
        super().__init__(daemon=True)
        self._sock = sock
        self._cond = threading.Condition()
        self._queue: list[bytes | None] = []
        self.start()

    def push(self, frame: bytes | None) -> None:
        with self._cond:
            self._queue.append(frame)
            self._cond.notify()

    def run(self):
        while True:
            with self._cond:
                while not self._queue:
                    self._cond.wait()
                item = self._queue.pop(0)
            if item is None:
                return
            try:
                self._sock.sendall(item)
            except OSError:
                return


class SocketTransport:
    """One rank's view of a TCP mesh.

    Per peer there is one bidirectional collective connection (dialed by
    the lower rank) and one fetch connection dialed by the requester, so
    fetch traffic never interleaves with collective frames.  A responder
    thread serves inbound fetches from the registered handler without
    touching simulation control flow.
    """

    def __init__(self, rank: int, endpoints: list[tuple[str, int]],
                 listener: socket.socket | None = None,
                 connect_timeout: float = 30.0):
        self.rank = rank
        self.k = len(endpoints)
        self.stats = CommStats()
        self._fetch_handler = None
        self._fetch_lock = threading.Lock()
        if listener is None:
            listener = socket.create_server(endpoints[rank], backlog=4 * self.k)
        self._listener = listener
        self._listener.settimeout(connect_timeout)
        self._collective: dict[int, socket.socket] = {}
        self._fetch_out: dict[int, socket.socket] = {}
        self._fetch_in: list[socket.socket] = []
        self._connect_mesh(endpoints, connect_timeout)
        self._readers = {p: s.makefile("rb") for p, s in self._collective.items()}
        self._fetch_readers = {p: s.makefile("rb") for p, s in self._fetch_out.items()}
        self._senders = {p: _PeerSender(s) for p, s in self._collective.items()}
        self._responder = threading.Thread(target=self._serve_fetches, daemon=True)
        self._responder_stop = False
        self._responder.start()

    # -- mesh construction ------------------------------------------------

    def _connect_mesh(self, endpoints, timeout: float) -> None:
        dialed_collective = {}
        for peer in range(self.rank + 1, self.k):
            dialed_collective[peer] = self._dial(endpoints[peer], b"C", timeout)
        for peer in range(self.k):
            if peer == self.rank:
                continue
            self._fetch_out[peer] = self._dial(endpoints[peer], b"F", timeout)
        accepted_collective = {}
        need_coll = self.rank            # ranks below me dial collective
        need_fetch = self.k - 1          # every other rank dials fetch
        while len(accepted_collective) < need_coll or len(self._fetch_in) < need_fetch:
            conn, _ = self._listener.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = b""
            while len(hello) < 2:
                chunk = conn.recv(2 - len(hello))
                if not chunk:
                    raise TransportError("peer vanished during handshake")
                hello += chunk
            peer, kind = hello[0], hello[1:2]
            if kind == b"C":
                accepted_collective[peer] = conn
            else:
                self._fetch_in.append(conn)
        self._collective = {**dialed_collective, **accepted_collective}

    def _dial(self, endpoint, kind: bytes, timeout: float) -> socket.socket:
        sock = socket.create_connection(endpoint, timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(bytes([self.rank]) + kind)
        sock.settimeout(timeout * 10)
        return sock

    # -- collective operations --------------------------------------------

    def all_to_all(self, rows: list[bytes], tag: int,
                   accounted: bool = True) -> list[bytes]:
        if len(rows) != self.k:
            raise TransportError("payload row must have one entry per rank")
        if accounted:
            self.stats.account_send(self.rank, rows, tag)
        for peer, sender in self._senders.items():
            sender.push(_frame(tag, rows[peer]))
        inbox: list[bytes] = [b""] * self.k
        inbox[self.rank] = rows[self.rank]
        for peer in sorted(self._readers):
            got_tag, payload = _read_frame(self._readers[peer])
            if got_tag != tag:
                raise TransportError(
                    f"rank {self.rank} expected round tag {tag}, got {got_tag} "
                    f"from rank {peer}")
            inbox[peer] = payload
        return inbox

    def barrier(self) -> None:
        self.all_to_all([b""] * self.k, TAG_BARRIER, accounted=False)
        self.stats.sync_points += 1

    # -- emulated one-sided access ----------------------------------------

    def set_fetch_handler(self, handler) -> None:
        self._fetch_handler = handler

    def fetch(self, owner: int, node_id: int) -> bytes:
        if owner == self.rank:
            raise TransportError("fetch must target a remote rank")
        with self._fetch_lock:
            sock = self._fetch_out[owner]
            sock.sendall(_frame(TAG_FETCH, _NODE_ID.pack(node_id)))
            tag, payload = _read_frame(self._fetch_readers[owner])
        if tag != TAG_FETCH_REPLY or not payload:
            raise UnknownNodeError(
                f"rank {owner} does not own node {node_id:#x}")
        self.stats.bytes_remotely_accessed += FETCH_RECORD_ACCOUNTED_BYTES
        return payload

    def _serve_fetches(self) -> None:
        import selectors

        sel = selectors.DefaultSelector()
        readers = {}
        for conn in self._fetch_in:
            readers[conn] = conn.makefile("rb")
            sel.register(conn, selectors.EVENT_READ)
        while not self._responder_stop:
            for key, _ in sel.select(timeout=0.2):
                conn = key.fileobj
                try:
                    tag, payload = _read_frame(readers[conn])
                except TransportError:
                    sel.unregister(conn)
                    continue
                if tag != TAG_FETCH:
                    continue
                (node_id,) = _NODE_ID.unpack(payload)
                record = None
                if self._fetch_handler is not None:
                    record = self._fetch_handler(node_id)
                reply = _frame(TAG_FETCH_REPLY, record or b"")
                conn.sendall(reply)

    def close(self) -> None:
        self._responder_stop = True
        for sender in self._senders.values():
            sender.push(None)
        for sock in (*self._collective.values(), *self._fetch_out.values(),
                     *self._fetch_in, self._listener):
            try:
                sock.close()
            except OSError:
                pass
