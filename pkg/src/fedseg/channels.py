"""Message carriers: in-process simulated network and framed TCP sockets.

Both carriers move encoded frames (never shared objects), so serialization
bugs surface in simulation too. Each endpoint is owned by one logical
actor; per-sender FIFO order holds on every carrier.
"""

from __future__ import annotations

import heapq
import socket
import threading

import numpy as np

from .errors import ChannelClosedError, FramingError
from .wire import HEADER_LEN, RoundMessage, frame, unframe, unframe_bytes


class Endpoint:
    def send(self, msg: RoundMessage):
        raise NotImplementedError

    def recv(self, timeout=None) -> RoundMessage:
        raise NotImplementedError

    def close(self):
        pass


class SimNetwork:
    """Deterministic in-process network.

    Messages are enqueued with a global send index; arrival order is by
    (arrival_time, sender_id, send_index). With no latency model the
    arrival time equals the send index, i.e. a deterministic merge by send
    time with sender id as the tie rule. A seeded latency model perturbs
    arrival times across senders while per-sender FIFO is preserved by
    clamping each arrival to be no earlier than the sender's previous one.
    """

    def __init__(self, seed=None, max_latency: int = 0):
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._clock = 0
        self._inboxes = {}      # endpoint id -> heap of (arr, sender, seq, data)
        self._last_arrival = {}  # (sender, receiver) -> arrival time
        self._closed = set()
        self.max_latency = max_latency
        self._rng = np.random.default_rng(seed) if seed is not None else None

    def _register(self, eid):
        with self._lock:
            self._inboxes.setdefault(eid, [])

    def _deliver(self, sender, receiver, data: bytes):
        with self._cond:
            if receiver in self._closed or sender in self._closed:
                raise ChannelClosedError(f"endpoint closed: {receiver}")
            self._clock += 1
            seq = self._clock
            arrival = float(seq)
            if self._rng is not None and self.max_latency > 0:
                arrival += float(self._rng.integers(0, self.max_latency + 1))
            key = (sender, receiver)
            arrival = max(arrival, self._last_arrival.get(key, 0.0))
            self._last_arrival[key] = arrival
            heapq.heappush(self._inboxes[receiver],
                           (arrival, sender, seq, data))
            self._cond.notify_all()

    def _receive(self, receiver, timeout=None) -> bytes:
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._inboxes[receiver] or receiver in self._closed,
                timeout=timeout)
            if receiver in self._closed:
                raise ChannelClosedError(f"endpoint closed: {receiver}")
            if not ok:
                raise TimeoutError(f"recv timeout on endpoint {receiver}")
            return heapq.heappop(self._inboxes[receiver])[3]

    def close_endpoint(self, eid):
        with self._cond:
            self._closed.add(eid)
            self._cond.notify_all()

    def pair(self, a_name, b_name):
        """A duplex channel as two endpoints; names must be unique."""
        self._register(a_name)
        self._register(b_name)
        return (SimEndpoint(self, a_name, b_name),
                SimEndpoint(self, b_name, a_name))


class SimEndpoint(Endpoint):
    def __init__(self, network: SimNetwork, local, peer):
        self.network = network
        self.local = local
        self.peer = peer

    def send(self, msg: RoundMessage):
        self.network._deliver(self.local, self.peer, frame(msg))

    def recv(self, timeout=None) -> RoundMessage:
        return unframe_bytes(self.network._receive(self.local,
                                                   timeout=timeout))

    def close(self):
        self.network.close_endpoint(self.local)


def simulated_transport(seed=None, max_latency: int = 0) -> SimNetwork:
    return SimNetwork(seed=seed, max_latency=max_latency)


class _SocketReader:
    """file-like wrapper so unframe() can read exact byte counts."""

    def __init__(self, sock):
        self.sock = sock

    def read(self, n):
        try:
            return self.sock.recv(n)
        except socket.timeout:
            raise TimeoutError("socket recv timeout") from None
        except OSError as e:
            raise ChannelClosedError(str(e)) from e


class TcpEndpoint(Endpoint):
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = _SocketReader(sock)

    def send(self, msg: RoundMessage):
        try:
            self.sock.sendall(frame(msg))
        except OSError as e:
            raise ChannelClosedError(str(e)) from e

    def recv(self, timeout=None) -> RoundMessage:
        self.sock.settimeout(timeout)
        try:
            return unframe(self._reader)
        except FramingError:
            raise
        finally:
            self.sock.settimeout(None)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def tcp_connect(host: str, port: int, timeout=10.0) -> TcpEndpoint:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return TcpEndpoint(sock)


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen()
        self.address = self.sock.getsockname()

    @property
    def port(self):
        return self.address[1]

    def accept(self, timeout=None) -> TcpEndpoint:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise TimeoutError("accept timeout") from None
        conn.settimeout(None)
        return TcpEndpoint(conn)

    def close(self):
        self.sock.close()
