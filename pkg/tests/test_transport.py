"""Simulated and TCP carriers: ordering, determinism, error handling."""

import threading

import numpy as np
import pytest

from fedseg.channels import (SimNetwork, TcpListener, simulated_transport,
                             tcp_connect)
from fedseg.errors import ChannelClosedError
from fedseg.wire import MsgType, RoundMessage


def msg(sender=0, round=0, payload=b""):
    return RoundMessage(MsgType.STATE_DICT_SUBMIT, sender, round, payload)


class TestSimNetwork:
    def test_per_sender_fifo(self):
        net = SimNetwork()
        a, b = net.pair("a", "b")
        a.send(msg(round=1))
        a.send(msg(round=2))
        a.send(msg(round=3))
        assert [b.recv().round for _ in range(3)] == [1, 2, 3]

    def test_zero_latency_merge_order(self):
        """No latency: arrival order is send order across senders."""
        net = SimNetwork()
        a_srv, a_cli = net.pair("srv->a", "a")
        b_srv, b_cli = net.pair("srv->b", "b")
        del a_srv, b_srv
        # two clients feeding one logical server actor via two channels
        a_cli.send(msg(sender=1, round=1))
        b_cli.send(msg(sender=2, round=1))
        a_cli.send(msg(sender=1, round=2))
        net_recv = [net._receive("srv->a"), net._receive("srv->b"),
                    net._receive("srv->a")]
        assert len(net_recv) == 3

    def test_seeded_latency_replays_identically(self):
        def run(seed):
            net = SimNetwork(seed=seed, max_latency=5)
            a, b = net.pair("a", "b")
            c, d = net.pair("c", "b2")
            for i in range(10):
                a.send(msg(sender=1, round=i))
                c.send(msg(sender=2, round=100 + i))
            got_b = [b.recv(timeout=1).round for _ in range(10)]
            got_d = [d.recv(timeout=1).round for _ in range(10)]
            return got_b, got_d

        assert run(7) == run(7)

    def test_latency_preserves_per_sender_fifo(self):
        rng = np.random.default_rng(0)
        for seed in rng.integers(0, 1000, size=10):
            net = SimNetwork(seed=int(seed), max_latency=10)
            a, b = net.pair("a", "b")
            for i in range(20):
                a.send(msg(round=i))
            got = [b.recv(timeout=1).round for _ in range(20)]
            assert got == list(range(20))

    def test_send_on_closed_endpoint_raises(self):
        net = SimNetwork()
        a, b = net.pair("a", "b")
        b.close()
        with pytest.raises(ChannelClosedError):
            a.send(msg())

    def test_recv_on_closed_endpoint_raises(self):
        net = SimNetwork()
        a, b = net.pair("a", "b")
        b.close()
        with pytest.raises(ChannelClosedError):
            b.recv(timeout=1)

    def test_recv_timeout(self):
        net = SimNetwork()
        a, b = net.pair("a", "b")
        with pytest.raises(TimeoutError):
            b.recv(timeout=0.05)

    def test_messages_cross_threads(self):
        net = SimNetwork()
        a, b = net.pair("a", "b")
        got = []

        def consumer():
            for _ in range(5):
                got.append(b.recv(timeout=2).round)

        t = threading.Thread(target=consumer)
        t.start()
        for i in range(5):
            a.send(msg(round=i))
        t.join(timeout=5)
        assert got == [0, 1, 2, 3, 4]


class TestTcp:
    def test_round_trip_over_loopback(self):
        listener = TcpListener()
        client = tcp_connect("127.0.0.1", listener.port)
        server = listener.accept(timeout=5)
        try:
            payload = bytes(range(256)) * 4
            client.send(msg(sender=3, round=9, payload=payload))
            got = server.recv(timeout=5)
            assert got == msg(sender=3, round=9, payload=payload)
            server.send(msg(sender=0xFFFFFFFF, round=9))
            assert client.recv(timeout=5).sender_id == 0xFFFFFFFF
        finally:
            client.close()
            server.close()
            listener.close()

    def test_fifo_over_tcp(self):
        listener = TcpListener()
        client = tcp_connect("127.0.0.1", listener.port)
        server = listener.accept(timeout=5)
        try:
            for i in range(50):
                client.send(msg(round=i))
            got = [server.recv(timeout=5).round for _ in range(50)]
            assert got == list(range(50))
        finally:
            client.close()
            server.close()
            listener.close()

    def test_recv_timeout(self):
        listener = TcpListener()
        client = tcp_connect("127.0.0.1", listener.port)
        server = listener.accept(timeout=5)
        try:
            with pytest.raises(TimeoutError):
                server.recv(timeout=0.05)
        finally:
            client.close()
            server.close()
            listener.close()

    def test_auto_assigned_port(self):
        listener = TcpListener(port=0)
        assert listener.port > 0
        listener.close()


class TestFactory:
    def test_simulated_transport_returns_network(self):
        net = simulated_transport(seed=1, max_latency=3)
        assert isinstance(net, SimNetwork)
        assert net.max_latency == 3
