from __future__ import annotations

import random
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdmaemu.sim import CostModel, VirtualScheduler
from rdmaemu.wire import (FLAG_LAST, HEADER_LEN, MAGIC, Endpoint, InProcWire, Packet,
                          PacketError, PktOp, RcWindow, RetryExhausted, UdpWire, decode,
                          encode, format_registry, parse_registry, psn_add, psn_diff)


def rand_packet(rng: random.Random, mtu=4096) -> Packet:
    return Packet(PktOp(rng.randrange(6)), rng.randrange(256), rng.randrange(2),
                  rng.getrandbits(32), rng.getrandbits(32), rng.getrandbits(24),
                  rng.getrandbits(64), rng.getrandbits(32),
                  rng.randbytes(rng.choice((0, 1, rng.randrange(mtu + 1)))))


# ---------------------------------------------------------------- framing

def test_header_only_send():
    data = encode(Packet(PktOp.SEND))
    assert len(data) == HEADER_LEN == 34
    assert data[:2] == MAGIC


def test_header_is_big_endian():
    data = encode(Packet(PktOp.WRITE, FLAG_LAST, 0, 0x01020304, 0x0A0B0C0D, 0x123456,
                         0x1122334455667788, 0xCAFEBABE, b"xy"))
    assert data[6:10] == bytes([1, 2, 3, 4])
    assert data[10:14] == bytes([0x0A, 0x0B, 0x0C, 0x0D])
    assert data[14:18] == bytes([0, 0x12, 0x34, 0x56])
    assert data[18:26] == bytes.fromhex("1122334455667788")
    assert data[26:30] == bytes.fromhex("CAFEBABE")
    assert data[30:34] == bytes([0, 0, 0, 2])


def test_roundtrip_100k():
    rng = random.Random(7)
    for _ in range(100_000):
        p = rand_packet(rng, mtu=64)
        assert decode(encode(p, 64), 64) == p


@settings(max_examples=300, deadline=None)
@given(op=st.integers(0, 5), flags=st.integers(0, 255), tr=st.integers(0, 1),
       sq=st.integers(0, 2**32 - 1), dq=st.integers(0, 2**32 - 1), psn=st.integers(0, 2**24 - 1),
       ra=st.integers(0, 2**64 - 1), rk=st.integers(0, 2**32 - 1),
       payload=st.binary(max_size=4096))
def test_roundtrip_property(op, flags, tr, sq, dq, psn, ra, rk, payload):
    p = Packet(PktOp(op), flags, tr, sq, dq, psn, ra, rk, payload)
    assert decode(encode(p)) == p


def test_decode_truncated_header():
    with pytest.raises(PacketError) as e:
        decode(encode(Packet(PktOp.SEND))[:29])
    assert e.value.offset == 29


def test_decode_truncated_payload():
    with pytest.raises(PacketError):
        decode(encode(Packet(PktOp.SEND, payload=b"abcdef"))[:-1])


@pytest.mark.parametrize("index,value", [(0, 0x00), (2, 9), (3, 17), (5, 3)])
def test_decode_rejects_bad_fields(index, value):
    data = bytearray(encode(Packet(PktOp.SEND, payload=b"z")))
    data[index] = value
    with pytest.raises(PacketError):
        decode(bytes(data))


def test_encode_rejects_oversize_and_bursts():
    with pytest.raises(ValueError):
        encode(Packet(PktOp.SEND, payload=bytes(4097)))
    with pytest.raises(ValueError):
        encode(Packet(PktOp.SEND, payload=bytes(10), nfrag=2))


def test_psn_arithmetic_wraps():
    assert psn_add(2**24 - 1, 1) == 0
    assert psn_diff(0, 2**24 - 1) == 1
    assert psn_diff(2**24 - 1, 0) == -1


# -------------------------------------------------------------- RC window

def _fill(win, first, n):
    for i in range(n):
        win.send(psn_add(first, i), Packet(PktOp.SEND, psn=psn_add(first, i)))


def test_cumulative_ack_clears():
    win = RcWindow()
    _fill(win, 3, 8)                     # psn 3..10
    assert win.on_ack(7) == 5
    assert [p for p, _ in win.unacked] == [8, 9, 10]


def test_window_cap():
    win = RcWindow(window=4)
    _fill(win, 0, 4)
    assert not win.can_send()
    with pytest.raises(RuntimeError):
        win.send(4, Packet(PktOp.SEND, psn=4))


def test_timeout_retransmits_all_and_doubles():
    win = RcWindow(retransmit_timeout=1e-3)
    _fill(win, 100, 5)
    pkts = win.on_timeout()
    assert [p.psn for p in pkts] == [100, 101, 102, 103, 104]
    assert win.retransmit_timeout == 2e-3


def test_eight_timeouts_exhaust():
    win = RcWindow()
    _fill(win, 0, 1)
    for _ in range(7):
        win.on_timeout()
    with pytest.raises(RetryExhausted):
        win.on_timeout()


def test_ack_resets_backoff():
    win = RcWindow()
    _fill(win, 0, 2)
    win.on_timeout()
    win.on_ack(0)
    assert win.retries == 0 and win.retransmit_timeout == win.base_timeout


def test_window_wraps_psn():
    win = RcWindow()
    _fill(win, 2**24 - 2, 4)
    assert win.on_ack(0) == 3
    assert [p for p, _ in win.unacked] == [1]


# -------------------------------------------------------------- backends

class _Sink:
    def __init__(self):
        self.got = []

    def __call__(self, pkt):
        self.got.append(pkt)


def test_inproc_fifo_1000():
    sched = VirtualScheduler()
    wire = InProcWire(CostModel(), seed=3)
    sink = _Sink()
    wire.attach(1, sched, _Sink())
    wire.attach(2, sched, sink)
    for i in range(1000):
        wire.tx(1, 2, Packet(PktOp.SEND, psn=i, payload=bytes([i % 256]) * (i % 50)))
    sched.run()
    assert [p.psn for p in sink.got] == list(range(1000))


def test_inproc_endpoint_closed():
    wire = InProcWire(CostModel())
    wire.close()
    from rdmaemu.wire import EndpointClosed
    with pytest.raises(EndpointClosed):
        wire.tx(1, 2, Packet(PktOp.SEND))


def test_inproc_real_time_endpoints():
    wire = InProcWire(CostModel())
    a, b = Endpoint(wire, 1), Endpoint(wire, 2)
    for i in range(1000):
        a.tx(2, Packet(PktOp.SEND, psn=i))
    assert [p.psn for p in b.rx()] == list(range(1000))


def _udp_pair(p_loss=0.0, seed=0):
    wire = UdpWire(p_loss=p_loss, seed=seed)
    return wire, Endpoint(wire, 1), Endpoint(wire, 2)


def test_udp_loss_fraction():
    wire, a, b = _udp_pair(p_loss=0.5, seed=11)
    n = 10_000
    got = 0
    try:
        for i in range(n):
            a.tx(2, Packet(PktOp.SEND, psn=i, payload=b"x" * 32))
            if i % 200 == 199:
                got += sum(1 for _ in b.rx(timeout=0.0))
        got += sum(1 for _ in b.rx(timeout=0.3))
    finally:
        wire.close()
    assert abs(got / n - 0.5) <= 0.05
    assert wire.dropped + got == n


def test_udp_loopback_in_order_window_one():
    wire, a, b = _udp_pair()
    seen = []
    try:
        for i in range(500):
            a.tx(2, Packet(PktOp.SEND, psn=i, payload=i.to_bytes(4, "big")))
            pkt = next(b.rx(timeout=2.0))
            seen.append(pkt.psn)
    finally:
        wire.close()
    assert seen == list(range(500))


def test_udp_garbage_counted_not_delivered():
    wire, a, b = _udp_pair()
    try:
        wire._socks[1].sendto(b"garbage-datagram" * 3, wire.registry[2])
        a.tx(2, Packet(PktOp.ACK, psn=5))
        pkts = list(b.rx(timeout=0.5))
    finally:
        wire.close()
    assert [p.psn for p in pkts] == [5]
    assert wire.rx_errors == 1


def test_registry_roundtrip():
    reg = parse_registry("# nodes\nnode 1 127.0.0.1:9000\nnode 2 10.0.0.2:9001  # peer\n")
    assert reg == {1: ("127.0.0.1", 9000), 2: ("10.0.0.2", 9001)}
    assert parse_registry(format_registry(reg)) == reg
    with pytest.raises(ValueError):
        parse_registry("node one host")


def test_udp_registry_ports_used():
    probe = UdpWire()
    ep = Endpoint(probe, 1)
    port = probe.registry[1][1]
    probe.close()
    ep.close()
    time.sleep(0.05)
    wire = UdpWire(registry={1: ("127.0.0.1", port)})
    try:
        Endpoint(wire, 1)
        assert wire.registry[1] == ("127.0.0.1", port)
    finally:
        wire.close()
