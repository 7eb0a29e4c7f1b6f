from __future__ import annotations

import random

import pytest

from conftest import ALL, crc, make_node, make_pair, poll_all
from rdmaemu import Access, EngineConfig, Fabric, Opcode, QPState, Sge, WCStatus, WorkRequest
from rdmaemu.dataplane import DataplanePath
from rdmaemu.wire import FLAG_LAST, PktOp


class Tap:
    """Record every packet a wire transmits."""

    def __init__(self, wire):
        self.packets = []
        self._tx = wire.tx
        wire.tx = self

    def __call__(self, src, dst, pkt, now=None):
        self.packets.append((src, dst, pkt))
        return self._tx(src, dst, pkt, now)

    def data(self, src=1):
        return [p for s, _, p in self.packets if s == src and p.opcode not in (PktOp.ACK,
                                                                                PktOp.NAK)]


# ----------------------------------------------------------------- config

def test_inline_threshold_bounded():
    with pytest.raises(ValueError):
        EngineConfig(inline_threshold=257)
    EngineConfig(inline_threshold=256)


def test_unknown_mode():
    with pytest.raises(ValueError):
        EngineConfig(mode="turbo")


# --------------------------------------------------------------- doorbell

def test_doorbell_empty_queue_noop(rc_pair):
    fab, a, b = rc_pair
    a.dev.engine.ring_doorbell(a.qp.qp_num)
    fab.drain()
    assert a.dev.engine.stats["packets_tx"] == 0


def test_doorbell_twice_single_drain(rc_pair):
    fab, a, b = rc_pair
    b.dev.post_recv(b.qp, b.recv_wr(1, 64))
    a.qp.sq_pending.append(__import__("rdmaemu.verbs.types", fromlist=["SendSlot"])
                           .SendSlot(a.send_wr(1, 64)))
    eng = a.dev.engine
    eng.ring_doorbell(a.qp.qp_num)
    eng.ring_doorbell(a.qp.qp_num)
    fab.drain()
    assert eng.stats["drains"] == 1
    assert eng.stats["doorbells_coalesced"] == 1


def test_doorbell_unknown_qp(rc_pair):
    fab, a, b = rc_pair
    with pytest.raises(Exception):
        a.dev.engine.ring_doorbell(0xDEAD)


def test_doorbell_after_error_flushes(rc_pair):
    fab, a, b = rc_pair
    a.dev.modify_qp(a.qp, QPState.ERROR)
    from rdmaemu.verbs.types import SendSlot
    for i in range(3):
        a.qp.sq_pending.append(SendSlot(a.send_wr(i, 16)))
    a.dev.engine.ring_doorbell(a.qp.qp_num)
    fab.drain()
    wcs = poll_all(a.dev, a.scq)
    assert [w.status for w in wcs] == [WCStatus.FLUSH_ERR] * 3


def test_outstanding_flushed_on_error(rc_pair):
    fab, a, b = rc_pair
    b.dev.post_recv(b.qp, [b.recv_wr(i, 16) for i in range(4)])
    a.dev.modify_qp(a.qp, QPState.ERROR)
    fab.drain()
    assert poll_all(b.dev, b.rcq) == []
    b.dev.modify_qp(b.qp, QPState.ERROR)
    wcs = poll_all(b.dev, b.rcq)
    assert [w.status for w in wcs] == [WCStatus.FLUSH_ERR] * 4


# -------------------------------------------------------------- execution

def test_send_16_one_packet():
    fab, a, b = make_pair(bursts=False)
    tap = Tap(fab.wire)
    b.dev.post_recv(b.qp, b.recv_wr(1, 64))
    a.dev.post_send(a.qp, a.send_wr(1, 16))
    fab.drain()
    (pkt,) = tap.data()
    assert pkt.opcode == PktOp.SEND and pkt.payload_len == 16 and pkt.last
    fab.close()


@pytest.mark.parametrize("bursts", [False, True])
def test_write_10000_three_fragments(bursts):
    fab, a, b = make_pair(bursts=bursts)
    tap = Tap(fab.wire)
    a.write(0, bytes(random.Random(1).randbytes(10000)))
    a.dev.post_send(a.qp, a.send_wr(1, 10000, opcode=Opcode.RDMA_WRITE,
                                    remote=(b.buf + 100, b.mr.rkey)))
    fab.drain()
    pkts = tap.data()
    assert sum(p.nfrag for p in pkts) == 3
    assert a.dev.engine.stats["packets_tx"] - sum(
        1 for s, _, p in tap.packets if s == 1 and p.opcode == PktOp.ACK) == 3
    if not bursts:
        first = pkts[0].psn
        assert [p.psn for p in pkts] == [first, first + 1, first + 2]
        assert [p.last for p in pkts] == [False, False, True]
        assert [p.payload_len for p in pkts] == [4096, 4096, 1808]
    assert b.read(100, 10000) == a.read(0, 10000)
    fab.close()


def test_bad_lkey_no_reads(rc_pair):
    fab, a, b = rc_pair
    tap = Tap(fab.wire)
    a.dev.post_send(a.qp, WorkRequest(1, Opcode.SEND, [Sge(a.buf, 64, 0xDEAD)]))
    fab.drain()
    (wc,) = poll_all(a.dev, a.scq)
    assert wc.status is WCStatus.LOC_KEY_ERR
    guard = a.dev.engine.guard
    assert guard.counts["reads"] == 0
    assert all(r.verdict == "deny" for r in guard.audit_log)
    assert tap.data() == []
    assert a.qp.state == QPState.RTS


def test_write_pattern(rc_pair):
    fab, a, b = rc_pair
    pattern = bytes(range(251)) * 40
    a.write(0, pattern)
    a.dev.post_send(a.qp, a.send_wr(1, len(pattern), opcode=Opcode.RDMA_WRITE,
                                    remote=(b.buf + 7, b.mr.rkey)))
    fab.drain()
    assert b.read(7, len(pattern)) == pattern
    assert poll_all(b.dev, b.rcq) == []          # no receiver completion
    assert poll_all(a.dev, a.scq)[0].status is WCStatus.SUCCESS


def test_read_4096(rc_pair):
    fab, a, b = rc_pair
    data = random.Random(2).randbytes(4096)
    b.write(4096, data)
    a.dev.post_send(a.qp, a.send_wr(3, 4096, opcode=Opcode.RDMA_READ,
                                    remote=(b.buf + 4096, b.mr.rkey)))
    fab.drain()
    (wc,) = poll_all(a.dev, a.scq)
    assert wc.status is WCStatus.SUCCESS and wc.byte_len == 4096
    assert a.read(0, 4096) == data


def test_write_without_remote_write_permission():
    fab = Fabric()
    a = make_node(fab, 1)
    b = make_node(fab, 2, access=Access.LOCAL_WRITE | Access.REMOTE_READ)
    fab.connect(a.qp, a.dev, b.qp, b.dev)
    b.write(0, b"\x11" * 512)
    before = crc(b.read(0, 1 << 20))
    a.write(0, b"\x99" * 512)
    a.dev.post_send(a.qp, a.send_wr(1, 512, opcode=Opcode.RDMA_WRITE,
                                    remote=(b.buf, b.mr.rkey)))
    fab.drain()
    (wc,) = poll_all(a.dev, a.scq)
    assert wc.status is WCStatus.REM_ACCESS_ERR
    assert crc(b.read(0, 1 << 20)) == before
    fab.close()


def test_read_bad_rkey(rc_pair):
    fab, a, b = rc_pair
    a.dev.post_send(a.qp, a.send_wr(1, 64, opcode=Opcode.RDMA_READ, remote=(b.buf, 0x1234)))
    fab.drain()
    assert poll_all(a.dev, a.scq)[0].status is WCStatus.REM_ACCESS_ERR


def test_lkey_of_other_pd_rejected(rc_pair):
    fab, a, b = rc_pair
    pd2 = a.dev.alloc_pd()
    mr2 = a.dev.reg_mr(pd2, a.buf, 4096, ALL)
    a.dev.post_send(a.qp, WorkRequest(1, Opcode.SEND, [Sge(a.buf, 64, mr2.lkey)]))
    fab.drain()
    assert poll_all(a.dev, a.scq)[0].status is WCStatus.LOC_KEY_ERR


# ------------------------------------------------------ events / completion

def test_armed_cq_one_event(rc_pair):
    fab, a, b = rc_pair
    b.dev.post_recv(b.qp, [b.recv_wr(1, 16), b.recv_wr(2, 16)])
    b.dev.req_notify_cq(b.rcq)
    a.dev.post_send(a.qp, [a.send_wr(1, 16), a.send_wr(2, 16)])
    fab.drain()
    assert b.rcq.events_fired == 1
    assert not b.rcq.notify_armed
    assert len(poll_all(b.dev, b.rcq)) == 2


def test_unarmed_cq_no_event(rc_pair):
    fab, a, b = rc_pair
    b.dev.post_recv(b.qp, b.recv_wr(1, 16))
    a.dev.post_send(a.qp, a.send_wr(1, 16))
    fab.drain()
    assert b.rcq.events_fired == 0
    assert len(poll_all(b.dev, b.rcq)) == 1


# ------------------------------------------------------------- invariants

def test_zero_copy_no_staging(rc_pair):
    fab, a, b = rc_pair
    b.dev.post_recv(b.qp, b.recv_wr(1, 65536))
    a.dev.post_send(a.qp, a.send_wr(1, 65536))
    a.dev.post_send(a.qp, a.send_wr(2, 4096, opcode=Opcode.RDMA_WRITE,
                                    remote=(b.buf, b.mr.rkey)))
    fab.drain()
    for node in (a, b):
        assert node.dev.engine.guard.staging_records() == []
        assert node.dev.engine.guard.verify() == []


def test_responder_passivity(rc_pair):
    fab, a, b = rc_pair
    path = DataplanePath(b.dev, "cd", crossing="real_null_syscall")
    b.write(0, b"r" * 8192)
    a.dev.post_send(a.qp, [
        a.send_wr(1, 8192, opcode=Opcode.RDMA_READ, remote=(b.buf, b.mr.rkey)),
        a.send_wr(2, 8192, opcode=Opcode.RDMA_WRITE, remote=(b.buf + 8192, b.mr.rkey)),
    ])
    fab.drain()
    assert path.mediation_count == 0
    assert len(b.qp.recv_queue) == 0 and poll_all(b.dev, b.rcq) == []
    assert [w.status for w in poll_all(a.dev, a.scq)] == [WCStatus.SUCCESS] * 2
    path.close()


def test_audit_export_format(rc_pair):
    fab, a, b = rc_pair
    b.dev.post_recv(b.qp, b.recv_wr(1, 64))
    a.dev.post_send(a.qp, a.send_wr(1, 64))
    fab.drain()
    line = a.dev.engine.guard.export_lines()[-1]
    parts = line.split()
    assert parts[0] == "access" and parts[1] == "1" and len(parts) == 7
    assert int(parts[2], 16) == a.mr.lkey and int(parts[3], 16) == a.buf
    assert parts[4] == "64" and parts[6] == "ok"


@pytest.mark.parametrize("seed", [1, 2])
def test_rc_exactly_once_under_loss(seed):
    fab, a, b = make_pair(seed=seed, p_loss=0.05, buf_size=1 << 20, depth=512)
    rng = random.Random(seed)
    n = 300
    sent = []
    for i in range(n):
        size = rng.choice((8, 300, 5000, 9000))
        payload = rng.randbytes(size)
        sent.append(payload)
    b.dev.post_recv(b.qp, [b.recv_wr(i, 9000, (i % 100) * 9000) for i in range(n)])
    got = []
    for start in range(0, n, 50):
        for i in range(start, start + 50):
            a.write((i % 100) * 9000, sent[i])
            a.dev.post_send(a.qp, a.send_wr(i, len(sent[i]), (i % 100) * 9000))
        fab.drain()
        for wc in poll_all(b.dev, b.rcq):
            assert wc.status is WCStatus.SUCCESS
            got.append((wc.wr_id, b.read((wc.wr_id % 100) * 9000, wc.byte_len)))
    assert [w for w, _ in got] == list(range(n))
    assert [crc(p) for _, p in got] == [crc(p) for p in sent]
    assert b.dev.engine.stats["dup_rx"] + b.dev.engine.stats["out_of_order_rx"] > 0
    fab.close()


def test_total_loss_ends_in_qp_err():
    fab, a, b = make_pair(p_loss=1.0)
    b.dev.post_recv(b.qp, b.recv_wr(1, 64))
    a.dev.post_send(a.qp, a.send_wr(1, 64))
    fab.drain()
    (wc,) = poll_all(a.dev, a.scq)
    assert wc.status is WCStatus.QP_ERR
    assert a.dev.engine.stats["timeouts"] == 7
    fab.close()


def test_read_under_loss_byte_equal():
    fab, a, b = make_pair(seed=5, p_loss=0.05)
    data = random.Random(5).randbytes(200_000)
    b.write(0, data)
    a.dev.post_send(a.qp, a.send_wr(1, len(data), opcode=Opcode.RDMA_READ,
                                    remote=(b.buf, b.mr.rkey)))
    fab.drain()
    (wc,) = poll_all(a.dev, a.scq)
    assert wc.status is WCStatus.SUCCESS
    assert a.read(0, len(data)) == data
    fab.close()


def test_multi_sge_send_gather_scatter(rc_pair):
    fab, a, b = rc_pair
    a.write(0, b"A" * 100)
    a.write(5000, b"B" * 50)
    b.dev.post_recv(b.qp, WorkRequest(1, Opcode.RECV, [Sge(b.buf, 120, b.mr.lkey),
                                                       Sge(b.buf + 9000, 100, b.mr.lkey)]))
    a.dev.post_send(a.qp, WorkRequest(1, Opcode.SEND, [Sge(a.buf, 100, a.mr.lkey),
                                                       Sge(a.buf + 5000, 50, a.mr.lkey)]))
    fab.drain()
    (wc,) = poll_all(b.dev, b.rcq)
    assert wc.byte_len == 150
    assert b.read(0, 120) == b"A" * 100 + b"B" * 20
    assert b.read(9000, 30) == b"B" * 30
