from __future__ import annotations

import pytest

from conftest import ALL, make_node, make_pair, poll_all
from rdmaemu import Access, Fabric, Opcode, QPState, Sge, Transport, WCStatus, WorkRequest
from rdmaemu.verbs.types import IllegalTransition, QueueFull, ResourceExhausted, VerbsError


@pytest.fixture
def dev():
    fab = Fabric()
    yield fab.add_device(1)
    fab.close()


# --------------------------------------------------------------- PDs / MRs

def test_alloc_pd_first_id_is_one(dev):
    assert dev.alloc_pd().pd_id == 1


def test_alloc_pd_ids_distinct(dev):
    assert dev.alloc_pd().pd_id != dev.alloc_pd().pd_id


def test_alloc_pd_exhaustion(dev):
    dev._next_pd = (1 << 32) - 1
    dev.alloc_pd()
    with pytest.raises(ResourceExhausted):
        dev.alloc_pd()


def test_reg_mr_keys(dev):
    pd = dev.alloc_pd()
    buf = dev.alloc(4096)
    mr = dev.reg_mr(pd, buf, 4096, Access.LOCAL_WRITE | Access.REMOTE_READ)
    assert mr.lkey != mr.rkey
    assert mr.length == 4096
    assert mr.access & Access.LOCAL_READ


def test_reg_mr_zero_length(dev):
    pd = dev.alloc_pd()
    with pytest.raises(VerbsError):
        dev.reg_mr(pd, dev.alloc(64), 0, Access.LOCAL_WRITE)


def test_reg_mr_dead_pd(dev):
    pd = dev.alloc_pd()
    dev.dealloc_pd(pd)
    with pytest.raises(VerbsError):
        dev.reg_mr(pd, dev.alloc(64), 64, Access.LOCAL_WRITE)


def test_reg_mr_range_not_owned(dev):
    pd = dev.alloc_pd()
    with pytest.raises(VerbsError):
        dev.reg_mr(pd, 0x10, 64, Access.LOCAL_WRITE)


def test_keys_unique_over_many_registrations(dev):
    pd = dev.alloc_pd()
    buf = dev.alloc(64)
    keys = set()
    for _ in range(2000):
        mr = dev.reg_mr(pd, buf, 64, Access.LOCAL_WRITE)
        keys.update((mr.lkey, mr.rkey))
        dev.dereg_mr(mr)
    assert len(keys) == 4000


def test_overlapping_registrations_both_usable(rc_pair):
    fab, a, b = rc_pair
    mr2 = a.dev.reg_mr(a.pd, a.buf + 1024, 4096, ALL)
    a.write(0, bytes(range(256)) * 24)
    b.dev.post_recv(b.qp, [b.recv_wr(1, 4096, 0), b.recv_wr(2, 4096, 8192)])
    a.dev.post_send(a.qp, [a.send_wr(10, 4096, 1024),
                           WorkRequest(11, Opcode.SEND, [Sge(a.buf + 1024, 4096, mr2.lkey)])])
    fab.drain()
    assert [w.status for w in poll_all(a.dev, a.scq)] == [WCStatus.SUCCESS] * 2
    expect = a.read(1024, 4096)
    assert b.read(0, 4096) == expect and b.read(8192, 4096) == expect


def test_dereg_then_stale_lkey(rc_pair):
    fab, a, b = rc_pair
    assert a.dev.dereg_mr(a.mr) is True
    a.dev.post_send(a.qp, [a.send_wr(1, 128)])
    fab.drain()
    (wc,) = poll_all(a.dev, a.scq)
    assert wc.status is WCStatus.LOC_KEY_ERR and wc.byte_len == 0


def test_dereg_deferred_during_inflight_read(rc_pair):
    fab, a, b = rc_pair
    b.write(0, b"\x5a" * 4096)
    a.dev.post_send(a.qp, [a.send_wr(1, 4096, opcode=Opcode.RDMA_READ,
                                     remote=(b.buf, b.mr.rkey))])
    assert a.dev.dereg_mr(a.mr) is False      # engine has not run yet
    assert a.mr.live
    fab.drain()
    (wc,) = poll_all(a.dev, a.scq)
    assert wc.status is WCStatus.SUCCESS and wc.byte_len == 4096
    assert a.read(0, 4096) == b"\x5a" * 4096
    assert not a.mr.live
    assert a.mr.lkey not in a.dev.engine.guard.table


# -------------------------------------------------------------- QPs / CQs

def test_modify_qp_cannot_skip(dev):
    pd = dev.alloc_pd()
    cq = dev.create_cq(4)
    qp = dev.create_qp(pd, Transport.RC, cq, cq, 4, 4)
    with pytest.raises(IllegalTransition):
        dev.modify_qp(qp, QPState.RTS)


def test_rc_rtr_needs_peer(dev):
    pd = dev.alloc_pd()
    cq = dev.create_cq(4)
    qp = dev.create_qp(pd, Transport.RC, cq, cq, 4, 4)
    dev.modify_qp(qp, QPState.INIT)
    with pytest.raises(IllegalTransition):
        dev.modify_qp(qp, QPState.RTR)


def test_rc_rtr_with_peer_sets_psn(dev):
    pd = dev.alloc_pd()
    cq = dev.create_cq(4)
    qp = dev.create_qp(pd, Transport.RC, cq, cq, 4, 4)
    dev.modify_qp(qp, QPState.INIT)
    dev.modify_qp(qp, QPState.RTR, peer=(2, 7), rq_psn=1234)
    assert qp.state == QPState.RTR and qp.peer == (2, 7) and qp.psn_rx == 1234


def test_ud_rtr_without_peer(dev):
    pd = dev.alloc_pd()
    cq = dev.create_cq(4)
    qp = dev.create_qp(pd, Transport.UD, cq, cq, 4, 4)
    dev.modify_qp(qp, QPState.INIT)
    dev.modify_qp(qp, QPState.RTR)
    assert qp.state == QPState.RTR


def test_bad_capacities(dev):
    pd = dev.alloc_pd()
    with pytest.raises(VerbsError):
        dev.create_cq(0)
    cq = dev.create_cq(1)
    with pytest.raises(VerbsError):
        dev.create_qp(pd, Transport.RC, cq, cq, 0, 4)


# ------------------------------------------------------------- post_send

def test_rc_send_4096(rc_pair):
    fab, a, b = rc_pair
    a.write(0, bytes(range(256)) * 16)
    b.dev.post_recv(b.qp, b.recv_wr(5, 4096))
    a.dev.post_send(a.qp, a.send_wr(1, 4096))
    fab.drain()
    (rw,) = poll_all(b.dev, b.rcq)
    assert rw.status is WCStatus.SUCCESS and rw.byte_len == 4096 and rw.wr_id == 5
    assert b.read(0, 4096) == a.read(0, 4096)
    (sw,) = poll_all(a.dev, a.scq)
    assert sw.status is WCStatus.SUCCESS and sw.wr_id == 1


def test_ud_send_too_large_rejected(ud_pair):
    fab, a, b = ud_pair
    with pytest.raises(VerbsError):
        a.dev.post_send(a.qp, a.send_wr(1, 8192, dest=(2, b.qp.qp_num)))
    fab.drain()
    assert poll_all(a.dev, a.scq) == []


def test_tx_depth_one_two_wrs():
    fab, a, b = make_pair(depth=1)
    b.dev.post_recv(b.qp, b.recv_wr(1, 64))
    with pytest.raises(QueueFull):
        a.dev.post_send(a.qp, [a.send_wr(1, 64), a.send_wr(2, 64)])
    fab.drain()
    wcs = poll_all(a.dev, a.scq)
    assert [w.wr_id for w in wcs] == [1]
    fab.close()


def test_post_send_requires_rts(dev):
    pd = dev.alloc_pd()
    cq = dev.create_cq(4)
    qp = dev.create_qp(pd, Transport.RC, cq, cq, 4, 4)
    buf = dev.alloc(64)
    mr = dev.reg_mr(pd, buf, 64, Access.LOCAL_WRITE)
    with pytest.raises(VerbsError):
        dev.post_send(qp, WorkRequest(1, Opcode.SEND, [Sge(buf, 64, mr.lkey)]))


@pytest.mark.parametrize("wr", [
    WorkRequest(1, Opcode.SEND, []),
    WorkRequest(1, Opcode.RECV, [Sge(0, 1, 0)]),
    WorkRequest(1, Opcode.RDMA_WRITE, [Sge(0, 1, 0)]),
    WorkRequest(1, Opcode.SEND, [Sge(0, (1 << 30) + 1, 0)]),
])
def test_malformed_wr(rc_pair, wr):
    fab, a, b = rc_pair
    with pytest.raises(VerbsError):
        a.dev.post_send(a.qp, wr)


def test_one_sided_on_ud_rejected(ud_pair):
    fab, a, b = ud_pair
    with pytest.raises(VerbsError):
        a.dev.post_send(a.qp, a.send_wr(1, 8, opcode=Opcode.RDMA_WRITE, remote=(0, 0)))


# ------------------------------------------------------------- post_recv

def test_recv_short_message(rc_pair):
    fab, a, b = rc_pair
    b.dev.post_recv(b.qp, b.recv_wr(1, 4096))
    a.dev.post_send(a.qp, a.send_wr(1, 100))
    fab.drain()
    (wc,) = poll_all(b.dev, b.rcq)
    assert wc.status is WCStatus.SUCCESS and wc.byte_len == 100


def test_recv_buffer_too_small(rc_pair):
    fab, a, b = rc_pair
    b.dev.post_recv(b.qp, b.recv_wr(1, 100))
    a.dev.post_send(a.qp, a.send_wr(1, 4096))
    fab.drain()
    (rw,) = poll_all(b.dev, b.rcq)
    assert rw.status is WCStatus.REM_ACCESS_ERR and rw.byte_len == 0
    (sw,) = poll_all(a.dev, a.scq)
    assert sw.status is WCStatus.REM_ACCESS_ERR


def test_rnr_then_recv_posted(rc_pair):
    fab, a, b = rc_pair
    a.dev.post_send(a.qp, a.send_wr(1, 64))
    sched = fab.scheduler
    sched.run(until=25e-6)                     # a couple of RNR rounds
    assert b.dev.engine.stats["rnr_naks"] >= 1
    b.dev.post_recv(b.qp, b.recv_wr(9, 64))
    fab.drain()
    assert poll_all(a.dev, a.scq)[0].status is WCStatus.SUCCESS
    assert poll_all(b.dev, b.rcq)[0].wr_id == 9


def test_rnr_retry_exhaustion(rc_pair):
    fab, a, b = rc_pair
    a.dev.post_send(a.qp, [a.send_wr(1, 64), a.send_wr(2, 64)])
    fab.drain()
    wcs = poll_all(a.dev, a.scq)
    assert wcs[0].status is WCStatus.QP_ERR
    assert all(w.status in (WCStatus.QP_ERR, WCStatus.FLUSH_ERR) for w in wcs)
    assert len(wcs) == 2
    assert a.qp.state == QPState.ERROR
    assert b.dev.engine.stats["rnr_naks"] == 9


def test_post_recv_in_init_allowed(dev):
    pd = dev.alloc_pd()
    cq = dev.create_cq(4)
    qp = dev.create_qp(pd, Transport.RC, cq, cq, 4, 4)
    buf = dev.alloc(64)
    mr = dev.reg_mr(pd, buf, 64, Access.LOCAL_WRITE)
    with pytest.raises(VerbsError):
        dev.post_recv(qp, WorkRequest(1, Opcode.RECV, [Sge(buf, 64, mr.lkey)]))
    dev.modify_qp(qp, QPState.INIT)
    dev.post_recv(qp, WorkRequest(1, Opcode.RECV, [Sge(buf, 64, mr.lkey)]))
    with pytest.raises(VerbsError):
        dev.post_recv(qp, WorkRequest(2, Opcode.SEND, [Sge(buf, 64, mr.lkey)]))


# --------------------------------------------------------------- poll_cq

def test_poll_empty(rc_pair):
    fab, a, b = rc_pair
    assert a.dev.poll_cq(a.scq, 4) == []


def test_poll_fifo_partial(rc_pair):
    fab, a, b = rc_pair
    b.dev.post_recv(b.qp, [b.recv_wr(i, 64, i * 64) for i in range(3)])
    a.dev.post_send(a.qp, [a.send_wr(i, 64) for i in range(3)])
    fab.drain()
    assert [w.wr_id for w in a.dev.poll_cq(a.scq, 2)] == [0, 1]
    assert [w.wr_id for w in a.dev.poll_cq(a.scq, 2)] == [2]


def test_alternating_pollers_no_duplicates(rc_pair):
    fab, a, b = rc_pair
    n = 50
    b.dev.post_recv(b.qp, [b.recv_wr(i, 16, i * 16) for i in range(n)])
    a.dev.post_send(a.qp, [a.send_wr(i, 16) for i in range(n)])
    fab.drain()
    seen = []
    turn = 0
    while True:
        got = a.dev.poll_cq(a.scq, 1 + turn % 3)
        if not got:
            break
        seen += [w.wr_id for w in got]
        turn += 1
    assert sorted(seen) == list(range(n)) and len(set(seen)) == n


def test_cq_overrun_errors_qps():
    fab = Fabric()
    a = make_node(fab, 1, cq_size=2)
    b = make_node(fab, 2)
    fab.connect(a.qp, a.dev, b.qp, b.dev)
    b.dev.post_recv(b.qp, [b.recv_wr(i, 16, i * 16) for i in range(4)])
    a.dev.post_send(a.qp, [a.send_wr(i, 16) for i in range(4)])
    fab.drain()
    assert a.scq.overrun
    assert a.qp.state == QPState.ERROR
    fab.close()


# ------------------------------------------------------- events / notify

def test_arm_then_completion(rc_pair):
    fab, a, b = rc_pair
    b.dev.post_recv(b.qp, b.recv_wr(1, 16))
    b.dev.req_notify_cq(b.rcq)
    a.dev.post_send(a.qp, a.send_wr(1, 16))
    assert b.dev.wait_cq_event(b.rcq, timeout=1e-3)
    assert len(b.dev.poll_cq(b.rcq)) == 1


def test_completion_before_arm_not_lost(rc_pair):
    fab, a, b = rc_pair
    b.dev.post_recv(b.qp, b.recv_wr(1, 16))
    a.dev.post_send(a.qp, a.send_wr(1, 16))
    fab.drain()
    b.dev.req_notify_cq(b.rcq)
    assert b.dev.wait_cq_event(b.rcq, timeout=1e-6)


def test_wait_without_arm_times_out(rc_pair):
    fab, a, b = rc_pair
    assert not b.dev.wait_cq_event(b.rcq, timeout=1e-4)


# ------------------------------------------------------------ invariants

def test_completion_conservation_and_fifo(rc_pair):
    fab, a, b = rc_pair
    n = 200
    b.dev.post_recv(b.qp, [b.recv_wr(1000 + i, 512, (i % 64) * 512) for i in range(n // 2)])
    a.dev.post_send(a.qp, [a.send_wr(i, 1 + (i * 37) % 512) for i in range(n // 2)])
    fab.drain()
    b.dev.post_recv(b.qp, [b.recv_wr(1000 + i, 512) for i in range(n // 2, n)])
    a.dev.post_send(a.qp, [a.send_wr(i, 64) for i in range(n // 2, n)])
    fab.drain()
    sw = poll_all(a.dev, a.scq)
    rw = poll_all(b.dev, b.rcq)
    assert [w.wr_id for w in sw] == list(range(n))
    assert sorted(w.wr_id for w in rw) == [1000 + i for i in range(n)]
    assert all(w.status is WCStatus.SUCCESS for w in sw + rw)
