from __future__ import annotations

import zlib
from dataclasses import dataclass

import pytest

from rdmaemu import Access, Fabric, Opcode, Sge, Transport, WorkRequest

ALL = Access.LOCAL_WRITE | Access.REMOTE_READ | Access.REMOTE_WRITE


@dataclass
class Node:
    dev: object
    pd: object
    scq: object
    rcq: object
    qp: object
    buf: int
    mr: object

    def send_wr(self, wr_id, length, off=0, opcode=Opcode.SEND, remote=None, dest=None):
        return WorkRequest(wr_id, opcode, [Sge(self.buf + off, length, self.mr.lkey)],
                           remote=remote, dest=dest)

    def recv_wr(self, wr_id, length, off=0):
        return WorkRequest(wr_id, Opcode.RECV, [Sge(self.buf + off, length, self.mr.lkey)])

    def write(self, off, data):
        self.dev.memory.write(self.buf + off, data)

    def read(self, off, n):
        return self.dev.memory.read(self.buf + off, n)


def make_node(fabric, node_id, transport=Transport.RC, buf_size=1 << 20, depth=128,
              cq_size=1024, access=ALL):
    dev = fabric.add_device(node_id, memory_size=max(4 << 20, 4 * buf_size))
    pd = dev.alloc_pd()
    scq, rcq = dev.create_cq(cq_size), dev.create_cq(cq_size)
    qp = dev.create_qp(pd, transport, scq, rcq, depth, depth)
    buf = dev.alloc(buf_size)
    mr = dev.reg_mr(pd, buf, buf_size, access)
    return Node(dev, pd, scq, rcq, qp, buf, mr)


def make_pair(transport=Transport.RC, seed=0, p_loss=0.0, buf_size=1 << 20, depth=128,
              clock="virtual", wire="inproc", **kw):
    fab = Fabric(clock, wire, seed=seed, p_loss=p_loss, **kw)
    a = make_node(fab, 1, transport, buf_size, depth)
    b = make_node(fab, 2, transport, buf_size, depth)
    if transport == Transport.RC:
        fab.connect(a.qp, a.dev, b.qp, b.dev)
    else:
        Fabric.ready(a.dev, a.qp)
        Fabric.ready(b.dev, b.qp)
    return fab, a, b


def poll_all(dev, cq, n=1 << 20):
    out = []
    while True:
        got = dev.poll_cq(cq, 64)
        if not got:
            return out
        out += got
        if len(out) >= n:
            return out


def crc(data) -> int:
    return zlib.crc32(bytes(data))


@pytest.fixture
def rc_pair():
    fab, a, b = make_pair()
    yield fab, a, b
    fab.close()


@pytest.fixture
def ud_pair():
    fab, a, b = make_pair(Transport.UD)
    yield fab, a, b
    fab.close()


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0][1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
