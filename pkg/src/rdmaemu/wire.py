"""Packet framing, the two transport backends and go-back-N reliability.

Header layout (big-endian, 34 bytes)::

    magic(2) version(1) opcode(1) flags(1) transport(1)
    src_qp(4) dst_qp(4) psn(4) remote_address(8) rkey(4) payload_len(4)
"""
from __future__ import annotations

import queue
import random
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

MAGIC = b"\xc0\x4d"
VERSION = 1
HEADER = struct.Struct(">2sBBBBIIIQII")
HEADER_LEN = HEADER.size
DEFAULT_MTU = 4096

PSN_BITS = 24
PSN_MOD = 1 << PSN_BITS
PSN_MASK = PSN_MOD - 1

FLAG_LAST = 0x01


class PktOp(IntEnum):
    SEND = 0
    WRITE = 1
    READ_REQ = 2
    READ_RESP = 3
    ACK = 4
    NAK = 5


class NakCode(IntEnum):
    SEQUENCE = 0
    RNR = 1
    REMOTE_ACCESS = 2
    INVALID_REQUEST = 3


class PacketError(ValueError):
    """Raised by :func:`decode`; ``offset`` is where parsing stopped."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (offset {offset})")
        self.offset = offset


class EndpointClosed(RuntimeError):
    pass


class RetryExhausted(RuntimeError):
    pass


class Packet:
    """One frame, or (in-process only) a burst of ``nfrag`` consecutive frames.

    A burst stands for fragments ``psn .. psn+nfrag-1`` of one message whose
    payloads are contiguous; it never goes through :func:`encode`.
    """

    __slots__ = ("opcode", "flags", "transport", "src_qp", "dst_qp", "psn",
                 "remote_address", "rkey", "payload", "nfrag")

    def __init__(self, opcode, flags=0, transport=0, src_qp=0, dst_qp=0, psn=0,
                 remote_address=0, rkey=0, payload=b"", nfrag=1):
        self.opcode = opcode
        self.flags = flags
        self.transport = transport
        self.src_qp = src_qp
        self.dst_qp = dst_qp
        self.psn = psn
        self.remote_address = remote_address
        self.rkey = rkey
        self.payload = payload
        self.nfrag = nfrag

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    @property
    def last(self) -> bool:
        return bool(self.flags & FLAG_LAST)

    def _key(self):
        return (int(self.opcode), self.flags, self.transport, self.src_qp, self.dst_qp,
                self.psn, self.remote_address, self.rkey, bytes(self.payload), self.nfrag)

    def __eq__(self, other):
        if not isinstance(other, Packet):
            return NotImplemented
        return self._key() == other._key()

    def __repr__(self):
        return (f"Packet({PktOp(self.opcode).name}, flags={self.flags}, transport={self.transport}, "
                f"src_qp={self.src_qp}, dst_qp={self.dst_qp}, psn={self.psn}, "
                f"remote_address={self.remote_address:#x}, rkey={self.rkey:#x}, "
                f"payload_len={len(self.payload)})")


def encode(pkt: Packet, mtu: int = DEFAULT_MTU) -> bytes:
    if pkt.nfrag != 1:
        raise ValueError("bursts cannot be encoded; send fragments individually")
    n = len(pkt.payload)
    if n > mtu:
        raise ValueError(f"payload_len {n} exceeds MTU {mtu}")
    if not 0 <= pkt.psn < PSN_MOD:
        raise ValueError(f"psn {pkt.psn} does not fit in 24 bits")
    head = HEADER.pack(MAGIC, VERSION, int(pkt.opcode), pkt.flags, pkt.transport,
                       pkt.src_qp, pkt.dst_qp, pkt.psn, pkt.remote_address, pkt.rkey, n)
    return head + bytes(pkt.payload)


def decode(data, mtu: int = DEFAULT_MTU) -> Packet:
    data = memoryview(data)
    if len(data) < HEADER_LEN:
        raise PacketError("truncated header", len(data))
    (magic, version, opcode, flags, transport, src_qp, dst_qp, psn,
     raddr, rkey, plen) = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise PacketError("bad magic", 0)
    if version != VERSION:
        raise PacketError(f"unsupported version {version}", 2)
    if opcode > PktOp.NAK:
        raise PacketError(f"unknown opcode {opcode}", 3)
    if transport > 1:
        raise PacketError(f"unknown transport {transport}", 5)
    if psn >= PSN_MOD:
        raise PacketError("psn exceeds 24 bits", 14)
    if plen > mtu:
        raise PacketError(f"payload_len {plen} exceeds MTU {mtu}", 30)
    have = len(data) - HEADER_LEN
    if have < plen:
        raise PacketError("truncated payload", len(data))
    if have > plen:
        raise PacketError("trailing bytes after payload", HEADER_LEN + plen)
    return Packet(PktOp(opcode), flags, transport, src_qp, dst_qp, psn, raddr, rkey,
                  bytes(data[HEADER_LEN:]))


def psn_add(psn: int, n: int) -> int:
    return (psn + n) & PSN_MASK


def psn_diff(a: int, b: int) -> int:
    """Signed distance a - b on the 24-bit circle."""
    d = (a - b) & PSN_MASK
    return d - PSN_MOD if d >= PSN_MOD // 2 else d


# ---------------------------------------------------------------- reliability

class RcWindow:
    """Go-back-N sender state for one RC queue pair.

    The cap counts fragments, so a burst entry occupies ``nfrag`` slots.
    """

    def __init__(self, window: int = 64, retransmit_timeout: float = 1e-3,
                 max_retries: int = 8):
        self.window = window
        self.base_timeout = retransmit_timeout
        self.retransmit_timeout = retransmit_timeout
        self.max_retries = max_retries
        self.retries = 0
        self.inflight = 0
        self.unacked: deque[tuple[int, Packet]] = deque()

    def __len__(self):
        return self.inflight

    def room(self) -> int:
        return self.window - self.inflight

    def can_send(self, n: int = 1) -> bool:
        return self.inflight + n <= self.window

    def send(self, psn: int, packet: Packet, force: bool = False) -> None:
        """Track ``packet``; ``force`` admits a burst the caller knows cannot stall."""
        n = packet.nfrag
        if not force and self.inflight + n > self.window:
            raise RuntimeError("RC window full")
        self.unacked.append((psn, packet))
        self.inflight += n

    def clear(self) -> None:
        self.unacked.clear()
        self.inflight = 0

    def on_ack(self, psn: int) -> int:
        """Cumulative ACK: drop every unacked entry up to and including ``psn``."""
        freed = 0
        q = self.unacked
        while q and psn_diff(q[0][0] + q[0][1].nfrag - 1, psn) <= 0:
            n = q.popleft()[1].nfrag
            self.inflight -= n
            freed += n
        if freed:
            self.retries = 0
            self.retransmit_timeout = self.base_timeout
        return freed

    def on_timeout(self) -> list[Packet]:
        self.retries += 1
        if self.retries >= self.max_retries:
            raise RetryExhausted(f"{self.retries} consecutive timeouts")
        self.retransmit_timeout *= 2
        return [p for _, p in self.unacked]

    def resend_from(self, psn: int) -> list[Packet]:
        return [p for q, p in self.unacked if psn_diff(q + p.nfrag - 1, psn) >= 0]


# ----------------------------------------------------------------- backends

@dataclass
class Link:
    free_at: float = 0.0
    last_arrival: float = 0.0


class InProcWire:
    """Lossless in-process FIFO channel between the nodes of one fabric.

    Packets travel as objects. With a virtual scheduler, each packet lands
    after serialization at the link bandwidth plus propagation delay and a
    seeded jitter; per-link FIFO order is kept. ``p_loss`` exists so
    reliability tests can run deterministically; it defaults to 0. When the
    wire is lossless and ``bursts`` is on, engines may hand it multi-fragment
    packets.
    """

    def __init__(self, cost=None, seed: int = 0, p_loss: float = 0.0,
                 mtu: int = DEFAULT_MTU, bursts: bool = True):
        self.bursts = bursts
        self.cost = cost
        self.mtu = mtu
        self.p_loss = p_loss
        self._loss_rng = random.Random(f"loss:{seed}")
        self._seed = seed
        self._ends: dict[int, tuple] = {}
        self._links: dict[tuple[int, int], Link] = {}
        self._rngs: dict[int, random.Random] = {}
        self.closed = False
        self.tx_count = 0
        self.dropped = 0

    def attach(self, node_id: int, scheduler, deliver) -> None:
        self._ends[node_id] = (scheduler, deliver)
        self._rngs[node_id] = random.Random(f"wire:{self._seed}:{node_id}")

    @property
    def supports_bursts(self) -> bool:
        return self.bursts and self.p_loss == 0

    def detach(self, node_id: int) -> None:
        self._ends.pop(node_id, None)

    def close(self) -> None:
        self.closed = True

    def tx(self, src: int, dst: int, pkt: Packet, now: float | None = None) -> float:
        """Send ``pkt`` from node ``src`` to node ``dst``; returns departure time."""
        if self.closed:
            raise EndpointClosed("wire closed")
        nfrag = pkt.nfrag
        if len(pkt.payload) > self.mtu * nfrag:
            raise ValueError("payload exceeds MTU")
        end = self._ends.get(dst)
        if end is None:
            raise EndpointClosed(f"no endpoint for node {dst}")
        sched, deliver = end
        self.tx_count += nfrag
        cost = self.cost
        if not sched.virtual:
            if self.p_loss and self._loss_rng.random() < self.p_loss:
                self.dropped += 1
                return 0.0
            sched.call_soon(deliver, pkt)
            return 0.0
        link = self._links.get((src, dst))
        if link is None:
            link = self._links[(src, dst)] = Link()
        t = sched.now if now is None else now
        depart = max(t, link.free_at) + (HEADER_LEN * nfrag + len(pkt.payload)) / cost.wire_bandwidth
        link.free_at = depart
        if self.p_loss and self._loss_rng.random() < self.p_loss:
            self.dropped += 1
            return depart
        jitter = self._rngs[src].expovariate(1.0 / cost.jitter_mean) if cost.jitter_mean else 0.0
        arrive = max(depart + cost.propagation + cost.nic_rx + jitter, link.last_arrival)
        link.last_arrival = arrive
        sched.call_at(arrive, deliver, pkt)
        return depart


def parse_registry(text: str) -> dict[int, tuple[str, int]]:
    """Parse ``node <id> <host>:<port>`` lines."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] != "node":
            raise ValueError(f"registry line {lineno}: expected 'node <id> <host>:<port>'")
        host, _, port = parts[2].rpartition(":")
        if not host:
            raise ValueError(f"registry line {lineno}: missing host")
        out[int(parts[1])] = (host, int(port))
    return out


def format_registry(registry: dict[int, tuple[str, int]]) -> str:
    return "".join(f"node {nid} {h}:{p}\n" for nid, (h, p) in sorted(registry.items()))


class UdpWire:
    """Best-effort datagram backend: one UDP socket per node, real time only.

    Every datagram carries one encoded packet. ``p_loss`` drops packets
    uniformly at transmit time. A receive thread per endpoint decodes and
    hands packets to the node's scheduler.
    """

    supports_bursts = False

    def __init__(self, registry: dict[int, tuple[str, int]] | None = None,
                 p_loss: float = 0.0, seed: int = 0, mtu: int = DEFAULT_MTU):
        self.registry = dict(registry or {})
        self.p_loss = p_loss
        self.mtu = mtu
        self._rng = random.Random(f"udp-loss:{seed}")
        self._lock = threading.Lock()
        self._socks: dict[int, socket.socket] = {}
        self._threads: list[threading.Thread] = []
        self.closed = False
        self.tx_count = 0
        self.dropped = 0
        self.rx_errors = 0

    def attach(self, node_id: int, scheduler, deliver) -> None:
        host, port = self.registry.get(node_id, ("127.0.0.1", 0))
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 8 << 20)
        sock.bind((host, port))
        self.registry[node_id] = sock.getsockname()
        self._socks[node_id] = sock
        t = threading.Thread(target=self._rx_loop, args=(sock, scheduler, deliver),
                             name=f"udp-rx-{node_id}", daemon=True)
        self._threads.append(t)
        t.start()

    def add_remote(self, node_id: int, addr: tuple[str, int]) -> None:
        self.registry[node_id] = addr

    def _rx_loop(self, sock, scheduler, deliver):
        while not self.closed:
            try:
                data = sock.recv(65536)
            except OSError:
                return
            if self.closed:
                return
            try:
                pkt = decode(data, self.mtu)
            except PacketError:
                self.rx_errors += 1
                continue
            scheduler.call_soon(deliver, pkt)

    def tx(self, src: int, dst: int, pkt: Packet, now: float | None = None) -> float:
        if self.closed:
            raise EndpointClosed("wire closed")
        sock = self._socks.get(src)
        addr = self.registry.get(dst)
        if sock is None or addr is None:
            raise EndpointClosed(f"no route {src}->{dst}")
        data = encode(pkt, self.mtu)
        with self._lock:
            self.tx_count += 1
            if self.p_loss and self._rng.random() < self.p_loss:
                self.dropped += 1
                return 0.0
        sock.sendto(data, addr)
        return 0.0

    def close(self) -> None:
        self.closed = True
        for sock in self._socks.values():
            try:
                sock.sendto(b"", sock.getsockname())
            except OSError:
                pass
            sock.close()
        for t in self._threads:
            t.join(timeout=1.0)


class _Immediate:
    virtual = False

    @staticmethod
    def call_soon(fn, *args):
        fn(*args)


class Endpoint:
    """A bare packet endpoint on a backend, outside of any NIC engine."""

    def __init__(self, wire, node_id: int):
        self.wire = wire
        self.node_id = node_id
        self._q = queue.SimpleQueue()
        self._empty = queue.Empty
        self.closed = False
        wire.attach(node_id, _Immediate, self._q.put)

    def tx(self, dst: int, pkt: Packet) -> None:
        if self.closed:
            raise EndpointClosed("endpoint closed")
        self.wire.tx(self.node_id, dst, pkt)

    def rx(self, timeout: float = 0.0):
        """Yield received packets until none arrives within ``timeout`` seconds."""
        while True:
            try:
                yield self._q.get(timeout=timeout) if timeout else self._q.get_nowait()
            except self._empty:
                return

    def close(self) -> None:
        self.closed = True
