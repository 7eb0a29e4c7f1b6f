"""Submission paths: direct bypass, or mediated through a privileged context.

On the mediated path every post is flattened into an :class:`OpDescriptor`,
serialized, carried across a :class:`MediationChannel` (a synchronous round
trip that always includes one real system call by default), checked
against the installed policy and only then handed to the NIC. Ablation
flags remove one fast-path technique each: zero copy, polling, or
freedom from system calls.
"""
from __future__ import annotations

import os
import queue
import struct
import threading
import time
import zlib
from collections import deque
from dataclasses import dataclass
from enum import Enum, IntEnum

from .memory import FirstFit, OutOfMemory
from .policy import PolicyEngine, PolicySpec, PolicyVerdict
from .sim import Timeout, WaitCQ
from .verbs.types import (Access, Opcode, QueueFull, QueuePair, Sge, Transport, VerbsError,
                          WCStatus, WorkCompletion, WorkRequest)

CROSSINGS = ("proxy_context", "real_null_syscall", "both")


class PathMode(Enum):
    BYPASS = "bp"
    CORD = "cd"

    @classmethod
    def parse(cls, text) -> "PathMode":
        if isinstance(text, cls):
            return text
        t = str(text).strip().lower()
        return {"bp": cls.BYPASS, "bypass": cls.BYPASS, "cd": cls.CORD, "cord": cls.CORD}[t]


_ABL_NAMES = {"no-zc": "no_zero_copy", "no-poll": "no_polling", "no-bypass": "no_bypass_tax"}


@dataclass(frozen=True)
class AblationFlags:
    no_zero_copy: bool = False
    no_polling: bool = False
    no_bypass_tax: bool = False

    @classmethod
    def parse(cls, text: str | None) -> "AblationFlags":
        if not text or text.strip() in ("", "none"):
            return cls()
        kw = {}
        for tok in text.split(","):
            tok = tok.strip()
            if tok not in _ABL_NAMES:
                raise ValueError(f"unknown ablation {tok!r}; expected one of {sorted(_ABL_NAMES)}")
            kw[_ABL_NAMES[tok]] = True
        return cls(**kw)

    def label(self) -> str:
        on = [k for k, attr in _ABL_NAMES.items() if getattr(self, attr)]
        return "+".join(on) if on else "none"


# -------------------------------------------------------------- descriptors

class DescKind(IntEnum):
    POST_SEND = 0
    POST_RECV = 1


class DescriptorError(ValueError):
    pass


_HEAD = struct.Struct("<BBBBIQ")     # kind opcode nsge flags qp_num wr_id
_SGE = struct.Struct("<QII")         # addr length lkey
_TAIL = struct.Struct("<QIII")       # remote_address rkey dest_node dest_qp
_CRC = struct.Struct("<I")
_HAS_REMOTE, _HAS_DEST, _DEST_IS_PEER = 1, 2, 4


@dataclass(frozen=True)
class OpDescriptor:
    kind: DescKind
    qp_num: int
    wr_id: int
    opcode: Opcode
    sges: tuple[tuple[int, int, int], ...]
    remote: tuple[int, int] | None = None
    dest: tuple[int, int] | None = None
    dest_is_peer: bool = False

    @property
    def length(self) -> int:
        return sum(s[1] for s in self.sges)

    @classmethod
    def from_wr(cls, kind: DescKind, qp: QueuePair, wr: WorkRequest) -> "OpDescriptor":
        dest, peer = wr.dest, False
        if kind == DescKind.POST_SEND and qp.transport == Transport.RC and qp.peer is not None:
            dest, peer = qp.peer, True
        return cls(DescKind(kind), qp.qp_num, wr.wr_id, Opcode(wr.opcode),
                   tuple((s.addr, s.length, s.lkey) for s in wr.sge), wr.remote, dest, peer)

    def to_wr(self) -> WorkRequest:
        return WorkRequest(self.wr_id, self.opcode, [Sge(*s) for s in self.sges], self.remote,
                           None if self.dest_is_peer else self.dest)

    def serialize(self) -> bytes:
        flags = ((_HAS_REMOTE if self.remote is not None else 0)
                 | (_HAS_DEST if self.dest is not None else 0)
                 | (_DEST_IS_PEER if self.dest_is_peer else 0))
        parts = [_HEAD.pack(self.kind, self.opcode, len(self.sges), flags, self.qp_num, self.wr_id)]
        parts += [_SGE.pack(*s) for s in self.sges]
        raddr, rkey = self.remote or (0, 0)
        dnode, dqp = self.dest or (0, 0)
        parts.append(_TAIL.pack(raddr, rkey, dnode, dqp))
        body = b"".join(parts)
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def deserialize(cls, data) -> "OpDescriptor":
        data = bytes(data)
        if len(data) < _HEAD.size + _TAIL.size + _CRC.size:
            raise DescriptorError(f"descriptor truncated at {len(data)} bytes")
        (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
        if zlib.crc32(data[:-_CRC.size]) != crc:
            raise DescriptorError("descriptor checksum mismatch")
        kind, opcode, nsge, flags, qp_num, wr_id = _HEAD.unpack_from(data)
        if len(data) != _HEAD.size + nsge * _SGE.size + _TAIL.size + _CRC.size:
            raise DescriptorError(f"descriptor length {len(data)} does not match {nsge} sges")
        try:
            kind, opcode = DescKind(kind), Opcode(opcode)
        except ValueError as exc:
            raise DescriptorError(str(exc)) from None
        off = _HEAD.size
        sges = []
        for _ in range(nsge):
            sges.append(_SGE.unpack_from(data, off))
            off += _SGE.size
        raddr, rkey, dnode, dqp = _TAIL.unpack_from(data, off)
        return cls(kind, qp_num, wr_id, opcode, tuple(sges),
                   (raddr, rkey) if flags & _HAS_REMOTE else None,
                   (dnode, dqp) if flags & _HAS_DEST else None,
                   bool(flags & _DEST_IS_PEER))


# ---------------------------------------------------------------- mediation

class ChannelClosed(RuntimeError):
    pass


class Mediator:
    """Privileged side of the mediated path: decode, check, then post."""

    def __init__(self, device, policy: PolicyEngine | None = None):
        self.device = device
        self.policy = policy or PolicyEngine()
        self.mediated = 0
        self.denied = 0
        self.rejected = 0
        self._lock = threading.Lock()

    def now(self) -> float:
        dev = self.device
        return dev.app_time if dev.virtual else time.perf_counter()

    def handle(self, raw: bytes) -> PolicyVerdict:
        with self._lock:
            try:
                desc = OpDescriptor.deserialize(raw)
            except DescriptorError:
                self.rejected += 1
                raise
            dev = self.device
            qp = dev.qps.get(desc.qp_num)
            if qp is None:
                self.rejected += 1
                raise VerbsError(f"unknown QP {desc.qp_num}")
            self.mediated += 1
            dev.charge(dev.cost.policy_check)
            verdict = self.policy.check(desc, self.now())
            wr = desc.to_wr()
            if not verdict.allowed:
                self.denied += 1
                dev.post_denied(qp, wr)
            elif desc.kind == DescKind.POST_SEND:
                dev.post_send(qp, [wr], inline_threshold=0)
            else:
                dev.post_recv(qp, [wr])
            return verdict


class _Reply:
    __slots__ = ("event", "value", "error")

    def __init__(self):
        self.event = threading.Event()
        self.value = None
        self.error = None


class MediationChannel:
    """Synchronous crossing into the mediator.

    ``real_null_syscall`` performs one genuine system call and runs the
    mediator inline; ``proxy_context`` hands the op to a dedicated mediator
    thread and blocks on a per-op reply slot; ``both`` does the two.
    """

    def __init__(self, mediator: Mediator, crossing: str = "both", depth: int = 64):
        if crossing not in CROSSINGS:
            raise ValueError(f"crossing must be one of {CROSSINGS}")
        self.mediator = mediator
        self.crossing = crossing
        self.crossings = 0
        self.syscalls = 0
        self.closed = False
        self._syscall = crossing in ("real_null_syscall", "both")
        self._proxy = crossing in ("proxy_context", "both")
        self._ring: queue.Queue | None = None
        self._thread = None
        if self._proxy:
            self._ring = queue.Queue(maxsize=depth)
            self._thread = threading.Thread(target=self._serve, name="mediator", daemon=True)
            self._thread.start()

    def _serve(self) -> None:
        while True:
            item = self._ring.get()
            if item is None:
                return
            fn, args, reply = item
            try:
                reply.value = fn(*args)
            except BaseException as exc:  # handed back to the submitter
                reply.error = exc
            reply.event.set()

    def call(self, fn, *args, nbytes: int = 0):
        if self.closed:
            raise ChannelClosed("mediation channel closed")
        self.crossings += 1
        dev = self.mediator.device
        cost = dev.cost
        dev.charge(cost.syscall + cost.cord_driver + 2 * nbytes * cost.serialize_per_byte)
        if self._syscall:
            os.getppid()
            self.syscalls += 1
        if not self._proxy:
            return fn(*args)
        reply = _Reply()
        self._ring.put((fn, args, reply))
        reply.event.wait()
        if reply.error is not None:
            raise reply.error
        return reply.value

    def submit(self, raw: bytes) -> PolicyVerdict:
        return self.call(self.mediator.handle, raw, nbytes=len(raw))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self._ring is not None:
            self._ring.put(None)
            self._thread.join(timeout=2.0)


# ------------------------------------------------------------- bounce pool

class BounceExhausted(QueueFull):
    """No staging space left; the caller should reap completions and retry."""


class BouncePool:
    def __init__(self, device, pd, size: int):
        self.device = device
        self.base = device.alloc(size)
        self.mr = device.reg_mr(pd, self.base, size, Access.LOCAL_WRITE)
        self._heap = FirstFit(size)

    def take(self, length: int) -> int:
        try:
            return self.base + self._heap.alloc(length)
        except OutOfMemory:
            raise BounceExhausted(f"bounce pool cannot stage {length} bytes") from None

    def give(self, addr: int) -> None:
        self._heap.free(addr - self.base)


class _Staged:
    __slots__ = ("wr_id", "orig", "addr", "copy_out")

    def __init__(self, wr_id, orig, addr, copy_out):
        self.wr_id = wr_id
        self.orig = orig
        self.addr = addr
        self.copy_out = copy_out


# ------------------------------------------------------------------- path

class DataplanePath:
    """All data-plane calls of one endpoint go through here."""

    def __init__(self, device, mode: PathMode | str = PathMode.BYPASS,
                 ablations: AblationFlags | None = None, policy: PolicyEngine | PolicySpec | None = None,
                 crossing: str = "both", mediate_poll: bool = False, bounce_bytes: int = 32 << 20):
        self.device = device
        self.mode = PathMode.parse(mode)
        self.ablations = ablations or AblationFlags()
        if isinstance(policy, PolicySpec):
            policy = PolicyEngine(policy)
        self.mediate_poll = mediate_poll
        self.channel = None
        if self.mode is PathMode.CORD:
            self.channel = MediationChannel(Mediator(device, policy), crossing)
        self.bounce_bytes = bounce_bytes
        self._pools: dict[int, BouncePool] = {}
        self._staged: dict[tuple[int, bool], deque] = {}
        self.tax_count = 0
        self.event_waits = 0
        self.polls = 0

    @property
    def policy(self) -> PolicyEngine | None:
        return self.channel.mediator.policy if self.channel else None

    @property
    def mediation_count(self) -> int:
        return self.channel.mediator.mediated if self.channel else 0

    def close(self) -> None:
        if self.channel is not None:
            self.channel.close()

    def _tax(self) -> None:
        if self.ablations.no_bypass_tax:
            os.getppid()
            self.tax_count += 1
            self.device.charge(self.device.cost.syscall)

    # staging (no zero copy)

    def _pool(self, qp: QueuePair) -> BouncePool:
        pool = self._pools.get(qp.pd.pd_id)
        if pool is None:
            pool = self._pools[qp.pd.pd_id] = BouncePool(self.device, qp.pd, self.bounce_bytes)
        return pool

    def _stage(self, qp: QueuePair, wr: WorkRequest, perm: Access, copy_in: bool):
        dev = self.device
        guard = dev.engine.guard
        if not all(guard.check(s.lkey, s.addr, s.length, perm, qp.pd.pd_id) for s in wr.sge):
            return wr, None  # let the NIC report the bad key
        n = wr.length
        pool = self._pool(qp)
        addr = pool.take(n)
        if copy_in:
            off = 0
            for s in wr.sge:
                dev.memory.write(addr + off, dev.memory.view(s.addr, s.length))
                guard.record_copy(s.lkey, s.addr, s.length)
                off += s.length
            dev.charge(dev.cost.copy(n))
        staged = WorkRequest(wr.wr_id, wr.opcode, [Sge(addr, n, pool.mr.lkey)], wr.remote, wr.dest)
        return staged, _Staged(wr.wr_id, wr, addr, not copy_in)

    def _unstage(self, qp_pool_pd: int, wc: WorkCompletion) -> None:
        fifo = self._staged.get((wc.qp_num, wc.opcode == Opcode.RECV))
        if not fifo:
            return
        rec = None
        if fifo[0].wr_id == wc.wr_id:
            rec = fifo.popleft()
        else:
            for r in fifo:
                if r.wr_id == wc.wr_id:
                    rec = r
                    fifo.remove(r)
                    break
        if rec is None:
            return
        dev = self.device
        pool = self._pools[qp_pool_pd]
        if rec.copy_out and wc.status is WCStatus.SUCCESS and wc.byte_len:
            left = wc.byte_len
            off = 0
            for s in rec.orig.sge:
                k = min(s.length, left)
                if k <= 0:
                    break
                dev.memory.write(s.addr, dev.memory.view(rec.addr + off, k))
                dev.engine.guard.record_copy(s.lkey, s.addr, k)
                off += k
                left -= k
            dev.charge(dev.cost.copy(wc.byte_len))
        pool.give(rec.addr)

    # data plane

    def _submit(self, kind: DescKind, qp: QueuePair, wr: WorkRequest) -> None:
        if self.channel is not None:
            self.channel.submit(OpDescriptor.from_wr(kind, qp, wr).serialize())
        elif kind == DescKind.POST_SEND:
            self.device.post_send(qp, [wr])
        else:
            self.device.post_recv(qp, [wr])

    def _post(self, kind: DescKind, qp: QueuePair, wrs) -> None:
        if isinstance(wrs, WorkRequest):
            wrs = [wrs]
        self._tax()
        if self.channel is None and not self.ablations.no_zero_copy:
            if kind == DescKind.POST_SEND:
                self.device.post_send(qp, wrs)
            else:
                self.device.post_recv(qp, wrs)
            return
        recv = kind == DescKind.POST_RECV
        for wr in wrs:
            rec = None
            if self.ablations.no_zero_copy and wr.sge:
                if recv or wr.opcode == Opcode.RDMA_READ:
                    wr, rec = self._stage(qp, wr, Access.LOCAL_WRITE, copy_in=False)
                else:
                    wr, rec = self._stage(qp, wr, Access.LOCAL_READ, copy_in=True)
            try:
                self._submit(kind, qp, wr)
            except BaseException:
                if rec is not None:
                    self._pools[qp.pd.pd_id].give(rec.addr)
                raise
            if rec is not None:
                self._staged.setdefault((qp.qp_num, recv), deque()).append(rec)

    def post_send(self, qp: QueuePair, wrs) -> None:
        self._post(DescKind.POST_SEND, qp, wrs)

    def post_recv(self, qp: QueuePair, wrs) -> None:
        self._post(DescKind.POST_RECV, qp, wrs)

    def poll_cq(self, cq, max_entries: int = 16) -> list[WorkCompletion]:
        self.polls += 1
        dev = self.device
        if self.channel is not None and self.mediate_poll:
            wcs = self.channel.call(dev.poll_cq, cq, max_entries)
        else:
            wcs = dev.poll_cq(cq, max_entries)
        if self._staged and wcs:
            for wc in wcs:
                qp = dev.qps.get(wc.qp_num)
                if qp is not None and qp.pd.pd_id in self._pools:
                    self._unstage(qp.pd.pd_id, wc)
        return wcs

    def req_notify_cq(self, cq) -> None:
        self.device.req_notify_cq(cq)

    def wait_cq(self, cq, min_entries: int = 1, max_entries: int = 16,
                timeout: float | None = None, mode: str | None = None):
        """Generator: wait for at least ``min_entries`` completions and return them.

        ``mode`` is ``poll`` or ``event``; by default event mode is used only
        when the no-polling ablation is on.
        """
        if mode is None:
            mode = "event" if self.ablations.no_polling else "poll"
        event = mode == "event"
        out = self.poll_cq(cq, max_entries)
        while len(out) < min_entries:
            if event:
                self.req_notify_cq(cq)
                self.event_waits += 1
            ok = yield WaitCQ(cq, event, timeout)
            if not ok:
                raise Timeout(f"no completion on CQ {cq.cq_id} within {timeout}s")
            out += self.poll_cq(cq, max_entries)
        return out
