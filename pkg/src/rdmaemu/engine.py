"""Emulated NIC engine.

The engine drains send queues when a doorbell is rung, moves payload
directly between registered application memory and the wire, runs the RC
responder (including one-sided READ/WRITE, which never involve the
responder's application or its dataplane path) and posts completions.
Every touch of application memory goes through :class:`DmaGuard`.
"""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

from .verbs.types import (Access, CompletionQueue, MemoryRegion, Opcode, QPState,
                          QueuePair, SendSlot, Transport, VerbsError, WCStatus,
                          WorkCompletion)
from .wire import (FLAG_LAST, HEADER_LEN, EndpointClosed, NakCode, Packet, PktOp, RcWindow,
                   RetryExhausted, psn_add, psn_diff)

# plain ints on the hot path; IntFlag arithmetic is slow
LR, LW, RR, RW = int(Access.LOCAL_READ), int(Access.LOCAL_WRITE), int(Access.REMOTE_READ), \
    int(Access.REMOTE_WRITE)
_REMOTE = RR | RW
PERM_TOKEN = {LR: "LR", LW: "LW", RR: "RR", RW: "RW"}
_TOKEN_PERM = {v: k for k, v in PERM_TOKEN.items()}


class AuditRecord(NamedTuple):
    seq: int
    node: int
    key: int
    base: int
    length: int
    perm: str
    verdict: str
    kind: str = "dma"

    def line(self) -> str:
        return (f"access {self.node} {self.key:#010x} {self.base:#x} {self.length} "
                f"{self.perm} {self.verdict}")


class _KeyEntry:
    __slots__ = ("mr", "remote", "reg_seq", "dereg_seq", "access", "base", "end", "pd_id")

    def __init__(self, mr: MemoryRegion, remote: bool, reg_seq: int):
        self.mr = mr
        self.remote = remote
        self.reg_seq = reg_seq
        self.dereg_seq = None
        self.access = int(mr.access)
        self.base = mr.base
        self.end = mr.base + mr.length
        self.pd_id = mr.pd_id


class DmaGuard:
    """Key table plus append-only audit of every application-memory access."""

    def __init__(self, node_id: int, memory, audit: bool = True):
        self.node_id = node_id
        self.memory = memory
        self.audit = audit
        self.table: dict[int, _KeyEntry] = {}
        self._history: dict[int, _KeyEntry] = {}
        self.audit_log: list[AuditRecord] = []
        self._seq = 0
        self.counts = Counter()

    def register(self, mr: MemoryRegion) -> None:
        self._seq += 1
        for key, remote in ((mr.lkey, False), (mr.rkey, True)):
            e = _KeyEntry(mr, remote, self._seq)
            self.table[key] = e
            self._history[key] = e

    def invalidate(self, mr: MemoryRegion) -> None:
        self._seq += 1
        for key in (mr.lkey, mr.rkey):
            e = self.table.pop(key, None)
            if e is not None:
                e.dereg_seq = self._seq

    def check(self, key: int, addr: int, length: int, perm: int, pd_id=None) -> bool:
        e = self.table.get(key)
        if e is None or e.remote != bool(perm & _REMOTE):
            return False
        return bool(e.access & perm and e.base <= addr and addr + length <= e.end
                    and (pd_id is None or e.pd_id == pd_id))

    def access(self, key: int, addr: int, length: int, perm: int, pd_id=None,
               kind: str = "dma"):
        """Authorize and return a view of ``[addr, addr+length)``, or None."""
        perm = int(perm)
        ok = self.check(key, addr, length, perm, pd_id)
        self._seq += 1
        if self.audit:
            self.audit_log.append(AuditRecord(self._seq, self.node_id, key, addr, length,
                                              PERM_TOKEN[perm], "ok" if ok else "deny", kind))
        counts = self.counts
        if not ok:
            counts["denied"] += 1
            return None
        if perm & (LR | RR):
            counts["reads"] += 1
            counts["bytes_read"] += length
        else:
            counts["writes"] += 1
            counts["bytes_written"] += length
        return self.memory.view(addr, length)

    def record_copy(self, key: int, addr: int, length: int) -> None:
        """Log a CPU staging copy of application memory (no-zero-copy mode)."""
        self._seq += 1
        self.counts["staging_copies"] += 1
        self.counts["staging_bytes"] += length
        if self.audit:
            self.audit_log.append(AuditRecord(self._seq, self.node_id, key, addr, length,
                                              "CP", "ok", "stage"))

    def staging_records(self) -> list[AuditRecord]:
        return [r for r in self.audit_log if r.kind == "stage"]

    def export_lines(self) -> list[str]:
        return [r.line() for r in self.audit_log]

    def verify(self) -> list[AuditRecord]:
        """Return every granted DMA record not covered by a live MR at its time."""
        bad = []
        for r in self.audit_log:
            if r.verdict != "ok" or r.kind == "stage":
                continue
            e = self._history.get(r.key)
            perm = _TOKEN_PERM[r.perm]
            if (e is None or e.reg_seq >= r.seq
                    or (e.dereg_seq is not None and e.dereg_seq <= r.seq)
                    or not e.access & perm
                    or not (e.base <= r.base and r.base + r.length <= e.end)):
                bad.append(r)
        return bad


@dataclass
class EngineConfig:
    mode: str = "poll_loop"          # poll_loop | event_driven
    inline_threshold: int = 0        # bytes, 0 disables
    sim_clock: str = "virtual"       # virtual | real
    mtu: int = 4096
    audit: bool = True
    window: int = 64
    retransmit_timeout: float = 1e-3
    rnr_retry_limit: int = 8
    rnr_backoff: float = 10e-6
    ack_every: int = 32

    def __post_init__(self):
        if self.mode not in ("poll_loop", "event_driven"):
            raise ValueError(f"unknown engine mode {self.mode!r}")
        if self.sim_clock not in ("virtual", "real"):
            raise ValueError(f"unknown clock {self.sim_clock!r}")
        if not 0 <= self.inline_threshold <= 256:
            raise ValueError("inline_threshold must be within [0, 256]")


_OK, _RNR, _ACCESS = 0, 1, 2


class NicEngine:
    def __init__(self, device, config: EngineConfig, scheduler, wire, cost):
        self.dev = device
        self.node_id = device.node_id
        self.config = config
        self.sched = scheduler
        self.virtual = scheduler.virtual
        self.wire = wire
        self.cost = cost
        self.guard = DmaGuard(device.node_id, device.memory, audit=config.audit)
        self.mem_watchers: list = []
        self.stats = Counter()
        self._doorbells: set[int] = set()
        # lossless in-process wires take multi-fragment bursts aligned to the ACK cadence
        self.burst = config.ack_every if getattr(wire, "supports_bursts", False) else 1
        # whole-message bursts when the window provably never binds
        self.coalesce = self.burst > 1 and self._window_never_binds()
        self._fetch_free = 0.0

    # ----------------------------------------------------------- doorbells

    def ring_doorbell(self, qp_num: int) -> None:
        qp = self.dev.qps.get(qp_num)
        if qp is None:
            raise VerbsError(f"doorbell for unknown QP {qp_num}")
        self.stats["doorbells"] += 1
        if qp_num in self._doorbells:
            self.stats["doorbells_coalesced"] += 1
            return
        self._doorbells.add(qp_num)
        if self.virtual:
            self.sched.call_at(self.dev.app_time + self.cost.doorbell, self._on_doorbell, qp_num)
        else:
            self.sched.call_soon(self._on_doorbell, qp_num)

    def _window_never_binds(self) -> bool:
        """True when an ACK always returns before the window's spare fragments drain."""
        c, cfg = self.cost, self.config
        frag = (cfg.mtu + HEADER_LEN) / c.wire_bandwidth
        ack_rtt = (2 * (c.propagation + c.nic_rx) + 2 * HEADER_LEN / c.wire_bandwidth
                   + 40 * c.jitter_mean)
        return (cfg.window - cfg.ack_every + 1) * frag > ack_rtt

    def _on_doorbell(self, qp_num: int) -> None:
        with self.dev.lock:
            self._doorbells.discard(qp_num)
            qp = self.dev.qps.get(qp_num)
            if qp is not None:
                self.stats["drains"] += 1
                self.drain(qp)

    def _now(self) -> float:
        return self.sched.now if self.virtual else time.perf_counter()

    # ------------------------------------------------------------ requester

    def drain(self, qp: QueuePair) -> None:
        if qp.state == QPState.ERROR:
            self._to_error(qp)
            return
        if qp.state != QPState.RTS:
            return
        now = self.sched.now if self.virtual else 0.0
        t = now
        while True:
            slot = qp.tx_cur
            if slot is None:
                if not qp.sq_pending:
                    break
                slot = qp.sq_pending.popleft()
                qp.sq_inflight.append(slot)
                if slot.status is not None or not self._start(qp, slot):
                    slot.sent = 0
                    continue
                qp.tx_cur = slot
                if slot.inline is not None:
                    t = now
                else:
                    # one descriptor fetch at a time per NIC
                    t = max(now, self._fetch_free) + self.cost.wqe_fetch
                    self._fetch_free = t
            if not self._emit(qp, slot, t):
                break
            qp.tx_cur = None
            t = now
        self._retire(qp)

    def _start(self, qp: QueuePair, slot: SendSlot) -> bool:
        wr = slot.wr
        pd = qp.pd.pd_id
        slot.sent = 0
        if wr.opcode == Opcode.RDMA_READ:
            for s in wr.sge:
                if not self.guard.check(s.lkey, s.addr, s.length, LW, pd):
                    self.guard.access(s.lkey, s.addr, s.length, LW, pd)
                    slot.status = WCStatus.LOC_KEY_ERR
                    return False
            if qp.transport == Transport.RC:
                slot.first_psn = qp.psn_tx
            return True
        if slot.inline is not None:
            slot.payload = slot.inline
        else:
            views = []
            for s in wr.sge:
                v = self.guard.access(s.lkey, s.addr, s.length, LR, pd)
                if v is None:
                    slot.status = WCStatus.LOC_KEY_ERR
                    return False
                views.append(v)
            slot.payload = views[0] if len(views) == 1 else b"".join(views)
        if qp.transport == Transport.UD:
            slot.payload = bytes(slot.payload)
        else:
            slot.first_psn = qp.psn_tx
        return True

    def _emit(self, qp: QueuePair, slot: SendSlot, t: float) -> bool:
        wr = slot.wr
        rc = qp.transport == Transport.RC
        window = qp.window
        if rc:
            dst_node, dst_qp = qp.peer
            tr = 0
        else:
            dst_node, dst_qp = wr.dest
            tr = 1
        if wr.opcode == Opcode.RDMA_READ:
            if not window.can_send():
                return False
            raddr, rkey = wr.remote
            psn = qp.psn_tx
            pkt = Packet(PktOp.READ_REQ, FLAG_LAST, tr, qp.qp_num, dst_qp, psn, raddr, rkey,
                         wr.length.to_bytes(4, "big"))
            window.send(psn, pkt)
            qp.psn_tx = psn_add(psn, 1)
            slot.last_psn = psn
            self._tx(dst_node, pkt, t)
            self._arm(qp)
            return True
        write = wr.opcode == Opcode.RDMA_WRITE
        op = PktOp.WRITE if write else PktOp.SEND
        raddr, rkey = wr.remote if write else (0, 0)
        payload = slot.payload
        total = len(payload)
        mtu = self.config.mtu
        off = slot.sent
        depart = t
        burst = self.burst
        coalesce = self.coalesce
        src_qp = qp.qp_num
        while True:
            if coalesce:
                k = -(-(total - off) // mtu) or 1
            else:
                k = burst - (off // mtu) % burst if burst > 1 else 1
            if rc and not coalesce:
                room = window.window - window.inflight
                if room <= 0:
                    return False
                if k > room:
                    k = room
            end = off + k * mtu
            last = end >= total
            if last:
                end = total
                k = -(-(total - off) // mtu) or 1
            psn = qp.psn_tx
            pkt = Packet(op, FLAG_LAST if last else 0, tr, src_qp, dst_qp, psn,
                         raddr + off if write else 0, rkey, payload[off:end], k)
            if rc:
                window.send(psn, pkt, coalesce)
                qp.psn_tx = (psn + k) & 0xFFFFFF
            depart = self._tx(dst_node, pkt, t)
            off = end
            slot.sent = off
            if last:
                slot.last_psn = (psn + k - 1) & 0xFFFFFF
                break
        if rc:
            self._arm(qp, depart)
        else:
            slot.status = WCStatus.SUCCESS
            if self.virtual:
                slot.done_at = depart
                self.sched.call_at(depart, self._retire_locked, qp)
        return True

    def _tx(self, dst_node: int, pkt: Packet, t=None) -> float:
        self.stats["packets_tx"] += pkt.nfrag
        try:
            return self.wire.tx(self.node_id, dst_node, pkt, t)
        except EndpointClosed:
            self.stats["tx_unroutable"] += 1
            return self.sched.now if self.virtual else 0.0

    def _retire_locked(self, qp: QueuePair) -> None:
        with self.dev.lock:
            self._retire(qp)

    def _retire(self, qp: QueuePair) -> None:
        inflight = qp.sq_inflight
        now = self.sched.now if self.virtual else 0.0
        while inflight:
            slot = inflight[0]
            if slot.status is None or slot is qp.tx_cur or slot.done_at > now:
                break
            inflight.popleft()
            wr = slot.wr
            status = slot.status
            n = wr.length if (status is WCStatus.SUCCESS and wr.opcode == Opcode.RDMA_READ) else 0
            self.deliver_completion(qp.send_cq, WorkCompletion(wr.wr_id, status, wr.opcode, n,
                                                               qp.qp_num))
            self.dev._release(slot.mrs)

    # ---------------------------------------------------------- RC timers

    def _arm(self, qp: QueuePair, base: float | None = None) -> None:
        now = self._now()
        if base is None or not self.virtual or base < now:
            base = now
        qp.timer_deadline = base + qp.window.retransmit_timeout
        if not qp.timer_armed:
            qp.timer_armed = True
            qp.timer_gen += 1
            self.sched.call_at(qp.timer_deadline, self._on_timer, qp, qp.timer_gen)

    def _disarm(self, qp: QueuePair) -> None:
        qp.timer_armed = False
        qp.timer_gen += 1

    def _on_timer(self, qp: QueuePair, gen: int) -> None:
        with self.dev.lock:
            if gen != qp.timer_gen or not qp.timer_armed:
                return
            if qp.state != QPState.RTS or not qp.window.unacked:
                qp.timer_armed = False
                return
            now = self._now()
            if now < qp.timer_deadline:
                self.sched.call_at(qp.timer_deadline, self._on_timer, qp, gen)
                return
            qp.timer_armed = False
            try:
                pkts = qp.window.on_timeout()
            except RetryExhausted:
                self.stats["retry_exhausted"] += 1
                self._to_error(qp, WCStatus.QP_ERR)
                return
            self.stats["timeouts"] += 1
            self._retransmit(qp, pkts)
            self._arm(qp)

    def _retransmit(self, qp: QueuePair, pkts) -> None:
        node = qp.peer[0]
        self.stats["retransmits"] += len(pkts)
        for p in pkts:
            self._tx(node, p)

    def _rnr_resend(self, qp: QueuePair, gen: int, psn: int) -> None:
        with self.dev.lock:
            if gen != qp.rnr_gen or qp.state != QPState.RTS:
                return
            self._retransmit(qp, qp.window.resend_from(psn))
            self._arm(qp)

    # ------------------------------------------------------------- inbound

    def handle_inbound(self, pkt: Packet) -> None:
        with self.dev.lock:
            self.stats["packets_rx"] += pkt.nfrag
            qp = self.dev.qps.get(pkt.dst_qp)
            if qp is None or qp.state < QPState.RTR or qp.state == QPState.ERROR:
                self.stats["rx_dropped"] += 1
                return
            if pkt.transport == 1:
                if qp.transport != Transport.UD or pkt.opcode != PktOp.SEND:
                    self.stats["rx_dropped"] += 1
                    return
                self._ud_inbound(qp, pkt)
                return
            if qp.transport != Transport.RC or qp.peer is None or pkt.src_qp != qp.peer[1]:
                self.stats["rx_dropped"] += 1
                return
            op = pkt.opcode
            if op == PktOp.ACK:
                if qp.state == QPState.RTS:
                    self.stats["acks_rx"] += 1
                    self._on_ack(qp, pkt.psn)
            elif op == PktOp.NAK:
                if qp.state == QPState.RTS:
                    self._on_nak(qp, pkt)
            elif op == PktOp.READ_RESP:
                if qp.state == QPState.RTS:
                    self._on_read_resp(qp, pkt)
            else:
                self._responder(qp, pkt)

    def _send_ctl(self, qp: QueuePair, op: PktOp, psn: int, code: int | None = None) -> None:
        payload = b"" if code is None else bytes([code])
        self._tx(qp.peer[0], Packet(op, FLAG_LAST, 0, qp.qp_num, qp.peer[1], psn & 0xFFFFFF,
                                    0, 0, payload))

    def _responder(self, qp: QueuePair, pkt: Packet) -> None:
        d = psn_diff(pkt.psn, qp.psn_rx)
        op = pkt.opcode
        if d == 0:
            if op == PktOp.SEND:
                r = self._rx_send(qp, pkt)
            elif op == PktOp.WRITE:
                r = self._rx_write(qp, pkt)
            else:
                r = self._rx_read(qp, pkt)
            if r == _RNR:
                self.stats["rnr_naks"] += 1
                self._send_ctl(qp, PktOp.NAK, pkt.psn, NakCode.RNR)
                return
            nf = pkt.nfrag
            qp.psn_rx = (qp.psn_rx + nf) & 0xFFFFFF
            qp.nak_sent = False
            if r == _ACCESS:
                qp.rx_since_ack = 0
                self.stats["access_naks"] += 1
                self._send_ctl(qp, PktOp.NAK, pkt.psn, NakCode.REMOTE_ACCESS)
                return
            if op == PktOp.READ_REQ:
                qp.rx_since_ack = 0
                return
            qp.rx_since_ack += nf
            if pkt.flags & FLAG_LAST or qp.rx_since_ack >= self.config.ack_every:
                qp.rx_since_ack = 0
                self._send_ctl(qp, PktOp.ACK, pkt.psn + nf - 1)
        elif d < 0:
            self.stats["dup_rx"] += 1
            if op == PktOp.READ_REQ:
                if self._rx_read(qp, pkt) == _ACCESS:
                    self._send_ctl(qp, PktOp.NAK, pkt.psn, NakCode.REMOTE_ACCESS)
            else:
                self._send_ctl(qp, PktOp.ACK, psn_add(qp.psn_rx, -1))
        else:
            self.stats["out_of_order_rx"] += 1
            if not qp.nak_sent:
                qp.nak_sent = True
                self._send_ctl(qp, PktOp.NAK, qp.psn_rx, NakCode.SEQUENCE)

    def _scatter(self, sges, offset: int, data, pd_id, perm=LW) -> bool:
        n = len(data)
        if len(sges) == 1:
            s = sges[0]
            v = self.guard.access(s.lkey, s.addr + offset, n, perm, pd_id)
            if v is None:
                return False
            v[:] = data
            return True
        pos = 0
        base = 0
        for s in sges:
            if pos >= n:
                break
            end = base + s.length
            if offset + pos < end:
                o = offset + pos - base
                k = min(s.length - o, n - pos)
                v = self.guard.access(s.lkey, s.addr + o, k, perm, pd_id)
                if v is None:
                    return False
                v[:] = data[pos:pos + k]
                pos += k
            base = end
        return pos == n

    def _rx_send(self, qp: QueuePair, pkt: Packet) -> int:
        last = pkt.flags & FLAG_LAST
        if qp.rx_discard:
            if last:
                qp.rx_discard = False
            return _OK
        msg = qp.rx_msg
        if msg is None:
            if not qp.recv_queue:
                return _RNR
            msg = qp.rx_msg = [qp.recv_queue.popleft(), 0]
        rslot, off = msg
        payload = pkt.payload
        n = len(payload)
        wr = rslot.wr
        if off + n > wr.length:
            status = WCStatus.REM_ACCESS_ERR
        elif not self._scatter(wr.sge, off, payload, qp.pd.pd_id):
            status = WCStatus.LOC_KEY_ERR
        else:
            status = None
        if status is not None:
            qp.rx_msg = None
            qp.rx_discard = not last
            self.deliver_completion(qp.recv_cq, WorkCompletion(wr.wr_id, status, Opcode.RECV, 0,
                                                               qp.qp_num, src_qp=pkt.src_qp))
            self.dev._release(rslot.mrs)
            return _ACCESS
        msg[1] = off + n
        if self.mem_watchers:
            self._notify_mem()
        if last:
            qp.rx_msg = None
            self.deliver_completion(qp.recv_cq, WorkCompletion(wr.wr_id, WCStatus.SUCCESS,
                                                               Opcode.RECV, off + n, qp.qp_num,
                                                               src_qp=pkt.src_qp))
            self.dev._release(rslot.mrs)
        return _OK

    def _rx_write(self, qp: QueuePair, pkt: Packet) -> int:
        last = pkt.flags & FLAG_LAST
        if qp.rx_discard:
            if last:
                qp.rx_discard = False
            return _OK
        payload = pkt.payload
        v = self.guard.access(pkt.rkey, pkt.remote_address, len(payload), RW,
                              qp.pd.pd_id)
        if v is None:
            qp.rx_discard = not last
            return _ACCESS
        v[:] = payload
        if self.mem_watchers:
            self._notify_mem()
        return _OK

    def _rx_read(self, qp: QueuePair, pkt: Packet) -> int:
        length = int.from_bytes(pkt.payload[:4], "big")
        v = self.guard.access(pkt.rkey, pkt.remote_address, length, RR,
                              qp.pd.pd_id)
        if v is None:
            return _ACCESS
        self.stats["read_responses"] += 1
        node, dst_qp = qp.peer
        step = max(length, 1) if self.coalesce else self.config.mtu * self.burst
        off = 0
        while True:
            end = min(off + step, length)
            last = end >= length
            k = -(-(end - off) // self.config.mtu) or 1
            self._tx(node, Packet(PktOp.READ_RESP, FLAG_LAST if last else 0, 0, qp.qp_num,
                                  dst_qp, pkt.psn, off, 0, v[off:end], k))
            if last:
                return _OK
            off = end

    def _notify_mem(self) -> None:
        ws = self.mem_watchers
        self.mem_watchers = []
        keep = [w for w in ws if not w()]
        self.mem_watchers.extend(keep)

    def _ud_inbound(self, qp: QueuePair, pkt: Packet) -> None:
        if not qp.recv_queue:
            self.stats["ud_no_recv"] += 1
            return
        rslot = qp.recv_queue.popleft()
        wr = rslot.wr
        n = len(pkt.payload)
        if n > wr.length:
            status, n = WCStatus.REM_ACCESS_ERR, 0
        elif not self._scatter(wr.sge, 0, pkt.payload, qp.pd.pd_id):
            status, n = WCStatus.LOC_KEY_ERR, 0
        else:
            status = WCStatus.SUCCESS
        self.deliver_completion(qp.recv_cq, WorkCompletion(wr.wr_id, status, Opcode.RECV, n,
                                                           qp.qp_num, src_qp=pkt.src_qp))
        self.dev._release(rslot.mrs)

    # ---------------------------------------------------- requester inbound

    def _on_ack(self, qp: QueuePair, psn: int) -> None:
        eff = psn
        missing = None
        for slot in qp.sq_inflight:
            if slot.sent < 0 or psn_diff(slot.first_psn, psn) > 0:
                break
            if (slot.status is None and slot.wr.opcode == Opcode.RDMA_READ):
                eff = psn_add(slot.first_psn, -1)
                missing = slot
                break
        window = qp.window
        freed = window.on_ack(eff)
        if freed:
            qp.rnr_retries = 0
        cur = qp.tx_cur
        for slot in qp.sq_inflight:
            if slot.sent < 0 or slot is cur or psn_diff(slot.last_psn, eff) > 0:
                break
            if slot.status is None:
                slot.status = WCStatus.SUCCESS
        if missing is not None and qp.read_retx_psn != missing.first_psn:
            qp.read_retx_psn = missing.first_psn
            self.stats["read_retransmits"] += 1
            self._retransmit(qp, window.resend_from(missing.first_psn))
        if window.unacked:
            if freed:
                self._arm(qp)
        else:
            self._disarm(qp)
        self._retire(qp)
        if qp.tx_cur is not None or qp.sq_pending:
            self.drain(qp)

    def _on_nak(self, qp: QueuePair, pkt: Packet) -> None:
        code = pkt.payload[0] if pkt.payload else NakCode.SEQUENCE
        psn = pkt.psn
        self.stats["naks_rx"] += 1
        prev = psn_add(psn, -1)
        if code == NakCode.SEQUENCE:
            self._on_ack(qp, prev)
            if qp.state == QPState.RTS:
                self._retransmit(qp, qp.window.resend_from(psn))
                self._arm(qp)
        elif code == NakCode.RNR:
            self._on_ack(qp, prev)
            if qp.state != QPState.RTS:
                return
            self._disarm(qp)
            qp.rnr_retries += 1
            if qp.rnr_retries > self.config.rnr_retry_limit:
                self.stats["rnr_exhausted"] += 1
                self._to_error(qp, WCStatus.QP_ERR)
                return
            qp.rnr_gen += 1
            delay = self.config.rnr_backoff * (1 << (qp.rnr_retries - 1))
            self.sched.call_at(self._now() + delay, self._rnr_resend, qp, qp.rnr_gen, psn)
        else:
            self._on_ack(qp, prev)
            if qp.state != QPState.RTS:
                return
            for slot in qp.sq_inflight:
                if slot.status is None and slot.sent >= 0 and psn_diff(slot.first_psn, psn) <= 0:
                    if slot is qp.tx_cur or psn_diff(slot.last_psn, psn) >= 0:
                        slot.status = WCStatus.REM_ACCESS_ERR
                        break
            self._to_error(qp)

    def _on_read_resp(self, qp: QueuePair, pkt: Packet) -> None:
        slot = None
        for s in qp.sq_inflight:
            if s.sent < 0:
                break
            if s.status is None and s.wr.opcode == Opcode.RDMA_READ and s.first_psn == pkt.psn:
                slot = s
                break
        if slot is None or pkt.remote_address != slot.read_offset:
            self.stats["read_resp_dropped"] += 1
            return
        data = pkt.payload
        if data and not self._scatter(slot.wr.sge, slot.read_offset, data, qp.pd.pd_id):
            slot.status = WCStatus.LOC_KEY_ERR
        slot.read_offset += len(data)
        if pkt.flags & FLAG_LAST:
            if slot.status is None:
                if slot.read_offset != slot.wr.length:
                    slot.read_offset = 0
                    return
                slot.status = WCStatus.SUCCESS
            qp.read_retx_psn = -1
            self._on_ack(qp, pkt.psn)

    # ---------------------------------------------------------- completions

    def deliver_completion(self, cq: CompletionQueue, wc: WorkCompletion) -> None:
        wc.timestamp = self._now()
        if len(cq.ring) >= cq.capacity:
            self.stats["wc_dropped"] += 1
            if not cq.overrun:
                cq.overrun = True
                for qp in list(cq.bound_qps):
                    if qp.state != QPState.ERROR:
                        self._to_error(qp)
            return
        cq.ring.append(wc)
        if cq.notify_armed:
            self.fire_event(cq)
        if cq.waiters:
            ws = cq.waiters
            cq.waiters = []
            for w in ws:
                w()

    def fire_event(self, cq: CompletionQueue) -> None:
        cq.notify_armed = False
        cq.events_pending += 1
        cq.events_fired += 1
        if self.virtual:
            while cq.event_waiters and cq.events_pending:
                w = cq.event_waiters.pop(0)
                w()
        else:
            cq._notify_real()

    # ------------------------------------------------------------ errors

    def _to_error(self, qp: QueuePair, head_status: WCStatus | None = None) -> None:
        """Move ``qp`` to ERROR and flush everything outstanding on it."""
        qp.state = QPState.ERROR
        self._disarm(qp)
        qp.rnr_gen += 1
        if qp.window is not None:
            qp.window.clear()
        qp.tx_cur = None
        qp.rx_msg = None
        for slot in qp.sq_inflight:
            if slot.status is None:
                slot.status = head_status or WCStatus.FLUSH_ERR
                head_status = None
            slot.done_at = 0.0
        while qp.sq_pending:
            slot = qp.sq_pending.popleft()
            slot.sent = 0
            if slot.status is None:
                slot.status = WCStatus.FLUSH_ERR
            qp.sq_inflight.append(slot)
        self._retire(qp)
        while qp.recv_queue:
            rslot = qp.recv_queue.popleft()
            self.deliver_completion(qp.recv_cq, WorkCompletion(rslot.wr.wr_id, WCStatus.FLUSH_ERR,
                                                               Opcode.RECV, 0, qp.qp_num))
            self.dev._release(rslot.mrs)

    def new_window(self) -> RcWindow:
        return RcWindow(self.config.window, self.config.retransmit_timeout)
