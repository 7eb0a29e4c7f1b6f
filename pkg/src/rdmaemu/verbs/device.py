"""A verbs device: control plane plus the raw (bypass) data plane of one node."""
from __future__ import annotations

import random
import threading
from itertools import count

from .. import engine as nic
from ..memory import NodeMemory
from .types import (MAX_MESSAGE, MAX_SGE, UD_MAX, Access, CompletionQueue,
                    IllegalTransition, MemoryRegion, Opcode, ProtectionDomain, QPState,
                    QueueFull, QueuePair, RecvSlot, ResourceExhausted, SendSlot, Transport,
                    VerbsError, WCStatus, WorkCompletion, WorkRequest)

_KEY_MUL = 0x9E3779B1  # odd, so key generation is a bijection on 32 bits
_NEXT_STATE = {QPState.RESET: QPState.INIT, QPState.INIT: QPState.RTR, QPState.RTR: QPState.RTS}
_LIMIT32 = 0xFFFF_FFFF


def mix_key(n: int) -> int:
    return (n * _KEY_MUL) & _LIMIT32


class Device:
    def __init__(self, node_id: int, scheduler, wire, cost, config: nic.EngineConfig | None = None,
                 memory_size: int = 64 << 20, seed: int = 0):
        self.node_id = node_id
        self.cost = cost
        self.config = config or nic.EngineConfig()
        self.memory = NodeMemory(memory_size)
        self.scheduler = scheduler
        self.virtual = scheduler.virtual
        self.lock = threading.RLock()
        self.app_time = 0.0
        self.cpu_rng = random.Random(f"cpu:{seed}:{node_id}")
        self.pds: dict[int, ProtectionDomain] = {}
        self.mrs: dict[int, MemoryRegion] = {}
        self.cqs: dict[int, CompletionQueue] = {}
        self.qps: dict[int, QueuePair] = {}
        self._next_pd = 1
        self._next_key = 1
        self._ids = count(1)
        self._qp_nums = count(0x100)
        self.engine = nic.NicEngine(self, self.config, scheduler, wire, cost)
        wire.attach(node_id, scheduler, self.engine.handle_inbound)

    # ------------------------------------------------------------ helpers

    def charge(self, seconds: float) -> None:
        if self.virtual:
            self.app_time += seconds

    def interrupt_delay(self) -> float:
        j = self.cost.interrupt_jitter
        return self.cost.interrupt + (self.cpu_rng.uniform(-j, j) if j else 0.0)

    def alloc(self, length: int) -> int:
        return self.memory.alloc(length)

    # ------------------------------------------------------- control plane

    def alloc_pd(self) -> ProtectionDomain:
        with self.lock:
            if self._next_pd > _LIMIT32:
                raise ResourceExhausted("protection domain ids exhausted")
            pd = ProtectionDomain(self._next_pd)
            self._next_pd += 1
            self.pds[pd.pd_id] = pd
            return pd

    def dealloc_pd(self, pd: ProtectionDomain) -> None:
        with self.lock:
            if any(mr.pd_id == pd.pd_id and mr.live for mr in self.mrs.values()) or any(
                    qp.pd is pd for qp in self.qps.values()):
                raise VerbsError("protection domain still in use")
            pd.live = False
            self.pds.pop(pd.pd_id, None)

    def reg_mr(self, pd: ProtectionDomain, addr: int, length: int,
               access: Access = Access.LOCAL_WRITE) -> MemoryRegion:
        with self.lock:
            if length <= 0:
                raise VerbsError("memory region length must be positive")
            if not pd.live or self.pds.get(pd.pd_id) is not pd:
                raise VerbsError(f"protection domain {pd.pd_id} is not live")
            if not self.memory.contains(addr, length):
                raise VerbsError("range is not owned by this application")
            if (access & Access.REMOTE_WRITE) and not (access & Access.LOCAL_WRITE):
                raise VerbsError("REMOTE_WRITE requires LOCAL_WRITE")
            if self._next_key + 1 > _LIMIT32:
                raise ResourceExhausted("memory keys exhausted")
            lkey = mix_key(self._next_key)
            rkey = mix_key(self._next_key + 1)
            self._next_key += 2
            mr = MemoryRegion(next(self._ids), addr, length, lkey, rkey,
                              Access(access) | Access.LOCAL_READ, pd.pd_id)
            self.mrs[mr.mr_id] = mr
            self.engine.guard.register(mr)
            return mr

    def dereg_mr(self, mr: MemoryRegion) -> bool:
        """Invalidate ``mr``; returns False if deferred behind in-flight work."""
        with self.lock:
            if not mr.live or mr.dereg_pending:
                raise VerbsError(f"memory region {mr.mr_id} is not live")
            if mr.inflight:
                mr.dereg_pending = True
                return False
            self._invalidate(mr)
            return True

    def _invalidate(self, mr: MemoryRegion) -> None:
        mr.live = False
        mr.dereg_pending = False
        self.engine.guard.invalidate(mr)
        self.mrs.pop(mr.mr_id, None)

    def _pin(self, wr: WorkRequest) -> tuple:
        table = self.engine.guard.table
        mrs = []
        for s in wr.sge:
            e = table.get(s.lkey)
            if e is not None and not e.remote:
                e.mr.inflight += 1
                mrs.append(e.mr)
        return tuple(mrs)

    def _release(self, mrs) -> None:
        for mr in mrs:
            mr.inflight -= 1
            if mr.dereg_pending and mr.inflight == 0:
                self._invalidate(mr)

    def create_cq(self, capacity: int) -> CompletionQueue:
        if capacity < 1:
            raise VerbsError("CQ capacity must be >= 1")
        with self.lock:
            cq = CompletionQueue(next(self._ids), capacity, self)
            self.cqs[cq.cq_id] = cq
            return cq

    def create_qp(self, pd: ProtectionDomain, transport: Transport, send_cq: CompletionQueue,
                  recv_cq: CompletionQueue, tx_depth: int = 128, rx_depth: int = 128) -> QueuePair:
        if tx_depth < 1 or rx_depth < 1:
            raise VerbsError("queue depths must be >= 1")
        with self.lock:
            if not pd.live:
                raise VerbsError(f"protection domain {pd.pd_id} is not live")
            num = next(self._qp_nums)
            if num > _LIMIT32:
                raise ResourceExhausted("QP numbers exhausted")
            qp = QueuePair(num, Transport(transport), pd, send_cq, recv_cq, tx_depth, rx_depth)
            if qp.transport == Transport.RC:
                qp.window = self.engine.new_window()
            self.qps[num] = qp
            send_cq.bound_qps.append(qp)
            if recv_cq is not send_cq:
                recv_cq.bound_qps.append(qp)
            return qp

    def modify_qp(self, qp: QueuePair, state: QPState, peer: tuple[int, int] | None = None,
                  rq_psn: int = 0, sq_psn: int = 0, qkey: int = 0) -> None:
        with self.lock:
            state = QPState(state)
            if state == QPState.ERROR:
                if qp.state != QPState.ERROR:
                    self.engine._to_error(qp)
                return
            if state == QPState.RESET and qp.state == QPState.ERROR:
                self._reset(qp)
                return
            if _NEXT_STATE.get(qp.state) != state:
                raise IllegalTransition(f"QP {qp.qp_num}: {qp.state.name} -> {state.name}")
            if state == QPState.RTR:
                if qp.transport == Transport.RC:
                    if peer is None and qp.peer is None:
                        raise IllegalTransition("RC QP needs a peer before RTR")
                    if peer is not None:
                        qp.peer = (int(peer[0]), int(peer[1]))
                    qp.psn_rx = rq_psn & 0xFFFFFF
                qp.qkey = qkey
            elif state == QPState.RTS and qp.transport == Transport.RC:
                qp.psn_tx = sq_psn & 0xFFFFFF
            qp.state = state

    def _reset(self, qp: QueuePair) -> None:
        qp.state = QPState.RESET
        qp.peer = None
        qp.psn_tx = qp.psn_rx = 0
        qp.rx_msg = None
        qp.rx_discard = qp.nak_sent = False
        qp.rx_since_ack = qp.rnr_retries = 0
        qp.read_retx_psn = -1
        if qp.transport == Transport.RC:
            qp.window = self.engine.new_window()

    def destroy_qp(self, qp: QueuePair) -> None:
        with self.lock:
            if qp.state != QPState.ERROR:
                self.engine._to_error(qp)
            self.qps.pop(qp.qp_num, None)
            for cq in {id(qp.send_cq): qp.send_cq, id(qp.recv_cq): qp.recv_cq}.values():
                if qp in cq.bound_qps:
                    cq.bound_qps.remove(qp)

    # ---------------------------------------------------------- data plane

    def _validate_send(self, qp: QueuePair, wr: WorkRequest) -> None:
        if not wr.sge:
            raise VerbsError(f"wr {wr.wr_id}: empty scatter/gather list")
        if len(wr.sge) > MAX_SGE:
            raise VerbsError(f"wr {wr.wr_id}: more than {MAX_SGE} sges")
        if wr.opcode == Opcode.RECV:
            raise VerbsError(f"wr {wr.wr_id}: RECV posted on a send queue")
        n = wr.length
        if n > MAX_MESSAGE:
            raise VerbsError(f"wr {wr.wr_id}: {n} bytes exceeds the 1 GiB cap")
        if wr.opcode in (Opcode.RDMA_READ, Opcode.RDMA_WRITE):
            if qp.transport != Transport.RC:
                raise VerbsError(f"wr {wr.wr_id}: one-sided ops need an RC QP")
            if wr.remote is None:
                raise VerbsError(f"wr {wr.wr_id}: one-sided op without remote address")
        if qp.transport == Transport.UD:
            if wr.dest is None:
                raise VerbsError(f"wr {wr.wr_id}: UD send needs a destination")
            if n > min(self.config.mtu, UD_MAX):
                raise VerbsError(f"wr {wr.wr_id}: UD message of {n} bytes exceeds "
                                 f"{min(self.config.mtu, UD_MAX)}")

    def post_send(self, qp: QueuePair, wrs, inline_threshold: int | None = None) -> None:
        if isinstance(wrs, WorkRequest):
            wrs = [wrs]
        limit = self.config.inline_threshold if inline_threshold is None else inline_threshold
        posted = 0
        try:
            with self.lock:
                if qp.state != QPState.RTS:
                    raise VerbsError(f"QP {qp.qp_num} is {qp.state.name}, not RTS")
                for wr in wrs:
                    if qp.sq_occupancy >= qp.tx_depth:
                        raise QueueFull(f"QP {qp.qp_num} send queue full")
                    self._validate_send(qp, wr)
                    slot = SendSlot(wr)
                    slot.mrs = self._pin(wr)
                    n = wr.length
                    if limit and n <= limit and wr.opcode != Opcode.RDMA_READ:
                        slot.inline = self._inline_copy(qp, wr)
                        if slot.inline is not None:
                            self.charge(self.cost.copy(n))
                    qp.sq_pending.append(slot)
                    self.charge(self.cost.post_wr)
                    posted += 1
        finally:
            if posted:
                self.engine.ring_doorbell(qp.qp_num)

    def _inline_copy(self, qp: QueuePair, wr: WorkRequest):
        parts = []
        for s in wr.sge:
            v = self.engine.guard.access(s.lkey, s.addr, s.length, Access.LOCAL_READ,
                                         qp.pd.pd_id, kind="inline")
            if v is None:
                return None
            parts.append(bytes(v))
        return b"".join(parts)

    def post_denied(self, qp: QueuePair, wr: WorkRequest, status=WCStatus.POLICY_DENIED) -> None:
        """Queue a WR that completes with ``status`` without touching memory or the wire."""
        with self.lock:
            if wr.opcode == Opcode.RECV:
                self.engine.deliver_completion(qp.recv_cq, WorkCompletion(
                    wr.wr_id, status, Opcode.RECV, 0, qp.qp_num))
                return
            if qp.state != QPState.RTS:
                raise VerbsError(f"QP {qp.qp_num} is {qp.state.name}, not RTS")
            if qp.sq_occupancy >= qp.tx_depth:
                raise QueueFull(f"QP {qp.qp_num} send queue full")
            qp.sq_pending.append(SendSlot(wr, status))
            self.charge(self.cost.post_wr)
        self.engine.ring_doorbell(qp.qp_num)

    def post_recv(self, qp: QueuePair, wrs) -> None:
        if isinstance(wrs, WorkRequest):
            wrs = [wrs]
        with self.lock:
            if qp.state == QPState.RESET or qp.state == QPState.ERROR:
                raise VerbsError(f"QP {qp.qp_num} is {qp.state.name}; cannot post receives")
            for wr in wrs:
                if len(qp.recv_queue) >= qp.rx_depth:
                    raise QueueFull(f"QP {qp.qp_num} receive queue full")
                if wr.opcode != Opcode.RECV:
                    raise VerbsError(f"wr {wr.wr_id}: receive queue accepts RECV only")
                if not wr.sge or len(wr.sge) > MAX_SGE:
                    raise VerbsError(f"wr {wr.wr_id}: bad scatter/gather list")
                qp.recv_queue.append(RecvSlot(wr, self._pin(wr)))
                self.charge(self.cost.post_wr)

    def poll_cq(self, cq: CompletionQueue, max_entries: int = 16) -> list[WorkCompletion]:
        if max_entries < 1:
            raise VerbsError("max_entries must be positive")
        with self.lock:
            ring = cq.ring
            n = min(max_entries, len(ring))
            out = [ring.popleft() for _ in range(n)]
        self.charge(self.cost.poll_call + n * self.cost.poll_per_wc)
        return out

    def req_notify_cq(self, cq: CompletionQueue) -> None:
        with self.lock:
            self.charge(self.cost.arm_cq)
            if cq.ring:
                # a completion is already waiting: fire now so the wakeup is not lost
                self.engine.fire_event(cq)
            else:
                cq.notify_armed = True

    def wait_cq_event(self, cq: CompletionQueue, timeout: float | None = None) -> bool:
        """Block for one CQ event; False on timeout.

        In virtual mode this advances the shared scheduler, so it is meant for
        tests and scripts, not for role generators (those yield ``WaitCQ``).
        """
        if not self.virtual:
            return cq.wait_event(timeout)
        sched = self.scheduler
        limit = None if timeout is None else sched.now + timeout
        sched.run_until(lambda: cq.events_pending > 0, limit)
        if cq.take_event():
            self.app_time = max(self.app_time, sched.now) + self.interrupt_delay()
            return True
        return False
