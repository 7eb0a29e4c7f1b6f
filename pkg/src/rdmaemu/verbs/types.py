from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum, IntFlag

MAX_MESSAGE = 1 << 30
UD_MAX = 4096
MAX_SGE = 16


class VerbsError(Exception):
    """Immediate (synchronous) failure of a verbs call."""


class QueueFull(VerbsError):
    pass


class ResourceExhausted(VerbsError):
    pass


class IllegalTransition(VerbsError):
    pass


class Opcode(IntEnum):
    SEND = 0
    RECV = 1
    RDMA_WRITE = 2
    RDMA_READ = 3

    @classmethod
    def parse(cls, text: str) -> "Opcode":
        t = text.strip().upper()
        aliases = {"WRITE": "RDMA_WRITE", "READ": "RDMA_READ"}
        return cls[aliases.get(t, t)]


class Transport(IntEnum):
    RC = 0
    UD = 1


class QPState(IntEnum):
    RESET = 0
    INIT = 1
    RTR = 2
    RTS = 3
    ERROR = 4


class WCStatus(Enum):
    SUCCESS = "SUCCESS"
    LOC_KEY_ERR = "LOC_KEY_ERR"
    REM_ACCESS_ERR = "REM_ACCESS_ERR"
    POLICY_DENIED = "POLICY_DENIED"
    QP_ERR = "QP_ERR"
    FLUSH_ERR = "FLUSH_ERR"


class Access(IntFlag):
    LOCAL_READ = 1
    LOCAL_WRITE = 2
    REMOTE_READ = 4
    REMOTE_WRITE = 8


@dataclass
class ProtectionDomain:
    pd_id: int
    live: bool = True


@dataclass
class MemoryRegion:
    mr_id: int
    base: int
    length: int
    lkey: int
    rkey: int
    access: Access
    pd_id: int
    live: bool = True
    inflight: int = 0
    dereg_pending: bool = False

    def contains(self, addr: int, length: int) -> bool:
        return self.base <= addr and addr + length <= self.base + self.length


@dataclass(frozen=True)
class Sge:
    addr: int
    length: int
    lkey: int


@dataclass
class WorkRequest:
    wr_id: int
    opcode: Opcode
    sge: list[Sge]
    remote: tuple[int, int] | None = None   # (remote_address, rkey)
    dest: tuple[int, int] | None = None     # (node_id, qp_num), UD only

    @property
    def length(self) -> int:
        return sum(s.length for s in self.sge)


@dataclass
class WorkCompletion:
    wr_id: int
    status: WCStatus
    opcode: Opcode
    byte_len: int
    qp_num: int
    timestamp: float = 0.0
    src_qp: int = 0

    def key(self):
        return (self.wr_id, self.status, self.opcode, self.byte_len, self.qp_num)


class CompletionQueue:
    def __init__(self, cq_id: int, capacity: int, device=None):
        self.cq_id = cq_id
        self.capacity = capacity
        self.device = device
        self.ring: deque[WorkCompletion] = deque()
        self.notify_armed = False
        self.overrun = False
        self.events_pending = 0
        self.events_fired = 0
        self.waiters: list = []          # virtual-time pollers
        self.event_waiters: list = []    # virtual-time event sleepers
        self.bound_qps: list = []
        self._cv = threading.Condition()  # real-time event waits

    def __len__(self):
        return len(self.ring)

    def take_event(self) -> bool:
        if self.events_pending:
            self.events_pending -= 1
            return True
        return False

    def wait_event(self, timeout: float | None) -> bool:
        with self._cv:
            if not self.events_pending:
                self._cv.wait_for(lambda: self.events_pending > 0, timeout)
            return self.take_event()

    def _notify_real(self) -> None:
        with self._cv:
            self._cv.notify_all()


class SendSlot:
    """Send-queue entry: a posted WR plus its requester-side progress."""

    __slots__ = ("wr", "status", "first_psn", "last_psn", "sent", "read_offset",
                 "inline", "payload", "mrs", "done_at")

    def __init__(self, wr: WorkRequest, status: WCStatus | None = None):
        self.wr = wr
        self.status = status
        self.first_psn = 0
        self.last_psn = 0
        self.sent = -1          # bytes emitted; -1 until the WR is started
        self.read_offset = 0
        self.inline = None
        self.payload = None
        self.mrs = ()
        self.done_at = 0.0


class RecvSlot:
    __slots__ = ("wr", "mrs")

    def __init__(self, wr: WorkRequest, mrs=()):
        self.wr = wr
        self.mrs = mrs


@dataclass(eq=False)
class QueuePair:
    qp_num: int
    transport: Transport
    pd: ProtectionDomain
    send_cq: CompletionQueue
    recv_cq: CompletionQueue
    tx_depth: int
    rx_depth: int
    state: QPState = QPState.RESET
    peer: tuple[int, int] | None = None
    psn_tx: int = 0
    psn_rx: int = 0
    qkey: int = 0
    sq_pending: deque = field(default_factory=deque)    # SendSlot, not yet started
    sq_inflight: deque = field(default_factory=deque)   # SendSlot, started, awaiting WC
    recv_queue: deque = field(default_factory=deque)    # RecvSlot
    tx_cur: SendSlot | None = None
    # engine-owned reliability state
    window: object = None
    timer_gen: int = 0
    timer_armed: bool = False
    timer_deadline: float = 0.0
    rnr_gen: int = 0
    rnr_retries: int = 0
    nak_sent: bool = False
    rx_msg: object = None
    rx_discard: bool = False
    rx_since_ack: int = 0
    read_retx_psn: int = -1
    retx_pending: bool = False

    @property
    def send_queue(self) -> list[WorkRequest]:
        return [s.wr for s in self.sq_inflight] + [s.wr for s in self.sq_pending]

    @property
    def sq_occupancy(self) -> int:
        return len(self.sq_pending) + len(self.sq_inflight)
