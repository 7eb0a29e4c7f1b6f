"""Wiring of devices, schedulers and a wire backend into one emulated fabric."""
from __future__ import annotations

import random
import time

from .engine import EngineConfig
from .sim import CostModel, RealDriver, RealScheduler, VirtualDriver, VirtualScheduler
from .verbs.device import Device
from .verbs.types import QPState, QueuePair, Transport
from .wire import InProcWire, UdpWire


class Fabric:
    """A set of nodes sharing one wire.

    With ``clock="virtual"`` all nodes share one discrete-event scheduler and
    runs are reproducible from ``seed``. With ``clock="real"`` each node gets
    its own engine thread.
    """

    def __init__(self, clock: str = "virtual", wire: str = "inproc", cost: CostModel | None = None,
                 seed: int = 0, p_loss: float = 0.0, mtu: int = 4096, registry=None,
                 audit: bool = True, engine_mode: str = "poll_loop", inline_threshold: int = 64,
                 bursts: bool = True):
        if clock not in ("virtual", "real"):
            raise ValueError(f"unknown clock {clock!r}")
        if wire == "udp" and clock == "virtual":
            raise ValueError("the UDP backend runs in real time only")
        self.clock = clock
        self.cost = cost or CostModel()
        self.seed = seed
        self.mtu = mtu
        self.audit = audit
        self.engine_mode = engine_mode
        self.inline_threshold = inline_threshold
        self.scheduler = VirtualScheduler() if clock == "virtual" else None
        if wire == "inproc":
            self.wire = InProcWire(self.cost, seed=seed, p_loss=p_loss, mtu=mtu, bursts=bursts)
        elif wire == "udp":
            self.wire = UdpWire(registry, p_loss=p_loss, seed=seed, mtu=mtu)
        else:
            raise ValueError(f"unknown wire backend {wire!r}")
        self.devices: dict[int, Device] = {}
        self._schedulers: list = []
        self._psn_rng = random.Random(f"psn:{seed}")
        self.closed = False

    @property
    def virtual(self) -> bool:
        return self.clock == "virtual"

    def add_device(self, node_id: int | None = None, memory_size: int = 64 << 20,
                   inline_threshold: int | None = None, mode: str | None = None) -> Device:
        if node_id is None:
            node_id = len(self.devices) + 1
        if node_id in self.devices:
            raise ValueError(f"node {node_id} already exists")
        config = EngineConfig(mode=mode or self.engine_mode,
                              inline_threshold=(self.inline_threshold if inline_threshold is None
                                                else inline_threshold),
                              sim_clock=self.clock, mtu=self.mtu, audit=self.audit)
        if self.virtual:
            sched = self.scheduler
        else:
            sched = RealScheduler(f"nic-{node_id}")
            self._schedulers.append(sched)
        dev = Device(node_id, sched, self.wire, self.cost, config, memory_size, seed=self.seed)
        self.devices[node_id] = dev
        return dev

    def connect(self, a: QueuePair, dev_a: Device, b: QueuePair, dev_b: Device) -> None:
        """Bring two RC QPs to RTS, bound to each other, with negotiated start PSNs."""
        psn_ab = self._psn_rng.randrange(1 << 24)
        psn_ba = self._psn_rng.randrange(1 << 24)
        for dev, qp, peer, rq, sq in ((dev_a, a, (dev_b.node_id, b.qp_num), psn_ba, psn_ab),
                                      (dev_b, b, (dev_a.node_id, a.qp_num), psn_ab, psn_ba)):
            if qp.state == QPState.RESET:
                dev.modify_qp(qp, QPState.INIT)
            dev.modify_qp(qp, QPState.RTR, peer=peer, rq_psn=rq)
            dev.modify_qp(qp, QPState.RTS, sq_psn=sq)

    @staticmethod
    def ready(dev: Device, qp: QueuePair) -> None:
        """Bring a UD QP to RTS."""
        if qp.transport != Transport.UD:
            raise ValueError("ready() is for UD QPs; use connect() for RC")
        for st in (QPState.INIT, QPState.RTR, QPState.RTS):
            dev.modify_qp(qp, st)

    def driver(self):
        return VirtualDriver(self) if self.virtual else RealDriver(self)

    def run(self, roles, limit: float | None = None) -> list:
        """Run ``[(device, generator), ...]`` to completion; returns their results."""
        drv = self.driver()
        for dev, gen in roles:
            drv.spawn(dev, gen)
        return drv.run(limit) if limit is not None else drv.run()

    def quiescent(self) -> bool:
        for dev in self.devices.values():
            if dev.engine._doorbells:
                return False
            for qp in dev.qps.values():
                if qp.sq_pending or qp.sq_inflight or qp.rx_msg is not None:
                    return False
                if qp.window is not None and qp.window.unacked and qp.state == QPState.RTS:
                    return False
        return True

    def drain(self, timeout: float = 10.0) -> bool:
        """Let all outstanding work finish. Returns True when the fabric is quiet."""
        if self.virtual:
            self.scheduler.run()
            return self.quiescent()
        end = time.perf_counter() + timeout
        while time.perf_counter() < end:
            if self.quiescent():
                return True
            time.sleep(0.001)
        return self.quiescent()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for s in self._schedulers:
            s.close()
        if self.scheduler is not None:
            self.scheduler.close()
        self.wire.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
