"""Schedulers, the virtual-time cost model and the application drivers.

Application roles are written once as generators that yield wait requests
(:class:`WaitCQ`, :class:`WaitMem`, :class:`Sleep`). :class:`VirtualDriver`
runs them inside a discrete-event simulation; :class:`RealDriver` runs each
role on its own thread against wall-clock time.
"""
from __future__ import annotations

import heapq
import itertools
import json
import os
import sys
import threading
import time
from dataclasses import dataclass, fields, replace
from typing import Any, Callable, NamedTuple


@dataclass(frozen=True)
class CostModel:
    """Virtual-time charges, in seconds (bandwidths in bytes/s).

    Defaults are set so the emulated bypass baseline lands near a 100 Gbit/s
    back-to-back RoCE pair: ~1 us small-message one-way latency, ~86 us per MiB.
    """

    post_wr: float = 80e-9           # building a WQE and writing it to the ring
    doorbell: float = 100e-9         # MMIO doorbell reaching the NIC
    wqe_fetch: float = 150e-9        # NIC DMA read of descriptor; skipped for inline WRs
    poll_call: float = 20e-9
    poll_per_wc: float = 10e-9
    wire_bandwidth: float = 12.5e9
    propagation: float = 500e-9
    jitter_mean: float = 20e-9
    nic_rx: float = 100e-9           # inbound packet to memory plus CQE write
    syscall: float = 70e-9           # null system call round trip
    cord_driver: float = 200e-9      # kernel driver work per mediated op
    serialize_per_byte: float = 0.25e-9
    policy_check: float = 20e-9
    copy_setup: float = 10e-9
    copy_bandwidth: float = 15e9
    arm_cq: float = 50e-9
    interrupt: float = 3.0e-6        # interrupt delivery plus thread wakeup
    interrupt_jitter: float = 0.3e-6
    compute_jitter: float = 0.0

    def copy(self, nbytes: int) -> float:
        return self.copy_setup + nbytes / self.copy_bandwidth

    @classmethod
    def from_mapping(cls, values: dict[str, float]) -> "CostModel":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown cost fields: {sorted(unknown)}")
        return replace(cls(), **{k: float(v) for k, v in values.items()})

    @classmethod
    def from_file(cls, path) -> "CostModel":
        """Load overrides from JSON or from ``name value`` lines."""
        with open(path) as fh:
            text = fh.read()
        if text.lstrip().startswith("{"):
            return cls.from_mapping(json.loads(text))
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = line.split()
                values[k] = float(v)
        return cls.from_mapping(values)


class Stall(RuntimeError):
    """The event queue drained while a waiter was still blocked."""


class VirtualScheduler:
    virtual = True

    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self.events = 0

    def call_at(self, t: float, fn: Callable, *args) -> None:
        if t < self.now:
            t = self.now
        heapq.heappush(self._heap, (t, next(self._seq), fn, args))

    def call_soon(self, fn: Callable, *args) -> None:
        heapq.heappush(self._heap, (self.now, next(self._seq), fn, args))

    def clock(self) -> float:
        return self.now

    def pending(self) -> int:
        return len(self._heap)

    def step(self) -> bool:
        if not self._heap:
            return False
        t, _, fn, args = heapq.heappop(self._heap)
        self.now = t
        self.events += 1
        fn(*args)
        return True

    def run(self, until: float | None = None) -> None:
        heap = self._heap
        while heap:
            if until is not None and heap[0][0] > until:
                self.now = until
                return
            self.step()
        if until is not None and until > self.now:
            self.now = until

    def run_until(self, predicate: Callable[[], bool], limit: float | None = None) -> bool:
        while not predicate():
            if limit is not None and self._heap and self._heap[0][0] > limit:
                self.now = max(self.now, limit)
                return False
            if not self.step():
                return predicate()
        return True

    def close(self) -> None:
        self._heap.clear()


class RealScheduler:
    """Per-node event loop on a dedicated thread, driven by wall-clock time."""

    virtual = False

    def __init__(self, name: str = "engine"):
        self._heap: list = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._stop = False
        self.events = 0
        self._thread = threading.Thread(target=self._loop, name=name, daemon=True)
        self._thread.start()

    @property
    def now(self) -> float:
        return time.perf_counter()

    def clock(self) -> float:
        return time.perf_counter()

    def call_at(self, t: float, fn: Callable, *args) -> None:
        with self._cv:
            heapq.heappush(self._heap, (t, next(self._seq), fn, args))
            self._cv.notify()

    def call_soon(self, fn: Callable, *args) -> None:
        self.call_at(time.perf_counter(), fn, *args)

    def pending(self) -> int:
        return len(self._heap)

    def _loop(self):
        while True:
            with self._cv:
                while not self._stop:
                    if self._heap:
                        delay = self._heap[0][0] - time.perf_counter()
                        if delay <= 0:
                            break
                        self._cv.wait(delay)
                    else:
                        self._cv.wait()
                if self._stop:
                    return
                _, _, fn, args = heapq.heappop(self._heap)
            self.events += 1
            fn(*args)

    def close(self) -> None:
        with self._cv:
            self._stop = True
            self._cv.notify()
        if threading.current_thread() is not self._thread:
            self._thread.join(timeout=2.0)


# ------------------------------------------------------------ wait requests

class Sleep(NamedTuple):
    seconds: float


class WaitCQ(NamedTuple):
    cq: Any
    event: bool = False
    timeout: float | None = None


class WaitMem(NamedTuple):
    device: Any
    addr: int
    value: bytes


class Timeout(RuntimeError):
    pass


class _Proc:
    __slots__ = ("device", "gen", "done", "result", "error", "token")

    def __init__(self, device, gen):
        self.device = device
        self.gen = gen
        self.done = False
        self.result = None
        self.error = None
        self.token = 0


class VirtualDriver:
    """Runs role generators in virtual time on one fabric scheduler.

    Each device has a single application cursor (``device.app_time``);
    verbs calls charge it, waits resume it no earlier than the event that
    satisfied them.
    """

    def __init__(self, fabric):
        self.fabric = fabric
        self.sched = fabric.scheduler
        self.procs: list[_Proc] = []

    def spawn(self, device, gen) -> _Proc:
        p = _Proc(device, gen)
        self.procs.append(p)
        self.sched.call_at(device.app_time, self._advance, p, None)
        return p

    def run(self, limit: float | None = None) -> list:
        sched = self.sched
        heap = sched._heap
        pop = heapq.heappop
        procs = self.procs
        while True:
            if procs[-1].done and all(p.done for p in procs):
                break
            if not heap:
                failed = next((p.error for p in procs if p.error is not None), None)
                if failed is not None:
                    raise failed  # a peer waiting on a failed role is not the root cause
                blocked = [p.device.node_id for p in procs if not p.done]
                raise Stall(f"event queue empty; roles on nodes {blocked} still waiting")
            t, _, fn, args = pop(heap)
            sched.now = t
            sched.events += 1
            fn(*args)
            if limit is not None and t > limit:
                raise Timeout(f"virtual time limit {limit}s exceeded")
        for p in self.procs:
            if p.error is not None:
                raise p.error
        return [p.result for p in self.procs]

    def _advance(self, p: _Proc, value) -> None:
        dev = p.device
        if dev.app_time < self.sched.now:
            dev.app_time = self.sched.now
        try:
            req = p.gen.send(value)
        except StopIteration as stop:
            p.done = True
            p.result = stop.value
            return
        except BaseException as exc:  # surfaced by run()
            p.done = True
            p.error = exc
            return
        self._dispatch(p, req)

    def _dispatch(self, p: _Proc, req) -> None:
        dev = p.device
        if isinstance(req, Sleep):
            dev.app_time += req.seconds
            self.sched.call_at(dev.app_time, self._advance, p, None)
        elif isinstance(req, WaitCQ):
            self.sched.call_at(dev.app_time, self._check_cq, p, req)
        elif isinstance(req, WaitMem):
            self.sched.call_at(dev.app_time, self._check_mem, p, req)
        else:
            p.done = True
            p.error = TypeError(f"unknown wait request {req!r}")

    def _check_cq(self, p: _Proc, req: WaitCQ) -> None:
        cq = req.cq
        p.token += 1
        token = p.token
        if not req.event:
            if cq.ring:
                self._advance(p, True)
            else:
                cq.waiters.append(lambda: self._wake(p, token, 0.0))
        else:
            if cq.take_event():
                p.device.app_time += p.device.interrupt_delay()
                self.sched.call_at(p.device.app_time, self._advance, p, True)
            else:
                cq.event_waiters.append(lambda: self._wake_event(p, token, cq))
        if req.timeout is not None:
            self.sched.call_at(p.device.app_time + req.timeout, self._expire, p, token)

    def _wake(self, p: _Proc, token: int, extra: float) -> bool:
        if p.token != token or p.done:
            return False
        p.token += 1
        t = max(p.device.app_time, self.sched.now) + extra
        p.device.app_time = t
        self.sched.call_at(t, self._advance, p, True)
        return True

    def _wake_event(self, p: _Proc, token: int, cq) -> bool:
        if p.token != token or p.done:
            return False
        if not cq.take_event():
            return False
        return self._wake(p, token, p.device.interrupt_delay())

    def _expire(self, p: _Proc, token: int) -> None:
        if p.token == token and not p.done:
            p.token += 1
            self._advance(p, False)

    def _check_mem(self, p: _Proc, req: WaitMem) -> None:
        dev = req.device
        if dev.memory.read(req.addr, len(req.value)) == req.value:
            self._advance(p, True)
            return
        p.token += 1
        token = p.token

        def watcher():
            if dev.memory.read(req.addr, len(req.value)) == req.value:
                return self._wake(p, token, 0.0)
            return False
        dev.engine.mem_watchers.append(watcher)


SWITCH_INTERVAL = 20e-6
_yield = getattr(os, "sched_yield", None) or (lambda: time.sleep(0))


class RealDriver:
    """Runs each role generator on its own thread in wall-clock time."""

    def __init__(self, fabric, spin_yield: bool = True):
        self.fabric = fabric
        self.spin_yield = spin_yield
        self._threads: list[threading.Thread] = []
        self.procs: list[_Proc] = []

    def spawn(self, device, gen) -> _Proc:
        p = _Proc(device, gen)
        self.procs.append(p)
        t = threading.Thread(target=self._run_one, args=(p,), daemon=True,
                             name=f"role-{device.node_id}")
        self._threads.append(t)
        return p

    def run(self, limit: float | None = 120.0) -> list:
        # busy-polling threads otherwise hold the GIL for a whole switch interval
        prev = sys.getswitchinterval()
        sys.setswitchinterval(SWITCH_INTERVAL)
        try:
            for t in self._threads:
                t.start()
            deadline = None if limit is None else time.perf_counter() + limit
            while not all(p.done for p in self.procs):
                if any(p.error is not None for p in self.procs):
                    break  # survivors are daemon threads blocked on the failed role
                if deadline is not None and time.perf_counter() > deadline:
                    raise Timeout("role did not finish in time")
                self._threads[0].join(0.005) if not self.procs[0].done else time.sleep(0.005)
        finally:
            sys.setswitchinterval(prev)
        for p in self.procs:
            if p.error is not None:
                raise p.error
        return [p.result for p in self.procs]

    def _run_one(self, p: _Proc) -> None:
        value = None
        try:
            while True:
                try:
                    req = p.gen.send(value)
                except StopIteration as stop:
                    p.result = stop.value
                    return
                value = self._wait(req)
        except BaseException as exc:
            p.error = exc
        finally:
            p.done = True

    def _pause(self):
        if self.spin_yield:
            _yield()

    def _wait(self, req):
        if isinstance(req, Sleep):
            end = time.perf_counter() + req.seconds
            while time.perf_counter() < end:
                self._pause()
            return None
        end = None if getattr(req, "timeout", None) is None else time.perf_counter() + req.timeout
        if isinstance(req, WaitCQ):
            if req.event:
                return req.cq.wait_event(req.timeout)
            while not req.cq.ring:
                if end is not None and time.perf_counter() > end:
                    return False
                self._pause()
            return True
        if isinstance(req, WaitMem):
            while req.device.memory.read(req.addr, len(req.value)) != req.value:
                self._pause()
            return True
        raise TypeError(f"unknown wait request {req!r}")
