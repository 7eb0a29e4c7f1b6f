"""perftest-style runners: latency, bandwidth, ablations, direction matrix, app workload."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ..dataplane import AblationFlags, DataplanePath, PathMode
from ..fabric import Fabric
from ..policy import PolicyEngine, PolicySpec
from ..sim import CostModel, Sleep, Stall, Timeout, WaitMem
from ..verbs.types import Access, Opcode, Sge, Transport, WCStatus, WorkRequest

DEFAULT_SIZES = [16, 4096, 65536, 1048576]
SWEEP_SIZES = [16 << (2 * i) for i in range(9)]    # 16 B .. 1 MiB in powers of 4
ABLATION_VARIANTS = {
    "baseline": AblationFlags(),
    "no-bypass": AblationFlags(no_bypass_tax=True),
    "no-poll": AblationFlags(no_polling=True),
    "no-zc": AblationFlags(no_zero_copy=True),
}
UNITS = {
    "lat_median_us": "us", "lat_p99_us": "us", "overhead_us": "us", "bw_gbps": "Gbit/s",
    "msg_rate_per_s": "msg/s", "rel_throughput": "ratio", "runtime_s": "s",
    "rel_runtime": "ratio", "rate_flag": "flag", "predicted_overhead": "ratio", "rel_flag": "flag",
}
CLIENT, SERVER = 1, 2
REL_EPS = 0.05


class BenchError(RuntimeError):
    pass


@dataclass
class BenchConfig:
    mode: str = "lat"
    transport: str = "rc"
    op: str = "send"
    sizes: list[int] = field(default_factory=lambda: list(DEFAULT_SIZES))
    iters: int = 1000
    tx_depth: int | None = None
    warmup: int | None = None
    client_path: PathMode = PathMode.BYPASS
    server_path: PathMode = PathMode.BYPASS
    ablations: AblationFlags = field(default_factory=AblationFlags)
    wire: str = "inproc"
    seed: int = 1
    clock: str = "virtual"
    policy: PolicySpec | None = None
    cost: CostModel = field(default_factory=CostModel)
    crossing: str | None = None
    mediate_poll: bool = False
    p_loss: float = 0.0
    bw_bytes: int = 256 << 20
    processes: int = 4
    msg_rate: float = 1300.0
    duration: float = 1.0

    def __post_init__(self):
        self.client_path = PathMode.parse(self.client_path)
        self.server_path = PathMode.parse(self.server_path)
        if isinstance(self.ablations, str):
            self.ablations = AblationFlags.parse(self.ablations)

    def validate(self) -> "BenchConfig":
        if self.mode not in ("lat", "bw", "ablation", "matrix", "app"):
            raise BenchError(f"unknown mode {self.mode!r}")
        if self.transport not in ("rc", "ud"):
            raise BenchError(f"unknown transport {self.transport!r}")
        if self.op not in ("send", "read", "write"):
            raise BenchError(f"unknown op {self.op!r}")
        if self.op != "send" and self.transport != "rc":
            raise BenchError(f"{self.op} requires --transport rc")
        if self.transport == "ud" and any(s > 4096 for s in self.sizes):
            raise BenchError("UD sizes must be <= 4096 bytes")
        if not self.sizes or any(s <= 0 for s in self.sizes):
            raise BenchError("sizes must be positive")
        if self.iters < 1:
            raise BenchError("iters must be >= 1")
        if self.mode == "app" and self.processes < 2:
            raise BenchError("app workload needs at least 2 processes")
        if self.wire == "udp" and self.clock != "real":
            raise BenchError("--wire udp needs --clock real")
        return self

    @property
    def warmup_iters(self) -> int:
        return self.warmup if self.warmup is not None else max(100, self.iters // 10)

    @property
    def path_label(self) -> str:
        return f"{self.client_path.value}-{self.server_path.value}"

    def run_id(self, mode: str | None = None) -> str:
        return (f"{mode or self.mode}.{self.transport}.{self.op}.{self.path_label}."
                f"{self.ablations.label()}.s{self.seed}")


@dataclass(frozen=True)
class ResultRow:
    run_id: str
    mode: str
    transport: str
    op: str
    size: int
    client_path: str
    server_path: str
    ablations: str
    metric: str
    value: float
    unit: str
    seed: int

    FIELDS = ("run_id", "mode", "transport", "op", "size", "client_path", "server_path",
              "ablations", "metric", "value", "unit", "seed")

    def as_list(self) -> list[str]:
        return [self.run_id, self.mode, self.transport, self.op, str(self.size), self.client_path,
                self.server_path, self.ablations, self.metric, f"{self.value:.6g}", self.unit,
                str(self.seed)]


def _row(cfg: BenchConfig, mode: str, size: int, metric: str, value: float,
         run_id: str | None = None) -> ResultRow:
    return ResultRow(run_id or cfg.run_id(mode), mode, cfg.transport, cfg.op, size,
                     cfg.client_path.value, cfg.server_path.value, cfg.ablations.label(), metric,
                     float(value), UNITS.get(metric, ""), cfg.seed)


# ------------------------------------------------------------------- setup

class _Side:
    def __init__(self, fabric: Fabric, node: int, path: PathMode, cfg: BenchConfig, size: int,
                 depth: int, rx_depth: int, bounce: int):
        mem = 2 * size + bounce + (1 << 20)
        self.dev = dev = fabric.add_device(node, memory_size=mem)
        self.pd = dev.alloc_pd()
        self.scq = dev.create_cq(max(256, 2 * depth))
        self.rcq = dev.create_cq(max(256, 2 * rx_depth))
        transport = Transport.RC if cfg.transport == "rc" else Transport.UD
        self.qp = dev.create_qp(self.pd, transport, self.scq, self.rcq, depth, rx_depth)
        self.sbuf = dev.alloc(size)
        self.rbuf = dev.alloc(size)
        acc = Access.LOCAL_WRITE | Access.REMOTE_READ | Access.REMOTE_WRITE
        self.smr = dev.reg_mr(self.pd, self.sbuf, size, acc)
        self.rmr = dev.reg_mr(self.pd, self.rbuf, size, acc)
        policy = PolicyEngine(cfg.policy) if cfg.policy is not None else None
        crossing = cfg.crossing or ("real_null_syscall" if fabric.virtual else "both")
        self.path = DataplanePath(dev, path, cfg.ablations, policy, crossing=crossing,
                                  mediate_poll=cfg.mediate_poll, bounce_bytes=max(bounce, 4096))
        self.clock = (lambda: dev.app_time) if fabric.virtual else time.perf_counter
        self.outstanding = 0

    def recv_wr(self, size: int) -> WorkRequest:
        return WorkRequest(0, Opcode.RECV, [Sge(self.rbuf, size, self.rmr.lkey)])

    def check(self, wcs) -> None:
        for wc in wcs:
            if wc.status is not WCStatus.SUCCESS:
                raise BenchError(f"node {self.dev.node_id}: wr {wc.wr_id} completed {wc.status.value}")

    def send(self, wr: WorkRequest, depth: int):
        """Generator: post ``wr`` once fewer than ``depth`` sends are outstanding."""
        if self.outstanding:
            done = self.path.poll_cq(self.scq, 64)
            self.check(done)
            self.outstanding -= len(done)
        while self.outstanding >= depth:
            done = yield from self.path.wait_cq(self.scq, max_entries=64)
            self.check(done)
            self.outstanding -= len(done)
        self.path.post_send(self.qp, wr)
        self.outstanding += 1


class _Pair:
    def __init__(self, cfg: BenchConfig, size: int, depth: int = 1, rx_depth: int = 4,
                 bounce_slots: int = 4):
        self.cfg = cfg
        self.fabric = Fabric(cfg.clock, cfg.wire, cfg.cost, seed=cfg.seed, p_loss=cfg.p_loss,
                             audit=False)
        slot = -(-size // 64) * 64           # bounce allocations are 64-byte aligned
        bounce = bounce_slots * slot if cfg.ablations.no_zero_copy else 0
        self.client = _Side(self.fabric, CLIENT, cfg.client_path, cfg, size, depth, rx_depth,
                            bounce)
        self.server = _Side(self.fabric, SERVER, cfg.server_path, cfg, size, depth, rx_depth,
                            bounce)
        c, s = self.client, self.server
        if cfg.transport == "rc":
            self.fabric.connect(c.qp, c.dev, s.qp, s.dev)
        else:
            Fabric.ready(c.dev, c.qp)
            Fabric.ready(s.dev, s.qp)

    def run(self, roles):
        try:
            return _run_roles(self.fabric, roles)
        finally:
            self.close()

    def close(self):
        self.client.path.close()
        self.server.path.close()
        self.fabric.close()


def _run_roles(fabric: Fabric, roles):
    try:
        return fabric.run(roles)
    except Stall as exc:
        raise BenchError(f"benchmark stalled ({exc}); a policy may be denying posts") from None


def _summary(samples: list[float]) -> tuple[float, float]:
    arr = np.asarray(samples) * 1e6
    return float(np.median(arr)), float(np.percentile(arr, 99))


# ---------------------------------------------------------------- latency

def _lat_send(pair: _Pair, size: int, total: int, warm: int):
    c, s = pair.client, pair.server
    ud = pair.cfg.transport == "ud"

    def wr_for(me, peer):
        return WorkRequest(1, Opcode.SEND, [Sge(me.sbuf, size, me.smr.lkey)],
                           dest=(peer.dev.node_id, peer.qp.qp_num) if ud else None)

    c.path.post_recv(c.qp, c.recv_wr(size))
    s.path.post_recv(s.qp, s.recv_wr(size))
    samples: list[float] = []

    def client():
        wr = wr_for(c, s)
        rwr = c.recv_wr(size)
        for i in range(total):
            t0 = c.clock()
            yield from c.send(wr, 1)
            c.check((yield from c.path.wait_cq(c.rcq)))
            c.path.post_recv(c.qp, rwr)
            if i >= warm:
                samples.append((c.clock() - t0) / 2)

    def server():
        wr = wr_for(s, c)
        rwr = s.recv_wr(size)
        for _ in range(total):
            s.check((yield from s.path.wait_cq(s.rcq)))
            s.path.post_recv(s.qp, rwr)
            yield from s.send(wr, 1)

    pair.run([(c.dev, client()), (s.dev, server())])
    return samples


def _lat_read(pair: _Pair, size: int, total: int, warm: int):
    c, s = pair.client, pair.server
    samples: list[float] = []

    def client():
        wr = WorkRequest(1, Opcode.RDMA_READ, [Sge(c.sbuf, size, c.smr.lkey)],
                         remote=(s.rbuf, s.rmr.rkey))
        for i in range(total):
            t0 = c.clock()
            c.path.post_send(c.qp, wr)
            c.check((yield from c.path.wait_cq(c.scq)))
            if i >= warm:
                samples.append(c.clock() - t0)

    def server():
        return
        yield

    pair.run([(c.dev, client()), (s.dev, server())])
    return samples


def _lat_write(pair: _Pair, size: int, total: int, warm: int):
    c, s = pair.client, pair.server
    samples: list[float] = []

    def wr_for(me, peer):
        return WorkRequest(1, Opcode.RDMA_WRITE, [Sge(me.sbuf, size, me.smr.lkey)],
                           remote=(peer.rbuf, peer.rmr.rkey))

    def client():
        wr = wr_for(c, s)
        for i in range(total):
            mark = bytes([i % 255 + 1])
            t0 = c.clock()
            c.dev.memory.write(c.sbuf + size - 1, mark)
            yield from c.send(wr, 1)
            yield WaitMem(c.dev, c.rbuf + size - 1, mark)
            c.dev.charge(c.dev.cost.poll_call)
            if i >= warm:
                samples.append((c.clock() - t0) / 2)

    def server():
        wr = wr_for(s, c)
        for i in range(total):
            mark = bytes([i % 255 + 1])
            yield WaitMem(s.dev, s.rbuf + size - 1, mark)
            s.dev.charge(s.dev.cost.poll_call)
            s.dev.memory.write(s.sbuf + size - 1, mark)
            yield from s.send(wr, 1)

    pair.run([(c.dev, client()), (s.dev, server())])
    return samples


_LAT = {"send": _lat_send, "read": _lat_read, "write": _lat_write}


def measure_lat(cfg: BenchConfig, size: int) -> tuple[float, float]:
    """One ping-pong run at ``size``; returns (median, p99) one-way latency in microseconds."""
    warm = cfg.warmup_iters
    pair = _Pair(cfg, size, depth=1, rx_depth=4, bounce_slots=4)
    samples = _LAT[cfg.op](pair, size, warm + cfg.iters, warm)
    return _summary(samples)


def run_lat(cfg: BenchConfig) -> list[ResultRow]:
    rows = []
    for size in cfg.sizes:
        med, p99 = measure_lat(cfg, size)
        rows.append(_row(cfg, "lat", size, "lat_median_us", med))
        rows.append(_row(cfg, "lat", size, "lat_p99_us", p99))
    return rows


# -------------------------------------------------------------- bandwidth

def bw_iters(cfg: BenchConfig, size: int) -> int:
    return max(1, min(cfg.iters, max(256, cfg.bw_bytes // size)))


def measure_bw(cfg: BenchConfig, size: int) -> tuple[float, float]:
    """Stream messages with ``tx_depth`` in flight; returns (Gbit/s, msgs/s)."""
    depth = cfg.tx_depth or 64
    n = bw_iters(cfg, size)
    warm = min(cfg.warmup_iters, max(1, n // 10))
    total = n + warm
    rx_depth = 4 * depth
    pair = _Pair(cfg, size, depth=depth, rx_depth=rx_depth, bounce_slots=depth + rx_depth + 4)
    c, s = pair.client, pair.server
    op = cfg.op
    ud = cfg.transport == "ud"
    marks: dict[str, float] = {}
    if op == "send":
        s.path.post_recv(s.qp, [s.recv_wr(size) for _ in range(rx_depth)])

    def client():
        if op == "read":
            wr = WorkRequest(1, Opcode.RDMA_READ, [Sge(c.sbuf, size, c.smr.lkey)],
                             remote=(s.rbuf, s.rmr.rkey))
        elif op == "write":
            wr = WorkRequest(1, Opcode.RDMA_WRITE, [Sge(c.sbuf, size, c.smr.lkey)],
                             remote=(s.rbuf, s.rmr.rkey))
        else:
            wr = WorkRequest(1, Opcode.SEND, [Sge(c.sbuf, size, c.smr.lkey)],
                             dest=(SERVER, s.qp.qp_num) if ud else None)
        # warmup drains fully before the timed phase starts
        for phase, count in (("start", warm), ("end", n)):
            posted = done = 0
            while done < count:
                while posted < count and posted - done < depth:
                    c.path.post_send(c.qp, wr)
                    posted += 1
                wcs = yield from c.path.wait_cq(c.scq, max_entries=depth)
                c.check(wcs)
                done += len(wcs)
            marks[phase] = c.clock()

    def server():
        if op != "send":
            return
        got = 0
        idle = 2e-3 if pair.fabric.virtual else 0.5
        rwr = s.recv_wr(size)
        while got < total:
            try:
                wcs = yield from s.path.wait_cq(s.rcq, max_entries=64, timeout=idle if ud else None)
            except Timeout:
                return
            s.check(wcs)
            got += len(wcs)
            s.path.post_recv(s.qp, [rwr] * len(wcs))

    pair.run([(c.dev, client()), (s.dev, server())])
    elapsed = marks["end"] - marks.get("start", 0.0)
    if elapsed <= 0:
        raise BenchError("non-positive elapsed time")
    rate = n / elapsed
    return rate * size * 8 / 1e9, rate


def run_bw(cfg: BenchConfig) -> list[ResultRow]:
    rows = []
    for size in cfg.sizes:
        gbps, rate = measure_bw(cfg, size)
        rows.append(_row(cfg, "bw", size, "bw_gbps", gbps))
        rows.append(_row(cfg, "bw", size, "msg_rate_per_s", rate))
    return rows


# ------------------------------------------------------------ composites

def run_ablation_suite(cfg: BenchConfig, with_bw: bool = True) -> list[ResultRow]:
    """Baseline plus one run per removed technique; overheads are vs. baseline."""
    rows: list[ResultRow] = []
    base_cfg = replace(cfg, ablations=AblationFlags())
    base_lat: dict[int, float] = {}
    base_bw: dict[int, float] = {}
    for name, flags in ABLATION_VARIANTS.items():
        vcfg = replace(cfg, ablations=flags)
        for size in cfg.sizes:
            med, p99 = measure_lat(vcfg, size)
            rows.append(_row(vcfg, "ablation", size, "lat_median_us", med, vcfg.run_id("lat")))
            rows.append(_row(vcfg, "ablation", size, "lat_p99_us", p99, vcfg.run_id("lat")))
            if name == "baseline":
                base_lat[size] = med
            else:
                rid = f"{vcfg.run_id('lat')}-vs-{base_cfg.run_id('lat')}"
                rows.append(_row(vcfg, "ablation", size, "overhead_us", med - base_lat[size], rid))
            if with_bw:
                gbps, rate = measure_bw(vcfg, size)
                rows.append(_row(vcfg, "ablation", size, "bw_gbps", gbps, vcfg.run_id("bw")))
                rows.append(_row(vcfg, "ablation", size, "msg_rate_per_s", rate, vcfg.run_id("bw")))
                if name == "baseline":
                    base_bw[size] = rate
                else:
                    rid = f"{vcfg.run_id('bw')}-vs-{base_cfg.run_id('bw')}"
                    rows.append(_row(vcfg, "ablation", size, "rel_throughput",
                                     rate / base_bw[size], rid))
    return rows


MATRIX = [(PathMode.BYPASS, PathMode.BYPASS), (PathMode.BYPASS, PathMode.CORD),
          (PathMode.CORD, PathMode.BYPASS), (PathMode.CORD, PathMode.CORD)]


def run_direction_matrix(cfg: BenchConfig, ops=None) -> list[ResultRow]:
    """All four client/server path combinations for each op; overheads are vs. BP->BP."""
    if ops is None:
        ops = ("send", "read", "write") if cfg.transport == "rc" else ("send",)
    rows: list[ResultRow] = []
    for op in ops:
        ocfg = replace(cfg, op=op)
        base: dict[int, float] = {}
        base_id = replace(ocfg, client_path=PathMode.BYPASS,
                          server_path=PathMode.BYPASS).run_id("lat")
        for cp, sp in MATRIX:
            mcfg = replace(ocfg, client_path=cp, server_path=sp)
            for size in cfg.sizes:
                med, p99 = measure_lat(mcfg, size)
                rows.append(_row(mcfg, "matrix", size, "lat_median_us", med, mcfg.run_id("lat")))
                rows.append(_row(mcfg, "matrix", size, "lat_p99_us", p99, mcfg.run_id("lat")))
                if (cp, sp) == MATRIX[0]:
                    base[size] = med
                else:
                    rows.append(_row(mcfg, "matrix", size, "overhead_us", med - base[size],
                                     f"{mcfg.run_id('lat')}-vs-{base_id}"))
    return rows


def relative_throughput(cfg: BenchConfig, sizes=None) -> dict[int, float]:
    """msg-rate ratio of the configured paths against BP->BP at each size."""
    out = {}
    base_cfg = replace(cfg, client_path=PathMode.BYPASS, server_path=PathMode.BYPASS)
    for size in sizes or cfg.sizes:
        _, r_base = measure_bw(base_cfg, size)
        _, r = measure_bw(cfg, size)
        out[size] = r / r_base
    return out


def run_bw_relative(cfg: BenchConfig) -> list[ResultRow]:
    rows = run_bw(cfg)
    if (cfg.client_path, cfg.server_path) != (PathMode.BYPASS, PathMode.BYPASS):
        base_cfg = replace(cfg, client_path=PathMode.BYPASS, server_path=PathMode.BYPASS)
        base_rows = run_bw(base_cfg)
        rows += base_rows
        base = {r.size: r.value for r in base_rows if r.metric == "msg_rate_per_s"}
        for r in list(rows):
            if r.metric == "msg_rate_per_s" and r.run_id == cfg.run_id("bw"):
                rel = r.value / base[r.size]
                rid = f"{cfg.run_id('bw')}-vs-{base_cfg.run_id('bw')}"
                rows.append(_row(cfg, "bw", r.size, "rel_throughput", rel, rid))
                if rel > 1.0 + REL_EPS:
                    rows.append(_row(cfg, "bw", r.size, "rel_flag", 1.0, rid))
    return rows


# ----------------------------------------------------------- app workload

def predict_overhead(msg_rate: float, per_op_cost: float) -> tuple[float, bool]:
    """Analytic slowdown ``rate * cost`` clamped to [0, 1]; flag is True when saturated."""
    if msg_rate < 0 or per_op_cost < 0:
        raise ValueError("inputs must be non-negative")
    x = msg_rate * per_op_cost
    return (1.0, True) if x >= 1.0 else (x, False)


def measure_app(cfg: BenchConfig, path: PathMode, size: int) -> tuple[float, float]:
    """Ring halo exchange; returns (total runtime in seconds, achieved msgs/s per process)."""
    n_proc = cfg.processes
    iters = int(round(cfg.msg_rate * cfg.duration))
    fabric = Fabric(cfg.clock, cfg.wire, cfg.cost, seed=cfg.seed, p_loss=cfg.p_loss, audit=False)
    period = 1.0 / cfg.msg_rate if cfg.msg_rate > 0 else cfg.duration
    crossing = cfg.crossing or ("real_null_syscall" if fabric.virtual else "both")
    policy = PolicyEngine(cfg.policy) if cfg.policy is not None else None
    procs = []
    for p in range(n_proc):
        dev = fabric.add_device(p + 1, memory_size=4 * size + (1 << 20) +
                                (8 * size if cfg.ablations.no_zero_copy else 0))
        pd = dev.alloc_pd()
        scq, rcq = dev.create_cq(256), dev.create_cq(256)
        right = dev.create_qp(pd, Transport.RC, scq, rcq, 4, 4)
        left = dev.create_qp(pd, Transport.RC, scq, rcq, 4, 4)
        sbuf, rbuf = dev.alloc(size), dev.alloc(size)
        smr = dev.reg_mr(pd, sbuf, size, Access.LOCAL_WRITE)
        rmr = dev.reg_mr(pd, rbuf, size, Access.LOCAL_WRITE)
        dp = DataplanePath(dev, path, cfg.ablations, policy, crossing=crossing,
                           bounce_bytes=max(8 * (-(-size // 64) * 64), 4096))
        procs.append((dev, right, left, scq, rcq, sbuf, rbuf, smr, rmr, dp))
    for p in range(n_proc):
        a, b = procs[p], procs[(p + 1) % n_proc]
        fabric.connect(a[1], a[0], b[2], b[0])

    def role(dev, right, left, scq, rcq, sbuf, rbuf, smr, rmr, dp):
        rng = dev.cpu_rng
        jitter = 0.05
        swr = WorkRequest(1, Opcode.SEND, [Sge(sbuf, size, smr.lkey)])
        rwr = WorkRequest(2, Opcode.RECV, [Sge(rbuf, size, rmr.lkey)])
        if iters:
            dp.post_recv(left, rwr)
        sends = 0
        if not iters:
            yield Sleep(cfg.duration)
        for i in range(iters):
            yield Sleep(period * (1.0 + rng.uniform(-jitter, jitter)))
            if sends:
                sends -= len(dp.poll_cq(scq, 16))
            while sends >= 2:
                sends -= len((yield from dp.wait_cq(scq)))
            dp.post_send(right, swr)
            sends += 1
            wcs = yield from dp.wait_cq(rcq)
            if any(wc.status is not WCStatus.SUCCESS for wc in wcs):
                raise BenchError("app workload message failed")
            if i + 1 < iters:
                dp.post_recv(left, rwr)
        return dev.app_time if fabric.virtual else time.perf_counter()

    t0 = 0.0 if fabric.virtual else time.perf_counter()
    try:
        ends = _run_roles(fabric, [(p[0], role(*p)) for p in procs])
    finally:
        for p in procs:
            p[9].close()
        fabric.close()
    runtime = max(ends) - t0
    achieved = iters / runtime if runtime > 0 else 0.0
    return runtime, achieved


def run_app_workload(cfg: BenchConfig) -> list[ResultRow]:
    rows: list[ResultRow] = []
    size = cfg.sizes[0]
    results = {}
    for path in (PathMode.BYPASS, PathMode.CORD):
        pcfg = replace(cfg, client_path=path, server_path=path)
        runtime, achieved = measure_app(cfg, path, size)
        results[path] = runtime
        rows.append(_row(pcfg, "app", size, "runtime_s", runtime))
        rows.append(_row(pcfg, "app", size, "msg_rate_per_s", achieved))
        flag = 1.0 if cfg.msg_rate > 0 and achieved < 0.9 * cfg.msg_rate else 0.0
        rows.append(_row(pcfg, "app", size, "rate_flag", flag))
    cd = replace(cfg, client_path=PathMode.CORD, server_path=PathMode.CORD)
    bp = replace(cfg, client_path=PathMode.BYPASS, server_path=PathMode.BYPASS)
    base = results[PathMode.BYPASS]
    rel = results[PathMode.CORD] / base if base > 0 else 1.0
    rows.append(_row(cd, "app", size, "rel_runtime", rel,
                     f"{cd.run_id('app')}-vs-{bp.run_id('app')}"))
    per_op = cord_op_cost(cfg.cost) * 2
    pred, _ = predict_overhead(cfg.msg_rate, per_op)
    rows.append(_row(cd, "app", size, "predicted_overhead", pred))
    return rows


def cord_op_cost(cost: CostModel, desc_bytes: int = 56) -> float:
    """Modelled extra cost of one mediated post versus a bypass post."""
    return cost.syscall + cost.cord_driver + 2 * desc_bytes * cost.serialize_per_byte + \
        cost.policy_check


def run(cfg: BenchConfig) -> list[ResultRow]:
    cfg.validate()
    if cfg.mode == "lat":
        return run_lat(cfg)
    if cfg.mode == "bw":
        return run_bw_relative(cfg)
    if cfg.mode == "ablation":
        return run_ablation_suite(cfg)
    if cfg.mode == "matrix":
        return run_direction_matrix(cfg)
    return run_app_workload(cfg)


def median(xs) -> float:
    return statistics.median(xs)
