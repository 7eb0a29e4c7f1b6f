"""Shape checks over benchmark results.

Absolute timings from an emulator mean little; these checks assert the
relationships between configurations instead (who pays what, and how the
cost scales with message size).
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np

from ..dataplane import PathMode
from . import stats
from .harness import BenchConfig, ResultRow, measure_app, measure_lat

BP, CD = PathMode.BYPASS, PathMode.CORD


@dataclass(frozen=True)
class ShapeResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _series(rows, metric: str, **match) -> dict[int, float]:
    out = {}
    for r in rows:
        if r.metric == metric and all(getattr(r, k) == v for k, v in match.items()):
            out[r.size] = r.value
    return dict(sorted(out.items()))


# ---------------------------------------------------------------- ablation

def check_ablation(rows: list[ResultRow]) -> list[ShapeResult]:
    zc = _series(rows, "overhead_us", ablations="no-zc")
    poll = _series(rows, "overhead_us", ablations="no-poll")
    byp = _series(rows, "overhead_us", ablations="no-bypass")
    out = []
    if len(zc) >= 2:
        slope, _, r2 = stats.linear_fit(list(zc), list(zc.values()))
        ratio = zc.get(1048576, float("nan")) / zc.get(4096, float("nan"))
        ok = r2 >= 0.9 and slope > 0 and 100 <= ratio <= 600
        out.append(ShapeResult("no-zc overhead linear in size", ok,
                               f"R2={r2:.4f} slope={slope * 1e3:.4g} us/KB "
                               f"ratio(1MiB/4KiB)={ratio:.1f}"))
    if poll:
        spread = stats.spread_ratio(list(poll.values()))
        out.append(ShapeResult("no-poll overhead flat", spread <= 5,
                               f"max/min={spread:.3f} values_us={_fmt(poll)}"))
    if byp:
        spread = stats.spread_ratio(list(byp.values()))
        below = all(byp[s] < poll.get(s, float("-inf")) for s in byp)
        out.append(ShapeResult("no-bypass overhead flat and below no-poll",
                               spread <= 3 and below,
                               f"max/min={spread:.3f} below_poll={below} values_us={_fmt(byp)}"))
    return out


def _fmt(series: dict[int, float]) -> str:
    return ",".join(f"{k}:{v:.3f}" for k, v in series.items())


# ------------------------------------------------------- repeated matrices

def repeated_lat(cfg: BenchConfig, seeds) -> dict[int, list[float]]:
    """Median latency per size for each seed."""
    out: dict[int, list[float]] = defaultdict(list)
    for seed in seeds:
        scfg = replace(cfg, seed=seed)
        for size in cfg.sizes:
            out[size].append(measure_lat(scfg, size)[0])
    return out


def check_cord_constancy(cfg: BenchConfig, seeds=range(1, 31)) -> list[ShapeResult]:
    """CD->CD send overhead is roughly the same at every size and reliably positive."""
    cfg = replace(cfg, op="send")
    base = repeated_lat(replace(cfg, client_path=BP, server_path=BP), seeds)
    cord = repeated_lat(replace(cfg, client_path=CD, server_path=CD), seeds)
    overhead = {s: float(np.median(cord[s]) - np.median(base[s])) for s in cfg.sizes}
    spread = stats.spread_ratio(list(overhead.values()))
    pvals = {s: stats.sign_test(np.subtract(cord[s], base[s])).pvalue for s in cfg.sizes}
    worst = max(pvals.values())
    return [
        ShapeResult("CD->CD overhead constant across sizes", spread <= 2,
                    f"max/min={spread:.3f} overhead_us={_fmt(overhead)}"),
        ShapeResult("CD->CD overhead positive (sign test)", worst < 0.05,
                    f"worst p={worst:.3g} over {len(list(seeds))} repetitions"),
    ]


def check_read_asymmetry(cfg: BenchConfig, seeds=range(1, 31)) -> list[ShapeResult]:
    """Mediating only the responder leaves RDMA read untouched; the requester side does not."""
    cfg = replace(cfg, op="read", transport="rc")
    base = repeated_lat(replace(cfg, client_path=BP, server_path=BP), seeds)
    srv = repeated_lat(replace(cfg, client_path=BP, server_path=CD), seeds)
    cli = repeated_lat(replace(cfg, client_path=CD, server_path=BP), seeds)
    out = []
    for size in cfg.sizes:
        floor = stats.noise_floor(base[size])
        ref = float(np.median(base[size]))
        o_srv = float(np.median(srv[size])) - ref
        o_cli = float(np.median(cli[size])) - ref
        out.append(ShapeResult(f"read asymmetry {size} B", o_srv <= floor < o_cli,
                               f"floor={floor:.4f} BP->CD={o_srv:.4f} CD->BP={o_cli:.4f} us"))
    return out


def check_additivity(rows: list[ResultRow]) -> list[ShapeResult]:
    out = []
    over = {
        (cp, sp): _series(rows, "overhead_us", op="send", client_path=cp, server_path=sp)
        for cp, sp in (("cd", "cd"), ("cd", "bp"), ("bp", "cd"))
    }
    for size, both in over[("cd", "cd")].items():
        one = over[("cd", "bp")].get(size)
        two = over[("bp", "cd")].get(size)
        if one is None or two is None:
            continue
        gap = abs(both - one - two)
        out.append(ShapeResult(f"side additivity {size} B", gap <= 0.3 * abs(both),
                               f"CD->CD={both:.3f} CD->BP={one:.3f} BP->CD={two:.3f} "
                               f"gap={gap:.3f} us"))
    return out


def check_read_rows(rows: list[ResultRow]) -> list[ShapeResult]:
    """Single-run read asymmetry for ``--check`` (no noise floor available)."""
    srv = _series(rows, "overhead_us", op="read", client_path="bp", server_path="cd")
    cli = _series(rows, "overhead_us", op="read", client_path="cd", server_path="bp")
    return [ShapeResult(f"read asymmetry {s} B", srv[s] < cli[s],
                        f"BP->CD={srv[s]:.4f} CD->BP={cli[s]:.4f} us")
            for s in srv if s in cli]


# -------------------------------------------------------------- throughput

def check_throughput(rel: dict[int, float], eps: float = 0.05) -> list[ShapeResult]:
    sizes = sorted(rel)
    vals = [rel[s] for s in sizes]
    trend = stats.trend_test(sizes, vals)
    smallest_is_worst = vals[0] <= min(vals)
    bounded = all(0 < v <= 1 + eps for v in vals)
    return [
        ShapeResult("CD/BP throughput rises with size", trend.significant(0.05),
                    f"tau={trend.statistic:.3f} p={trend.pvalue:.3g}"),
        ShapeResult("CD/BP throughput near 1 at largest size", vals[-1] >= 0.95,
                    f"rel({sizes[-1]})={vals[-1]:.4f}"),
        ShapeResult("CD/BP degradation maximal at smallest size",
                    smallest_is_worst and bounded,
                    "rel=" + ",".join(f"{s}:{v:.3f}" for s, v in zip(sizes, vals))),
    ]


def rel_from_rows(rows: list[ResultRow]) -> dict[int, float]:
    return _series(rows, "rel_throughput")


# ---------------------------------------------------------------------- app

def check_app_low_rate(cfg: BenchConfig) -> ShapeResult:
    bp, _ = measure_app(cfg, BP, cfg.sizes[0])
    cd, _ = measure_app(cfg, CD, cfg.sizes[0])
    rel = cd / bp
    return ShapeResult(f"app {cfg.msg_rate:g} msg/s CD within 3% of BP", abs(rel - 1) <= 0.03,
                       f"BP={bp:.6f}s CD={cd:.6f}s rel={rel:.5f}")


def check_app_high_rate(cfg: BenchConfig, seeds=range(1, 11)) -> ShapeResult:
    diffs = []
    for seed in seeds:
        scfg = replace(cfg, seed=seed)
        bp, _ = measure_app(scfg, BP, cfg.sizes[0])
        cd, _ = measure_app(scfg, CD, cfg.sizes[0])
        diffs.append(cd - bp)
    res = stats.sign_test(diffs)
    return ShapeResult(f"app {cfg.msg_rate:g} msg/s CD slower (sign test)", res.significant(),
                       f"p={res.pvalue:.3g} median slowdown={np.median(diffs) * 1e3:.3f} ms")


def check_rows(mode: str, rows: list[ResultRow]) -> list[ShapeResult]:
    """Checks that can be evaluated from a single run's rows (used by ``--check``)."""
    if mode == "ablation":
        return check_ablation(rows)
    if mode == "matrix":
        return check_additivity(rows) + check_read_rows(rows)
    if mode == "bw":
        rel = rel_from_rows(rows)
        return check_throughput(rel) if len(rel) >= 3 else []
    if mode == "app":
        rel = next((r.value for r in rows if r.metric == "rel_runtime"), None)
        pred = next((r.value for r in rows if r.metric == "predicted_overhead"), None)
        if rel is None or pred is None:
            return []
        measured = rel - 1.0
        return [ShapeResult("app overhead within 3x prediction", measured <= 3 * pred + 1e-9,
                            f"measured={measured:.5f} predicted={pred:.5f}")]
    vals = [r.value for r in rows if r.metric == "lat_median_us"]
    return [ShapeResult("latency positive and finite",
                        bool(vals) and all(np.isfinite(v) and v > 0 for v in vals),
                        f"{len(vals)} medians")]
