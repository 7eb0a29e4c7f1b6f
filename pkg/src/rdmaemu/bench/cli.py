"""``bench`` command line entry point."""
from __future__ import annotations

import argparse
import logging
import sys

from ..dataplane import AblationFlags, PathMode
from ..policy import PolicyError, PolicySpec
from ..sim import CostModel, Timeout
from . import report, shapes
from .harness import BenchConfig, BenchError, run

EXIT_OK, EXIT_ERROR, EXIT_CHECK = 0, 1, 2
log = logging.getLogger("rdmaemu.bench")


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s, 0) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None
    if not sizes:
        raise argparse.ArgumentTypeError("empty size list")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="RDMA emulator microbenchmarks.")
    p.add_argument("--mode", choices=["lat", "bw", "ablation", "matrix", "app"], default="lat")
    p.add_argument("--transport", choices=["rc", "ud"], default="rc")
    p.add_argument("--op", choices=["send", "read", "write"], default="send")
    p.add_argument("--size-list", type=_sizes, default=[16, 4096, 65536, 1048576])
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--tx-depth", type=int, default=None,
                   help="outstanding sends (lat always uses 1; bw default 64)")
    p.add_argument("--warmup", type=int, default=None,
                   help="warmup iterations (default 10%% of iters, at least 100)")
    p.add_argument("--client-path", choices=["bp", "cd"], default="bp")
    p.add_argument("--server-path", choices=["bp", "cd"], default="bp")
    p.add_argument("--ablate", default="", help="comma list of no-zc,no-poll,no-bypass")
    p.add_argument("--wire", choices=["inproc", "udp"], default="inproc")
    p.add_argument("--policy", metavar="FILE", help="policy file for mediated paths")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", metavar="FILE.csv", help="append rows here instead of stdout")
    p.add_argument("--clock", choices=["virtual", "real"], default="virtual")
    p.add_argument("--crossing", choices=["proxy_context", "real_null_syscall", "both"],
                   default=None)
    p.add_argument("--cost-model", metavar="FILE", help="cost model overrides (JSON object or name-value lines)")
    p.add_argument("--bw-bytes", type=int, default=256 << 20,
                   help="byte budget that caps bw iterations at large sizes")
    p.add_argument("--processes", type=int, default=4)
    p.add_argument("--msg-rate", type=float, default=1300.0)
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--figures", metavar="DIR", help="also render PNG figures into DIR")
    p.add_argument("--check", action="store_true",
                   help="evaluate shape checks; exit 2 if any fails")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(a: argparse.Namespace) -> BenchConfig:
    policy = PolicySpec.from_file(a.policy) if a.policy else None
    cost = CostModel.from_file(a.cost_model) if a.cost_model else CostModel()
    clock = "real" if a.wire == "udp" else a.clock
    return BenchConfig(
        mode=a.mode, transport=a.transport, op=a.op, sizes=a.size_list, iters=a.iters,
        tx_depth=a.tx_depth, warmup=a.warmup, client_path=PathMode.parse(a.client_path),
        server_path=PathMode.parse(a.server_path), ablations=AblationFlags.parse(a.ablate),
        wire=a.wire, seed=a.seed, clock=clock, policy=policy, cost=cost, crossing=a.crossing,
        bw_bytes=a.bw_bytes, processes=a.processes, msg_rate=a.msg_rate, duration=a.duration,
    ).validate()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        rows = run(cfg)
    except (BenchError, PolicyError, Timeout, ValueError, OSError) as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.out:
        report.append_csv(args.out, rows)
        log.info("wrote %d rows to %s", len(rows), args.out)
    else:
        sys.stdout.write(report.to_csv(rows))
    if args.figures:
        for path in report.render_figures(rows, args.figures):
            log.info("figure %s", path)
    if args.check:
        results = shapes.check_rows(cfg.mode, rows)
        for r in results:
            print(r.line(), file=sys.stderr)
        if not all(r.passed for r in results):
            return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
