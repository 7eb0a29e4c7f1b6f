"""CSV output and optional figures."""
from __future__ import annotations

import csv
import io
import os
from collections import defaultdict

from .harness import ResultRow

HEADER = list(ResultRow.FIELDS)


def to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()


def append_csv(path: str, rows: list[ResultRow]) -> None:
    """Append rows, writing the header only when the file is new or empty."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(HEADER)
        for r in rows:
            w.writerow(r.as_list())


def read_csv(path: str) -> list[ResultRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [ResultRow(d["run_id"], d["mode"], d["transport"], d["op"], int(d["size"]),
                          d["client_path"], d["server_path"], d["ablations"], d["metric"],
                          float(d["value"]), d["unit"], int(d["seed"])) for d in rd]


def render_figures(rows: list[ResultRow], outdir: str) -> list[str]:
    """Write one PNG per metric family present in ``rows``; returns the paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(outdir, exist_ok=True)
    written = []
    groups: dict[str, dict[str, list[tuple[int, float]]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        label = f"{r.op} {r.client_path}->{r.server_path} {r.ablations}"
        groups[r.metric][label].append((r.size, r.value))
    for metric in ("lat_median_us", "overhead_us", "bw_gbps", "rel_throughput"):
        series = groups.get(metric)
        if not series:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, pts in sorted(series.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        ax.set_xscale("log", base=2)
        if metric in ("lat_median_us", "overhead_us"):
            vals = [v for pts in series.values() for _, v in pts]
            if vals and min(vals) > 0:
                ax.set_yscale("log")
        ax.set_xlabel("message size (bytes)")
        ax.set_ylabel(metric)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = os.path.join(outdir, f"{metric}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
