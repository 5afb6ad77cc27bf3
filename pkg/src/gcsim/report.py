"""Report building and emission: delimited records, a human table, and
rendered figures side by side in the report directory."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .cluster import percentile  # noqa: E402
from .params import MetricCategory  # noqa: E402

_PNG_METADATA = {"Software": "gcsim"}


@dataclass
class MetricsReport:
    status: str
    seed: int
    duration: float
    elapsed: float
    stalled_at: object
    latency: dict
    throughput: dict
    monitoring: dict
    per_node: dict
    reconfig_log: list
    fault_log: list
    events: list
    latencies: list               # per-request rows

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "seed": self.seed,
            "duration": self.duration,
            "elapsed": self.elapsed,
            "stalled_at": self.stalled_at,
            "latency": self.latency,
            "throughput": self.throughput,
            "monitoring": self.monitoring,
            "per_node": self.per_node,
            "reconfig_log": self.reconfig_log,
            "fault_log": self.fault_log,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _latency_stats(samples: list) -> dict:
    if not samples:
        return {"count": 0, "mean": None, "p50": None, "p90": None,
                "p99": None}
    ordered = sorted(samples)
    return {
        "count": len(ordered),
        "mean": sum(ordered) / len(ordered),
        "p50": percentile(ordered, 0.50),
        "p90": percentile(ordered, 0.90),
        "p99": percentile(ordered, 0.99),
    }


_CATEGORY_PREFIX = {
    "host.": MetricCategory.HOST.value,
    "net.": MetricCategory.NETWORK.value,
    "app.": MetricCategory.APPLICATION.value,
    "opt.": MetricCategory.OPTIMIZATION.value,
}


def _categorize(metrics: dict) -> dict:
    out = {c.value: {} for c in MetricCategory}
    for path, value in sorted(metrics.items()):
        for prefix, cat in _CATEGORY_PREFIX.items():
            if path.startswith(prefix):
                out[cat][path] = value
                break
    return out


def build_report(experiment) -> MetricsReport:
    rows = []
    for client in experiment.clients:
        for entry in client.completed:
            rows.append({
                "client": client.client_id,
                "seqno": entry["seqno"],
                "submit": entry["submit"],
                "reply_at": entry["reply_at"],
                "latency": entry["latency"],
                "bytes": entry["bytes"],
            })
    rows.sort(key=lambda r: (r["submit"], r["client"], r["seqno"]))
    samples = [r["latency"] for r in rows]
    duration = experiment.spec.duration
    elapsed = getattr(experiment, "elapsed", None) or \
        experiment.cluster.clock.now
    denominator = experiment.stalled_at or elapsed or duration
    completed = len(rows)
    submitted = sum(c.submitted for c in experiment.clients)
    total_bytes = sum(r["bytes"] for r in rows)

    per_node = {}
    rollup = {}
    for rid, replica in sorted(experiment.cluster.replicas.items()):
        if not replica.node.alive:
            per_node[str(rid)] = {"down": True}
            continue
        snap = replica.node.sample()
        per_node[str(rid)] = dict(sorted(snap.metrics.items()))
        for path, value in snap.metrics.items():
            if isinstance(value, (int, float)):
                rollup[path] = rollup.get(path, 0) + value

    reconfig_log = []
    for m in experiment.engine.audit_log:
        reconfig_log.append({
            "path": m.path, "value": str(m.value), "node": m.node,
            "requested_at": m.requested_at, "applied_at": m.applied_at,
            "outcome": m.outcome, "reason": m.reason,
        })

    return MetricsReport(
        status=experiment.status,
        seed=experiment.spec.seed,
        duration=duration,
        elapsed=elapsed,
        stalled_at=experiment.stalled_at,
        latency=_latency_stats(samples),
        throughput={
            "completed": completed,
            "submitted": submitted,
            "rps": completed / denominator if denominator else 0.0,
            "bytes_per_s": total_bytes / denominator if denominator else 0.0,
        },
        monitoring=_categorize(rollup),
        per_node=per_node,
        reconfig_log=reconfig_log,
        fault_log=list(experiment.fault_log),
        events=list(experiment.events),
        latencies=rows,
    )


def human_table(report: MetricsReport) -> str:
    lines = []
    lines.append(f"status       {report.status}")
    lines.append(f"seed         {report.seed}")
    lines.append(f"duration     {report.duration:.3f} s simulated")
    if report.stalled_at is not None:
        lines.append(f"stalled_at   {report.stalled_at:.3f} s")
    lat = report.latency
    if lat["count"]:
        lines.append("latency      mean {:.6f}  p50 {:.6f}  p90 {:.6f}  "
                     "p99 {:.6f}  ({} samples)".format(
                         lat["mean"], lat["p50"], lat["p90"], lat["p99"],
                         lat["count"]))
    else:
        lines.append("latency      no completed requests")
    thr = report.throughput
    lines.append("throughput   {:.3f} req/s   {:.1f} bytes/s   "
                 "({}/{} completed)".format(
                     thr["rps"], thr["bytes_per_s"], thr["completed"],
                     thr["submitted"]))
    lines.append(f"faults       {len(report.fault_log)}")
    lines.append(f"mutations    {len(report.reconfig_log)}")
    lines.append("")
    for cat, metrics in sorted(report.monitoring.items()):
        if not metrics:
            continue
        lines.append(f"[{cat}]")
        for path, value in sorted(metrics.items()):
            if isinstance(value, float):
                lines.append(f"  {path} = {value:.6g}")
            else:
                lines.append(f"  {path} = {value}")
    return "\n".join(lines) + "\n"


def latencies_csv(report: MetricsReport) -> str:
    lines = ["client,seqno,submit,reply_at,latency,bytes"]
    for r in report.latencies:
        lines.append("{client},{seqno},{submit!r},{reply_at!r},"
                     "{latency!r},{bytes}".format(**r))
    return "\n".join(lines) + "\n"


def events_jsonl(report: MetricsReport) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n"
                   for e in report.events)


def render_figures(report: MetricsReport, out_dir: str) -> list:
    """Latency and throughput figures next to the delimited output."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    samples = [r["latency"] for r in report.latencies]
    if samples:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.hist(samples, bins=min(40, max(5, len(samples) // 5)),
                color="#3b6ea5", edgecolor="white")
        ax.set_xlabel("request latency (s)")
        ax.set_ylabel("requests")
        ax.set_title("Latency distribution")
        path = os.path.join(out_dir, "latency_hist.png")
        fig.savefig(path, metadata=_PNG_METADATA)
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots(figsize=(6, 4))
        buckets = {}
        for r in report.latencies:
            buckets[int(r["reply_at"])] = buckets.get(int(r["reply_at"]),
                                                      0) + 1
        xs = sorted(buckets)
        ax.step(xs, [buckets[x] for x in xs], where="post",
                color="#a5503b")
        ax.set_xlabel("simulated time (s)")
        ax.set_ylabel("completed req/s")
        ax.set_title("Throughput over time")
        path = os.path.join(out_dir, "throughput.png")
        fig.savefig(path, metadata=_PNG_METADATA)
        plt.close(fig)
        written.append(path)
    return written


def emit_report(report: MetricsReport, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    def write(name: str, text: str) -> None:
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        paths[name] = path

    write("report.json", report.to_json() + "\n")
    write("report.txt", human_table(report))
    write("latencies.csv", latencies_csv(report))
    write("events.jsonl", events_jsonl(report))
    paths["figures"] = render_figures(report, os.path.join(out_dir,
                                                           "figures"))
    return paths


def sweep_csv(axis: str, results: list) -> str:
    lines = [f"{axis},status,completed,rps,latency_mean,latency_p50,"
             "latency_p90,latency_p99"]
    for value, report in results:
        lat = report.latency
        lines.append(",".join(str(x) for x in [
            value, report.status, report.throughput["completed"],
            repr(report.throughput["rps"]),
            repr(lat["mean"]) if lat["mean"] is not None else "",
            repr(lat["p50"]) if lat["p50"] is not None else "",
            repr(lat["p90"]) if lat["p90"] is not None else "",
            repr(lat["p99"]) if lat["p99"] is not None else "",
        ]))
    return "\n".join(lines) + "\n"


def sweep_table(axis: str, results: list) -> str:
    header = f"{axis:>16} | {'status':>9} | {'req/s':>10} | " \
             f"{'p50 (s)':>10} | {'p99 (s)':>10}"
    lines = [header, "-" * len(header)]
    for value, report in results:
        lat = report.latency
        p50 = f"{lat['p50']:.6f}" if lat["p50"] is not None else "-"
        p99 = f"{lat['p99']:.6f}" if lat["p99"] is not None else "-"
        lines.append(f"{str(value):>16} | {report.status:>9} | "
                     f"{report.throughput['rps']:>10.3f} | {p50:>10} | "
                     f"{p99:>10}")
    return "\n".join(lines) + "\n"


def render_sweep_figure(axis: str, results: list, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    xs = [float(v) for v, _ in results]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    p50 = [r.latency["p50"] for _, r in results]
    p99 = [r.latency["p99"] for _, r in results]
    if all(v is not None for v in p50):
        ax1.plot(xs, p50, marker="o", label="p50")
    if all(v is not None for v in p99):
        ax1.plot(xs, p99, marker="s", label="p99")
    ax1.set_xlabel(axis)
    ax1.set_ylabel("latency (s)")
    ax1.legend()
    ax2.plot(xs, [r.throughput["rps"] for _, r in results], marker="o",
             color="#3b8a5a")
    ax2.set_xlabel(axis)
    ax2.set_ylabel("req/s")
    fig.suptitle(f"Sweep over {axis}")
    path = os.path.join(out_dir, "sweep.png")
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def emit_sweep(axis: str, results: list, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    csv_path = os.path.join(out_dir, "sweep.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(sweep_csv(axis, results))
    paths["sweep.csv"] = csv_path
    txt_path = os.path.join(out_dir, "sweep.txt")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(sweep_table(axis, results))
    paths["sweep.txt"] = txt_path
    paths["sweep.png"] = render_sweep_figure(axis, results, out_dir)
    return paths
