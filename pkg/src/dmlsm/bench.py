"""db_bench-style harness: drive a workload over a simulated cluster and report metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import IO

import numpy as np

from .cluster import Cluster, ClusterConfig
from .errors import NodeDown
from .faults import FaultSchedule
from .workload import OpKind, WorkloadKind, WorkloadSpec, operations, preload

RETRY_BACKOFF_US = 100_000.0
MAX_RETRIES = 200


@dataclass
class MetricsReport:
    workload: str
    ops: int
    sim_time_us: float
    ops_per_sec: float
    p50_us: float
    p99_us: float
    latency_by_op: dict[str, dict[str, float]]
    stall_events: dict[str, int]
    stall_time_us: dict[str, float]
    stop_events: int
    bytes_written_per_level: dict[int, int]
    user_bytes: int
    write_amplification: float
    traffic: dict[str, int]
    peak_window_bytes: dict[str, float]
    total_fabric_bytes: int
    flush_breakdown_us: dict[str, float]
    flush_jobs: int
    read_paths: dict[str, int]
    delegations: int
    cache_hits: int
    retries: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bytes_written_per_level"] = {str(k): v for k, v in self.bytes_written_per_level.items()}
        return d

    def records(self) -> list[dict]:
        """Line-delimited form: one record per metric family."""
        base = {"workload": self.workload, "ops": self.ops}
        out = [dict(base, record="summary", sim_time_us=self.sim_time_us, ops_per_sec=self.ops_per_sec,
                    p50_us=self.p50_us, p99_us=self.p99_us, write_amplification=self.write_amplification,
                    flush_jobs=self.flush_jobs, retries=self.retries, **self.extra)]
        for op, lat in sorted(self.latency_by_op.items()):
            out.append(dict(base, record="latency", op=op, **lat))
        for cause, n in sorted(self.stall_events.items()):
            out.append(dict(base, record="stall", cause=cause, events=n, time_us=self.stall_time_us[cause]))
        for level, n in sorted(self.bytes_written_per_level.items()):
            out.append(dict(base, record="level_bytes", level=level, bytes=n))
        for cls, n in sorted(self.traffic.items()):
            out.append(dict(base, record="traffic", link=cls, bytes=n, peak_window_bytes=self.peak_window_bytes.get(cls, 0.0)))
        out.append(dict(base, record="flush_breakdown", jobs=self.flush_jobs, **self.flush_breakdown_us))
        for path, n in sorted(self.read_paths.items()):
            out.append(dict(base, record="read_path", path=path, count=n))
        return out

    def write_jsonl(self, fh: IO[str]) -> None:
        for rec in self.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def summary_table(self) -> str:
        rows = [
            ("workload", self.workload),
            ("ops", f"{self.ops}"),
            ("simulated time (s)", f"{self.sim_time_us / 1e6:.3f}"),
            ("throughput (ops/s)", f"{self.ops_per_sec:,.0f}"),
            ("P50 / P99 latency (us)", f"{self.p50_us:.2f} / {self.p99_us:.2f}"),
        ]
        rows += [(f"stalls: {c}", f"{n} events, {self.stall_time_us[c] / 1e3:.1f} ms") for c, n in
                 sorted(self.stall_events.items())]
        rows += [(f"L{lvl} bytes written", f"{n:,}") for lvl, n in sorted(self.bytes_written_per_level.items())]
        rows.append(("write amplification", f"{self.write_amplification:.2f}"))
        rows += [(f"traffic {c}", f"{n:,} B (peak {self.peak_window_bytes.get(c, 0):,.0f} B/window)")
                 for c, n in sorted(self.traffic.items())]
        fb = self.flush_breakdown_us
        rows.append(("flush jobs", f"{self.flush_jobs}"))
        rows.append(("flush MP/FM/Flush/IF (ms)",
                     " / ".join(f"{fb[k] / 1e3:.2f}" for k in ("mp", "fm", "flush", "if"))))
        rows += [(f"reads via {p}", f"{n}") for p, n in sorted(self.read_paths.items())]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def _percentiles(xs: list[float]) -> dict[str, float]:
    if not xs:
        return {"count": 0, "p50_us": 0.0, "p99_us": 0.0, "mean_us": 0.0}
    a = np.asarray(xs)
    return {"count": len(xs), "p50_us": float(np.percentile(a, 50)), "p99_us": float(np.percentile(a, 99)),
            "mean_us": float(a.mean())}


class Bench:
    def __init__(self, spec: WorkloadSpec, cluster_cfg: ClusterConfig | None = None,
                 schedule: FaultSchedule | None = None):
        self.spec = spec
        self.cluster = Cluster(cluster_cfg or ClusterConfig())
        if schedule is not None:
            self.cluster.faults.install(schedule)
        self.retries = 0
        self.user_bytes = 0
        self.latencies: dict[str, list[float]] = {op.value: [] for op in OpKind}

    def _call(self, fn, *args):
        """Run a foreground op, waiting out compute-node crashes."""
        c = self.cluster
        for _ in range(MAX_RETRIES):
            try:
                return fn(c.engine(), *args)
            except NodeDown:
                self.retries += 1
                c.run(RETRY_BACKOFF_US)
        raise NodeDown(c.engine().node_id)

    def load(self) -> None:
        for key, value in preload(self.spec):
            self._call(lambda e, k, v: e.put(k, v), key, value)
        self._call(lambda e: e.flush())

    def run(self, settle: bool = True) -> MetricsReport:
        c = self.cluster
        fab = c.fabric
        if self.spec.kind == WorkloadKind.READRANDOM:
            self.load()
        traffic0 = dict(fab.traffic_by_class())
        level0 = self._level_bytes()
        t0 = fab.now
        for op, key, value in operations(self.spec):
            start = fab.now
            if op == OpKind.PUT:
                self._call(lambda e, k, v: e.put(k, v), key, value)
                self.user_bytes += len(key) + len(value)
            elif op == OpKind.DELETE:
                self._call(lambda e, k: e.delete(k), key)
                self.user_bytes += len(key)
            else:
                self._call(lambda e, k: e.get(k), key)
            self.latencies[op.value].append(fab.now - start)
        elapsed = fab.now - t0
        if settle:
            self._call(lambda e: e.flush())
        return self.report(elapsed, traffic0, level0)

    def _level_bytes(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for node in self.cluster.ds_nodes.values():
            for lvl, n in node.bytes_written_by_level.items():
                out[lvl] = out.get(lvl, 0) + n
        return out

    def report(self, elapsed_us: float, traffic0: dict[str, int] | None = None,
               level0: dict[int, int] | None = None) -> MetricsReport:
        c = self.cluster
        fab = c.fabric
        traffic0 = traffic0 or {}
        level0 = level0 or {}
        traffic = {k: v - traffic0.get(k, 0) for k, v in fab.traffic_by_class().items()}
        traffic = {k: v for k, v in traffic.items() if v}
        levels = {k: v - level0.get(k, 0) for k, v in self._level_bytes().items()}
        all_lat = [x for xs in self.latencies.values() for x in xs]
        overall = _percentiles(all_lat)
        engines = [n.engine for n in c.cns.values()]
        stall_events: dict[str, int] = {}
        stall_time: dict[str, float] = {}
        stop_events = 0
        read_paths: dict[str, int] = {}
        breakdowns = []
        delegations = cache_hits = flush_jobs = 0
        for e in engines:
            for k, v in e.stall.events.items():
                stall_events[k] = stall_events.get(k, 0) + v
                stall_time[k] = stall_time.get(k, 0.0) + e.stall.time_us[k]
            stop_events += e.stall.stop_events
            for k, v in e.stats.read_paths.items():
                read_paths[k] = read_paths.get(k, 0) + v
            breakdowns += e.stats.breakdowns
            delegations += e.stats.delegations
            cache_hits += e.stats.cache_hits
            flush_jobs += e.stats.finalized
        fb = {k: float(np.mean([getattr(b, f"{k}_us") for b in breakdowns])) if breakdowns else 0.0
              for k in ("mp", "fm", "flush", "if")}
        ops = sum(len(v) for v in self.latencies.values())
        flushed = sum(levels.values())
        return MetricsReport(
            workload=self.spec.kind.value,
            ops=ops,
            sim_time_us=elapsed_us,
            ops_per_sec=ops / (elapsed_us / 1e6) if elapsed_us > 0 else 0.0,
            p50_us=overall["p50_us"],
            p99_us=overall["p99_us"],
            latency_by_op={k: _percentiles(v) for k, v in self.latencies.items() if v},
            stall_events=stall_events,
            stall_time_us=stall_time,
            stop_events=stop_events,
            bytes_written_per_level=levels,
            user_bytes=self.user_bytes,
            write_amplification=flushed / self.user_bytes if self.user_bytes else 0.0,
            traffic=traffic,
            peak_window_bytes={k: fab.peak_window(k) for k in traffic},
            total_fabric_bytes=sum(traffic.values()),
            flush_breakdown_us=fb,
            flush_jobs=flush_jobs,
            read_paths=read_paths,
            delegations=delegations,
            cache_hits=cache_hits,
            retries=self.retries,
        )


def run(spec: WorkloadSpec, cluster_cfg: ClusterConfig | None = None,
        schedule: FaultSchedule | None = None) -> MetricsReport:
    return Bench(spec, cluster_cfg, schedule).run()


def memtable_stalls(report: MetricsReport) -> int:
    return report.stall_events.get("memtable_backpressure", 0)


__all__ = ["Bench", "MetricsReport", "memtable_stalls", "run"]
