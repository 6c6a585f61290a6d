"""Command-line entry point: ``dmlsm-bench``."""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import nullcontext
from pathlib import Path

from .bench import Bench, MetricsReport, memtable_stalls
from .cluster import ClusterConfig
from .engine import EngineConfig
from .errors import DmlsmError
from .fabric import LatencyModel
from .faults import FaultSchedule
from .workload import WorkloadKind, WorkloadSpec

MiB = 1 << 20


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmlsm-bench", description="Run a workload on the simulated cluster.")
    p.add_argument("--workload", choices=[k.value for k in WorkloadKind], default="fillrandom")
    p.add_argument("--ops", type=int, default=100_000)
    p.add_argument("--key-size", type=int, default=16)
    p.add_argument("--value-size", type=int, default=64)
    p.add_argument("--dist", choices=["uniform", "zipfian"], default="uniform")
    p.add_argument("--theta", type=float, default=0.99)
    p.add_argument("--read-ratio", type=float, default=0.5)
    p.add_argument("--key-space", type=int, default=None, help="distinct keys (default: --ops)")
    p.add_argument("--shards-k", type=int, default=0, help="shard bits k (2^k shards)")
    p.add_argument("--remote-memtables", "-K", type=int, default=6, metavar="K")
    p.add_argument("--local-memtables", type=int, default=2)
    p.add_argument("--memtable-mb", type=float, default=64.0)
    p.add_argument("--l0-slowdown", type=int, default=32)
    p.add_argument("--l0-stop", type=int, default=48)
    p.add_argument("--compute-nodes", type=int, default=1)
    p.add_argument("--dm-nodes", type=int, default=1)
    p.add_argument("--latency-config", type=Path, help="JSON object of latency model overrides")
    p.add_argument("--fault-schedule", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="line-delimited JSON output (default: stdout)")
    p.add_argument("--plot-dir", type=Path, help="write PNG figures here")
    p.add_argument("--sweep-remote", type=str, metavar="K1,K2,...",
                   help="repeat the run for each K and check stalls do not grow with K")
    p.add_argument("--quiet", action="store_true", help="skip the summary table on stderr")
    return p


def _configs(args, remote: int) -> tuple[WorkloadSpec, ClusterConfig]:
    spec = WorkloadSpec(WorkloadKind(args.workload), args.ops, args.key_size, args.value_size, args.dist,
                        args.theta, args.read_ratio, args.seed, args.key_space)
    engine = EngineConfig(memtable_limit_bytes=int(args.memtable_mb * MiB), local_memtable_max=args.local_memtables,
                          remote_memtable_max=remote, shard_bits=args.shards_k,
                          l0_slowdown_trigger=args.l0_slowdown, l0_stop_trigger=args.l0_stop, seed=args.seed)
    latency = LatencyModel()
    if args.latency_config:
        latency = LatencyModel.from_mapping(json.loads(args.latency_config.read_text()))
    cfg = ClusterConfig(compute_nodes=args.compute_nodes, dm_nodes=args.dm_nodes, engine=engine, latency=latency)
    return spec, cfg


def _run_once(args, remote: int) -> tuple[MetricsReport, Bench]:
    spec, cfg = _configs(args, remote)
    schedule = FaultSchedule.load(args.fault_schedule) if args.fault_schedule else None
    bench = Bench(spec, cfg, schedule)
    report = bench.run()
    report.extra["remote_memtables"] = remote
    return report, bench


def _plot(args, report: MetricsReport, bench: Bench) -> None:
    from . import plots

    fab = bench.cluster.fabric
    series = {cls: fab.window_series(cls) for cls in report.traffic if "->" in cls}
    plots.render_report(report, args.plot_dir, series, fab.window_us, bench.latencies)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ks = [int(x) for x in args.sweep_remote.split(",")] if args.sweep_remote else [args.remote_memtables]
    except ValueError:
        print("error: --sweep-remote expects comma-separated integers", file=sys.stderr)
        return 2
    reports = []
    try:
        with (args.out.open("w") if args.out else nullcontext(sys.stdout)) as fh:
            for k in ks:
                report, bench = _run_once(args, k)
                reports.append(report)
                report.write_jsonl(fh)
                if not args.quiet:
                    print(report.summary_table(), file=sys.stderr)
                    print(file=sys.stderr)
                if args.plot_dir and len(ks) == 1:
                    _plot(args, report, bench)
    except DmlsmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if len(ks) > 1:
        counts = [memtable_stalls(r) for r in reports]
        if args.plot_dir:
            from . import plots

            args.plot_dir.mkdir(parents=True, exist_ok=True)
            plots.remote_sweep(ks, counts, args.plot_dir)
        order = sorted(range(len(ks)), key=lambda i: ks[i])
        ordered = [counts[i] for i in order]
        ok = all(a >= b for a, b in zip(ordered, ordered[1:]))
        print(f"stall sweep K={[ks[i] for i in order]} stalls={ordered}: "
              f"{'non-increasing' if ok else 'NOT monotone'}", file=sys.stderr)
        if not ok:
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
