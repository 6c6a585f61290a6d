"""Figures for bench reports.  Kept apart from the core so the engine never imports matplotlib."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import MetricsReport  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, out_dir: Path, name: str) -> Path:
    path = out_dir / f"{name}.png"
    fig.savefig(path)
    plt.close(fig)
    return path


def traffic_series(series: dict[str, dict[int, float]], window_us: float, out_dir: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for cls, pts in sorted(series.items()):
            if not pts:
                continue
            xs = range(min(pts), max(pts) + 1)  # idle windows are absent from the series
            ax.plot([x * window_us / 1e3 for x in xs], [pts.get(x, 0.0) / 1024 for x in xs], lw=0.8, label=cls)
        ax.set_xlabel("simulated time (ms)")
        ax.set_ylabel(f"KiB per {window_us / 1e3:g} ms window")
        ax.set_title("Per-link traffic")
        ax.legend(frameon=False)
        return _save(fig, out_dir, "traffic_windows")


def stalls(report: MetricsReport, out_dir: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        causes = sorted(report.stall_events)
        ax.bar(causes, [report.stall_events[c] for c in causes], color="#4c72b0")
        ax.set_ylabel("stall events")
        ax.set_title("Write stalls by cause")
        return _save(fig, out_dir, "stalls")


def level_bytes(report: MetricsReport, out_dir: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        levels = sorted(report.bytes_written_per_level)
        ax.bar([f"L{lvl}" for lvl in levels], [report.bytes_written_per_level[lvl] / 2**20 for lvl in levels],
               color="#55a868")
        ax.set_ylabel("MiB written")
        ax.set_title(f"Bytes written per level (WA {report.write_amplification:.2f})")
        return _save(fig, out_dir, "level_bytes")


def flush_breakdown(report: MetricsReport, out_dir: Path) -> Path:
    parts = [("mp", "MP"), ("fm", "FM/other"), ("flush", "Flush"), ("if", "IF")]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 1.8))
        left = 0.0
        for key, label in parts:
            v = report.flush_breakdown_us.get(key, 0.0) / 1e3
            ax.barh([0], [v], left=left, label=label)
            left += v
        ax.set_yticks([])
        ax.set_xlabel("mean time per flush job (ms)")
        ax.legend(ncol=4, frameon=False, loc="upper center", bbox_to_anchor=(0.5, 1.45))
        return _save(fig, out_dir, "flush_breakdown")


def latency_cdf(latencies: dict[str, list[float]], out_dir: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for op, xs in sorted(latencies.items()):
            if not xs:
                continue
            xs = sorted(xs)
            n = len(xs)
            ax.plot(xs, [(i + 1) / n for i in range(n)], lw=1.0, label=op)
        ax.set_xscale("log")
        ax.set_xlabel("latency (us, simulated)")
        ax.set_ylabel("CDF")
        ax.legend(frameon=False)
        return _save(fig, out_dir, "latency_cdf")


def remote_sweep(ks: list[int], counts: list[int], out_dir: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(ks, counts, marker="o")
        ax.set_xscale("log", base=2)
        ax.set_xticks(ks, [str(k) for k in ks])
        ax.set_xlabel("remote memtables K")
        ax.set_ylabel("memtable-induced stalls")
        ax.set_title("Stalls vs remote memtable budget")
        return _save(fig, out_dir, "stalls_vs_k")


def render_report(report: MetricsReport, out_dir, series: dict[str, dict[int, float]] | None = None,
                  window_us: float = 1000.0, latencies: dict[str, list[float]] | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [stalls(report, out), level_bytes(report, out), flush_breakdown(report, out)]
    if series:
        paths.append(traffic_series(series, window_us, out))
    if latencies:
        paths.append(latency_cdf(latencies, out))
    return paths


__all__ = ["flush_breakdown", "latency_cdf", "level_bytes", "remote_sweep", "render_report", "stalls",
           "traffic_series"]
