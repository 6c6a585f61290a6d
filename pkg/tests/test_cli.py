import json

import pytest

from dmlsm.cli import build_parser, main

SMALL = ["--ops", "3000", "--memtable-mb", "0.0625", "--key-space", "5000", "--seed", "3"]


def _records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_defaults_parse():
    a = build_parser().parse_args([])
    assert a.workload == "fillrandom" and a.remote_memtables >= 1 and a.plot_dir is None


def test_run_writes_jsonl(tmp_path, capsys):
    out = tmp_path / "r.jsonl"
    assert main(SMALL + ["--quiet", "--out", str(out)]) == 0
    recs = _records(out)
    assert {"summary"} <= {r["record"] for r in recs}
    assert capsys.readouterr().err == ""


def test_summary_table_goes_to_stderr(tmp_path, capsys):
    assert main(SMALL + ["--out", str(tmp_path / "r.jsonl")]) == 0
    assert "throughput (ops/s)" in capsys.readouterr().err


def test_plot_dir_renders_figures(tmp_path):
    plots = tmp_path / "plots"
    assert main(SMALL + ["--quiet", "--out", str(tmp_path / "r.jsonl"), "--plot-dir", str(plots)]) == 0
    names = {p.name for p in plots.glob("*.png")}
    assert {"stalls.png", "level_bytes.png", "flush_breakdown.png", "traffic_windows.png",
            "latency_cdf.png"} <= names


def test_sweep_remote_reports_monotonicity(tmp_path, capsys):
    plots = tmp_path / "plots"
    code = main(SMALL + ["--quiet", "--out", str(tmp_path / "r.jsonl"), "--sweep-remote", "1,4",
                         "--plot-dir", str(plots)])
    err = capsys.readouterr().err
    assert "stall sweep K=[1, 4]" in err
    assert code == (0 if "non-increasing" in err else 1)
    assert (plots / "stalls_vs_k.png").exists()
    assert len([r for r in _records(tmp_path / "r.jsonl") if r["record"] == "summary"]) == 2


@pytest.mark.parametrize("sweep", ["1,x", "", "4;5"])
def test_bad_sweep_list(sweep, tmp_path, capsys):
    args = SMALL + ["--quiet", "--out", str(tmp_path / "r.jsonl"), "--sweep-remote", sweep]
    if sweep == "":
        assert main(args) == 0  # empty means no sweep
        return
    assert main(args) == 2
    assert "expects comma-separated integers" in capsys.readouterr().err


def test_latency_config_file(tmp_path):
    cfg = tmp_path / "lat.json"
    out_a, out_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(SMALL + ["--quiet", "--out", str(out_a)]) == 0
    cfg.write_text(json.dumps({"wal_append_us": 10}))
    assert main(SMALL + ["--quiet", "--out", str(out_b), "--latency-config", str(cfg)]) == 0
    sim = lambda p: next(r for r in _records(p) if r["record"] == "summary")["sim_time_us"]
    assert sim(out_b) > sim(out_a)


def test_unknown_latency_key_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "lat.json"
    cfg.write_text(json.dumps({"warp_speed": 9}))
    assert main(SMALL + ["--quiet", "--out", str(tmp_path / "r.jsonl"), "--latency-config", str(cfg)]) == 2
    assert "unknown latency keys" in capsys.readouterr().err


def test_fault_schedule_file(tmp_path):
    faults = tmp_path / "faults.txt"
    faults.write_text("at=20000 crash=dm0\nat=200000 restart=dm0\n")
    out = tmp_path / "r.jsonl"
    assert main(SMALL + ["--quiet", "--out", str(out), "--fault-schedule", str(faults)]) == 0
    assert any(r["record"] == "summary" for r in _records(out))


def test_bad_fault_schedule(tmp_path, capsys):
    faults = tmp_path / "faults.txt"
    faults.write_text("hook=nowhere\n")
    assert main(SMALL + ["--quiet", "--out", str(tmp_path / "r.jsonl"), "--fault-schedule", str(faults)]) == 2
