import json
import subprocess
import sys

import pytest

from framkit.cli import (
    COUNTERS,
    ConfigError,
    RunConfig,
    RunReport,
    Workload,
    bench_sweep,
    emit,
    main,
    parse_report,
    render,
    run,
    trial_seed,
)


def test_empty_sort_passes():
    rep = run(RunConfig(command="sort", n=0))
    (t,) = rep.trials
    assert t.verdict == "PASS" and t.counters["comparisons"] == 0


def test_runs_are_deterministic():
    cfg = RunConfig(command="sort", n=1024, delta=0, trials=3, seed=7)
    assert render(run(cfg)) == render(run(cfg))


def test_faulty_runs_are_deterministic():
    cfg = RunConfig(command="pq", n=300, s=4, delta=16, adversary="PQAttack", trials=2,
                    seed=3, workload="1:1:800")
    assert render(run(cfg), "csv") == render(run(cfg), "csv")


def test_pq_attack_trials_pass():
    cfg = RunConfig(command="pq", n=4096, s=16, delta=256, adversary="PQAttack", trials=3,
                    workload="1:1:2000")
    rep = run(cfg)
    assert not rep.failed and len(rep.trials) == 3


@pytest.mark.parametrize("command", ["sort", "merge"])
@pytest.mark.parametrize("adv", ["RandomUniform:p=0.01", "InversionAttack", "BucketAttack"])
def test_small_runs_pass(command, adv):
    rep = run(RunConfig(command=command, n=500, s=4, delta=20, adversary=adv, trials=2))
    assert not rep.failed, [t.problems for t in rep.trials]


def test_trial_seeds_differ():
    seeds = {trial_seed(1, i) for i in range(100)}
    assert len(seeds) == 100 and all(s < 1 << 64 for s in seeds)


def test_budget_exhausted_flag():
    rep = run(RunConfig(command="sort", n=400, s=4, delta=8, adversary="InversionAttack"))
    (t,) = rep.trials
    assert t.counters["alpha_used"] == 8 and "budget_exhausted" in t.flags
    assert t.verdict == "PASS"


@pytest.mark.parametrize("bad", [
    dict(n=-1), dict(delta=-2), dict(s=0), dict(trials=0), dict(adversary="Nope"),
    dict(format="xml"), dict(workload="2:1"), dict(adversary="TraceReplay"),
    dict(command="pq", workload="0:0"), dict(command="pq", workload="a:b"),
    dict(adversary="RandomUniform:p=2"),
])
def test_bad_configs(bad):
    with pytest.raises(ConfigError):
        run(RunConfig(**bad))


def test_bad_c_safe_env(monkeypatch):
    monkeypatch.setenv("FRAMKIT_CSAFE", "zero")
    with pytest.raises(ConfigError):
        run(RunConfig(n=4))


def test_c_safe_env_echoed(monkeypatch):
    monkeypatch.setenv("FRAMKIT_CSAFE", "24")
    assert run(RunConfig(n=4)).config["c_safe"] == 24


def test_workload_parse():
    assert Workload.parse(None) == Workload(2, 1, 10_000)
    assert Workload.parse("3:1") == Workload(3, 1, 10_000)
    assert Workload.parse("1:1:50") == Workload(1, 1, 50)


def _two_trials():
    return run(RunConfig(command="sort", n=64, s=4, delta=4, adversary="RandomUniform:p=0.05",
                         trials=2, seed=5))


def test_csv_empty_report_is_header_only():
    text = render(RunReport(RunConfig().echo()), "csv")
    assert len(text.splitlines()) == 1
    header = text.strip().split(",")
    assert "verdict" in header and set(COUNTERS) <= set(header)


def test_csv_two_trials_three_lines():
    assert len(render(_two_trials(), "csv").splitlines()) == 3


def test_json_round_trip():
    rep = _two_trials()
    assert parse_report(render(rep, "json")) == rep


def test_emit_to_file(tmp_path):
    rep = _two_trials()
    out = tmp_path / "r.json"
    emit(rep, "json", str(out))
    assert parse_report(out.read_text()) == rep


def test_emit_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        emit(_two_trials(), "csv", str(tmp_path / "missing" / "r.csv"))


def test_replay_from_report_config():
    rep = run(RunConfig(command="pq", n=200, s=4, delta=8, adversary="RandomUniform:p=0.01",
                        trials=2, workload="2:1:600", seed=9))
    cfg = RunConfig(**{k: v for k, v in rep.config.items() if k != "c_safe"})
    again = run(cfg)
    assert [t.counters for t in again.trials] == [t.counters for t in rep.trials]


def test_trace_export_and_replay(tmp_path):
    path = str(tmp_path / "t.jsonl")
    cfg = RunConfig(command="sort", n=300, s=4, delta=12, adversary="InversionAttack",
                    trials=2, seed=4, trace=path)
    rep = run(cfg)
    again = run(RunConfig(command="sort", n=300, s=4, delta=12, adversary="TraceReplay",
                          trials=2, seed=4, trace=path))
    assert [t.counters for t in again.trials] == [t.counters for t in rep.trials]
    assert sum(t.counters["alpha_used"] for t in rep.trials) > 0


def test_bench_delta_zero_has_no_overhead():
    rows = bench_sweep(RunConfig(command="bench", n=512, trials=2),
                       {"delta": [0], "adversary": ["NoFaults", "InversionAttack", "RandomUniform:p=0.1"],
                        "s": [2, 16]})
    assert len(rows) == 6
    assert all(r["mean_overhead"] == 0 and r["mean_alpha"] == 0 for r in rows)


def test_bench_larger_s_costs_less():
    rows = bench_sweep(RunConfig(command="bench", n=1 << 14, delta=1 << 10,
                                 adversary="InversionAttack"), {"s": [4, 64]})
    small, big = rows
    assert (small["s"], big["s"]) == (4, 64)
    assert big["mean_overhead"] <= small["mean_overhead"]


def test_bench_single_cell_matches_run():
    base = RunConfig(command="bench", n=256, s=8, delta=16, adversary="BucketAttack", trials=2)
    (row,) = bench_sweep(base, {})
    rep = run(RunConfig(command="sort", n=256, s=8, delta=16, adversary="BucketAttack", trials=2))
    assert row["mean_comparisons"] == rep.aggregate["mean"]["comparisons"]
    assert row["mean_overhead"] == rep.aggregate["mean"]["overhead"]


def test_bench_rejects_unknown_axis():
    with pytest.raises(ConfigError):
        bench_sweep(RunConfig(), {"trials": [1, 2]})


def test_main_exit_codes(capsys, tmp_path):
    assert main(["sort", "--n", "100", "--delta", "4", "--s", "4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["trials"][0]["verdict"] == "PASS"
    assert main(["sort", "--n", "-3"]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["sort", "--n", "1,2"]) == 2
    assert main(["pq", "--adversary", "A", "--adversary", "B"]) == 2
    assert main(["bench", "--n", "64,128", "--delta", "0,4", "--s", "4", "--format", "csv"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 5


def test_main_failing_trial_exits_one(monkeypatch):
    import framkit.cli as cli

    monkeypatch.setitem(cli._DRIVERS, "sort", lambda m, cfg, seed: ["planted failure"])
    assert main(["sort", "--n", "4", "--out", "/dev/null"]) == 1


def test_main_trace_flags(tmp_path, capsys):
    path = str(tmp_path / "t.jsonl")
    args = ["merge", "--n", "200", "--s", "4", "--delta", "10", "--seed", "2", "--trace", path]
    assert main(args + ["--adversary", "InversionAttack"]) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(args + ["--adversary", "TraceReplay"]) == 0
    second = json.loads(capsys.readouterr().out)
    assert first["trials"][0]["counters"] == second["trials"][0]["counters"]


def test_console_script_module():
    proc = subprocess.run([sys.executable, "-m", "framkit.cli", "sort", "--n", "32", "--format", "csv"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert len(proc.stdout.splitlines()) == 2
