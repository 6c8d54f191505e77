"""Experiment harness: configs, trials, verification and reports.

    framkit sort  --n 1024 --s 16 --delta 64 --adversary InversionAttack --trials 5
    framkit pq    --n 4096 --s 16 --delta 256 --adversary PQAttack --workload 2:1:10000
    framkit bench --n 16384 --s 4,64 --delta 1024 --adversary InversionAttack --format csv

Every trial runs on a fresh machine seeded from (seed, trial index), so a
report can be reproduced from its config alone.  ``--trace PATH`` writes
the corruptions of every trial as JSON lines; with ``--adversary
TraceReplay`` the same flag reads such a file back and replays it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import random
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import product
from statistics import fmean
from typing import Any, Mapping, NamedTuple, Sequence

from .adversary import (
    AdversaryConfigError,
    TraceReplay,
    make_adversary,
    read_trace,
    write_trace,
)
from .fram import (
    Adversary,
    BudgetExceeded,
    FramError,
    Machine,
    RunMetrics,
    c_safe_from_env,
    effective_safe_size,
)
from .resilient_pq import pq_from_keys, pq_new
from .resilient_sort import ContractViolation, s_merge, s_sort
from .verify import (
    ContractProbe,
    Desync,
    InputSnapshot,
    PQReferenceModel,
    Verdict,
    check_sorted_output,
)

COMMANDS = ("sort", "merge", "pq", "bench")
FORMATS = ("json", "csv")
REPLAY = "TraceReplay"
KEY_SPACE = 1 << 40
DEFAULT_OPS = 10_000
COUNTERS = [f for f in RunMetrics.field_names() if f != "wall_time"]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Workload:
    inserts: int = 2
    deletes: int = 1
    ops: int = DEFAULT_OPS

    @classmethod
    def parse(cls, text: str | None) -> "Workload":
        if text is None or text == "":
            return cls()
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"workload must be INSERT:DELETE[:OPS], got {text!r}")
        try:
            nums = [int(p) for p in parts]
        except ValueError:
            raise ConfigError(f"workload must be integers, got {text!r}") from None
        if min(nums) < 0 or nums[0] + nums[1] == 0:
            raise ConfigError(f"workload ratio must be non-negative and not 0:0, got {text!r}")
        return cls(*nums)

    def __str__(self) -> str:
        return f"{self.inserts}:{self.deletes}:{self.ops}"


@dataclass(frozen=True)
class RunConfig:
    command: str = "sort"
    n: int = 1024
    s: int = 16
    delta: int = 64
    adversary: str = "NoFaults"
    seed: int = 0
    trials: int = 1
    workload: str | None = None
    format: str = "json"
    out: str | None = None
    trace: str | None = None

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; expected one of {', '.join(COMMANDS)}")
        for name, low in (("n", 0), ("delta", 0), ("s", 1), ("trials", 1)):
            val = getattr(self, name)
            if not isinstance(val, int) or isinstance(val, bool) or val < low:
                raise ConfigError(f"--{name} must be an integer >= {low}, got {val!r}")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError(f"--seed must fit in 64 bits, got {self.seed}")
        if self.format not in FORMATS:
            raise ConfigError(f"--format must be json or csv, got {self.format!r}")
        if self.adversary == REPLAY:
            if not self.trace:
                raise ConfigError("--adversary TraceReplay needs --trace PATH to read from")
        else:
            try:
                make_adversary(self.adversary, 0)
            except AdversaryConfigError as exc:
                raise ConfigError(str(exc)) from None
        if self.command in ("pq", "bench"):
            Workload.parse(self.workload)
        elif self.workload is not None:
            raise ConfigError("--workload only applies to pq runs")
        try:
            c_safe_from_env()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def replaying(self) -> bool:
        return self.adversary == REPLAY

    def echo(self) -> dict[str, Any]:
        d = asdict(self)
        d["c_safe"] = c_safe_from_env()
        return d


def trial_seed(seed: int, i: int) -> int:
    """Independent 64-bit seed for trial ``i``."""
    h = hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


# ---------------------------------------------------------------------------
# results


@dataclass
class TrialResult:
    trial: int
    seed: int
    verdict: str
    counters: dict[str, int]
    overhead: int | None = None
    flags: list[str] = field(default_factory=list)
    problems: list[str] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.verdict == Verdict.FAIL.value


@dataclass
class RunReport:
    config: dict[str, Any]
    trials: list[TrialResult] = field(default_factory=list)
    aggregate: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return any(t.failed for t in self.trials)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "trials": [asdict(t) for t in self.trials],
            "aggregate": self.aggregate,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunReport":
        return cls(dict(d["config"]), [TrialResult(**t) for t in d["trials"]], dict(d["aggregate"]))


def parse_report(text: str) -> RunReport:
    return RunReport.from_dict(json.loads(text))


def aggregate(trials: Sequence[TrialResult]) -> dict[str, dict[str, float]]:
    if not trials:
        return {}
    keys = COUNTERS + (["overhead"] if all(t.overhead is not None for t in trials) else [])
    cols = {k: [t.overhead if k == "overhead" else t.counters[k] for t in trials] for k in keys}
    return {
        "mean": {k: fmean(v) for k, v in cols.items()},
        "max": {k: max(v) for k, v in cols.items()},
    }


# ---------------------------------------------------------------------------
# trials


def _inputs(cfg: RunConfig, seed: int, count: int) -> list[int]:
    return random.Random(seed).sample(range(KEY_SPACE), count)


def _machine(cfg: RunConfig, adversary: Adversary) -> Machine:
    return Machine(s=cfg.s, delta=cfg.delta, adversary=adversary)


def _sort_trial(m: Machine, cfg: RunConfig, seed: int) -> list[str]:
    X = m.load_keys(_inputs(cfg, seed, cfg.n))
    snap = InputSnapshot.of(m)
    probe = ContractProbe(snap)
    Z = s_sort(m, X, probe=probe)
    return probe.failures + check_sorted_output(Z, snap).problems


def _merge_trial(m: Machine, cfg: RunConfig, seed: int) -> list[str]:
    vals = _inputs(cfg, seed, cfg.n)
    half = cfg.n // 2
    X = m.load_keys(sorted(vals[:half]), "X")
    Y = m.load_keys(sorted(vals[half:]), "Y")
    snap = InputSnapshot.of(m)
    probe = ContractProbe(snap)
    Z = s_merge(m, X, Y, probe=probe)
    return probe.failures + check_sorted_output(Z, snap).problems


class PQRun(NamedTuple):
    problems: list[str]
    deletes: int
    preload_comparisons: int


def pq_workload(m: Machine, n: int, wl: Workload, seed: int, check: bool = True,
                keep: int = 5) -> PQRun:
    """Preload ``n`` keys, then run ``wl.ops`` operations against the
    reference model, checking invariants after each one if ``check``."""
    rng = random.Random(seed)
    keys = iter(rng.sample(range(KEY_SPACE), n + wl.ops))
    init = [next(keys) for _ in range(n)]
    pq = pq_from_keys(m, init) if n else pq_new(m)
    preload = m.comparisons
    model = PQReferenceModel(m, pq.live_tags)
    for origin, v in enumerate(init):
        model.oracle_insert(v, origin)
    problems: list[str] = []
    bad = 0
    deletes = 0
    p_insert = wl.inserts / (wl.inserts + wl.deletes)
    for op in range(wl.ops):
        if len(pq) == 0 or rng.random() < p_insert:
            k = next(keys)
            pq.insert(k)
            model.oracle_insert(k, len(m.snapshot) - 1)
        else:
            value, tag = pq.pop()
            deletes += 1
            if model.oracle_check_deletemin(value, tag) is Verdict.FAIL:
                bad += 1
                if len(problems) < keep:
                    problems.append(f"op {op}: deletemin returned {value} above the faithful minimum")
        if check:
            rep = pq.check_invariants()
            if not rep.ok:
                bad += 1
                if len(problems) < keep:
                    problems.append(f"op {op}: " + "; ".join(rep.violations[:3]))
    if bad > len(problems):
        problems.append(f"{bad - len(problems)} further problems")
    return PQRun(problems, deletes, preload)


def _pq_trial(m: Machine, cfg: RunConfig, seed: int) -> list[str]:
    return pq_workload(m, cfg.n, Workload.parse(cfg.workload), seed).problems


_DRIVERS = {"sort": _sort_trial, "merge": _merge_trial, "pq": _pq_trial}


def _execute(cfg: RunConfig, seed: int, adversary: Adversary) -> tuple[Machine, list[str], list[str]]:
    m = _machine(cfg, adversary)
    flags: list[str] = []
    try:
        problems = _DRIVERS[cfg.command](m, cfg, seed)
    except BudgetExceeded as exc:
        # aborted, not crashed: the output was never produced, so it cannot pass
        flags.append("budget_exceeded")
        problems = [f"aborted: {exc}"]
    except (FramError, ContractViolation, Desync) as exc:
        problems = [f"{type(exc).__name__}: {exc}"]
    if cfg.delta and m.alpha_used >= cfg.delta:
        flags.append("budget_exhausted")
    bound = 16 * m.s_eff + 64
    if m.safe_high_water > bound:
        problems.append(f"safe high water {m.safe_high_water} > 16*S_eff+64 = {bound}")
    return m, problems, flags


def run_trial(cfg: RunConfig, i: int, traces: Mapping[int, list] | None = None,
              baseline: bool = True) -> tuple[TrialResult, list[dict[str, Any]]]:
    seed = trial_seed(cfg.seed, i)
    if cfg.replaying:
        adversary = TraceReplay((traces or {}).get(i, []))
    else:
        adversary = make_adversary(cfg.adversary, seed)
    m, problems, flags = _execute(cfg, seed, adversary)
    counters = m.metrics().counters()
    overhead = None
    if baseline:
        base, _, _ = _execute(cfg, seed, make_adversary("NoFaults"))
        overhead = counters["comparisons"] - base.comparisons
    verdict = Verdict.FAIL if problems else Verdict.PASS
    trace = [dict(c.record(), trial=i) for c in m.corruption_log]
    return TrialResult(i, seed, verdict.value, counters, overhead, flags, problems), trace


def _load_traces(path: str) -> dict[int, list[dict[str, Any]]]:
    try:
        recs = read_trace(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read trace {path!r}: {exc}") from None
    out: dict[int, list[dict[str, Any]]] = {}
    for r in recs:
        out.setdefault(int(r.get("trial", 0)), []).append(r)
    return out


def run(config: RunConfig, baseline: bool = True) -> RunReport:
    cfg = config.validate()
    if cfg.command == "bench":
        cfg = replace(cfg, command="pq" if cfg.workload is not None else "sort")
    traces = _load_traces(cfg.trace) if cfg.replaying else None
    results = []
    exported: list[dict[str, Any]] = []
    for i in range(cfg.trials):
        res, trace = run_trial(cfg, i, traces, baseline)
        results.append(res)
        exported.extend(trace)
    if cfg.trace and not cfg.replaying:
        write_trace(exported, cfg.trace)
    return RunReport(cfg.echo(), results, aggregate(results))


# ---------------------------------------------------------------------------
# output


def _csv_header() -> list[str]:
    cfg_cols = [f.name for f in fields(RunConfig)] + ["c_safe"]
    return cfg_cols + ["trial", "trial_seed"] + COUNTERS + ["overhead", "verdict", "flags"]


def _csv_text(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_csv_header())
    cfg_vals = [report.config.get(f.name) for f in fields(RunConfig)] + [report.config.get("c_safe")]
    for t in report.trials:
        w.writerow(cfg_vals + [t.trial, t.seed] + [t.counters[k] for k in COUNTERS]
                   + [t.overhead, t.verdict, ";".join(t.flags)])
    return buf.getvalue()


def render(report: RunReport, format: str = "json") -> str:
    if format == "csv":
        return _csv_text(report)
    if format == "json":
        return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    raise ConfigError(f"unknown format {format!r}")


def emit(report: RunReport, format: str = "json", out: str | None = None) -> None:
    text = render(report, format)
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# sweeps


SWEEP_AXES = ("n", "delta", "adversary", "s")


def bench_sweep(base: RunConfig, grid: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    """Run every cell of ``grid`` (axes n, delta, adversary, s) and return
    one row per cell with mean overhead and comparisons."""
    bad = set(grid) - set(SWEEP_AXES)
    if bad:
        raise ConfigError(f"cannot sweep over {sorted(bad)}")
    axes = [list(grid.get(a, [getattr(base, a)])) for a in SWEEP_AXES]
    rows = []
    for n, delta, adv, s in product(*axes):
        rep = run(replace(base, n=n, delta=delta, adversary=adv, s=s, out=None, trace=None))
        mean = rep.aggregate["mean"]
        rows.append({
            "n": n, "delta": delta, "adversary": adv, "s": s,
            "s_eff": effective_safe_size(s, delta),
            "trials": len(rep.trials),
            "fails": sum(t.failed for t in rep.trials),
            "mean_comparisons": mean["comparisons"],
            "mean_overhead": mean["overhead"],
            "mean_alpha": mean["alpha_used"],
        })
    return rows


def _table_text(rows: list[dict[str, Any]], format: str) -> str:
    if format == "json":
        return json.dumps(rows, indent=2) + "\n"
    buf = io.StringIO()
    cols = ["n", "delta", "adversary", "s", "s_eff", "trials", "fails",
            "mean_comparisons", "mean_overhead", "mean_alpha"]
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# command line


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="framkit", description="Resilient sorting and priority queue experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--n", default="1024", help="input size (pq: keys preloaded)")
    p.add_argument("--s", default="16", help="safe memory size S")
    p.add_argument("--delta", default="64", help="corruption budget")
    p.add_argument("--adversary", action="append",
                   help="name[:k=v,...]; repeat for bench sweeps; TraceReplay replays --trace")
    p.add_argument("--seed", default="0")
    p.add_argument("--trials", default="1")
    p.add_argument("--workload", help="pq op mix INSERT:DELETE[:OPS], default 2:1:10000")
    p.add_argument("--format", default="json", choices=FORMATS)
    p.add_argument("--out", help="output path, default stdout")
    p.add_argument("--trace", help="write corruption trace here, or read it with --adversary TraceReplay")
    return p


def _ints(flag: str, text: str, many: bool) -> list[int]:
    parts = text.split(",")
    if len(parts) > 1 and not many:
        raise ConfigError(f"--{flag} takes a list only for bench")
    try:
        return [int(x) for x in parts]
    except ValueError:
        raise ConfigError(f"--{flag} must be an integer, got {text!r}") from None


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        bench = args.command == "bench"
        ns = _ints("n", args.n, bench)
        ss = _ints("s", args.s, bench)
        ds = _ints("delta", args.delta, bench)
        advs = args.adversary or ["NoFaults"]
        if len(advs) > 1 and not bench:
            raise ConfigError("--adversary may repeat only for bench")
        base = RunConfig(
            command=args.command, n=ns[0], s=ss[0], delta=ds[0], adversary=advs[0],
            seed=_ints("seed", args.seed, False)[0], trials=_ints("trials", args.trials, False)[0],
            workload=args.workload, format=args.format, out=args.out, trace=args.trace,
        )
        if bench:
            if args.trace:
                raise ConfigError("--trace applies to single runs, not bench")
            rows = bench_sweep(base, {"n": ns, "delta": ds, "adversary": advs, "s": ss})
            text = _table_text(rows, args.format)
            if args.out:
                with open(args.out, "w", encoding="utf-8", newline="") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            return 1 if any(r["fails"] for r in rows) else 0
        report = run(base)
    except ConfigError as exc:
        print(f"framkit: error: {exc}", file=sys.stderr)
        return 2
    emit(report, args.format, args.out)
    return 1 if report.failed else 0


if __name__ == "__main__":
    sys.exit(main())
