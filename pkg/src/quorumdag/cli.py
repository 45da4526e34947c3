"""Command-line entry point: simulate, scenario, analyze, table.

Exit codes: 0 success or verdict reproduced, 1 usage error, 2 unexpected
safety violation, 3 expected verdict not reproduced.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, scenarios
from .netsim import SimConfig, honest_delivery_oracle, run_sim

EXIT_OK, EXIT_USAGE, EXIT_UNSAFE, EXIT_NOT_REPRODUCED = 0, 1, 2, 3

PROTOCOL_CHOICES = ["dagrider", "tusk", "bullshark-async", "bullshark-psync"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, *, delay_choices=("adversarial", "random", "psync")) -> None:
    p.add_argument("--protocol", choices=PROTOCOL_CHOICES, default="dagrider")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--f", type=int, default=1)
    p.add_argument("--delay", choices=delay_choices, default="random")
    p.add_argument("--gst", type=int, default=0)
    p.add_argument("--delta", type=int, default=10)
    p.add_argument("--timeout", type=int, default=None, help="round timeout (default 4*delta)")
    p.add_argument("--waves", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--broadcast", choices=["ideal", "teeless"], default="ideal")
    p.add_argument("--byzantine", choices=["silent", "active", "selective"], default="silent")
    p.add_argument("--faults", type=int, default=None, help="corrupt validators (default f)")
    p.add_argument("--out", type=Path, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="quorumdag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run one configured simulation")
    _common(sim)
    sim.add_argument("--adversary", choices=["coin-gated", "withhold", "drop"], default="coin-gated",
                     help="network strategy for --delay adversarial")
    sim.add_argument("--config", type=Path, default=None, help="JSON config (overrides flags)")

    sc = sub.add_parser("scenario", help="replay a scripted counterexample")
    sc.add_argument("name")
    sc.add_argument("--wave-pairs", type=int, default=100)
    sc.add_argument("--out", type=Path, default=None)

    an = sub.add_parser("analyze", help="Monte Carlo batch")
    _common(an, delay_choices=("adversarial", "random", "psync", "generative"))
    an.add_argument("--trials", type=int, default=100)
    an.add_argument("--workers", type=int, default=1)

    tb = sub.add_parser("table", help="emit the summary table")
    tb.add_argument("--runs", type=int, default=8, help="randomized runs per cell")
    tb.add_argument("--waves", type=int, default=6)
    tb.add_argument("--seed", type=int, default=0)
    tb.add_argument("--out", type=Path, default=None)
    return parser


def _validate(args) -> None:
    if getattr(args, "k", 2) < 2:
        raise UsageError("--k must be >= 2")
    if getattr(args, "f", 1) < 1:
        raise UsageError("--f must be >= 1")
    if getattr(args, "protocol", None) == "bullshark-psync" and args.delay == "adversarial":
        raise UsageError("bullshark-psync needs --delay psync or random")
    if getattr(args, "delay", None) == "generative" and args.protocol != "tusk":
        raise UsageError("--delay generative is the Tusk random-delay model")
    for name in ("waves", "trials", "wave_pairs", "runs"):
        if getattr(args, name, 1) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1")


def _write(out: Path | None, name: str, text: str) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def cmd_simulate(args) -> int:
    if args.config is not None:
        config = SimConfig.load(args.config)
    else:
        config = SimConfig(kind=args.protocol, k=args.k, f=args.f, delay_model=args.delay,
                           delay_hi=args.delta, gst=args.gst, delta=args.delta,
                           adversary=args.adversary if args.delay == "adversarial" else "none",
                           byzantine=args.byzantine, faults=args.faults, waves=args.waves,
                           seed=args.seed, timeout="auto" if args.timeout is None else args.timeout,
                           broadcast=args.broadcast)
    result = run_sim(config)
    violations = analysis.safety_violations(result)
    observer = result.states[result.honest[0]]
    hits = [observer.wave_outcomes.get(w, False) for w in range(1, config.waves + 1)]
    metrics = {
        "config": config.to_dict(),
        "honest": result.honest,
        "corrupt": result.corrupt,
        "events": result.events,
        "end_time": result.end_time,
        "truncated": result.truncated,
        "all_delivered": honest_delivery_oracle(result),
        "waves_with_direct_commit": sum(hits),
        "direct_commits": {str(i): sum(1 for e in result.states[i].record.entries if e.kind == "direct")
                           for i in result.honest},
        "committed_leaders": {str(i): len(result.states[i].record.entries) for i in result.honest},
        "violations": [f"{v.oracle}: {v.detail}" for v in violations],
    }
    _write(args.out, "trace.log", result.trace_text())
    _write(args.out, "metrics.json", json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    print(f"{config.kind.value} k={config.k} f={config.f} seed={config.seed}: "
          f"{sum(hits)}/{config.waves} waves directly committed at validator {result.honest[0]}, "
          f"{len(violations)} safety violations")
    expected_unsafe = config.kind.value == "bullshark-async" and config.k == 2
    if violations and not expected_unsafe:
        for v in violations[:10]:
            print(f"  {v.oracle}: {v.detail}")
        return EXIT_UNSAFE
    if not honest_delivery_oracle(result):
        print("adversary dropped an honest message: ill-formed run")
        return EXIT_NOT_REPRODUCED
    return EXIT_OK


def run_tusk_scenario(wave_pairs: int) -> tuple[bool, list[str], scenarios.ReplayResult]:
    script = scenarios.tusk_k2_liveness_scenario(wave_pairs)
    res = scenarios.replay(script)
    commits = sum(res.direct_commits().values())
    k3 = scenarios.tusk_rethreshold(res, weak_quorum=3)
    k2 = scenarios.tusk_rethreshold(res, weak_quorum=4)
    lines = [f"{commits} commits / {script.waves} waves ({wave_pairs} wave-pairs) at {len(script.honest)} honest validators",
             f"k=2 threshold (f+1=4): {k2['commits']} of {k2['evaluations']} evaluations commit",
             f"k=3 threshold (f+1=3) on the same DAG: {k3['commits']} of {k3['evaluations']} evaluations commit",
             f"all honest messages delivered: {honest_delivery_oracle(res.messages)}"]
    ok = (commits == 0 and not res.mismatches and k3["commits"] > 0
          and honest_delivery_oracle(res.messages))
    return ok, lines, res


def run_bullshark_scenario() -> tuple[bool, list[str], dict]:
    lines = []
    ok = True
    runs = {}
    for comp in scenarios.BS_COMPLETIONS:
        base = scenarios.replay(scenarios.bsasync_k2_safety_scenario(comp))
        amb = [v for st in base.states.values() for v in st.violations if v.kind == "ambiguous-indirect"]
        lines.append(f"completion {comp}: " + ", ".join(v.line() for v in amb))
        ok &= bool(amb) and not base.mismatches and honest_delivery_oracle(base.messages)
        runs[(comp, None)] = base
        for arm in ("ss", "fb"):
            res = scenarios.replay(scenarios.bsasync_k2_safety_scenario(comp), ambiguous_choice=arm)
            verdict = analysis.check_total_order(res.records())
            leaders = {p: v for p, v in res.wave_leaders(scenarios.BS_WAVE).items() if v}
            lines.append(f"  forced arm {arm}: wave-{scenarios.BS_WAVE} leaders {leaders}; prefix check "
                         + ("passes" if verdict else f"fails for {verdict.pair} at index {verdict.index}"))
            runs[(comp, arm)] = res
    for arm in ("ss", "fb"):
        fails = [comp for comp in scenarios.BS_COMPLETIONS
                 if not analysis.check_total_order(runs[(comp, arm)].records())]
        lines.append(f"arm {arm}: conflicting commits in completion(s) {fails}")
        ok &= bool(fails)
    return ok, lines, runs


def cmd_scenario(args) -> int:
    if args.name not in scenarios.SCENARIOS:
        print(f"unknown scenario {args.name!r}; available: {', '.join(scenarios.SCENARIOS)}")
        return EXIT_USAGE
    if args.name == "tusk-k2-liveness":
        ok, lines, res = run_tusk_scenario(args.wave_pairs)
        _write(args.out, "tusk-k2-liveness.trace", res.trace_text())
    else:
        ok, lines, runs = run_bullshark_scenario()
        for (comp, arm), res in runs.items():
            _write(args.out, f"bullshark-async-k2-safety-{comp}-{arm or 'none'}.trace", res.trace_text())
    print("\n".join(lines))
    print("verdict reproduced" if ok else "verdict NOT reproduced")
    return EXIT_OK if ok else EXIT_NOT_REPRODUCED


def cmd_analyze(args) -> int:
    model = {"adversarial": "adversarial", "random": "random", "psync": "psync",
             "generative": "generative"}[args.delay]
    cfg = analysis.MCConfig(args.protocol if model != "generative" else "tusk-random",
                            args.k, args.f, model, args.waves, args.seed,
                            byzantine=args.byzantine, faults=args.faults, broadcast=args.broadcast)
    res = analysis.monte_carlo(cfg, args.trials, workers=args.workers, check_safety=True)
    row = res.row()
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        analysis.write_experiments_csv([res], args.out / "experiments.csv")
    print(",".join(analysis.EXPERIMENT_FIELDS))
    print(",".join(str(row[k]) for k in analysis.EXPERIMENT_FIELDS))
    if res.violations and not (args.protocol == "bullshark-async" and args.k == 2):
        print(f"{res.violations} safety violations")
        return EXIT_UNSAFE
    return EXIT_OK


def cmd_table(args) -> int:
    ev = analysis.gather_evidence(runs_per_cell=args.runs, waves=args.waves, seed=args.seed)
    table = analysis.emit_table(ev)
    _write(args.out, "table.csv", table.csv())
    _write(args.out, "table.txt", table.text())
    print(table.text(), end="")
    mismatched = [key for key, ok in table.matches().items() if not ok]
    if mismatched:
        print(f"cells differing from the published table: {mismatched}")
        return EXIT_NOT_REPRODUCED
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "scenario": cmd_scenario,
            "analyze": cmd_analyze, "table": cmd_table}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        _validate(args)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"quorumdag: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
