"""One test per acceptance criterion; each reports a single PASS/FAIL line."""

from __future__ import annotations

import random
import time
from fractions import Fraction

from conftest import ACCEPTANCE_LINES
from quorumdag import analysis, scenarios
from quorumdag.broadcast import (exhaustive_equivocation_check, random_equivocation_run,
                                 random_validity_run)
from quorumdag.dag import Params
from quorumdag.netsim import SimConfig, honest_delivery_oracle, run_sim, substream
from quorumdag.protocols import LeaderRole, first_ss, second_ss

BEHAVIORS = ("active", "silent", "selective")


def report(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


def test_criterion_01_table():
    t0 = time.time()
    table = analysis.emit_table(analysis.gather_evidence())
    elapsed = time.time() - t0
    bad = [key for key, ok in table.matches().items() if not ok]
    report(1, not bad and elapsed < 600,
           f"table matches all {len(table.matches())} published cells, mismatches={bad}, {elapsed:.1f}s")


def test_criterion_02_tusk_k2_liveness():
    t0 = time.time()
    sc = scenarios.tusk_k2_liveness_scenario(100)
    res = scenarios.replay(sc)
    again = scenarios.replay(scenarios.tusk_k2_liveness_scenario(100))
    elapsed = time.time() - t0
    commits = sum(res.direct_commits().values())
    k2 = scenarios.tusk_rethreshold(res, weak_quorum=sc.f + 1)
    n = len(sc.honest) + len(sc.byzantine)
    k3 = scenarios.tusk_rethreshold(res, weak_quorum=Params(f=(n - 1) // 3, k=3).weak_quorum)
    ok = (commits == 0 and k2["commits"] == 0 and k3["commits"] > 0 and not res.mismatches
          and honest_delivery_oracle(res.messages) and res.trace_text() == again.trace_text()
          and elapsed < 5)
    report(2, ok, f"{commits} direct commits over {sc.waves} waves ({sc.waves // 2} wave-pairs) at "
                  f"{len(sc.honest)} honest validators; k=3 thresholds commit {k3['commits']}/"
                  f"{k3['evaluations']} evaluations; {elapsed:.2f}s incl. determinism rerun")


def test_criterion_03_bullshark_async_k2_safety():
    t0 = time.time()
    ambiguous = True
    arms = {}
    for comp in scenarios.BS_COMPLETIONS:
        base = scenarios.replay(scenarios.bsasync_k2_safety_scenario(comp))
        ambiguous &= any(v.kind == "ambiguous-indirect" for st in base.states.values()
                         for v in st.violations)
        for arm in ("ss", "fb"):
            res = scenarios.replay(scenarios.bsasync_k2_safety_scenario(comp), ambiguous_choice=arm)
            rerun = scenarios.replay(scenarios.bsasync_k2_safety_scenario(comp), ambiguous_choice=arm)
            assert res.trace_text() == rerun.trace_text()
            if not analysis.check_total_order(res.records()):
                arms.setdefault(arm, []).append(comp)
    elapsed = time.time() - t0
    ok = ambiguous and set(arms) == {"ss", "fb"} and elapsed < 5
    report(3, ok, f"AmbiguousIndirect raised; prefix check fails for arm ss in {arms.get('ss')} "
                  f"and arm fb in {arms.get('fb')}; {elapsed:.2f}s")


def test_criterion_04_exact_probabilities():
    expected = {2: Fraction(1, 4), 3: Fraction(20, 27), 4: Fraction(243, 256), 5: Fraction(3104, 3125)}
    got = {k: analysis.commit_probability_analytic("tusk", k, 1, "random-delay") for k in expected}
    ok = got == expected and all(isinstance(v, Fraction) for v in got.values())
    report(4, ok, "exact: " + ", ".join(f"k={k} {v}" for k, v in got.items()))


def test_criterion_05_empirical_probabilities():
    parts, ok = [], True
    for k in (2, 3, 4, 5):
        t0 = time.time()
        res = analysis.monte_carlo(analysis.MCConfig("tusk-random", k, 1, "generative", 10_000, seed=k), 1)
        p = analysis.commit_probability_analytic("tusk", k, 1, "random-delay")
        lo, hi = res.ci
        ok &= lo <= p <= hi and time.time() - t0 < 120
        parts.append(f"k={k} {res.commit_rate:.4f} in [{lo:.4f},{hi:.4f}] vs {float(p):.4f}")
    report(5, ok, "10,000 waves: " + "; ".join(parts))


def mean_gap(protocol, f, model, trials, waves, **kw) -> float:
    cfg = analysis.MCConfig(protocol, 3, f, model, waves, seed=100 + f, **kw)
    return analysis.monte_carlo(cfg, trials).mean_waves_between


def test_criterion_06_expected_waves():
    worst = {}
    for protocol in ("dagrider", "bullshark-async"):
        for f in (1, 2, 3):
            trials = 10 if f < 3 else 6
            for model, kw in (("random", {}),
                              ("adversarial", {}),
                              ("adversarial", {"faults": 0})):
                g = mean_gap(protocol, f, model, trials, 20, **kw)
                worst[protocol] = max(worst.get(protocol, 0), g)
    tusk = max(mean_gap("tusk", f, "adversarial", 10, 20, **kw)
               for f in (1, 2) for kw in ({}, {"faults": 0}))
    tr = mean_gap("tusk-random", 1, "generative", 1, 20_000)
    ok = (worst["dagrider"] <= 1.65 and worst["bullshark-async"] <= 1.65 and tusk <= 3.3
          and abs(tr - 1.35) <= 0.135)
    report(6, ok, f"worst mean waves between commits: DAG-Rider {worst['dagrider']:.3f}, "
                  f"BS-async {worst['bullshark-async']:.3f} (<= 1.65); Tusk {tusk:.3f} (<= 3.3); "
                  f"Tusk(Random) {tr:.3f} (27/20 = 1.35 +- 10%)")


def test_criterion_07_common_core():
    runs = absent = checked = 0
    for k in (2, 3):
        for f in (1, 2):
            for s in range(250):
                res = run_sim(SimConfig(kind="dagrider", k=k, f=f, delay_model="adversarial",
                                        adversary="coin-gated", byzantine=BEHAVIORS[s % 3],
                                        waves=3, seed=s, log_level="off"))
                runs += 1
                for i in res.honest:
                    dag = res.states[i].dag
                    for w in range(1, 4):
                        mine = dag.get(4 * w + 1, i)
                        if mine is None:
                            continue
                        checked += 1
                        # U limited to the round-4 vertices i held when it completed the wave
                        absent += not analysis.check_common_core(dag, w, mine.parents)
    report(7, runs == 1000 and absent == 0 and checked > 0,
           f"{runs} runs, {checked} completed (validator, wave) pairs, {absent} missing common cores")


ORACLE_RUNS = [
    ("lemma1", "dagrider", (2, 3), analysis.lemma1_violations),
    ("lemma3", "tusk", (2, 3), analysis.lemma3_violations),
    ("claims1-2", "bullshark-async", (3,),
     lambda r: analysis.claim1_violations(r) + analysis.claim2_violations(r)),
    ("lemma5", "bullshark-psync", (2,), analysis.lemma5_violations),
]


def test_criterion_08_safety_oracles():
    parts, ok = [], True
    for name, kind, ks, oracle in ORACLE_RUNS:
        combos = [(k, f) for k in ks for f in (1, 2)]
        runs = violations = order_failures = 0
        for idx in range(1000):
            k, f = combos[idx % len(combos)]
            psync = kind == "bullshark-psync"
            res = run_sim(SimConfig(kind=kind, k=k, f=f, waves=3, seed=idx, log_level="off",
                                    delay_model="psync" if psync else "adversarial",
                                    adversary="none" if psync else "coin-gated",
                                    byzantine=BEHAVIORS[idx % 3]))
            runs += 1
            violations += len(oracle(res))
            order_failures += not analysis.check_total_order(res.records())
        ok &= runs == 1000 and violations == 0 and order_failures == 0
        parts.append(f"{name} {violations} violations/{order_failures} order failures in {runs} runs")
    report(8, ok, "; ".join(parts))


def test_criterion_09_psync_liveness():
    parts, ok = [], True
    for k in (2, 3):
        for f in (1, 2):
            n = k * f + 1
            target = 2
            leaders = {first_ss(target, n), second_ss(target, n)}
            good = 0
            for seed in range(100):
                rng = substream(seed, "corrupt-pick")
                corrupt = sorted(rng.sample([i for i in range(n) if i not in leaders], f))
                res = run_sim(SimConfig(kind="bullshark-psync", k=k, f=f, delay_model="psync", gst=0,
                                        delta=10, timeout="auto", waves=3, seed=seed,
                                        corrupt=corrupt, byzantine="active", log_level="off"))
                assert res.config.effective_timeout == 40
                good += all(any(e.kind == "direct" and e.slot.wave == target
                                and e.slot.role is LeaderRole.SECOND_SS
                                for e in res.states[i].record.entries) for i in res.honest)
            ok &= good == 100
            parts.append(f"k={k} f={f} {good}/100")
    report(9, ok, "all honest directly commit wave-2 second leader: " + ", ".join(parts))


def test_criterion_10_teeless_broadcast():
    t0 = time.time()
    ex = exhaustive_equivocation_check(f=1)
    parts, ok = [f"f=1 exhaustive {ex['explored']} states, {ex['violations']} conflicts"], \
        ex["violations"] == 0 and ex["terminal_deliveries"] > 0
    for f in (2, 3):
        rng = random.Random(1000 + f)
        conflicts = sum(bool(random_equivocation_run(f, rng).conflicting_deliveries())
                        for _ in range(1000))
        valid = 0
        for _ in range(1000):
            net = random_validity_run(f, rng)
            valid += all(len(msgs) == 1 for msgs in net.deliveries().values())
        ok &= conflicts == 0 and valid == 1000
        parts.append(f"f={f} {conflicts}/1000 conflicting, validity {valid}/1000")
    report(10, ok, "; ".join(parts) + f"; {time.time() - t0:.1f}s")


def test_criterion_11_determinism():
    configs = [dict(kind="dagrider", k=3, f=1, delay_model="adversarial", adversary="coin-gated"),
               dict(kind="tusk", k=2, f=2, delay_model="random", byzantine="active"),
               dict(kind="bullshark-psync", k=2, f=1, delay_model="psync", gst=30,
                    broadcast="teeless")]
    same = 0
    for c in configs:
        a = run_sim(SimConfig(waves=4, seed=42, log_level="full", **c)).trace_text()
        b = run_sim(SimConfig(waves=4, seed=42, log_level="full", **c)).trace_text()
        same += a == b and len(a) > 0
    report(11, same == len(configs), f"{same}/{len(configs)} configs byte-identical on rerun")
