from __future__ import annotations

import json

import pytest

from quorumdag.analysis import check_total_order, safety_violations
from quorumdag.coin import HIDDEN
from quorumdag.netsim import (SimConfig, config_from_json, honest_delivery_oracle,
                              psync_bound_violations, run_sim)


def cfg(**kw) -> SimConfig:
    base = dict(kind="dagrider", k=3, f=1, waves=4, seed=3, log_level="full")
    base.update(kw)
    return SimConfig(**base)


@pytest.mark.parametrize("kind,delay", [("dagrider", "adversarial"), ("tusk", "random"),
                                        ("bullshark-async", "adversarial"), ("bullshark-psync", "psync")])
def test_runs_are_reproducible(kind, delay):
    c = cfg(kind=kind, delay_model=delay, adversary="coin-gated" if delay == "adversarial" else "none",
            byzantine="active")
    a, b = run_sim(c), run_sim(config_from_json(json.dumps(c.to_dict())))
    assert a.trace_text() == b.trace_text()
    assert a.trace_text()
    assert check_total_order(a.records())
    assert not safety_violations(a)


def test_seed_changes_the_run():
    assert run_sim(cfg(seed=1)).trace_text() != run_sim(cfg(seed=2)).trace_text()


def test_delivery_oracle_detects_dropping_adversary():
    bad = run_sim(cfg(delay_model="adversarial", adversary="drop"))
    assert not honest_delivery_oracle(bad)
    ok = run_sim(cfg(delay_model="adversarial", adversary="withhold", waves=6))
    assert honest_delivery_oracle(ok)
    assert max(m.deliver_time - m.send_time for m in ok.messages if m.honest) >= 1000


def test_psync_bound_holds_after_gst():
    res = run_sim(cfg(kind="bullshark-psync", delay_model="psync", gst=50, delta=10))
    assert res.messages and not psync_bound_violations(res)
    assert any(m.deliver_time - m.send_time > 10 for m in res.messages if m.send_time < 50)


def test_coin_gate_never_leaks_early():
    res = run_sim(cfg(delay_model="adversarial", adversary="coin-gated", waves=5, faults=0))
    assert res.adversary_queries
    for clock, wave, answer in res.adversary_queries:
        inst = res.coin.instances.get(wave)
        if answer is HIDDEN:
            assert inst is None or inst.revealed_at is None or clock < inst.revealed_at
        else:
            assert clock >= inst.revealed_at and answer == inst.value
    for inst in res.coin.instances.values():
        if inst.revealed_at is not None:
            assert len(inst.invokers) >= res.config.f + 1


def test_teeless_broadcast_run_is_safe():
    res = run_sim(cfg(f=2, broadcast="teeless", byzantine="active", waves=3))
    assert not res.rb_conflicts
    assert not safety_violations(res)
    assert any(line.split()[1] == "RB" for line in res.trace_lines)


def test_log_levels():
    events = run_sim(cfg(log_level="events")).trace_lines
    assert events and all(line.split()[1] in {"COIN", "COMMIT", "VIOLATION", "TRUNCATED"}
                          for line in events)
    assert run_sim(cfg(log_level="off")).trace_lines == []


@pytest.mark.parametrize("bad", [dict(k=1), dict(f=0), dict(delay_model="warp"),
                                 dict(kind="bullshark-psync", delay_model="adversarial"),
                                 dict(faults=2), dict(adversary="chaos")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        cfg(**bad)


def test_corrupt_set_sampled_from_seed():
    a = run_sim(cfg(f=2, seed=11, waves=2))
    b = run_sim(cfg(f=2, seed=11, waves=2))
    assert a.corrupt == b.corrupt and len(a.corrupt) == 2
    assert run_sim(cfg(f=2, corrupt=[0, 4], waves=2)).corrupt == [0, 4]
