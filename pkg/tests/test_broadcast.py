from __future__ import annotations

import random
from dataclasses import dataclass

import pytest

from quorumdag.broadcast import (CONFLICT, DELIVER, DROP, ECHO, BcastMessage, RbNode, Signer, Tag,
                                 TeelessNetwork, WitnessConfig, random_equivocation_run,
                                 random_validity_run)


@pytest.mark.parametrize("n,f,witnesses", [(3, 1, 1), (5, 2, 2), (7, 3, 3), (4, 1, 0), (7, 2, 0)])
def test_witness_padding(n, f, witnesses):
    cfg = WitnessConfig.for_validators(n, f)
    assert len(cfg.witnesses) == witnesses
    assert cfg.n_total >= 3 * f + 1
    assert cfg.threshold == cfg.n_total - f
    # two delivery quorums always share an honest node
    assert 2 * cfg.threshold - cfg.n_total >= f + 1


def test_too_few_nodes_rejected():
    with pytest.raises(ValueError):
        WitnessConfig((0, 1, 2), (), 1)


def test_forged_tag_dropped():
    cfg = WitnessConfig.for_validators(3, 1)
    signer = Signer()
    node = RbNode(1, cfg, signer)
    forged = BcastMessage(0, 1, "x", Tag(0, 1, "0" * 16))
    assert node.rb_on_receive(0, forged) == ([DROP], [])
    good = BcastMessage(0, 1, "x", signer.sign(0, 1, "x"))
    actions, out = node.rb_on_receive(0, good)
    assert ECHO in actions and sorted(to for to, _ in out) == [0, 2, 3]
    other = BcastMessage(0, 1, "y", signer.sign(0, 1, "y"))
    assert CONFLICT in node.rb_on_receive(2, other)[0]


def test_honest_broadcast_delivers_everywhere():
    net = TeelessNetwork(WitnessConfig.for_validators(5, 2))
    net.honest_broadcast(3, 1, "v")
    net.run_random(random.Random(0))
    assert all([m.body for m in msgs] == ["v"] for msgs in net.deliveries().values())
    assert any(DELIVER in line for line in net.log)


@pytest.mark.parametrize("f", [2, 3])
def test_random_equivocation_and_validity(f):
    rng = random.Random(f)
    for _ in range(60):
        assert random_equivocation_run(f, rng).conflicting_deliveries() == []
        net = random_validity_run(f, rng)
        bodies = {tuple(m.body for m in msgs) for msgs in net.deliveries().values()}
        assert len(bodies) == 1 and len(next(iter(bodies))) == 1


@dataclass(frozen=True)
class LowThreshold(WitnessConfig):
    @property
    def threshold(self) -> int:
        return self.f + 1


def test_lowered_threshold_lets_equivocation_through():
    """Negative control: the detector must fire once the threshold is weakened."""
    base = WitnessConfig.for_validators(3, 1)
    net = TeelessNetwork(LowThreshold(base.validators, base.witnesses, 1), byzantine={0})
    a = net.byzantine_sign(0, 1, "A")
    b = net.byzantine_sign(0, 1, "B")
    net.inject(0, 1, a)
    net.inject(0, 2, b)
    net.step(0)
    net.step(0)
    assert net.conflicting_deliveries()
