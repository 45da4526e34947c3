"""Reliable broadcast providers.

``ideal``
    Every broadcast reaches every node exactly once; no equivocation is
    possible. The simulator implements it directly as per-receiver delivery
    events.

``teeless``
    Signed echo broadcast over ``3f + 1`` nodes: the validators plus enough
    witness nodes to reach that total. The origin sends a signed copy to
    everyone; a node echoes the first copy it sees for a key to every other
    node, the forwarder included (it needs the voucher); a validator delivers once ``n_total - f`` distinct
    nodes vouched for the same body. Witnesses echo but never deliver.
"""

from __future__ import annotations

import hashlib
import itertools
import random
from dataclasses import dataclass, field
from typing import Hashable, Iterable

Key = tuple[int, int]  # (origin, round)


def digest(body) -> str:
    return hashlib.sha256(repr(body).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Tag:
    """Unforgeable origin tag; stands in for a signature."""
    origin: int
    round: int
    digest: str


class Signer:
    """Issues and verifies tags. Nodes can only obtain tags for their own id."""

    def __init__(self) -> None:
        self._issued: set[Tag] = set()

    def sign(self, origin: int, round_: int, body) -> Tag:
        tag = Tag(origin, round_, digest(body))
        self._issued.add(tag)
        return tag

    def verify(self, msg: BcastMessage) -> bool:
        return (msg.tag in self._issued and msg.tag.origin == msg.origin
                and msg.tag.round == msg.round and msg.tag.digest == digest(msg.body))


@dataclass(frozen=True)
class BcastMessage:
    origin: int
    round: int
    body: Hashable
    tag: Tag

    @property
    def key(self) -> Key:
        return (self.origin, self.round)

    @property
    def digest(self) -> str:
        return self.tag.digest


@dataclass(frozen=True)
class WitnessConfig:
    validators: tuple[int, ...]
    witnesses: tuple[int, ...]
    f: int

    @property
    def n_total(self) -> int:
        return len(self.validators) + len(self.witnesses)

    @property
    def threshold(self) -> int:
        return self.n_total - self.f

    @property
    def nodes(self) -> tuple[int, ...]:
        return self.validators + self.witnesses

    @classmethod
    def for_validators(cls, n_validators: int, f: int) -> WitnessConfig:
        """Pad with witnesses up to ``3f + 1`` nodes (none needed when ``n >= 3f + 1``)."""
        extra = max(0, 3 * f + 1 - n_validators)
        return cls(tuple(range(n_validators)),
                   tuple(range(n_validators, n_validators + extra)), f)

    def __post_init__(self) -> None:
        if set(self.validators) & set(self.witnesses):
            raise ValueError("validators and witnesses must be disjoint")
        if self.n_total < 3 * self.f + 1:
            raise ValueError(f"TEE-less broadcast needs >= 3f+1 nodes, have {self.n_total}")


@dataclass
class RbInstanceState:
    key: Key
    first: str | None = None
    received_from: dict[str, set[int]] = field(default_factory=dict)
    bodies: dict[str, BcastMessage] = field(default_factory=dict)
    delivered: str | None = None
    conflicting: str | None = None

    def frozen(self) -> tuple:
        return (self.first, tuple(sorted((d, tuple(sorted(s))) for d, s in self.received_from.items())),
                self.delivered, self.conflicting)


# Actions returned by rb_on_receive
ECHO, RECORD, DELIVER, CONFLICT, DROP = "echo", "record", "deliver", "flag-conflict", "drop"


class RbNode:
    def __init__(self, node_id: int, config: WitnessConfig, signer: Signer):
        self.id = node_id
        self.config = config
        self.signer = signer
        self.is_validator = node_id in config.validators
        self.instances: dict[Key, RbInstanceState] = {}
        self.delivered: list[BcastMessage] = []

    def state(self, key: Key) -> RbInstanceState:
        st = self.instances.get(key)
        if st is None:
            st = self.instances[key] = RbInstanceState(key)
        return st

    def originate(self, msg: BcastMessage) -> list[tuple[int, BcastMessage]]:
        """Own broadcast: the origin delivers locally and sends to every other node."""
        st = self.state(msg.key)
        st.first = msg.digest
        st.bodies[msg.digest] = msg
        st.received_from.setdefault(msg.digest, set()).add(self.id)
        if self.is_validator and st.delivered is None:
            st.delivered = msg.digest
            self.delivered.append(msg)
        return [(to, msg) for to in self.config.nodes if to != self.id]

    def rb_on_receive(self, sender: int, msg: BcastMessage) -> tuple[list[str], list[tuple[int, BcastMessage]]]:
        """Process one copy; returns (actions, outgoing (to, msg) pairs)."""
        if not self.signer.verify(msg):
            return [DROP], []
        st = self.state(msg.key)
        d = msg.digest
        actions: list[str] = []
        out: list[tuple[int, BcastMessage]] = []
        vouchers = st.received_from.setdefault(d, set())
        st.bodies.setdefault(d, msg)
        if st.first is None:
            st.first = d
            vouchers.add(self.id)
            out = [(to, msg) for to in self.config.nodes if to != self.id]
            actions.append(ECHO)
        elif d != st.first and st.conflicting is None:
            st.conflicting = d
            actions.append(CONFLICT)
        vouchers.add(sender)
        actions.append(RECORD)
        if (self.is_validator and st.delivered is None
                and len(vouchers) >= self.config.threshold):
            st.delivered = d
            self.delivered.append(st.bodies[d])
            actions.append(DELIVER)
        return actions, out


def rb_broadcast(node: RbNode, round_: int, body) -> list[tuple[int, BcastMessage]]:
    tag = node.signer.sign(node.id, round_, body)
    return node.originate(BcastMessage(node.id, round_, body, tag))


# ---------------------------------------------------------------------------
# Standalone network used by the equivocation checks.

@dataclass(frozen=True)
class InFlight:
    src: int
    dst: int
    msg: BcastMessage


class TeelessNetwork:
    """Message pool + nodes; Byzantine nodes never process or echo."""

    def __init__(self, config: WitnessConfig, byzantine: Iterable[int] = ()):
        self.config = config
        self.signer = Signer()
        self.byzantine = set(byzantine)
        if len(self.byzantine) > config.f:
            raise ValueError("more Byzantine nodes than f")
        self.nodes = {i: RbNode(i, config, self.signer) for i in config.nodes}
        self.pool: list[InFlight] = []
        self.log: list[str] = []

    @property
    def honest(self) -> list[int]:
        return [i for i in self.config.nodes if i not in self.byzantine]

    def honest_broadcast(self, origin: int, round_: int, body) -> None:
        for to, msg in rb_broadcast(self.nodes[origin], round_, body):
            self._send(origin, to, msg)

    def byzantine_sign(self, origin: int, round_: int, body) -> BcastMessage:
        assert origin in self.byzantine
        return BcastMessage(origin, round_, body, self.signer.sign(origin, round_, body))

    def inject(self, src: int, dst: int, msg: BcastMessage) -> None:
        self._send(src, dst, msg)

    def _send(self, src: int, dst: int, msg: BcastMessage) -> None:
        if dst in self.byzantine:
            return
        self.pool.append(InFlight(src, dst, msg))

    def step(self, index: int) -> list[str]:
        m = self.pool.pop(index)
        actions, out = self.nodes[m.dst].rb_on_receive(m.src, m.msg)
        for a in actions:
            if a != RECORD:
                self.log.append(f"RB {m.msg.origin} {m.msg.round} {m.src} {m.dst} {a}")
        for to, msg in out:
            self._send(m.dst, to, msg)
        return actions

    def run_random(self, rng: random.Random) -> None:
        while self.pool:
            self.step(rng.randrange(len(self.pool)))

    def deliveries(self) -> dict[int, list[BcastMessage]]:
        """Protocol-layer deliveries per honest validator."""
        return {i: list(self.nodes[i].delivered) for i in self.config.validators
                if i not in self.byzantine}

    def conflicting_deliveries(self) -> list[tuple[Key, int, int]]:
        seen: dict[Key, tuple[int, str]] = {}
        bad = []
        for i, msgs in self.deliveries().items():
            for m in msgs:
                prev = seen.get(m.key)
                if prev is None:
                    seen[m.key] = (i, m.digest)
                elif prev[1] != m.digest:
                    bad.append((m.key, prev[0], i))
        return bad

    def frozen(self) -> tuple:
        nodes = tuple((i, tuple(sorted((k, st.frozen()) for k, st in self.nodes[i].instances.items())))
                      for i in self.honest)
        pool = tuple(sorted((m.src, m.dst, m.msg.digest) for m in self.pool))
        return nodes, pool


def equivocation_initial_sends(config: WitnessConfig, sender: int) -> Iterable[dict[int, tuple[str, ...]]]:
    """All ways a Byzantine sender can hand bodies A/B to the other nodes."""
    others = [i for i in config.nodes if i != sender]
    options = [(), ("A",), ("B",), ("A", "B")]
    for combo in itertools.product(options, repeat=len(others)):
        yield dict(zip(others, combo))


def exhaustive_equivocation_check(f: int = 1, n_validators: int | None = None,
                                  state_limit: int = 2_000_000) -> dict:
    """Explore every initial split and every delivery order for an equivocating sender.

    Returns counts of explored states and violations (two honest validators
    delivering different bodies for the same key).
    """
    n_validators = 2 * f + 1 if n_validators is None else n_validators
    config = WitnessConfig.for_validators(n_validators, f)
    sender = 0
    explored = 0
    violations = 0
    terminal_deliveries = 0
    for split in equivocation_initial_sends(config, sender):
        net = TeelessNetwork(config, byzantine={sender})
        msgs = {b: net.byzantine_sign(sender, 1, f"body-{b}") for b in ("A", "B")}
        for dst, bodies in split.items():
            for b in bodies:
                net.inject(sender, dst, msgs[b])
        seen: set = set()
        stack = [net]
        while stack:
            cur = stack.pop()
            key = cur.frozen()
            if key in seen:
                continue
            seen.add(key)
            explored += 1
            if explored > state_limit:
                raise RuntimeError("state limit exceeded")
            if cur.conflicting_deliveries():
                violations += 1
                continue
            if not cur.pool:
                terminal_deliveries += sum(len(v) for v in cur.deliveries().values())
            distinct = {}
            for i, m in enumerate(cur.pool):
                distinct.setdefault((m.src, m.dst, m.msg.digest), i)
            for i in distinct.values():
                nxt = _clone(cur)
                nxt.step(i)
                stack.append(nxt)
    return {"explored": explored, "violations": violations,
            "terminal_deliveries": terminal_deliveries}


def _clone(net: TeelessNetwork) -> TeelessNetwork:
    other = TeelessNetwork.__new__(TeelessNetwork)
    other.config = net.config
    other.signer = net.signer
    other.byzantine = net.byzantine
    other.nodes = {}
    for i, node in net.nodes.items():
        c = RbNode.__new__(RbNode)
        c.id, c.config, c.signer, c.is_validator = node.id, node.config, node.signer, node.is_validator
        c.instances = {k: RbInstanceState(st.key, st.first,
                                          {d: set(s) for d, s in st.received_from.items()},
                                          dict(st.bodies), st.delivered, st.conflicting)
                       for k, st in node.instances.items()}
        c.delivered = list(node.delivered)
        other.nodes[i] = c
    other.pool = list(net.pool)
    other.log = []
    return other


def random_equivocation_run(f: int, rng: random.Random, n_validators: int | None = None) -> TeelessNetwork:
    """Equivocating sender plus ``f - 1`` silent Byzantine nodes, random schedule."""
    n_validators = 2 * f + 1 if n_validators is None else n_validators
    config = WitnessConfig.for_validators(n_validators, f)
    sender = rng.choice(config.validators)
    others = [i for i in config.nodes if i != sender]
    silent = rng.sample(others, f - 1)
    net = TeelessNetwork(config, byzantine={sender, *silent})
    msgs = {b: net.byzantine_sign(sender, 1, f"body-{b}") for b in ("A", "B")}
    for dst in others:
        choice = rng.choice([(), ("A",), ("B",), ("A", "B")])
        for b in choice:
            net.inject(sender, dst, msgs[b])
    net.run_random(rng)
    return net


def random_validity_run(f: int, rng: random.Random, n_validators: int | None = None) -> TeelessNetwork:
    """Honest sender, ``f`` silent Byzantine nodes elsewhere, random schedule."""
    n_validators = 2 * f + 1 if n_validators is None else n_validators
    config = WitnessConfig.for_validators(n_validators, f)
    sender = rng.choice(config.validators)
    silent = rng.sample([i for i in config.nodes if i != sender], f)
    net = TeelessNetwork(config, byzantine=silent)
    net.honest_broadcast(sender, 1, f"payload-{sender}")
    net.run_random(rng)
    return net
