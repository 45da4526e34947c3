"""Deterministic discrete-event network simulator.

Events are processed in ``(time, seq)`` order. All randomness comes from
named sub-streams of one seed, so a config plus seed reproduces a run
byte-for-byte. Honest validators stop creating vertices at a fixed round
budget and the queue then drains, so every send is eventually delivered
unless an (ill-formed) adversary drops it.
"""

from __future__ import annotations

import heapq
import json
import os
import random
from dataclasses import asdict, dataclass, field
from typing import Any

from .broadcast import RbNode, Signer, WitnessConfig, rb_broadcast, DELIVER, CONFLICT
from .coin import HIDDEN, CoinView, SharedCoin
from .dag import Params, Vertex
from .protocols import (CommitRecord, ProtocolKind, ProtocolState, Violation,
                        random_parent_chooser)

LOG_LEVELS = ("off", "events", "full")
DELAY_MODELS = ("adversarial", "random", "psync")
ADVERSARIES = ("none", "coin-gated", "withhold", "drop")
BYZANTINE_BEHAVIORS = ("silent", "active", "selective")


def substream(seed: int, name: str) -> random.Random:
    return random.Random(f"{seed}/{name}")


# -- delay models --------------------------------------------------------------

class DelayModel:
    """``delay`` returns a positive delay, or ``None`` to drop the message."""

    delta: int = 10

    def bind(self, sim: Simulator) -> None:
        self.sim = sim

    def delay(self, sender: int, receiver: int, vertex: Vertex, now: int) -> int | None:
        raise NotImplementedError


class RandomUniform(DelayModel):
    def __init__(self, rng: random.Random, lo: int = 1, hi: int = 10):
        if not 1 <= lo <= hi:
            raise ValueError(f"bad delay range [{lo}, {hi}]")
        self.rng, self.lo, self.hi = rng, lo, hi
        self.delta = hi

    def delay(self, sender, receiver, vertex, now):
        return self.rng.randint(self.lo, self.hi)


class PartialSync(DelayModel):
    """Uniform ``[1, delta]`` after GST; before it, arbitrary but capped at ``gst + delta``."""

    def __init__(self, rng: random.Random, gst: int = 0, delta: int = 10, pre_gst_max: int | None = None):
        if delta < 1 or gst < 0:
            raise ValueError("need delta >= 1 and gst >= 0")
        self.rng, self.gst, self.delta = rng, gst, delta
        self.pre_gst_max = pre_gst_max if pre_gst_max is not None else 10 * delta

    def delay(self, sender, receiver, vertex, now):
        if now >= self.gst:
            return self.rng.randint(1, self.delta)
        d = self.rng.randint(1, self.pre_gst_max)
        return min(d, self.gst + self.delta - now)


class Adversarial(DelayModel):
    """Network controlled by a strategy object."""

    def __init__(self, strategy: AdversaryStrategy):
        self.strategy = strategy
        self.delta = strategy.base_hi

    def bind(self, sim):
        super().bind(sim)
        self.strategy.bind(sim)

    def delay(self, sender, receiver, vertex, now):
        return self.strategy.delay(sender, receiver, vertex, now)


class AdversaryStrategy:
    """Base strategy: benign uniform delays. Sees the coin only through a gated view."""

    def __init__(self, rng: random.Random, base_hi: int = 10):
        self.rng = rng
        self.base_hi = base_hi
        self.coin_view: CoinView | None = None

    def bind(self, sim: Simulator) -> None:
        self.sim = sim
        self.coin_view = sim.coin.adversary_view()

    def delay(self, sender, receiver, vertex, now) -> int | None:
        return self.rng.randint(1, self.base_hi)


class CoinGatedAdversary(AdversaryStrategy):
    """Slows ``f`` random senders per (round, receiver) and chases revealed leaders.

    Revealed coin values only ever arrive after the wave's votes are cast,
    so the chase is useless; that is the point of the gate.
    """

    def __init__(self, rng, base_hi=10, slow_factor=4):
        super().__init__(rng, base_hi)
        self.slow_factor = slow_factor
        self._slow: dict[tuple[int, int], frozenset[int]] = {}

    def delay(self, sender, receiver, vertex, now):
        sim = self.sim
        key = (vertex.round, receiver)
        slow = self._slow.get(key)
        if slow is None:
            others = [i for i in range(sim.params.n) if i != receiver]
            slow = self._slow[key] = frozenset(self.rng.sample(others, sim.params.f))
        d = self.rng.randint(1, self.base_hi)
        if sender in slow:
            d += self.slow_factor * self.base_hi
        kind = sim.config.kind
        wave, slot = kind.wave_of(vertex.round)
        if kind.uses_coin and slot == 1:
            answer = self.coin_view.peek(wave)
            if answer is not HIDDEN and answer == vertex.source:
                d += self.slow_factor * self.base_hi
            sim.trace("full", f"ADV peek wave={wave} answer={answer!r}")
        return d


class WithholdAdversary(AdversaryStrategy):
    """Withholds a random fraction of messages for a long time, then releases them."""

    def __init__(self, rng, base_hi=10, fraction=0.05, hold=1000):
        super().__init__(rng, base_hi)
        self.fraction, self.hold = fraction, hold

    def delay(self, sender, receiver, vertex, now):
        d = self.rng.randint(1, self.base_hi)
        if self.rng.random() < self.fraction:
            d += self.hold
        return d


class DroppingAdversary(AdversaryStrategy):
    """Ill-formed: permanently drops the first honest-to-honest message it sees."""

    def __init__(self, rng, base_hi=10):
        super().__init__(rng, base_hi)
        self.dropped = False

    def delay(self, sender, receiver, vertex, now):
        if not self.dropped and self.sim.is_honest(sender) and self.sim.is_honest(receiver):
            self.dropped = True
            return None
        return self.rng.randint(1, self.base_hi)


STRATEGIES: dict[str, type[AdversaryStrategy]] = {
    "none": AdversaryStrategy,
    "coin-gated": CoinGatedAdversary,
    "withhold": WithholdAdversary,
    "drop": DroppingAdversary,
}


# -- config and results ----------------------------------------------------------

@dataclass
class SimConfig:
    kind: ProtocolKind
    k: int
    f: int
    delay_model: str = "random"
    delay_lo: int = 1
    delay_hi: int = 10
    gst: int = 0
    delta: int = 10
    adversary: str = "none"
    byzantine: str = "silent"
    faults: int | None = None  # number of corrupt validators; defaults to f
    corrupt: list[int] | None = None
    waves: int = 10
    seed: int = 0
    timeout: int | str | None = "auto"
    broadcast: str = "ideal"
    reanchor: bool = True
    ambiguous_choice: str | None = None
    coin_override: dict[int, int] = field(default_factory=dict)
    max_events: int = 20_000_000
    log_level: str | None = None

    def __post_init__(self) -> None:
        if isinstance(self.kind, str):
            self.kind = ProtocolKind.parse(self.kind)
        self.params  # validates k, f
        if self.delay_model not in DELAY_MODELS:
            raise ValueError(f"unknown delay model {self.delay_model!r}")
        if self.adversary not in STRATEGIES:
            raise ValueError(f"unknown adversary {self.adversary!r}")
        if self.byzantine not in BYZANTINE_BEHAVIORS:
            raise ValueError(f"unknown Byzantine behavior {self.byzantine!r}")
        if self.broadcast not in ("ideal", "teeless"):
            raise ValueError(f"unknown broadcast provider {self.broadcast!r}")
        if self.n_faults > self.f:
            raise ValueError(f"{self.n_faults} corrupt validators exceeds f={self.f}")
        if self.waves < 1:
            raise ValueError("waves must be >= 1")
        if self.kind is ProtocolKind.BS_PSYNC and self.delay_model == "adversarial":
            raise ValueError("bullshark-psync needs the psync or random delay model")
        self.coin_override = {int(w): int(v) for w, v in self.coin_override.items()}

    @property
    def params(self) -> Params:
        return Params(f=self.f, k=self.k)

    @property
    def n_faults(self) -> int:
        if self.corrupt is not None:
            return len(self.corrupt)
        return self.f if self.faults is None else self.faults

    @property
    def delta_bound(self) -> int:
        return self.delta if self.delay_model == "psync" else self.delay_hi

    @property
    def effective_timeout(self) -> int | None:
        if not self.kind.uses_timeouts:
            return None
        if self.timeout == "auto":
            return 4 * self.delta_bound
        return self.timeout

    @property
    def max_round(self) -> int:
        if self.kind is ProtocolKind.TUSK:
            return 2 * self.waves + 2
        return 4 * self.waves + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["protocol"] = self.kind.value
        del d["kind"]
        d["coin_override"] = {str(w): v for w, v in sorted(self.coin_override.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        d = dict(d)
        kind = d.pop("protocol", None) or d.pop("kind")
        timeouts = d.pop("timeouts", None)
        if timeouts is not None:
            d["timeout"] = timeouts
        if "delay_model" in d and isinstance(d["delay_model"], dict):
            dm = d.pop("delay_model")
            d["delay_model"] = dm["type"]
            for key in ("delay_lo", "delay_hi", "gst", "delta"):
                if key in dm:
                    d[key] = dm[key]
        return cls(kind=kind, **d)

    @classmethod
    def load(cls, path: str) -> SimConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class MessageRecord:
    sender: int
    receiver: int
    round: int
    source: int
    send_time: int
    deliver_time: int | None = None
    honest: bool = True


@dataclass
class RunResult:
    config: SimConfig
    honest: list[int]
    corrupt: list[int]
    states: dict[int, ProtocolState]
    trace_lines: list[str]
    messages: list[MessageRecord]
    violations: list[Violation]
    truncated: bool
    coin: SharedCoin
    end_time: int
    events: int
    rb_conflicts: int = 0
    adversary_queries: list[tuple[int, int, Any]] = field(default_factory=list)

    @property
    def params(self) -> Params:
        return self.config.params

    def records(self) -> dict[int, CommitRecord]:
        return {i: self.states[i].record for i in self.honest}

    def dags(self):
        return {i: self.states[i].dag for i in self.honest}

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace_lines)


# -- the simulator ---------------------------------------------------------------

DELIVER_EV, TIMEOUT_EV, RB_EV = 0, 1, 2


class Simulator:
    def __init__(self, config: SimConfig):
        self.config = config
        self.params = config.params
        n = self.params.n
        seed = config.seed
        self.log_level = config.log_level or os.environ.get("QUORUMDAG_LOG", "events")
        if self.log_level not in LOG_LEVELS:
            raise ValueError(f"QUORUMDAG_LOG must be one of {LOG_LEVELS}")
        self._level_no = LOG_LEVELS.index(self.log_level)

        if config.corrupt is not None:
            corrupt = sorted(config.corrupt)
        else:
            corrupt = sorted(substream(seed, "corrupt").sample(range(n), config.n_faults))
        self.corrupt = corrupt
        self.honest = [i for i in range(n) if i not in corrupt]
        self._honest_set = set(self.honest)

        self.now = 0
        self.events = 0
        self._seq = 0
        self._queue: list[tuple] = []
        self.trace_lines: list[str] = []
        self.messages: list[MessageRecord] = []

        self.coin = SharedCoin(n, self.params.f, seed, honest=set(self.honest),
                               override=config.coin_override, on_reveal=self._on_coin_reveal)
        self.coin.event_clock = lambda: self.events

        self.delay_model = self._make_delay_model(seed)
        self.delay_model.bind(self)

        timeout = config.effective_timeout
        byz_rng = substream(seed, "byzantine")
        self.states: dict[int, ProtocolState] = {}
        for i in range(n):
            if i in corrupt and config.byzantine == "silent":
                continue
            byz = i in corrupt
            self.states[i] = ProtocolState(
                self.params, config.kind, i, self.coin, timeout=timeout,
                max_round=config.max_round, reanchor=config.reanchor,
                ambiguous_choice=config.ambiguous_choice, byzantine=byz,
                parent_chooser=random_parent_chooser(byz_rng) if byz else None,
                log=self._protocol_log)
        self._selective_rng = substream(seed, "selective")
        self._selective: dict[tuple[int, int], frozenset[int]] = {}

        self.rb_nodes: dict[int, RbNode] = {}
        self.rb_conflicts = 0
        if config.broadcast == "teeless":
            wc = WitnessConfig.for_validators(n, self.params.f)
            signer = Signer()
            self.rb_nodes = {i: RbNode(i, wc, signer) for i in wc.nodes
                             if not (i in corrupt and config.byzantine == "silent")}
        self.truncated = False

    def _make_delay_model(self, seed: int) -> DelayModel:
        c = self.config
        rng = substream(seed, "delays")
        if c.delay_model == "random":
            return RandomUniform(rng, c.delay_lo, c.delay_hi)
        if c.delay_model == "psync":
            return PartialSync(rng, c.gst, c.delta)
        strategy = STRATEGIES[c.adversary if c.adversary != "none" else "coin-gated"]
        return Adversarial(strategy(substream(seed, "adversary"), c.delay_hi))

    # -- helpers ------------------------------------------------------------------
    def is_honest(self, i: int) -> bool:
        # witnesses (ids >= n) are honest nodes
        return i in self._honest_set or i >= self.params.n

    def trace(self, level: str, line: str) -> None:
        if LOG_LEVELS.index(level) <= self._level_no:
            self.trace_lines.append(f"{self.now} {line}")

    def _protocol_log(self, line: str) -> None:
        self.trace("events", line)

    def _on_coin_reveal(self, inst) -> None:
        self.trace("events", f"COIN wave={inst.wave} value={inst.value} invokers={len(inst.invokers)}")

    def _push(self, time: int, kind: int, *payload) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (time, self._seq, kind, payload))

    # -- sending --------------------------------------------------------------------
    def _message_delay(self, sender: int, receiver: int, vertex: Vertex) -> int | None:
        d = self.delay_model.delay(sender, receiver, vertex, self.now)
        if (d is not None and self.config.byzantine == "selective"
                and sender in self.corrupt and sender == vertex.source):
            key = (vertex.round, sender)
            late = self._selective.get(key)
            if late is None:
                pool = sorted(self.honest)
                late = self._selective[key] = frozenset(
                    self._selective_rng.sample(pool, len(pool) // 2))
            if receiver in late:
                d += 5 * self.config.delta_bound
        return d

    def _send(self, sender: int, receiver: int, vertex: Vertex, kind: int, extra=None) -> None:
        rec = MessageRecord(sender, receiver, vertex.round, vertex.source, self.now,
                            honest=self.is_honest(sender) and self.is_honest(receiver))
        self.messages.append(rec)
        d = self.delay_model.delay(sender, receiver, vertex, self.now) if kind == RB_EV \
            else self._message_delay(sender, receiver, vertex)
        self.trace("full", f"SEND {sender}->{receiver} r={vertex.round} src={vertex.source}"
                   + ("" if d is not None else " DROPPED"))
        if d is None:
            return
        if d < 1:
            raise ValueError("delay model returned a non-positive delay")
        self._push(self.now + d, kind, rec, vertex, extra)

    def _broadcast(self, origin: int, vertices: list[Vertex]) -> None:
        for v in vertices:
            if self.config.effective_timeout is not None and origin in self._honest_set:
                self._push(self.now + self.config.effective_timeout, TIMEOUT_EV, origin, v.round)
            if self.rb_nodes:
                node = self.rb_nodes[origin]
                for to, msg in rb_broadcast(node, v.round, v):
                    self._send(origin, to, v, RB_EV, msg)
            else:
                for to in range(self.params.n):
                    if to != origin:
                        self._send(origin, to, v, DELIVER_EV)

    # -- main loop --------------------------------------------------------------------
    def run(self) -> RunResult:
        for i in sorted(self.states):
            self._broadcast(i, self.states[i].start())
        budget = self.config.max_events
        while self._queue:
            if self.events >= budget:
                self.truncated = True
                self.trace("events", "TRUNCATED")
                break
            time, _, kind, payload = heapq.heappop(self._queue)
            self.now = time
            self.events += 1
            if kind == TIMEOUT_EV:
                who, round_ = payload
                self.trace("full", f"TIMEOUT {who} r={round_}")
                self._broadcast(who, self.states[who].on_timeout(round_))
                continue
            rec, vertex, msg = payload
            rec.deliver_time = time
            if kind == RB_EV:
                self._rb_receive(rec, msg)
                continue
            self.trace("full", f"DELIVER {rec.sender}->{rec.receiver} r={vertex.round} src={vertex.source}")
            st = self.states.get(rec.receiver)
            if st is not None:
                self._broadcast(rec.receiver, st.deliver(vertex))
        violations = [v for i in self.honest for v in self.states[i].violations]
        queries = list(self.delay_model.strategy.coin_view.queries) \
            if isinstance(self.delay_model, Adversarial) else []
        return RunResult(self.config, self.honest, self.corrupt, self.states, self.trace_lines,
                         self.messages, violations, self.truncated, self.coin, self.now,
                         self.events, self.rb_conflicts, queries)

    def _rb_receive(self, rec: MessageRecord, msg) -> None:
        node = self.rb_nodes.get(rec.receiver)
        if node is None:
            return
        actions, out = node.rb_on_receive(rec.sender, msg)
        self.trace("full", f"RB {msg.origin} {msg.round} {rec.sender} {rec.receiver} {'+'.join(actions)}")
        if CONFLICT in actions:
            self.rb_conflicts += 1
        for to, m in out:
            self._send(rec.receiver, to, m.body, RB_EV, m)
        if DELIVER in actions:
            st = self.states.get(rec.receiver)
            if st is not None:
                self._broadcast(rec.receiver, st.deliver(node.delivered[-1].body))


def run_sim(config: SimConfig) -> RunResult:
    return Simulator(config).run()


def honest_delivery_oracle(result: RunResult | list[MessageRecord]) -> bool:
    """True iff every honest-to-honest send was delivered."""
    messages = result.messages if isinstance(result, RunResult) else result
    return all(m.deliver_time is not None for m in messages if m.honest)


def psync_bound_violations(result: RunResult) -> list[MessageRecord]:
    """Honest messages sent after GST that took longer than delta."""
    c = result.config
    return [m for m in result.messages
            if m.honest and m.send_time >= c.gst and m.deliver_time is not None
            and m.deliver_time - m.send_time > c.delta]


def config_from_json(text: str) -> SimConfig:
    return SimConfig.from_dict(json.loads(text))

