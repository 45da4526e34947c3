"""Scripted counterexample replays.

A script fixes a global DAG: every vertex's parents, for honest and Byzantine
sources alike. Honest validators still run the real protocol code; the
script only controls *delivery*. In phase ``r`` each honest validator ``p``
receives the causal closure of its "blue" set (the parents its round-``r+1``
vertex is supposed to have) and must then advance with exactly those
parents. Vertices more than ``flush_lag`` rounds old are delivered to
everyone at the end of each phase, and everything is delivered at the end,
so links stay reliable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .coin import SharedCoin
from .dag import Params, Vertex, VertexId
from .netsim import MessageRecord
from .protocols import LeaderRole, ProtocolKind, ProtocolState

Rows = dict[int, dict[int, list[int]]]  # round -> source -> parent sources


@dataclass
class ScenarioScript:
    name: str
    kind: ProtocolKind
    k: int
    f: int
    honest: list[int]
    byzantine: list[int]
    vertices: Rows
    coin_override: dict[int, int] = field(default_factory=dict)
    flush_lag: int = 2
    description: str = ""
    periodic: dict | None = None  # compact form used for export, if any

    def __post_init__(self) -> None:
        if isinstance(self.kind, str):
            self.kind = ProtocolKind.parse(self.kind)
        if len(self.byzantine) > self.f:
            raise ValueError("script corrupts more than f validators")
        if sorted(self.honest + self.byzantine) != list(range(self.params.n)):
            raise ValueError("honest and byzantine must partition the validators")

    @property
    def params(self) -> Params:
        return Params(f=self.f, k=self.k)

    @property
    def rounds(self) -> int:
        return max(self.vertices)

    def blue(self, p: int, r: int) -> list[int]:
        """Round-``r`` sources ``p`` holds when it leaves round ``r``."""
        return self.vertices[r + 1][p]

    def check_well_formed(self) -> list[str]:
        problems = []
        q = self.params.strong_quorum
        for r, row in sorted(self.vertices.items()):
            if len(row) < q:
                problems.append(f"round {r} has only {len(row)} vertices")
            for s, parents in row.items():
                if r == 1 and parents:
                    problems.append(f"({r},{s}) round-1 vertex with parents")
                if r > 1:
                    if len(parents) < q:
                        problems.append(f"({r},{s}) has {len(parents)} parents")
                    missing = [x for x in parents if x not in self.vertices.get(r - 1, {})]
                    if missing:
                        problems.append(f"({r},{s}) points to missing {missing}")
                    if s in self.honest and s not in parents:
                        problems.append(f"honest ({r},{s}) skips its own previous vertex")
            for p in self.honest:
                if r < self.rounds and p not in row:
                    problems.append(f"honest {p} has no round-{r} vertex")
        return problems

    def to_dict(self) -> dict:
        d = {"protocol": self.kind.value, "k": self.k, "f": self.f, "seed": 0,
             "delay_model": "adversarial", "adversary": "scripted",
             "waves": self.waves, "timeouts": None,
             "script": {"name": self.name, "description": self.description,
                        "honest": self.honest, "byzantine": self.byzantine,
                        "coin_override": {str(w): v for w, v in sorted(self.coin_override.items())},
                        "flush_lag": self.flush_lag}}
        if self.periodic is not None:
            d["script"]["periodic"] = self.periodic
        else:
            d["script"]["vertices"] = {str(r): {str(s): sorted(ps) for s, ps in sorted(row.items())}
                                       for r, row in sorted(self.vertices.items())}
        return d

    @property
    def waves(self) -> int:
        if self.kind is ProtocolKind.TUSK:
            return (self.rounds - 2) // 2
        return (self.rounds - 1) // 4

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioScript:
        s = d["script"]
        if "periodic" in s:
            pr = s["periodic"]
            vertices = _periodic_rows(pr)
        else:
            vertices = {int(r): {int(x): list(ps) for x, ps in row.items()}
                        for r, row in s["vertices"].items()}
        return cls(s["name"], d["protocol"], d["k"], d["f"], list(s["honest"]), list(s["byzantine"]),
                   vertices, {int(w): v for w, v in s.get("coin_override", {}).items()},
                   s.get("flush_lag", 2), s.get("description", ""), s.get("periodic"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> ScenarioScript:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ReplayResult:
    script: ScenarioScript
    states: dict[int, ProtocolState]
    trace_lines: list[str]
    mismatches: list[str]
    messages: list[MessageRecord]
    tusk_votes: dict[tuple[int, int], dict[int, int]] = field(default_factory=dict)

    def records(self):
        return {p: st.record for p, st in self.states.items()}

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace_lines)

    def direct_commits(self) -> dict[int, int]:
        return {p: sum(1 for e in st.record.entries if e.kind == "direct")
                for p, st in self.states.items()}

    def wave_leaders(self, wave: int) -> dict[int, list[VertexId]]:
        return {p: [e.slot.vertex_id for e in st.record.entries if e.slot.wave == wave]
                for p, st in self.states.items()}


def replay(script: ScenarioScript, *, ambiguous_choice: str | None = None,
           reanchor: bool = True, params: Params | None = None) -> ReplayResult:
    problems = script.check_well_formed()
    if problems:
        raise ValueError(f"ill-formed script {script.name}: {problems[:5]}")
    params = params or script.params
    kind = script.kind
    last = script.rounds
    trace: list[str] = []
    phase = 0

    def log(line: str) -> None:
        trace.append(f"{phase} {line}")

    coin = SharedCoin(params.n, params.f, 0, honest=set(script.honest),
                      override=script.coin_override)
    states = {p: ProtocolState(params, kind, p, coin, timeout=None, max_round=last,
                               reanchor=reanchor, ambiguous_choice=ambiguous_choice, log=log)
              for p in script.honest}
    store: dict[VertexId, Vertex] = {}
    for r, row in script.vertices.items():
        for s, parents in row.items():
            if s in script.byzantine:
                store[(r, s)] = Vertex(r, s, frozenset(parents), f"b{s}r{r}")
    created: dict[VertexId, int] = {}
    delivered_at: dict[tuple[VertexId, int], int] = {}
    mismatches: list[str] = []
    tusk_votes: dict[tuple[int, int], dict[int, int]] = {}

    def publish(p: int, vs: list[Vertex]) -> None:
        for v in vs:
            expected = script.vertices.get(v.round, {}).get(p)
            if expected is None or v.parents != frozenset(expected):
                mismatches.append(f"phase {phase}: {p} built {v!r} parents={sorted(v.parents)} "
                                  f"expected {expected}")
            store[v.id] = v
            created[v.id] = phase

    def give(p: int, vids) -> list[VertexId]:
        st = states[p]
        got = []
        for vid in sorted(vids):
            if vid in st.dag or vid[1] == p:
                continue
            publish(p, st.deliver(store[vid]))
            delivered_at[(vid, p)] = phase
            got.append(vid)
        return got

    for p in script.honest:
        publish(p, states[p].start())

    for r in range(1, last):
        phase = r
        for p in script.honest:
            st = states[p]
            if st.round != r:
                mismatches.append(f"phase {r}: {p} is at round {st.round}")
                continue
            targets = [(r, s) for s in script.blue(p, r)]
            got = give(p, _closure(store, targets, st.dag))
            trace.append(f"{r} RECV {p} " + " ".join(f"{vr}.{vs}" for vr, vs in got))
            if kind is ProtocolKind.TUSK and r % 2 == 1 and r >= 3:
                tusk_votes[(p, (r - 1) // 2)] = st.tusk_vote_counts((r - 1) // 2)
        for p in script.honest:
            old = r - script.flush_lag  # older rounds went out in earlier phases
            give(p, [(old, s) for s in script.vertices.get(old, {})])
    phase = last
    for p in script.honest:
        give(p, list(store))

    messages = [MessageRecord(vid[1], p, vid[0], vid[1], created[vid], delivered_at.get((vid, p)))
                for vid in sorted(created) for p in script.honest if p != vid[1]]
    return ReplayResult(script, states, trace, mismatches, messages, tusk_votes)


def _closure(store: dict[VertexId, Vertex], roots: list[VertexId], known=()) -> set[VertexId]:
    """Ancestors of ``roots`` (inclusive), not descending below ``known`` vertices."""
    out: set[VertexId] = set()
    stack = list(roots)
    while stack:
        vid = stack.pop()
        if vid in out or vid in known:
            continue
        out.add(vid)
        v = store[vid]
        stack.extend((vid[0] - 1, p) for p in v.parents)
    return out


def _periodic_rows(pr: dict) -> Rows:
    """Expand ``{"odd": {src: parents}, "even": {...}, "rounds": R}``.

    Round 1 holds every source in either table with no parents; even rounds
    use ``even`` (parents in the preceding odd round) and odd rounds >= 3 use
    ``odd``.
    """
    odd = {int(s): list(ps) for s, ps in pr["odd"].items()}
    even = {int(s): list(ps) for s, ps in pr["even"].items()}
    rows: Rows = {1: {s: [] for s in sorted(set(odd) | set(even))}}
    for r in range(2, pr["rounds"] + 1):
        rows[r] = {s: list(ps) for s, ps in (even if r % 2 == 0 else odd).items()}
    return rows


# -- Tusk, k=2: no direct commit ever ---------------------------------------------------
#
# Honest p0..p3, Byzantine 4..6, n = 7, f = 3. Honest vertices in even rounds
# (the vote rounds) point to EVEN_PARENTS[p]; odd-round vertices point to
# ODD_PARENTS[p]. At the end of any odd round r, an honest validator holds in
# round r-1 its own blue set plus the parents of its round-r blue set, and in
# that union no round-(r-2) vertex collects f+1 = 4 votes.

TUSK_EVEN_PARENTS = {0: [0, 1, 2, 5], 1: [1, 4, 5, 6], 2: [0, 2, 3, 4], 3: [3, 4, 5, 6],
                     4: [0, 2, 3, 6], 5: [0, 1, 3, 6], 6: [2, 3, 5, 6]}
TUSK_ODD_PARENTS = {0: [0, 1, 3, 5], 1: [0, 1, 2, 3], 2: [0, 1, 2, 3], 3: [1, 2, 3, 5],
                    4: [0, 1, 2, 5], 5: [0, 1, 2, 3], 6: [0, 1, 2, 5]}


def tusk_pattern_max_votes(even: dict[int, list[int]] = TUSK_EVEN_PARENTS,
                           odd: dict[int, list[int]] = TUSK_ODD_PARENTS,
                           honest=(0, 1, 2, 3), n: int = 7) -> int:
    """Largest vote count any leader-round vertex gets in an honest view at its trigger."""
    best = 0
    for p in honest:
        voters = set(odd[p])
        for y in even[p]:
            voters |= set(odd[y])
        for x in range(n):
            best = max(best, sum(1 for y in voters if x in even[y]))
    return best


def tusk_k2_liveness_scenario(wave_pairs: int = 100) -> ScenarioScript:
    waves = 2 * wave_pairs
    periodic = {"odd": {str(s): ps for s, ps in TUSK_ODD_PARENTS.items()},
                "even": {str(s): ps for s, ps in TUSK_EVEN_PARENTS.items()},
                "rounds": 2 * waves + 2}
    return ScenarioScript(
        "tusk-k2-liveness", ProtocolKind.TUSK, 2, 3, [0, 1, 2, 3], [4, 5, 6],
        _periodic_rows(periodic), {}, 2,
        f"Tusk k=2 f=3: {wave_pairs} repeated wave pairs with no direct commit", periodic)


def tusk_rethreshold(result: ReplayResult, weak_quorum: int) -> dict:
    """Re-evaluate the recorded Tusk votes against another ``f + 1`` threshold."""
    coin_hits = 0
    any_hits = 0
    for (p, wave), counts in sorted(result.tusk_votes.items()):
        leader = result.states[p].coin.value(wave)
        if counts.get(leader, 0) >= weak_quorum:
            coin_hits += 1
        if any(c >= weak_quorum for c in counts.values()):
            any_hits += 1
    return {"evaluations": len(result.tusk_votes), "commits": coin_hits,
            "committable": any_hits}


# -- asynchronous Bullshark, k=2: ambiguous indirect commit -------------------------------
#
# n = 5, f = 2; indices 0..4 are p1..p5. Byzantine p1 (0) and p3 (2).
# Wave 2 spans rounds 5..8: FirstSS(2) = p5 (4), SecondSS(2) = p1 (0), whose
# round-7 vertex is withheld; the coin picks p4 (3) as wave-2 fallback leader.
# p1 is a steady-state voter in wave 2, p4 and p5 are fallback voters. p4's
# view of rounds 6..8 only contains p1, p4 and p5, and p4 later commits the
# wave-3 fallback leader directly, so its backward pass sees one steady-state
# and two fallback voters for the two wave-2 candidates.

_BS_COMMON: Rows = {
    1: {0: [], 1: [], 3: [], 4: []},
    2: {0: [0, 1, 3], 1: [0, 1, 3], 2: [0, 1, 3], 3: [0, 3, 4], 4: [0, 3, 4]},
    3: {0: [0, 1, 2], 1: [0, 1, 2], 2: [0, 1, 2], 3: [0, 2, 3], 4: [0, 2, 4]},
    # round-4 vertices pointing at SecondSS(1) = (3, p4): p1, p2, p4
    4: {0: [0, 2, 3], 1: [0, 1, 3], 2: [0, 1, 2], 3: [0, 3, 4], 4: [0, 1, 4]},
    5: {0: [0, 1, 3], 3: [2, 3, 4], 4: [2, 3, 4]},
    6: {0: [0, 3, 4], 3: [0, 3, 4], 4: [0, 3, 4]},
    7: {2: [0, 3, 4], 3: [0, 3, 4], 4: [0, 3, 4]},
    8: {0: [2, 3, 4], 3: [2, 3, 4], 4: [2, 3, 4]},
}
_BS_TAIL_ROUNDS = range(9, 14)

# p2 and p3 at rounds 5..8, per completion
_BS_STEADY = {5: {1: [0, 1, 3], 2: [0, 1, 3]},
              6: {1: [0, 1, 4], 2: [0, 2, 4]},
              7: {1: [0, 1, 2]},
              8: {1: [1, 2, 3], 2: [1, 2, 3]}}
_BS_FALLBACK = {5: {1: [1, 2, 4], 2: [1, 2, 4]},
                6: {1: [1, 2, 3], 2: [1, 2, 3]},
                7: {1: [1, 2, 3]},
                8: {1: [1, 2, 3], 2: [1, 2, 3]}}
BS_COMPLETIONS = ("steady", "fallback")
BS_WAVE = 2


def bsasync_k2_safety_scenario(completion: str = "steady") -> ScenarioScript:
    if completion not in BS_COMPLETIONS:
        raise ValueError(f"completion must be one of {BS_COMPLETIONS}")
    extra = _BS_STEADY if completion == "steady" else _BS_FALLBACK
    rows: Rows = {r: {s: list(ps) for s, ps in row.items()} for r, row in _BS_COMMON.items()}
    for r, row in extra.items():
        rows[r].update({s: list(ps) for s, ps in row.items()})
    for r in _BS_TAIL_ROUNDS:
        rows[r] = {0: [0, 3, 4], 1: [1, 2, 3], 2: [1, 2, 3], 3: [0, 3, 4], 4: [0, 3, 4]}
    return ScenarioScript(
        f"bullshark-async-k2-safety-{completion}", ProtocolKind.BS_ASYNC, 2, 2, [1, 3, 4], [0, 2],
        rows, {1: 2, 2: 3, 3: 3}, 2,
        f"Bullshark async k=2 f=2: ambiguous indirect commit of wave {BS_WAVE}, "
        f"p2/p3 typed {completion}-state in wave {BS_WAVE}")


def indirect_rule(ss_votes: int, fb_votes: int, k: int, f: int) -> tuple[bool, bool]:
    """(steady candidate passes, fallback candidate passes) for the indirect rule."""
    low = (k - 2) * f + 1
    return ss_votes >= low and fb_votes <= f, fb_votes >= low and ss_votes <= f


def leader_for(result: ReplayResult, p: int, wave: int) -> LeaderRole | None:
    for e in result.states[p].record.entries:
        if e.slot.wave == wave:
            return e.slot.role
    return None


SCENARIOS = {
    "tusk-k2-liveness": tusk_k2_liveness_scenario,
    "bullshark-async-k2-safety": bsasync_k2_safety_scenario,
}
