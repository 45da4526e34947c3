"""DAG-Rider, Tusk and both Bullshark instances over ``n = k*f + 1`` validators.

Every validator runs one :class:`ProtocolState`. The state owns its local
DAG, decides when to move to the next round, creates its own vertices and
applies the kind-specific direct/indirect commit rules at the trigger points
each protocol defines.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .coin import SharedCoin
from .dag import AddResult, LocalDag, Params, Vertex, VertexId, linearize_history, round_wave


class ProtocolKind(Enum):
    DAG_RIDER = "dagrider"
    TUSK = "tusk"
    BS_ASYNC = "bullshark-async"
    BS_PSYNC = "bullshark-psync"

    @property
    def wave_len(self) -> int:
        return 3 if self is ProtocolKind.TUSK else 4

    @property
    def pipelined(self) -> bool:
        return self is ProtocolKind.TUSK

    @property
    def uses_timeouts(self) -> bool:
        return self in (ProtocolKind.BS_ASYNC, ProtocolKind.BS_PSYNC)

    @property
    def uses_coin(self) -> bool:
        return self is not ProtocolKind.BS_PSYNC

    def wave_of(self, round_: int) -> tuple[int, int]:
        """``round -> (wave, slot)``; Tusk reports the wave whose first round it is."""
        if self.pipelined:
            return (round_ + 1) // 2, 1 if round_ % 2 else 2
        return round_wave(round_, self.wave_len)

    def wave_start(self, wave: int) -> int:
        return 2 * wave - 1 if self.pipelined else (wave - 1) * self.wave_len + 1

    @classmethod
    def parse(cls, name: str) -> ProtocolKind:
        aliases = {"dag-rider": cls.DAG_RIDER, "bs-async": cls.BS_ASYNC,
                   "bs-psync": cls.BS_PSYNC, "bullshark": cls.BS_ASYNC}
        name = name.lower()
        if name in aliases:
            return aliases[name]
        return cls(name)


class VoterType(Enum):
    STEADY = "steady-state"
    FALLBACK = "fallback"


class LeaderRole(Enum):
    WAVE_LEADER = "wave-leader"
    FIRST_SS = "first-ss"
    SECOND_SS = "second-ss"
    FALLBACK = "fallback"

    @property
    def steady(self) -> bool:
        return self in (LeaderRole.FIRST_SS, LeaderRole.SECOND_SS)


@dataclass(frozen=True)
class LeaderSlot:
    wave: int
    role: LeaderRole
    validator: int
    round: int

    @property
    def vertex_id(self) -> VertexId:
        return (self.round, self.validator)


@dataclass(frozen=True)
class CommitEntry:
    slot: LeaderSlot
    kind: str  # "direct" | "indirect"


@dataclass
class CommitRecord:
    entries: list[CommitEntry] = field(default_factory=list)
    order: list[VertexId] = field(default_factory=list)

    @property
    def leaders(self) -> list[VertexId]:
        return [e.slot.vertex_id for e in self.entries]

    def direct_waves(self) -> list[int]:
        return sorted({e.slot.wave for e in self.entries if e.kind == "direct"})


@dataclass(frozen=True)
class Violation:
    kind: str
    wave: int
    validator: int
    detail: str = ""

    def line(self) -> str:
        return f"VIOLATION {self.kind} wave={self.wave} validator={self.validator}"


def first_ss(wave: int, n: int) -> int:
    return (2 * wave) % n


def second_ss(wave: int, n: int) -> int:
    return (2 * wave + 1) % n


ParentChooser = Callable[["ProtocolState", list[int]], Iterable[int]]


class ProtocolState:
    """Per-validator protocol machine.

    ``timeout`` is only consulted by the Bullshark kinds; ``None`` means
    timers are treated as already expired (pure asynchrony). Byzantine
    states build vertices with ``parent_chooser`` and never commit.
    """

    def __init__(self, params: Params, kind: ProtocolKind, owner: int, coin: SharedCoin, *,
                 timeout: int | None = None, max_round: int | None = None,
                 reanchor: bool = True, ambiguous_choice: str | None = None,
                 byzantine: bool = False, parent_chooser: ParentChooser | None = None,
                 log: Callable[[str], None] | None = None):
        self.params = params
        self.kind = kind
        self.owner = owner
        self.coin = coin
        self.timeout = timeout
        self.max_round = max_round
        self.reanchor = reanchor
        if ambiguous_choice not in (None, "ss", "fb"):
            raise ValueError("ambiguous_choice must be None, 'ss' or 'fb'")
        self.ambiguous_choice = ambiguous_choice
        self.byzantine = byzantine
        self.parent_chooser = parent_chooser
        self._log = log or (lambda line: None)

        self.dag = LocalDag(params, owner)
        self.round = 0
        self._expired: set[int] = set()
        self._inserted_upto = 0
        self.vote_types: dict[tuple[int, int], VoterType] = {}
        self.committed: dict[int, LeaderSlot] = {}  # round -> slot
        self.last_committed_round = 0
        self.record = CommitRecord()
        self._delivered: set[VertexId] = set()
        self.violations: list[Violation] = []
        self.wave_outcomes: dict[int, bool] = {}  # wave -> direct commit at its evaluation
        self.coin_calls: set[int] = set()

    # -- leader schedule --------------------------------------------------
    @property
    def n(self) -> int:
        return self.params.n

    def first_ss_slot(self, wave: int) -> LeaderSlot:
        return LeaderSlot(wave, LeaderRole.FIRST_SS, first_ss(wave, self.n), self.kind.wave_start(wave))

    def second_ss_slot(self, wave: int) -> LeaderSlot:
        return LeaderSlot(wave, LeaderRole.SECOND_SS, second_ss(wave, self.n),
                          self.kind.wave_start(wave) + 2)

    def random_slot(self, wave: int) -> LeaderSlot:
        role = LeaderRole.FALLBACK if self.kind is ProtocolKind.BS_ASYNC else LeaderRole.WAVE_LEADER
        return LeaderSlot(wave, role, self.coin.value(wave), self.kind.wave_start(wave))

    def _toss(self, wave: int) -> int:
        self.coin_calls.add(wave)
        return self.coin.coin_toss(wave, self.owner)

    # -- lifecycle ----------------------------------------------------------
    def start(self) -> list[Vertex]:
        """Create the round-1 vertex."""
        if self.round:
            return []
        return self._emit(Vertex(1, self.owner, frozenset(), f"p{self.owner}r1"))

    def deliver(self, v: Vertex) -> list[Vertex]:
        res = self.dag.add_vertex(v)
        if res is AddResult.REJECTED:
            raise AssertionError(f"equivocation reached validator {self.owner}: {v!r}")
        self._absorb_insertions()
        return self.try_advance()

    def on_timeout(self, round_: int) -> list[Vertex]:
        self._expired.add(round_)
        if round_ != self.round:
            return []
        return self.try_advance()

    def _absorb_insertions(self) -> None:
        log = self.dag.insertion_log
        while self._inserted_upto < len(log):
            vid = log[self._inserted_upto]
            self._inserted_upto += 1
            if self.kind is ProtocolKind.BS_ASYNC:
                wave, slot = self.kind.wave_of(vid[0])
                if slot == 1:
                    self.vote_types[(vid[1], wave)] = self.assign_vote_type(self.dag.get(*vid))

    # -- round advancement --------------------------------------------------
    def timer_expired(self, round_: int) -> bool:
        return self.timeout is None or round_ in self._expired

    def can_advance(self) -> bool:
        r = self.round
        if r == 0 or (self.max_round is not None and r >= self.max_round):
            return False
        if self.dag.count(r) < self.params.strong_quorum:
            return False
        if self.byzantine or not self.kind.uses_timeouts or self.timer_expired(r):
            return True
        wave, slot = self.kind.wave_of(r)
        if slot in (1, 3):
            leader = self.first_ss_slot(wave) if slot == 1 else self.second_ss_slot(wave)
            return leader.vertex_id in self.dag
        leader = self.first_ss_slot(wave) if slot == 2 else self.second_ss_slot(wave)
        supporters = 0
        for u in self.dag.round_vertices(r):
            if leader.validator not in u.parents:
                continue
            if self.kind is ProtocolKind.BS_ASYNC and self.vote_type(u, wave) is not VoterType.STEADY:
                continue
            supporters += 1
        return supporters >= self.params.strong_quorum

    def try_advance(self) -> list[Vertex]:
        emitted: list[Vertex] = []
        while self.can_advance():
            r = self.round
            if not self.byzantine:
                self._on_round_complete(r)
            available = sorted(self.dag.round_sources(r))
            if self.byzantine and self.parent_chooser is not None:
                parents = frozenset(self.parent_chooser(self, available))
            else:
                parents = frozenset(available)
            emitted += self._emit(Vertex(r + 1, self.owner, parents, f"p{self.owner}r{r + 1}"))
        return emitted

    def _emit(self, v: Vertex) -> list[Vertex]:
        self.dag.add_vertex(v)
        self.round = v.round
        self._absorb_insertions()
        if not self.byzantine:
            self._on_own_vertex(v)
        return [v]

    # -- trigger points -----------------------------------------------------
    def _on_round_complete(self, r: int) -> None:
        kind = self.kind
        if kind is ProtocolKind.DAG_RIDER and r % 4 == 0:
            self.dagrider_direct_commit(r // 4)
        elif kind is ProtocolKind.TUSK and r % 2 == 1 and r >= 3:
            self.tusk_direct_commit((r - 1) // 2)

    def _on_own_vertex(self, v: Vertex) -> None:
        kind = self.kind
        if kind is ProtocolKind.BS_ASYNC:
            self.bsasync_direct_commit(v)
        elif kind is ProtocolKind.BS_PSYNC:
            self.bsps_direct_commit(v)

    # -- DAG-Rider ------------------------------------------------------------
    def dagrider_direct_commit(self, wave: int) -> LeaderSlot | None:
        self._toss(wave)
        slot = self.random_slot(wave)
        voters = 0
        if slot.vertex_id in self.dag:
            voters = sum(1 for u in self.dag.round_vertices(4 * wave)
                         if self.dag.strong_path(u, slot.vertex_id))
        ok = voters >= self.params.strong_quorum
        self.wave_outcomes[wave] = ok
        if ok:
            self._commit_direct(slot)
            return slot
        return None

    def dagrider_indirect_commit(self, committed: LeaderSlot) -> list[LeaderSlot]:
        return self._path_indirect(committed, self._random_leader_candidates(committed))

    # -- Tusk -----------------------------------------------------------------
    def tusk_direct_commit(self, wave: int) -> LeaderSlot | None:
        self._toss(wave)
        slot = self.random_slot(wave)
        voters = 0
        if slot.vertex_id in self.dag:
            voters = sum(1 for u in self.dag.round_vertices(slot.round + 1)
                         if slot.validator in u.parents)
        ok = voters >= self.params.weak_quorum
        self.wave_outcomes[wave] = ok
        if ok:
            self._commit_direct(slot)
            return slot
        return None

    def tusk_vote_counts(self, wave: int) -> dict[int, int]:
        """Round-2 votes each round-1 vertex of ``wave`` has in the current DAG."""
        r1 = self.kind.wave_start(wave)
        counts = {s: 0 for s in self.dag.round_sources(r1)}
        for u in self.dag.round_vertices(r1 + 1):
            for p in u.parents:
                if p in counts:
                    counts[p] += 1
        return counts

    def tusk_indirect_commit(self, committed: LeaderSlot) -> list[LeaderSlot]:
        return self._path_indirect(committed, self._random_leader_candidates(committed))

    def _random_leader_candidates(self, committed: LeaderSlot) -> list[LeaderSlot]:
        out = []
        for w in range(committed.wave - 1, 0, -1):
            slot = self.random_slot(w)
            if slot.round <= self.last_committed_round:
                break
            out.append(slot)
        return out

    # -- Bullshark (asynchronous) ---------------------------------------------
    def vote_type(self, u: Vertex | VertexId, wave: int) -> VoterType | None:
        """Type of ``u`` as a voter in ``wave``, or ``None`` if undefined.

        Defined only when the source's first-round vertex of ``wave`` lies in
        ``u``'s causal history, which keeps the answer identical across
        observers.
        """
        uid = u.id if isinstance(u, Vertex) else u
        anchor = (self.kind.wave_start(wave), uid[1])
        if not self.dag.strong_path(uid, anchor):
            return None
        return self.vote_types.get((uid[1], wave))

    def _typed_votes(self, voters: Iterable[Vertex], target: VertexId, wave: int,
                     want: VoterType) -> int:
        if target not in self.dag:
            return 0
        return sum(1 for u in voters
                   if self.dag.strong_path(u, target) and self.vote_type(u, wave) is want)

    def assign_vote_type(self, v: Vertex) -> VoterType:
        """Voting type of ``v.source`` in ``v``'s wave, from ``v``'s history alone."""
        wave, slot = self.kind.wave_of(v.round)
        assert slot == 1
        if wave == 1:
            return VoterType.STEADY
        prev = wave - 1
        votes = [self.dag.get(v.round - 1, p) for p in sorted(v.parents)]
        q = self.params.strong_quorum
        fb = self.random_slot(prev)
        if self._typed_votes(votes, fb.vertex_id, prev, VoterType.FALLBACK) >= q:
            return VoterType.STEADY
        ss2 = self.second_ss_slot(prev)
        if self._typed_votes(votes, ss2.vertex_id, prev, VoterType.STEADY) >= q:
            return VoterType.STEADY
        return VoterType.FALLBACK

    def bsasync_assign_vote_type(self, round1_vertex: Vertex) -> VoterType:
        return self.assign_vote_type(round1_vertex)

    def bsasync_direct_commit(self, trigger: Vertex) -> LeaderSlot | None:
        wave, slot = self.kind.wave_of(trigger.round)
        q = self.params.strong_quorum
        votes = [self.dag.get(trigger.round - 1, p) for p in sorted(trigger.parents)]
        if slot == 1 and wave >= 2:
            prev = wave - 1
            self._toss(prev)
            fb = self.random_slot(prev)
            ss2 = self.second_ss_slot(prev)
            committed = None
            if (not self._wave_has_committed(prev, steady=True)
                    and self._typed_votes(votes, fb.vertex_id, prev, VoterType.FALLBACK) >= q):
                committed = fb
            elif (not self._wave_has_committed(prev, steady=False)
                  and self._typed_votes(votes, ss2.vertex_id, prev, VoterType.STEADY) >= q):
                committed = ss2
            self.wave_outcomes[prev] = self.wave_outcomes.get(prev, False) or committed is not None
            if committed is not None:
                self._commit_direct(committed)
            return committed
        if slot == 3:
            ss1 = self.first_ss_slot(wave)
            if self._typed_votes(votes, ss1.vertex_id, wave, VoterType.STEADY) >= q:
                self.wave_outcomes[wave] = True
                self._commit_direct(ss1)
                return ss1
        return None

    def _wave_has_committed(self, wave: int, *, steady: bool) -> bool:
        return any(s.wave == wave and s.role.steady == steady for s in self.committed.values())

    def bsasync_indirect_commit(self, committed: LeaderSlot) -> list[LeaderSlot]:
        dag = self.dag
        anchor = committed.vertex_id
        low = (self.params.k - 2) * self.params.f + 1
        f = self.params.f
        out: list[LeaderSlot] = []
        ss_in_wave: set[int] = {s.wave for s in self.committed.values() if s.role.steady}
        fb_in_wave: set[int] = {s.wave for s in self.committed.values() if not s.role.steady}
        r = committed.round - 2
        while r > self.last_committed_round and r >= 1:
            wave, slot = self.kind.wave_of(r)
            if slot == 3:
                cand_ss, cand_fb = self.second_ss_slot(wave), None
            else:
                cand_ss, cand_fb = self.first_ss_slot(wave), self.random_slot(wave)
            ss_pool = [u for u in dag.round_vertices(r + 1) if dag.strong_path(anchor, u)]
            ss_votes = self._typed_votes(ss_pool, cand_ss.vertex_id, wave, VoterType.STEADY)
            fb_votes = 0
            if cand_fb is not None and wave not in ss_in_wave:
                fb_pool = [u for u in dag.round_vertices(r + 3) if dag.strong_path(anchor, u)]
                fb_votes = self._typed_votes(fb_pool, cand_fb.vertex_id, wave, VoterType.FALLBACK)
            ss_ok = ss_votes >= low and fb_votes <= f and wave not in fb_in_wave
            fb_ok = fb_votes >= low and ss_votes <= f and cand_fb is not None
            chosen = None
            if ss_ok and fb_ok:
                v = Violation("ambiguous-indirect", wave, self.owner,
                              f"ss_votes={ss_votes} fb_votes={fb_votes}")
                self.violations.append(v)
                self._log(v.line())
                if self.ambiguous_choice == "ss":
                    chosen = cand_ss
                elif self.ambiguous_choice == "fb":
                    chosen = cand_fb
            elif ss_ok:
                chosen = cand_ss
            elif fb_ok:
                chosen = cand_fb
            if chosen is not None:
                out.append(chosen)
                (ss_in_wave if chosen.role.steady else fb_in_wave).add(wave)
                if self.reanchor:
                    anchor = chosen.vertex_id
            r -= 2
        out.reverse()
        return out

    # -- Bullshark (partially synchronous) ------------------------------------
    def bsps_direct_commit(self, trigger: Vertex) -> LeaderSlot | None:
        wave, slot = self.kind.wave_of(trigger.round)
        if slot == 1 and wave >= 2:
            cand = self.second_ss_slot(wave - 1)
            outcome_wave = wave - 1
        elif slot == 3:
            cand = self.first_ss_slot(wave)
            outcome_wave = wave
        else:
            return None
        votes = 0
        if cand.vertex_id in self.dag:
            votes = sum(1 for p in trigger.parents
                        if self.dag.strong_path((trigger.round - 1, p), cand.vertex_id))
        ok = votes >= self.params.weak_quorum and cand.round > self.last_committed_round
        self.wave_outcomes[outcome_wave] = self.wave_outcomes.get(outcome_wave, False) or ok
        if ok:
            self._commit_direct(cand)
            return cand
        return None

    def bsps_indirect_commit(self, committed: LeaderSlot) -> list[LeaderSlot]:
        cands = []
        r = committed.round - 2
        while r > self.last_committed_round and r >= 1:
            wave, slot = self.kind.wave_of(r)
            cands.append(self.first_ss_slot(wave) if slot == 1 else self.second_ss_slot(wave))
            r -= 2
        return self._path_indirect(committed, cands)

    # -- shared commit machinery ----------------------------------------------
    def _path_indirect(self, committed: LeaderSlot, candidates: list[LeaderSlot]) -> list[LeaderSlot]:
        anchor = committed.vertex_id
        out = []
        for cand in candidates:
            if cand.vertex_id in self.dag and self.dag.strong_path(anchor, cand.vertex_id):
                out.append(cand)
                if self.reanchor:
                    anchor = cand.vertex_id
        out.reverse()
        return out

    def indirect_commit(self, committed: LeaderSlot) -> list[LeaderSlot]:
        kind = self.kind
        if kind is ProtocolKind.DAG_RIDER:
            return self.dagrider_indirect_commit(committed)
        if kind is ProtocolKind.TUSK:
            return self.tusk_indirect_commit(committed)
        if kind is ProtocolKind.BS_ASYNC:
            return self.bsasync_indirect_commit(committed)
        return self.bsps_indirect_commit(committed)

    def _commit_direct(self, slot: LeaderSlot) -> None:
        if slot.round <= self.last_committed_round:
            return
        for s in self.indirect_commit(slot):
            self._record(s, "indirect")
        self._record(slot, "direct")

    def _record(self, slot: LeaderSlot, kind: str) -> None:
        self.committed[slot.round] = slot
        self.last_committed_round = slot.round
        self.record.entries.append(CommitEntry(slot, kind))
        block = linearize_history(self.dag, [slot.vertex_id], self._delivered)
        self.record.order.extend(v.id for v in block)
        self._log(f"COMMIT {self.owner} {self.kind.value} wave={slot.wave} role={slot.role.value} "
                  f"kind={kind} leader={slot.validator} round={slot.round}")


def random_parent_chooser(rng: random.Random) -> ParentChooser:
    """Byzantine parent choice: exactly a strong quorum, picked at random."""
    def choose(state: ProtocolState, available: list[int]) -> list[int]:
        return rng.sample(available, state.params.strong_quorum)
    return choose
