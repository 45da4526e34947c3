"""Local DAG structures shared by every protocol.

A vertex is identified by ``(round, source)``; parents always live in the
previous round, so a vertex stores only the *sources* of its parents.
Reachability is answered from per-vertex source masks covering a sliding
window of lower rounds, falling back to mask propagation for long jumps.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

VertexId = tuple[int, int]  # (round, source)

REACH_WINDOW = 8


@dataclass(frozen=True)
class Params:
    f: int
    k: int

    def __post_init__(self) -> None:
        if self.f < 1:
            raise ValueError(f"f must be >= 1, got {self.f}")
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")

    @property
    def n(self) -> int:
        return self.k * self.f + 1

    @property
    def strong_quorum(self) -> int:
        return (self.k - 1) * self.f + 1

    @property
    def weak_quorum(self) -> int:
        return self.f + 1

    @property
    def intersection(self) -> int:
        """Minimum overlap of two strong quorums drawn from ``n`` elements."""
        return 2 * self.strong_quorum - self.n

    def to_dict(self) -> dict:
        return {"f": self.f, "k": self.k, "n": self.n}


def wave_round(wave: int, slot: int, wave_len: int = 4, pipelined: bool = False) -> int:
    """Absolute round number of ``slot`` (1-based) inside ``wave``."""
    if wave < 1 or not 1 <= slot <= wave_len:
        raise ValueError(f"bad wave coordinate ({wave}, {slot}) for wave_len={wave_len}")
    if pipelined:
        return 2 * (wave - 1) + slot
    return (wave - 1) * wave_len + slot


def round_wave(round_: int, wave_len: int = 4) -> tuple[int, int]:
    """Inverse of the non-pipelined mapping: ``round -> (wave, slot)``."""
    return (round_ - 1) // wave_len + 1, (round_ - 1) % wave_len + 1


@dataclass(frozen=True, order=True)
class Vertex:
    round: int
    source: int
    parents: frozenset[int] = field(default_factory=frozenset, compare=False)
    payload: str = field(default="", compare=False)

    @property
    def id(self) -> VertexId:
        return (self.round, self.source)

    def same_as(self, other: Vertex) -> bool:
        return (self.id == other.id and self.parents == other.parents
                and self.payload == other.payload)

    def to_dict(self) -> dict:
        return {"source": self.source, "round": self.round,
                "parents": sorted(self.parents), "payload": self.payload}

    @classmethod
    def from_dict(cls, d: dict) -> Vertex:
        return cls(d["round"], d["source"], frozenset(d.get("parents", ())),
                   d.get("payload", ""))

    def __repr__(self) -> str:
        return f"V(r{self.round},p{self.source})"


def make_vertex(round_: int, source: int, parents: Iterable[int] = (), payload: str = "") -> Vertex:
    return Vertex(round_, source, frozenset(parents), payload)


class AddResult(Enum):
    ADDED = "added"
    BUFFERED = "buffered"
    REJECTED = "rejected"
    DUPLICATE = "duplicate"


class EquivocationError(RuntimeError):
    """Two different vertices for one (source, round) reached a local DAG."""


def validate_shape(v: Vertex, params: Params) -> None:
    if not 0 <= v.source < params.n:
        raise ValueError(f"{v!r}: source outside [0, {params.n})")
    if v.round < 1:
        raise ValueError(f"{v!r}: round must be >= 1")
    if v.round == 1 and v.parents:
        raise ValueError(f"{v!r}: round-1 vertices have no parents")
    if v.round > 1 and len(v.parents) < params.strong_quorum:
        raise ValueError(f"{v!r}: {len(v.parents)} parents < strong quorum {params.strong_quorum}")
    if any(not 0 <= p < params.n for p in v.parents):
        raise ValueError(f"{v!r}: parent source outside [0, {params.n})")


class LocalDag:
    """One validator's view of the DAG."""

    def __init__(self, params: Params, owner: int = 0, *, check_shape: bool = True):
        self.params = params
        self.owner = owner
        self.check_shape = check_shape
        self.by_round: dict[int, dict[int, Vertex]] = defaultdict(dict)
        # reach[vid][d] = mask of sources at round (vid.round - d) reachable from vid
        self._reach: dict[VertexId, list[int]] = {}
        self._pending: dict[VertexId, Vertex] = {}
        self._waiting_on: dict[VertexId, set[VertexId]] = defaultdict(set)
        self.insertion_log: list[VertexId] = []
        self.conflicts: list[tuple[Vertex, Vertex]] = []

    # -- membership -----------------------------------------------------
    def __contains__(self, vid) -> bool:
        if isinstance(vid, Vertex):
            vid = vid.id
        r, s = vid
        return s in self.by_round.get(r, ())

    def get(self, round_: int, source: int) -> Vertex | None:
        return self.by_round.get(round_, {}).get(source)

    def round_vertices(self, round_: int) -> list[Vertex]:
        row = self.by_round.get(round_, {})
        return [row[s] for s in sorted(row)]

    def round_sources(self, round_: int) -> frozenset[int]:
        return frozenset(self.by_round.get(round_, ()))

    def count(self, round_: int) -> int:
        return len(self.by_round.get(round_, ()))

    def __len__(self) -> int:
        return len(self._reach)

    def __iter__(self) -> Iterator[Vertex]:
        for r in sorted(self.by_round):
            yield from self.round_vertices(r)

    @property
    def max_round(self) -> int:
        return max((r for r, row in self.by_round.items() if row), default=0)

    @property
    def pending(self) -> list[Vertex]:
        return sorted(self._pending.values())

    # -- insertion ------------------------------------------------------
    def add_vertex(self, v: Vertex) -> AddResult:
        """Insert ``v``; buffered vertices are retried when their parents land.

        Returns the outcome for ``v`` itself. Vertices released from the
        buffer by this call are visible through :attr:`insertion_log`.
        """
        if self.check_shape:
            validate_shape(v, self.params)
        existing = self.get(v.round, v.source)
        if existing is None:
            existing = self._pending.get(v.id)
        if existing is not None:
            if existing.same_as(v):
                return AddResult.DUPLICATE
            self.conflicts.append((existing, v))
            return AddResult.REJECTED
        missing = {(v.round - 1, p) for p in v.parents} - self._present_ids(v.round - 1, v.parents)
        if missing:
            self._pending[v.id] = v
            for m in missing:
                self._waiting_on[m].add(v.id)
            return AddResult.BUFFERED
        self._insert(v)
        return AddResult.ADDED

    def _present_ids(self, round_: int, sources: Iterable[int]) -> set[VertexId]:
        row = self.by_round.get(round_, {})
        return {(round_, s) for s in sources if s in row}

    def _insert(self, v: Vertex) -> None:
        stack = [v]
        while stack:
            cur = stack.pop()
            self.by_round[cur.round][cur.source] = cur
            self._reach[cur.id] = self._compute_reach(cur)
            self.insertion_log.append(cur.id)
            for child_id in sorted(self._waiting_on.pop(cur.id, ())):
                child = self._pending.get(child_id)
                if child is None:
                    continue
                if all(p in self.by_round.get(child.round - 1, ()) for p in child.parents):
                    del self._pending[child_id]
                    stack.append(child)

    def force_insert(self, v: Vertex) -> None:
        """Insert without shape or parent checks (negative controls only)."""
        self.by_round[v.round][v.source] = v
        self._reach[v.id] = self._compute_reach(v)
        self.insertion_log.append(v.id)

    def _compute_reach(self, v: Vertex) -> list[int]:
        masks = [1 << v.source]
        if v.round == 1 or not v.parents:
            return masks
        parent_reach = [self._reach[(v.round - 1, p)] for p in v.parents
                        if (v.round - 1, p) in self._reach]
        depth = min(REACH_WINDOW, v.round)
        for d in range(1, depth):
            m = 0
            for pr in parent_reach:
                if d - 1 < len(pr):
                    m |= pr[d - 1]
            if not m:
                break
            masks.append(m)
        return masks

    # -- reachability ---------------------------------------------------
    def reach_mask(self, u: VertexId | Vertex, target_round: int) -> int:
        """Mask of sources at ``target_round`` reachable from ``u`` (reflexive)."""
        if isinstance(u, Vertex):
            u = u.id
        r, s = u
        if u not in self._reach or target_round > r:
            return 0
        d = r - target_round
        masks = self._reach[u]
        if d < len(masks):
            return masks[d]
        if len(masks) < REACH_WINDOW:
            return 0  # chain ended early (truncated history)
        cur_round = r - (REACH_WINDOW - 1)
        mask = masks[-1]
        while cur_round > target_round and mask:
            step = min(REACH_WINDOW - 1, cur_round - target_round)
            nxt = 0
            row = self.by_round.get(cur_round, {})
            for src in _bits(mask):
                if src in row:
                    pm = self._reach[(cur_round, src)]
                    if step < len(pm):
                        nxt |= pm[step]
            mask = nxt
            cur_round -= step
        return mask

    def strong_path(self, u: VertexId | Vertex, v: VertexId | Vertex) -> bool:
        """True iff ``u == v`` or a parent chain leads from ``u`` down to ``v``."""
        if isinstance(v, Vertex):
            v = v.id
        if v not in self._reach:
            return False
        return bool(self.reach_mask(u, v[0]) >> v[1] & 1)

    def causal_history(self, v: VertexId | Vertex) -> set[Vertex]:
        if isinstance(v, Vertex):
            v = v.id
        out: set[Vertex] = set()
        for r in range(v[0], 0, -1):
            mask = self.reach_mask(v, r)
            if not mask:
                break
            row = self.by_round.get(r, {})
            out.update(row[s] for s in _bits(mask) if s in row)
        return out

    # -- export ---------------------------------------------------------
    def snapshot(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "owner": self.owner,
            "rounds": [
                {"round": r,
                 "vertices": [{"source": v.source, "parents": sorted(v.parents)}
                              for v in self.round_vertices(r)]}
                for r in sorted(self.by_round) if self.by_round[r]
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True)

    @classmethod
    def from_snapshot(cls, snap: dict) -> LocalDag:
        p = snap["params"]
        dag = cls(Params(f=p["f"], k=p["k"]), owner=snap.get("owner", 0))
        for row in sorted(snap["rounds"], key=lambda x: x["round"]):
            for vd in row["vertices"]:
                dag.add_vertex(make_vertex(row["round"], vd["source"], vd["parents"]))
        return dag


def _bits(mask: int) -> Iterator[int]:
    i = 0
    while mask:
        if mask & 1:
            yield i
        mask >>= 1
        i += 1


def linearize_history(dag: LocalDag, leaders: Iterable[Vertex | VertexId],
                      delivered: set[VertexId] | None = None) -> list[Vertex]:
    """Order the causal histories of ``leaders`` deterministically.

    Each leader contributes its not-yet-output history sorted by
    ``(round, source)``. ``delivered`` is updated in place when given, which
    lets callers extend an existing output incrementally.
    """
    seen = delivered if delivered is not None else set()
    out: list[Vertex] = []
    for leader in leaders:
        lid = leader.id if isinstance(leader, Vertex) else leader
        block = []
        stack = [lid]
        while stack:
            vid = stack.pop()
            if vid in seen:
                continue
            seen.add(vid)
            v = dag.get(*vid)
            block.append(v)
            stack.extend((vid[0] - 1, p) for p in v.parents if (vid[0] - 1, p) not in seen)
        block.sort()
        out.extend(block)
    return out
