from __future__ import annotations

import itertools
import random

import pytest

from quorumdag.dag import (AddResult, LocalDag, Params, make_vertex, round_wave, wave_round,
                           linearize_history)


def random_dag(params: Params, rounds: int, rng: random.Random) -> LocalDag:
    dag = LocalDag(params)
    for s in range(params.n):
        dag.add_vertex(make_vertex(1, s))
    for r in range(2, rounds + 1):
        for s in rng.sample(range(params.n), rng.randint(params.strong_quorum, params.n)):
            prev = sorted(dag.round_sources(r - 1))
            dag.add_vertex(make_vertex(r, s, rng.sample(prev, params.strong_quorum)))
    return dag


def bfs_reach(dag: LocalDag, start) -> set:
    seen, stack = {start}, [start]
    while stack:
        r, s = stack.pop()
        v = dag.get(r, s)
        for p in v.parents:
            pid = (r - 1, p)
            if pid not in seen:
                seen.add(pid)
                stack.append(pid)
    return seen


@pytest.mark.parametrize("k,f", [(2, 1), (2, 3), (3, 1), (3, 2), (4, 1), (5, 3)])
def test_params_quorum_intersection_brute_force(k, f):
    p = Params(f=f, k=k)
    assert p.n == k * f + 1
    assert p.strong_quorum == (k - 1) * f + 1
    assert p.weak_quorum == f + 1
    if p.n <= 10:
        worst = min(len(set(a) & set(b))
                    for a in itertools.combinations(range(p.n), p.strong_quorum)
                    for b in itertools.combinations(range(p.n), p.strong_quorum))
        assert worst == p.intersection == (k - 2) * f + 1


def test_params_reject_degenerate():
    with pytest.raises(ValueError):
        Params(f=0, k=3)
    with pytest.raises(ValueError):
        Params(f=1, k=1)


def test_wave_round_mapping():
    assert wave_round(1, 1) == 1 and wave_round(2, 4) == 8
    assert wave_round(3, 1, wave_len=3, pipelined=True) == 5
    for r in range(1, 30):
        w, s = round_wave(r)
        assert wave_round(w, s) == r
    with pytest.raises(ValueError):
        wave_round(1, 5)


@pytest.mark.parametrize("seed", range(6))
def test_reachability_matches_bfs(seed):
    rng = random.Random(seed)
    params = Params(f=rng.choice([1, 2]), k=rng.choice([2, 3]))
    dag = random_dag(params, 22, rng)  # longer than the cached window
    for v in rng.sample(list(dag), 25):
        truth = bfs_reach(dag, v.id)
        for u in dag:
            assert dag.strong_path(v.id, u.id) == (u.id in truth), (v.id, u.id)


def test_shape_and_buffering():
    params = Params(f=1, k=3)
    dag = LocalDag(params)
    with pytest.raises(ValueError):
        dag.add_vertex(make_vertex(2, 0, [0, 1]))  # below strong quorum
    with pytest.raises(ValueError):
        dag.add_vertex(make_vertex(1, 0, [1]))
    assert dag.add_vertex(make_vertex(2, 0, [0, 1, 2])) is AddResult.BUFFERED
    for s in (0, 1):
        assert dag.add_vertex(make_vertex(1, s)) is AddResult.ADDED
    assert (2, 0) not in dag
    assert dag.add_vertex(make_vertex(1, 2)) is AddResult.ADDED
    assert (2, 0) in dag and not dag.pending
    assert dag.add_vertex(make_vertex(1, 2)) is AddResult.DUPLICATE
    assert dag.add_vertex(make_vertex(1, 2, payload="other")) is AddResult.REJECTED
    assert len(dag.conflicts) == 1


def test_causal_history_and_linearize():
    rng = random.Random(3)
    params = Params(f=1, k=3)
    dag = random_dag(params, 6, rng)
    top = dag.round_vertices(6)[0]
    hist = dag.causal_history(top)
    assert {v.id for v in hist} == bfs_reach(dag, top.id)
    delivered: set = set()
    first = linearize_history(dag, [dag.round_vertices(3)[0]], delivered)
    second = linearize_history(dag, [top], delivered)
    ids = [v.id for v in first + second]
    assert len(ids) == len(set(ids)) == len(hist | set(first))
    assert [v.id for v in second] == sorted(v.id for v in second)


def test_snapshot_roundtrip():
    dag = random_dag(Params(f=1, k=2), 5, random.Random(9))
    again = LocalDag.from_snapshot(dag.snapshot())
    assert again.to_json() == dag.to_json()
