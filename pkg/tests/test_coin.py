from __future__ import annotations

from collections import Counter

from quorumdag.coin import HIDDEN, SharedCoin, prf_choice


def test_coin_is_deterministic_and_roughly_uniform():
    a, b = SharedCoin(7, 3, seed=5), SharedCoin(7, 3, seed=5)
    assert [a.value(w) for w in range(1, 50)] == [b.value(w) for w in range(1, 50)]
    counts = Counter(prf_choice(1, "coin", w, 7) for w in range(7000))
    assert set(counts) == set(range(7))
    assert all(800 < c < 1200 for c in counts.values())


def test_peek_hidden_until_f_plus_one_invokers():
    coin = SharedCoin(4, 1, seed=0)
    view = coin.adversary_view()
    assert view.peek(1) is HIDDEN
    coin.coin_toss(1, 0)
    coin.coin_toss(1, 0)  # same caller twice does not count twice
    assert view.peek(1) is HIDDEN
    coin.coin_toss(1, 2)
    assert view.peek(1) == coin.value(1)
    assert view.peek(2) is HIDDEN
    assert [q[1] for q in view.queries] == [1, 1, 1, 2]


def test_override_and_reveal_callback():
    seen = []
    coin = SharedCoin(5, 2, seed=0, override={3: 4}, on_reveal=lambda inst: seen.append(inst.wave))
    assert coin.value(3) == 4
    for caller in range(3):
        coin.coin_toss(3, caller)
    assert seen == [3] and coin.revealed(3)
