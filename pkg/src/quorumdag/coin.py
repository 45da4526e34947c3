"""Global perfect coin, one instance per wave.

Values come from a keyed hash of ``(seed, wave)`` so they are reproducible
and uniform. The adversary gets a :class:`CoinView` whose ``peek`` returns
:data:`HIDDEN` until at least ``f + 1`` validators have invoked the coin for
that wave.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable


class _Hidden:
    __slots__ = ()

    def __repr__(self) -> str:
        return "HIDDEN"

    def __bool__(self) -> bool:
        return False


HIDDEN = _Hidden()


def prf_choice(seed: int, label: str, index: int, n: int) -> int:
    """Uniform draw from ``range(n)`` keyed by ``(seed, label, index)``."""
    digest = hashlib.blake2b(f"{seed}:{label}:{index}".encode(), digest_size=16).digest()
    x = int.from_bytes(digest, "big")
    # rejection-free: 128 bits against n < 2**16 keeps bias below 2**-110
    return x % n


@dataclass
class CoinInstance:
    wave: int
    value: int
    invokers: set[int] = field(default_factory=set)
    honest_invokers: set[int] = field(default_factory=set)
    revealed_at: int | None = None


class SharedCoin:
    """Per-run coin; ``override`` pins specific waves (scripted scenarios)."""

    def __init__(self, n: int, f: int, seed: int, honest: set[int] | None = None,
                 override: dict[int, int] | None = None,
                 on_reveal: Callable[[CoinInstance], None] | None = None):
        self.n = n
        self.f = f
        self.seed = seed
        self.honest = set(range(n)) if honest is None else set(honest)
        self.override = dict(override or {})
        self.on_reveal = on_reveal
        self.instances: dict[int, CoinInstance] = {}
        self.event_clock: Callable[[], int] = lambda: 0

    def value(self, wave: int) -> int:
        """Protocol-internal access (validators compute leaders from it)."""
        return self._instance(wave).value

    def _instance(self, wave: int) -> CoinInstance:
        inst = self.instances.get(wave)
        if inst is None:
            v = self.override.get(wave)
            if v is None:
                v = prf_choice(self.seed, "coin", wave, self.n)
            inst = self.instances[wave] = CoinInstance(wave, v)
        return inst

    def coin_toss(self, wave: int, caller: int) -> int:
        inst = self._instance(wave)
        inst.invokers.add(caller)
        if caller in self.honest:
            inst.honest_invokers.add(caller)
        # Byzantine invocations are visible to the adversary, so they count too
        if inst.revealed_at is None and len(inst.invokers) >= self.f + 1:
            inst.revealed_at = self.event_clock()
            if self.on_reveal is not None:
                self.on_reveal(inst)
        return inst.value

    def revealed(self, wave: int) -> bool:
        inst = self.instances.get(wave)
        return inst is not None and inst.revealed_at is not None

    def adversary_view(self) -> CoinView:
        return CoinView(self)


class CoinView:
    """The only coin handle an adversary strategy ever receives."""

    def __init__(self, coin: SharedCoin):
        self._coin = coin
        self.queries: list[tuple[int, int, object]] = []  # (event#, wave, answer)

    def peek(self, wave: int):
        answer = self._coin.value(wave) if self._coin.revealed(wave) else HIDDEN
        self.queries.append((self._coin.event_clock(), wave, answer))
        return answer
