"""The scenario corpus.

File-based scenarios live in ``otm/corpus/*.otm``; the two parameterized
ones (``semaphore-stress`` and ``counter-isolated``) are built natively
because they loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable

from otm import terms as T
from otm.syntax import SourceProgram, parse

__all__ = ["Scenario", "SCENARIOS", "get", "names", "semaphore_stress", "counter_isolated"]


@dataclass(frozen=True)
class Scenario:
    name: str
    summary: str
    expect: str
    build: Callable[..., SourceProgram]
    small: dict = field(default_factory=dict)  # parameters small enough to explore
    desk: dict = field(default_factory=dict)  # default run parameters
    source: str | None = None

    def program(self, **params: Any) -> SourceProgram:
        return self.build(**{**self.desk, **params})

    def small_program(self) -> SourceProgram:
        return self.build(**self.small)


def _repeat(n: int, body: Callable[[int], T.Term], then: T.Term) -> T.Term:
    """``body(0) >> ... >> body(n-1) >> then`` with host continuations, so
    long loops never build deep terms."""

    def step(i: int) -> T.Term:
        if i == n:
            return then
        return T.Bind(body(i), lambda _: step(i + 1))

    return step(0)


def semaphore_stress(threads: int = 8, iters: int = 1000, permits: int = 2) -> SourceProgram:
    """Each thread repeatedly takes a permit, bumps a counter and gives the
    permit back, one closed transaction per step."""
    s, c = T.Loc(0), T.Loc(1)
    inc = T.Lam("n", T.Prim("+", (T.Var("n"), 1)))

    def iteration(_):
        return T.seq(
            T.atomically(T.sem_down(s)),
            T.atomically(T.modify_otvar(c, inc)),
            T.atomically(T.sem_up(s)),
        )

    body = [(f"w{i}", _repeat(iters, iteration, T.Return(T.UNIT))) for i in range(threads)]
    return SourceProgram([("s", permits), ("c", 0)], body)


def counter_isolated(threads: int = 4, iters: int = 25) -> SourceProgram:
    """Each iteration is one open transaction with two isolated increments;
    concurrent iterations merge when they touch each other's claims."""
    c, d = T.Loc(0), T.Loc(1)
    inc = T.Lam("n", T.Prim("+", (T.Var("n"), 1)))

    def iteration(_):
        return T.Atomic(T.seq(T.Isolated(T.modify_otvar(c, inc)), T.Isolated(T.modify_otvar(d, inc))))

    body = [(f"w{i}", _repeat(iters, iteration, T.Return(T.UNIT))) for i in range(threads)]
    return SourceProgram([("c", 0), ("d", 0)], body)


def _from_file(name: str) -> tuple[str, Callable[[], SourceProgram]]:
    text = resources.files("otm").joinpath("corpus", f"{name}.otm").read_text(encoding="utf-8")
    return text, lambda: parse(text)


def _file_scenario(name: str, summary: str, expect: str) -> Scenario:
    text, build = _from_file(name)
    return Scenario(name, summary, expect, build, source=text)


SCENARIOS: dict[str, Scenario] = {
    s.name: s
    for s in [
        _file_scenario(
            "master-worker-otm",
            "master/worker handshake, one open transaction per party",
            "single merged commit; master returns 11",
        ),
        _file_scenario(
            "master-worker-closed",
            "master/worker handshake, closed transactions",
            "deadlocks under every schedule",
        ),
        Scenario(
            "semaphore-stress",
            "threads x iterations of down/increment/up",
            "counter = threads * iters; semaphore never negative",
            semaphore_stress,
            small={"threads": 2, "iters": 1, "permits": 1},
            desk={"threads": 8, "iters": 1000, "permits": 2},
        ),
        _file_scenario(
            "down-any",
            "two consumers wait on whichever semaphore is up first",
            "both consumers finish; semaphores end at 0",
        ),
        Scenario(
            "counter-isolated",
            "open transactions of two isolated increments",
            "both counters = threads * iters",
            counter_isolated,
            small={"threads": 2, "iters": 1},
            desk={"threads": 4, "iters": 25},
        ),
        _file_scenario(
            "fork-abort",
            "abort of a transaction with a forked helper and a merged party",
            "only the fresh OTVar leaks; b commits alone",
        ),
        _file_scenario(
            "merge-chain",
            "three parties merged through data and semaphores",
            "every schedule commits all parties",
        ),
    ]
}


def names() -> list[str]:
    return list(SCENARIOS)


def get(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)}") from None
