"""Opacity analysis of transaction histories.

Pipeline: merges are first eliminated, either by ``fuse_merges`` (the
absorbed transaction's operations become the absorber's; the default) or by
``expand_merges`` (a write/read pair on a fresh synthetic location), then
``nonlocal_`` drops operations that only touch a
transaction's own tentative state, ``build_opg`` builds the opacity graph for
a total order, and ``check_opaque`` searches for an order whose graph is
well-formed and acyclic. ``oracle_opaque`` decides opacity directly from the
definition (a legal sequential witness of some completion) and is used to
cross-check the graph characterization.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from otm.history import Event, EventKind, MalformedHistory

__all__ = [
    "History", "OpacityGraph", "Verdict", "validate", "expand_merges", "fuse_merges",
    "nonlocal_", "reads_from", "is_consistent", "HappensBefore",
    "happens_before", "natural_order", "build_opg", "well_formed", "acyclic",
    "red_forest", "interaction_graph", "find_cycle", "check_opaque",
    "oracle_opaque", "prepare", "natural_graph",
]

R, W, C, A = EventKind.READ, EventKind.WRITE, EventKind.COMMIT, EventKind.ABORT
OPS = (R, W, C, A)


@dataclass(frozen=True)
class History:
    """Ordered events plus the transactions marked commit-pending by a merge."""

    events: tuple[Event, ...]
    pending: frozenset = frozenset()

    @classmethod
    def of(cls, events: Iterable[Event] | "History") -> "History":
        if isinstance(events, History):
            return events
        return cls(tuple(events))

    def ops(self) -> list[Event]:
        return [e for e in self.events if e.kind in OPS]

    def transactions(self) -> list[int]:
        seen: dict[int, None] = {}
        for e in self.ops():
            seen.setdefault(e.tx)
        return list(seen)

    def status(self) -> dict[int, str]:
        """``committed``, ``aborted``, ``pending`` (merged away) or ``running``."""
        st = {k: ("pending" if k in self.pending else "running") for k in self.transactions()}
        for e in self.events:
            if e.kind is C:
                st[e.tx] = "committed"
            elif e.kind is A:
                st[e.tx] = "aborted"
        return st


def validate(h: Iterable[Event] | History) -> History:
    """Check the basic shape of a history; raise :class:`MalformedHistory`."""
    h = History.of(h)
    last = None
    done: set[int] = set()
    for e in h.events:
        if e.tx is None:
            raise MalformedHistory(f"event {e.seq} has no transaction")
        if last is not None and e.seq <= last:
            raise MalformedHistory(f"sequence numbers not increasing at {e.seq}")
        last = e.seq
        if e.tx in done:
            raise MalformedHistory(f"transaction {e.tx} acts after finishing (event {e.seq})")
        if e.kind in (C, A, EventKind.MERGE):
            done.add(e.tx)
        if e.kind in (R, W) and e.loc is None:
            raise MalformedHistory(f"event {e.seq} has no location")
    return h


def expand_merges(h: Iterable[Event] | History) -> History:
    """Replace each ``merge k into j`` by: new x; j writes x; k reads x.

    ``k`` becomes commit-pending. Synthetic locations are negative so they
    never clash with program locations. Events are renumbered in order.
    """
    h = validate(h)
    out: list[Event] = []
    pending = set(h.pending)
    fresh = itertools.count(-1, -1)
    for e in h.events:
        if e.kind is EventKind.MERGE:
            if e.into is None:
                raise MalformedHistory(f"merge event {e.seq} has no target")
            x = next(fresh)
            out.append(Event(0, e.into, e.thread, EventKind.NEWLOC, loc=x))
            out.append(Event(0, e.into, e.thread, W, loc=x, value=e.tx))
            out.append(Event(0, e.tx, e.thread, R, loc=x, value=e.tx))
            pending.add(e.tx)
        else:
            out.append(e)
    return History(_renumber(out), frozenset(pending))


def fuse_merges(h: Iterable[Event] | History) -> History:
    """Attribute every operation of a merged-away transaction to the
    transaction that finally absorbed it, and drop the merge events.

    After a merge the parties share claims, effects and fate, so they are a
    single (multi-threaded) transaction from the first operation of either.
    """
    h = validate(h)
    into: dict[int, int] = {}
    for e in h.events:
        if e.kind is EventKind.MERGE:
            if e.into is None:
                raise MalformedHistory(f"merge event {e.seq} has no target")
            into[e.tx] = e.into

    def root(k: int) -> int:
        while k in into:
            k = into[k]
        return k

    out = [replace(e, tx=root(e.tx)) for e in h.events if e.kind is not EventKind.MERGE]
    return History(_renumber(out))


def _renumber(events: list[Event]) -> tuple[Event, ...]:
    return tuple(replace(e, seq=i) for i, e in enumerate(events))


def _local_flags(h: History) -> list[bool]:
    # Per (tx, loc): keep reads before the first own write and the last own
    # write; everything else is local. This is the fixpoint of removing local
    # operations, so the result has no local operations left.
    first_w: dict[tuple, int] = {}
    last_w: dict[tuple, int] = {}
    for i, e in enumerate(h.events):
        if e.kind is W:
            first_w.setdefault((e.tx, e.loc), i)
            last_w[(e.tx, e.loc)] = i
    flags = []
    for i, e in enumerate(h.events):
        key = (e.tx, e.loc)
        if e.kind is R:
            flags.append(key in first_w and first_w[key] < i)
        elif e.kind is W:
            flags.append(last_w[key] != i)
        else:
            flags.append(False)
    return flags


def nonlocal_(h: Iterable[Event] | History) -> History:
    """The longest sub-history without local reads or writes."""
    h = History.of(h)
    flags = _local_flags(h)
    return History(tuple(e for e, f in zip(h.events, flags) if not f), h.pending)


def _locally_consistent(h: History) -> bool:
    flags = _local_flags(h)
    latest: dict[tuple, object] = {}
    for e, local in zip(h.events, flags):
        if e.kind is W:
            latest[(e.tx, e.loc)] = _key(e.value)
        elif e.kind is R and local and latest.get((e.tx, e.loc), _MISSING) != _key(e.value):
            return False
    return True


_MISSING = object()


def is_consistent(h: Iterable[Event] | History) -> bool:
    """Local reads return the own preceding write; every other read value
    has some nonlocal writer."""
    h = History.of(h)
    if not _locally_consistent(h):
        return False
    nl = nonlocal_(h)
    written = {(e.loc, _key(e.value)) for e in nl.events if e.kind is W}
    return all((e.loc, _key(e.value)) in written for e in nl.events if e.kind is R)


def reads_from(h: History) -> dict[int, int]:
    """Map event index of each nonlocal read to the writing transaction.

    Among writes of the same value to the same location by other
    transactions: the latest preceding one by a committed transaction, else
    the latest preceding one, else any. Reads with no writer are absent.
    """
    st = h.status()
    writers: dict[tuple, list[tuple[int, int]]] = {}
    for j, w in enumerate(h.events):
        if w.kind is W:
            writers.setdefault((w.loc, _key(w.value)), []).append((j, w.tx))
    out: dict[int, int] = {}
    for i, e in enumerate(h.events):
        if e.kind is not R:
            continue
        cands = [c for c in writers.get((e.loc, _key(e.value)), ()) if c[1] != e.tx]
        if not cands:
            continue
        before = [c for c in cands if c[0] < i]
        committed = [c for c in before if st.get(c[1]) == "committed"]
        out[i] = (committed or before or cands[:1])[-1][1]
    return out


def _key(v):
    # typed, so that True and 1 stay distinct; unhashable host values
    # fall back to identity
    try:
        hash(v)
        return (type(v), v)
    except TypeError:
        return (type(v), id(v))


class HappensBefore:
    """k precedes k' when k commits or aborts before k' issues its first op."""

    def __init__(self, h: History):
        self.first: dict[int, int] = {}
        self.end: dict[int, int] = {}
        for i, e in enumerate(h.events):
            if e.kind in OPS:
                self.first.setdefault(e.tx, i)
            if e.kind in (C, A):
                self.end[e.tx] = i

    def __call__(self, k: int, k2: int) -> bool:
        return k in self.end and k2 in self.first and self.end[k] < self.first[k2]

    def pairs(self) -> set[tuple[int, int]]:
        return {(a, b) for a in self.end for b in self.first if self(a, b)}


def happens_before(h: Iterable[Event] | History) -> HappensBefore:
    return HappensBefore(History.of(h))


def natural_order(h: History) -> list[int]:
    """Finished transactions by commit/abort time, then live ones by first op."""
    hb = HappensBefore(h)
    return sorted(
        h.transactions(),
        key=lambda k: (0, hb.end[k]) if k in hb.end else (1, hb.first[k]),
    )


@dataclass
class OpacityGraph:
    """Nodes map to ``"red"``/``"black"``; edges map to the set of clauses
    (``"a"``..``"d"``) that produced them."""

    nodes: dict[int, str] = field(default_factory=dict)
    edges: dict[tuple[int, int], set[str]] = field(default_factory=dict)
    status: dict[int, str] = field(default_factory=dict)

    def add(self, k: int, k2: int, clause: str) -> None:
        if k != k2:
            self.edges.setdefault((k, k2), set()).add(clause)

    def edge_colour(self, e: tuple[int, int]) -> str:
        return "red" if "b" in self.edges[e] else "black"

    def out(self, k: int) -> list[int]:
        return [b for (a, b) in self.edges if a == k]


def build_opg(h: History, order: Sequence[int], hb: HappensBefore | None = None) -> OpacityGraph:
    """Opacity graph of ``h`` (already expanded and nonlocal) under ``order``.

    A node is black when its transaction is visible: committed, or live and
    read from by another transaction. Clauses (c) and (d) only involve
    visible writers. Real-time order defaults to that of ``h``; pass the one
    of the full history when ``h`` is a nonlocal projection.
    """
    st = h.status()
    pos = {k: i for i, k in enumerate(order)}
    rf = reads_from(h)
    readers_of: dict[int, set[int]] = {}
    for i, w in rf.items():
        readers_of.setdefault(w, set()).add(h.events[i].tx)
    visible = {
        k for k in st
        if st[k] == "committed" or (st[k] in ("running", "pending") and readers_of.get(k, set()) - {k})
    }
    g = OpacityGraph({k: ("black" if k in visible else "red") for k in st}, {}, st)
    hb = hb or HappensBefore(h)
    txs = list(st)
    for k, k2 in itertools.permutations(txs, 2):
        if hb(k2, k):
            g.add(k, k2, "a")
    for i, w in rf.items():
        g.add(h.events[i].tx, w, "b")
    writes: dict[int, set[int]] = {}
    reads: dict[int, set[int]] = {}
    for e in h.events:
        if e.kind is W:
            writes.setdefault(e.loc, set()).add(e.tx)
        elif e.kind is R:
            reads.setdefault(e.loc, set()).add(e.tx)
    for r, ws in writes.items():
        for k in ws & visible:
            for k2 in reads.get(r, ()):
                if pos[k2] < pos[k]:
                    g.add(k, k2, "c")
    for i, src in rf.items():
        e = h.events[i]
        k2_reader = e.tx
        for k1 in writes.get(e.loc, ()):
            if k1 in visible and k1 != src and pos[k1] < pos[k2_reader]:
                g.add(src, k1, "d")
    return g


def well_formed(g: OpacityGraph) -> bool:
    """Edges leaving red nodes are red (edges due only to real-time order
    are exempt), and no transaction reads from an aborted one."""
    for (a, b), clauses in g.edges.items():
        if g.nodes[a] == "red" and "b" not in clauses and clauses != {"a"}:
            return False
        if "b" in clauses and g.status.get(b) == "aborted":
            return False
    return True


def find_cycle(g: OpacityGraph, edges: Iterable[tuple[int, int]] | None = None) -> list[int] | None:
    adj: dict[int, list[int]] = {k: [] for k in g.nodes}
    for a, b in (g.edges if edges is None else edges):
        adj[a].append(b)
    colour = {k: 0 for k in adj}
    for root in adj:
        if colour[root]:
            continue
        stack = [(root, iter(adj[root]))]
        path = [root]
        colour[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                colour[node] = 2
            elif colour[nxt] == 1:
                return path[path.index(nxt):] + [nxt]
            elif colour[nxt] == 0:
                colour[nxt] = 1
                path.append(nxt)
                stack.append((nxt, iter(adj[nxt])))
    return None


def acyclic(g: OpacityGraph) -> bool:
    return find_cycle(g) is None


def red_forest(g: OpacityGraph) -> bool:
    """Red edges form a forest (child to parent), every edge is red and
    only roots may be black."""
    red = [e for e in g.edges if g.edge_colour(e) == "red"]
    if len(red) != len(g.edges):
        return False
    outdeg: dict[int, int] = {}
    for a, _ in red:
        outdeg[a] = outdeg.get(a, 0) + 1
    if any(d > 1 for d in outdeg.values()):
        return False
    if find_cycle(g, red) is not None:
        return False
    return all(g.nodes[a] == "red" for a in outdeg)


def interaction_graph(h: History, g: OpacityGraph) -> OpacityGraph:
    """Subgraph of read-from edges whose writer was still live at the read."""
    hb = HappensBefore(h)  # only commit/abort positions are used
    sub = OpacityGraph(dict(g.nodes), {}, g.status)
    for i, w in reads_from(h).items():
        if not (w in hb.end and hb.end[w] < i):
            sub.add(h.events[i].tx, w, "b")
    return sub


def prepare(h: Iterable[Event] | History) -> tuple[History, HappensBefore, list[int]]:
    """Nonlocal projection of the expanded history, its real-time order
    and natural order (both taken from the full expanded history)."""
    expanded = expand_merges(h)
    return nonlocal_(expanded), HappensBefore(expanded), natural_order(expanded)


def natural_graph(h: Iterable[Event] | History) -> tuple[History, OpacityGraph]:
    nl, hb, order = prepare(h)
    return nl, build_opg(nl, order, hb)


@dataclass
class Verdict:
    opaque: bool | None  # None when undecided
    witness: list[int] | None = None
    reason: str = ""
    graph: OpacityGraph | None = None

    @property
    def label(self) -> str:
        return {True: "opaque", False: "non-opaque", None: "unknown"}[self.opaque]


def _explain(g: OpacityGraph) -> str:
    cyc = find_cycle(g)
    if cyc is not None:
        return "cycle " + " -> ".join(map(str, cyc))
    for (a, b), clauses in g.edges.items():
        if "b" in clauses and g.status.get(b) == "aborted":
            return f"transaction {a} reads from aborted transaction {b}"
        if g.nodes[a] == "red" and "b" not in clauses and clauses != {"a"}:
            return f"black edge {a} -> {b} ({','.join(sorted(clauses))}) leaves red node {a}"
    return ""


MERGE_MODES = {"fuse": fuse_merges, "encode": expand_merges}


def check_opaque(h: Iterable[Event] | History, max_brute_force: int = 10, merges: str = "fuse") -> Verdict:
    """Decide opacity via the opacity-graph characterization.

    Tries the natural order first, then every total order when there are at
    most ``max_brute_force`` transactions; otherwise the verdict is unknown.
    ``merges`` picks how merge events are eliminated (see module docstring).
    """
    expanded = MERGE_MODES[merges](h)
    if not is_consistent(expanded):
        return Verdict(False, None, "inconsistent: some read has no matching write")
    nl = nonlocal_(expanded)
    hb = HappensBefore(expanded)
    order = natural_order(expanded)
    g = build_opg(nl, order, hb)
    if well_formed(g) and acyclic(g):
        return Verdict(True, order, "natural order", g)
    first_graph = g
    if len(order) > max_brute_force:
        return Verdict(None, None, "natural order fails: " + _explain(g), g)
    for perm in itertools.permutations(order):
        g = build_opg(nl, perm, hb)
        if well_formed(g) and acyclic(g):
            return Verdict(True, list(perm), "searched order", g)
    return Verdict(False, None, _explain(first_graph), first_graph)


def oracle_opaque(h: Iterable[Event] | History, merges: str = "fuse") -> bool:
    """Brute-force opacity straight from the definition.

    Searches every completion (live transactions commit or abort) and every
    total order extending real-time order for a sequential history in which
    every transaction, aborted ones included, reads only its own latest
    write or the latest write of a committed predecessor.
    """
    hist = MERGE_MODES[merges](h)
    hb = HappensBefore(hist)
    st = hist.status()
    txs = hist.transactions()
    live = [k for k in txs if st[k] in ("running", "pending")]
    per_tx: dict[int, list[Event]] = {k: [] for k in txs}
    for e in hist.events:
        if e.kind in (R, W) and e.tx in per_tx:
            per_tx[e.tx].append(e)
    before = hb.pairs()
    for choice in itertools.product((True, False), repeat=len(live)):
        committed = {k for k in txs if st[k] == "committed"}
        committed |= {k for k, c in zip(live, choice) if c}
        for perm in itertools.permutations(txs):
            pos = {k: i for i, k in enumerate(perm)}
            if any(pos[a] > pos[b] for a, b in before):
                continue
            if _legal(perm, per_tx, committed):
                return True
    return False


def _legal(perm, per_tx, committed) -> bool:
    state: dict = {}
    for k in perm:
        own: dict = {}
        for e in per_tx[k]:
            if e.kind is W:
                own[e.loc] = _key(e.value)
            else:
                seen = own.get(e.loc, state.get(e.loc, _MISSING))
                if seen is _MISSING or seen != _key(e.value):
                    return False
        if k in committed:
            state.update(own)
    return True
