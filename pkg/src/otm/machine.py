"""Reference interpreter for open transactions.

A machine state pairs the memory (heap, working memory, fork forest) with
the thread family.  Every transition rule is a small function that updates a
copy of the state; :func:`candidates` lists the transitions enabled in a
state and :func:`fire` applies one of them.  Scheduling and exhaustive
exploration live in :mod:`otm.explore`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Iterator

from otm import terms as T
from otm.history import Event, EventKind
from otm.terms import EffectLevel, LevelError

__all__ = [
    "Plain", "InTx", "MachineState", "Transition", "MachineError",
    "NotARedex", "NotApplicable", "UnallocatedLocation", "Blocked",
    "NotAllReady", "initial_state", "load_program", "reduce_term", "split",
    "plug", "step_io", "step_tau", "merge_tx", "run_solo", "begin_tx",
    "try_commit", "abort_tx", "restart_tx", "commit_fn", "cleanup_fn",
    "leak_fn", "candidates", "fire", "is_terminal", "outcomes",
]

INIT_TX = 0
SOLO_STEP_LIMIT = 100_000


class MachineError(Exception):
    pass


class NotARedex(MachineError):
    pass


class NotApplicable(MachineError):
    pass


class UnallocatedLocation(MachineError):
    pass


class Blocked(MachineError):
    """The transition exists in form but cannot fire now (no input, isolated retry)."""


class NotAllReady(MachineError):
    pass


# -- threads and state -------------------------------------------------------


@dataclass(frozen=True)
class Plain:
    term: Any


@dataclass(frozen=True)
class InTx:
    tx: int
    term: Any
    ctx: Any  # evaluation context with a Hole: the continuation N
    snapshot: Any  # atomic body captured at New, re-run on restart


@dataclass
class MachineState:
    heap: dict = field(default_factory=dict)
    wm: dict = field(default_factory=dict)  # loc -> (value, tx)
    parent: dict = field(default_factory=dict)  # thread -> parent thread | None
    threads: dict = field(default_factory=dict)  # thread -> Plain | InTx
    next_tx: int = 1
    next_thread: int = 0
    next_loc: int = 0
    input: str = ""
    output: str = ""
    versions: dict = field(default_factory=dict)  # loc -> committed write count
    reads: dict = field(default_factory=dict)  # tx -> frozenset of locs
    waiting: dict = field(default_factory=dict)  # thread -> ((loc, version), ...)
    names: dict = field(default_factory=dict)  # thread -> display name
    locnames: dict = field(default_factory=dict)  # loc -> declared name
    history: tuple = ()  # cons list (event, rest) newest first
    seq: int = 0
    finished: tuple = ()  # (kind, participants, merged) per finished tx
    merged: frozenset = frozenset()  # txs that absorbed another tx

    def copy(self) -> MachineState:
        return replace(
            self,
            heap=dict(self.heap), wm=dict(self.wm), parent=dict(self.parent),
            threads=dict(self.threads), versions=dict(self.versions),
            reads=dict(self.reads), waiting=dict(self.waiting),
        )

    # history -----------------------------------------------------------
    def log(self, tx: int, thread: int | None, kind: EventKind, loc=None, value=None, into=None):
        ev = Event(self.seq, tx, thread, kind, loc, value, into)
        self.seq += 1
        self.history = (ev, self.history)

    def events(self) -> list[Event]:
        out = []
        node = self.history
        while node:
            out.append(node[0])
            node = node[1]
        out.reverse()
        return out

    # queries -----------------------------------------------------------
    def participants(self, k: int) -> list[int]:
        return sorted(t for t, th in self.threads.items() if isinstance(th, InTx) and th.tx == k)

    def transactions(self) -> set[int]:
        return {th.tx for th in self.threads.values() if isinstance(th, InTx)}

    def root(self, t: int) -> int:
        while self.parent.get(t) is not None:
            t = self.parent[t]
        return t

    def fresh_thread(self) -> int:
        t = self.next_thread
        self.next_thread += 1
        return t

    def fresh_tx(self) -> int:
        k = self.next_tx
        self.next_tx += 1
        return k

    def fresh_loc(self) -> int:
        r = self.next_loc
        self.next_loc += 1
        return r


def initial_state(threads: list[tuple[str, Any]], heap_init: list[tuple[str, Any]] = (),
                  input: str = "") -> MachineState:
    """State with declared OTVars in the heap and one plain thread per entry.

    Declared OTVars get locations ``0..n-1`` and are logged as writes of the
    always-committed initializing transaction 0.
    """
    st = MachineState(input=input)
    for name, value in heap_init:
        r = st.fresh_loc()
        st.heap[r] = value
        st.versions[r] = 0
        st.locnames[r] = name
        st.log(INIT_TX, None, EventKind.NEWLOC, loc=r)
        st.log(INIT_TX, None, EventKind.WRITE, loc=r, value=value)
    if heap_init:
        st.log(INIT_TX, None, EventKind.COMMIT)
    for name, term in threads:
        t = st.fresh_thread()
        st.threads[t] = Plain(term)
        st.parent[t] = None
        st.names[t] = name
    return st


def load_program(prog, input: str = "") -> MachineState:
    """Initial state for a parsed :class:`~otm.syntax.SourceProgram`."""
    env = {name: T.Loc(i) for i, (name, _) in enumerate(prog.vars)}
    threads = []
    for name, term in prog.threads:
        for var, loc in env.items():
            term = T.substitute(term, var, loc)
        threads.append((name, term))
    return initial_state(threads, prog.vars, input=input)


# -- evaluation contexts -----------------------------------------------------

_RESULTS = (T.Return, T.Throw, T.Retry)


def split(term: Any) -> tuple[Any, Any]:
    """Decompose ``term`` as ``E[redex]``; returns ``(redex, E)``.

    Contexts are ``[] | E >>= M | catch E h``.  A bind or catch whose left
    side is already a result is itself the redex.
    """
    frames = []
    while isinstance(term, (T.Bind, T.Catch)) and not isinstance(term.action, _RESULTS):
        frames.append(term)
        term = term.action
    ctx: Any = T.Hole()
    for frame in reversed(frames):
        ctx = replace_action(frame, ctx)
    return term, ctx


def replace_action(frame, action):
    # bypass __post_init__-free dataclass replace for speed
    return type(frame)(action, frame.cont if isinstance(frame, T.Bind) else frame.handler)


def plug(ctx: Any, term: Any) -> Any:
    """Fill the hole of ``ctx`` with ``term``."""
    frames = []
    while not isinstance(ctx, T.Hole):
        frames.append(ctx)
        ctx = ctx.action
    for frame in reversed(frames):
        term = replace_action(frame, term)
    return term


def _value(e: Any) -> Any:
    return T.evaluate(e)


def _loc(e: Any) -> int:
    v = _value(e)
    if not isinstance(v, T.Loc):
        raise T.EvalError(f"not a location: {v!r}")
    return v.id


def _check_produced(term: Any) -> Any:
    if not isinstance(term, T.Term) or isinstance(term, T.Hole):
        raise LevelError(f"continuation did not return an action term: {term!r}")
    return term


# -- term reductions ---------------------------------------------------------


def reduce_term(m: Any) -> Any:
    """One pure reduction step: BindVal, BindEx, CatchVal, CatchEx, Eval."""
    if isinstance(m, T.Bind):
        if isinstance(m.action, T.Return):
            return _check_produced(m.cont(_value(m.action.value)))
        if isinstance(m.action, (T.Retry, T.Throw)):
            return m.action
    if isinstance(m, T.Catch):
        if isinstance(m.action, (T.Retry, T.Return)):
            return m.action
        if isinstance(m.action, T.Throw):
            return _check_produced(m.handler(_value(m.action.value)))
    if isinstance(m, T.PureOpaque):
        return _check_produced(m.thunk())
    if isinstance(m, T.If):
        cond = _value(m.cond)
        if type(cond) is not bool:
            raise T.EvalError(f"if condition is not a boolean: {cond!r}")
        return m.then if cond else m.orelse
    raise NotARedex(repr(m))


_PURE = (T.Bind, T.Catch, T.PureOpaque, T.If)


# -- IO transitions ----------------------------------------------------------


def step_io(s: MachineState, t: int) -> MachineState:
    """InChar, OutChar, TermIO or ForkIO for plain thread ``t``."""
    th = s.threads.get(t)
    if not isinstance(th, Plain):
        raise NotApplicable(f"thread {t} is not a plain thread")
    redex, ctx = split(th.term)
    new = s.copy()
    if isinstance(redex, _PURE):
        out = reduce_term(redex)
    elif isinstance(redex, T.GetChar):
        if not s.input:
            raise Blocked("no pending input")
        out = T.Return(s.input[0])
        new.input = s.input[1:]
    elif isinstance(redex, T.PutChar):
        c = _value(redex.char)
        if type(c) is not str:
            raise T.EvalError(f"putChar of non-character {c!r}")
        new.output = s.output + c
        out = T.Return(T.UNIT)
    elif isinstance(redex, T.Fork):
        t2 = new.fresh_thread()
        T.check_io(redex.body)
        new.threads[t2] = Plain(redex.body)
        new.parent[t2] = None
        new.names[t2] = f"{s.names.get(t, t)}.{t2}"
        out = T.Return(T.ThreadRef(t2))
    elif isinstance(redex, T.Atomic):
        raise NotApplicable("atomic is handled by begin_tx")
    elif isinstance(redex, _RESULTS) and isinstance(ctx, T.Hole):
        raise NotApplicable(f"thread {t} has terminated")
    else:
        raise LevelError(f"{type(redex).__name__} cannot run at IO level outside atomic")
    new.threads[t] = Plain(plug(ctx, out))
    return new


# -- transactional transitions -----------------------------------------------


def merge_tx(s: MachineState, k: int, j: int, thread: int | None = None) -> MachineState:
    """Merge transaction ``k`` into ``j`` in place: Δ[k ↦ j] and P[k ↦ j]."""
    if k == j:
        return s
    for r, (v, owner) in list(s.wm.items()):
        if owner == k:
            s.wm[r] = (v, j)
    for t, th in list(s.threads.items()):
        if isinstance(th, InTx) and th.tx == k:
            s.threads[t] = replace(th, tx=j)
    s.reads[j] = s.reads.get(j, frozenset()) | s.reads.pop(k, frozenset())
    s.merged = s.merged | {j}
    s.log(k, thread, EventKind.MERGE, into=j)
    return s


def _note_read(s: MachineState, k: int, r: int):
    s.reads[k] = s.reads.get(k, frozenset()) | {r}


def _tau(s: MachineState, t: int, k: int, redex: Any, solo: bool) -> tuple[Any, int]:
    """Apply the τ-rule for ``redex`` of thread ``t`` in transaction ``k``.

    Mutates ``s``; returns the replacement for the redex and the (possibly
    merged) transaction of the thread.
    """
    if isinstance(redex, _PURE):
        return reduce_term(redex), k
    if isinstance(redex, T.Fork):
        if solo:
            raise LevelError("fork inside isolated: ITM does not support thread creation")
        if T.level_check(redex.body) is EffectLevel.IO:
            raise LevelError("fork inside a transaction needs an OTM body")
        t2 = s.fresh_thread()
        s.threads[t2] = InTx(k, redex.body, T.Hole(), redex.body)
        s.parent[t2] = t
        s.names[t2] = f"{s.names.get(t, t)}.{t2}"
        return T.Return(T.ThreadRef(t2)), k
    if isinstance(redex, T.NewOTVar):
        v = _value(redex.value)
        r = s.fresh_loc()
        s.wm[r] = (v, k)
        s.versions[r] = 0
        s.log(k, t, EventKind.NEWLOC, loc=r)
        s.log(k, t, EventKind.WRITE, loc=r, value=v)
        return T.Return(T.Loc(r)), k
    if isinstance(redex, T.ReadOTVar):
        r = _loc(redex.loc)
        if r in s.wm:
            v, j = s.wm[r]
            merge_tx(s, k, j, t)  # Read2
            k = j
        elif r in s.heap:
            v = s.heap[r]  # Read1
            s.wm[r] = (v, k)
        else:
            raise UnallocatedLocation(f"read of unallocated location {r}")
        _note_read(s, k, r)
        s.log(k, t, EventKind.READ, loc=r, value=v)
        return T.Return(v), k
    if isinstance(redex, T.WriteOTVar):
        r = _loc(redex.loc)
        v = _value(redex.value)
        if r in s.wm:
            _, j = s.wm[r]
            merge_tx(s, k, j, t)  # Write2
            k = j
        elif r not in s.heap:
            raise UnallocatedLocation(f"write to unallocated location {r}")
        s.wm[r] = (v, k)
        s.log(k, t, EventKind.WRITE, loc=r, value=v)
        return T.Return(T.UNIT), k
    if isinstance(redex, T.OrElse):
        sub = s.copy()
        outcome, k1, result = run_solo(sub, t, k, redex.first)
        if outcome != "retried":  # Or1
            _adopt(s, sub)
            return result, k1
        s.reads[k] = s.reads.get(k, frozenset()) | sub.reads.get(k1, frozenset())
        return redex.second, k  # Or2
    if isinstance(redex, T.Isolated):
        if solo:
            raise LevelError("isolated inside isolated")
        sub = s.copy()
        outcome, k1, result = run_solo(sub, t, k, redex.body)
        if outcome == "retried":
            raise Blocked("isolated body retries")
        _adopt(s, sub)
        return result, k1
    if isinstance(redex, (T.Atomic, T.GetChar, T.PutChar)):
        raise LevelError(f"{type(redex).__name__} inside a transaction")
    raise NotApplicable(f"no τ-rule for {redex!r}")


def _adopt(s: MachineState, sub: MachineState):
    s.__dict__.update(sub.__dict__)


def run_solo(s: MachineState, t: int, k: int, body: Any) -> tuple[str, int, Any]:
    """Run ``body`` as a singleton in-transaction thread until it yields.

    Mutates ``s``.  Returns ``(outcome, tx, result)`` where outcome is
    ``"returned"``, ``"threw"`` or ``"retried"`` and ``result`` is the final
    ``Return``/``Throw``/``Retry`` term.  Other threads do not move.
    """
    term = body
    for _ in range(SOLO_STEP_LIMIT):
        if isinstance(term, T.Return):
            return "returned", k, term
        if isinstance(term, T.Throw):
            return "threw", k, T.Throw(_value(term.value))
        if isinstance(term, T.Retry):
            return "retried", k, term
        redex, ctx = split(term)
        out, k = _tau(s, t, k, redex, solo=True)
        term = plug(ctx, out)
    raise MachineError("isolated section did not terminate within the step limit")


def step_tau(s: MachineState, t: int) -> MachineState:
    """One τ-transition of in-transaction thread ``t``."""
    th = s.threads.get(t)
    if not isinstance(th, InTx):
        raise NotApplicable(f"thread {t} is not in a transaction")
    redex, ctx = split(th.term)
    if isinstance(redex, _RESULTS) and isinstance(ctx, T.Hole):
        raise NotApplicable("thread is at transaction top")
    new = s.copy()
    out, k = _tau(new, t, th.tx, redex, solo=False)
    new.threads[t] = replace(new.threads[t], tx=k, term=plug(ctx, out))
    return new


# -- transaction management --------------------------------------------------


def begin_tx(s: MachineState, t: int) -> MachineState:
    """Rule New: ``⟨E[atomic M]⟩_t`` becomes ``⟨M; E⟩_{t,k}`` with fresh k."""
    th = s.threads.get(t)
    if not isinstance(th, Plain):
        raise NotApplicable(f"thread {t} is not plain")
    redex, ctx = split(th.term)
    if not isinstance(redex, T.Atomic):
        raise NotApplicable("no atomic block in evaluation position")
    new = s.copy()
    k = new.fresh_tx()
    new.threads[t] = InTx(k, redex.body, ctx, redex.body)
    new.parent[t] = None
    new.waiting.pop(t, None)
    new.reads[k] = frozenset()
    new.log(k, t, EventKind.BEGIN)
    return new


def commit_fn(k: int, s: MachineState) -> dict:
    heap = dict(s.heap)
    for r, (v, owner) in s.wm.items():
        if owner == k:
            heap[r] = v
    return heap


def cleanup_fn(k: int, s: MachineState) -> dict:
    return {r: (v, owner) for r, (v, owner) in s.wm.items() if owner != k}


def leak_fn(k: int, s: MachineState) -> dict:
    heap = dict(s.heap)
    for r, (v, owner) in s.wm.items():
        if owner == k and r not in heap:
            heap[r] = v
    return heap


def _top(th: InTx):
    return th.term if isinstance(th.term, _RESULTS) else None


def try_commit(s: MachineState, k: int) -> MachineState:
    """Rule Commit with the all-participant barrier."""
    parts = s.participants(k)
    if not parts:
        raise NotApplicable(f"transaction {k} has no participants")
    if not all(isinstance(s.threads[t].term, T.Return) for t in parts):
        raise NotAllReady(f"transaction {k}: not every participant is ready")
    new = s.copy()
    new.heap = commit_fn(k, s)
    for r, (_, owner) in s.wm.items():
        if owner == k:
            new.versions[r] = new.versions.get(r, 0) + 1
    new.wm = cleanup_fn(k, s)
    for t in parts:
        th = s.threads[t]
        new.threads[t] = Plain(plug(th.ctx, T.Return(_value(th.term.value))))
        new.parent[t] = None
    new.reads.pop(k, None)
    new.log(k, parts[0], EventKind.COMMIT)
    new.finished = new.finished + (("commit", frozenset(s.names.get(t, t) for t in parts), k in s.merged),)
    return new


def _discard(new: MachineState, s: MachineState, k: int):
    new.heap = leak_fn(k, s)
    new.wm = cleanup_fn(k, s)
    new.reads.pop(k, None)


def _log_leak(new: MachineState, s: MachineState, k: int):
    # leaked values are published by a synthetic committed transaction
    leaked = sorted((r, v) for r, (v, owner) in s.wm.items() if owner == k and r not in s.heap)
    if not leaked:
        return
    j = new.fresh_tx()
    new.log(j, None, EventKind.BEGIN)
    for r, v in leaked:
        new.log(j, None, EventKind.WRITE, loc=r, value=v)
    new.log(j, None, EventKind.COMMIT)


def _kill(new: MachineState, t: int):
    del new.threads[t]
    del new.parent[t]
    new.waiting.pop(t, None)


def abort_tx(s: MachineState, k: int, t: int, e: Any) -> MachineState:
    """Rules Abort1/Abort2/Abort3 multicast over all participants of ``k``."""
    parts = s.participants(k)
    if t not in parts:
        raise NotApplicable(f"thread {t} is not in transaction {k}")
    rt = s.root(t)
    new = s.copy()
    _discard(new, s, k)
    for p in parts:
        th = s.threads[p]
        root = s.root(p)
        if p != root:
            _kill(new, p)  # non-root threads of every tree are erased
        elif root == rt:
            new.threads[p] = Plain(plug(th.ctx, T.Throw(e)))
        else:
            new.threads[p] = Plain(plug(th.ctx, T.Atomic(th.snapshot)))
    new.log(k, t, EventKind.ABORT, value=e)
    _log_leak(new, s, k)
    new.finished = new.finished + (("abort", frozenset(s.names.get(p, p) for p in parts), k in s.merged),)
    return new


def restart_tx(s: MachineState, k: int, t: int) -> MachineState:
    """Top-level retry: discard ``k`` like an abort and restart every root
    from its snapshot once a location in the read-set has a new version."""
    parts = s.participants(k)
    if t not in parts:
        raise NotApplicable(f"thread {t} is not in transaction {k}")
    readset = tuple(sorted((r, s.versions.get(r, 0)) for r in s.reads.get(k, ())))
    new = s.copy()
    _discard(new, s, k)
    for p in parts:
        th = s.threads[p]
        if p != s.root(p):
            _kill(new, p)
        else:
            new.threads[p] = Plain(plug(th.ctx, T.Atomic(th.snapshot)))
            new.waiting[p] = readset
    new.log(k, t, EventKind.ABORT, value="retry")
    _log_leak(new, s, k)
    new.finished = new.finished + (("retry", frozenset(s.names.get(p, p) for p in parts), k in s.merged),)
    return new


# -- enabled transitions -----------------------------------------------------


@dataclass(frozen=True, order=True)
class Transition:
    kind: str  # "io" | "new" | "tau" | "commit" | "abort" | "restart"
    thread: int
    tx: int = -1

    def __str__(self) -> str:
        return f"{self.kind}({self.thread}{'' if self.tx < 0 else f', k{self.tx}'})"


def _woken(s: MachineState, t: int) -> bool:
    readset = s.waiting.get(t)
    if readset is None:
        return True
    return any(s.versions.get(r, 0) != v for r, v in readset)


def candidates(s: MachineState) -> list[Transition]:
    """Transitions that may fire.  ``fire`` can still raise :class:`Blocked`."""
    out = []
    ready: dict[int, bool] = {}
    for t in sorted(s.threads):
        th = s.threads[t]
        if isinstance(th, Plain):
            redex, ctx = split(th.term)
            if isinstance(redex, _RESULTS) and isinstance(ctx, T.Hole):
                continue
            if isinstance(redex, T.Atomic):
                if _woken(s, t):
                    out.append(Transition("new", t))
            elif isinstance(redex, T.GetChar) and not s.input:
                continue
            else:
                out.append(Transition("io", t))
            continue
        top = th.term
        k = th.tx
        if isinstance(top, T.Return):
            ready.setdefault(k, True)
            continue
        ready[k] = False
        if isinstance(top, T.Throw):
            out.append(Transition("abort", t, k))
        elif isinstance(top, T.Retry):
            out.append(Transition("restart", t, k))
        else:
            out.append(Transition("tau", t, k))
    for k, ok in sorted(ready.items()):
        if ok:
            out.append(Transition("commit", min(s.participants(k)), k))
    return out


def fire(s: MachineState, tr: Transition) -> MachineState:
    if tr.kind == "io":
        return step_io(s, tr.thread)
    if tr.kind == "new":
        return begin_tx(s, tr.thread)
    if tr.kind == "tau":
        return step_tau(s, tr.thread)
    if tr.kind == "commit":
        return try_commit(s, tr.tx)
    if tr.kind == "abort":
        return abort_tx(s, tr.tx, tr.thread, _value(s.threads[tr.thread].term.value))
    if tr.kind == "restart":
        return restart_tx(s, tr.tx, tr.thread)
    raise ValueError(tr.kind)


def is_terminal(s: MachineState) -> bool:
    """Every thread is plain and has finished (returned or thrown)."""
    for th in s.threads.values():
        if not isinstance(th, Plain) or not isinstance(th.term, (T.Return, T.Throw)):
            return False
    return True


def outcomes(s: MachineState) -> dict[str, tuple[str, Any]]:
    """Per-thread outcome keyed by thread name."""
    out = {}
    for t, th in sorted(s.threads.items()):
        name = s.names.get(t, str(t))
        term = th.term
        if isinstance(th, Plain) and isinstance(term, T.Return):
            out[name] = ("returned", term.value)
        elif isinstance(th, Plain) and isinstance(term, T.Throw):
            out[name] = ("threw", term.value)
        else:
            out[name] = ("stuck", None)
    return out


def iter_events(s: MachineState) -> Iterator[Event]:
    return iter(s.events())
