"""Multi-threaded runtime for open transactions.

Each program thread runs on a Python thread. Shared state (handles, claims,
transaction descriptors) is guarded by one global re-entrant lock, which
doubles as the isolation token: an isolated section holds it for its whole
body. Transaction identity is a union-find forest so merges are a pointer
update. Killing, rethrowing and restarting participants is cooperative: the
victim polls its signal at every transactional operation and barrier wait.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from otm import terms as T
from otm.history import EventKind, Recorder
from otm.terms import LevelError

__all__ = [
    "RuntimeConfig", "RunResult", "RunFailure", "DeadlockTimeout",
    "UnallocatedLocation", "Runtime", "run_io", "run_program", "run_threads",
]

INIT_TX = 0
_ABSENT = object()  # committed slot of a handle created by a live transaction


class RunFailure(Exception):
    """An uncaught ``throw`` reached the top of the main thread."""

    def __init__(self, value):
        super().__init__(f"uncaught exception {value!r}")
        self.value = value


class DeadlockTimeout(Exception):
    pass


class UnallocatedLocation(Exception):
    pass


class OTMThrow(Exception):
    def __init__(self, value):
        super().__init__(value)
        self.value = value


class _RetrySig(Exception):
    pass


class _Kill(Exception):
    pass


class _Rethrow(Exception):
    def __init__(self, value):
        super().__init__(value)
        self.value = value


class _Restart(Exception):
    def __init__(self, readset):
        super().__init__()
        self.readset = readset


@dataclass
class RuntimeConfig:
    timeout: float = 5.0  # seconds without global progress before a wait gives up
    input: str = ""
    seed: int | None = None  # perturbs interleavings with random yields
    yield_prob: float = 0.2
    sampler: Callable[[dict], None] | None = None  # called with committed values
    sample_interval: float = 0.002
    recorder: Recorder | None = None


class _Handle:
    __slots__ = ("id", "value", "tentative", "owner", "version", "stamp")

    def __init__(self, id: int, value: Any, owner=None, tentative=None):
        self.id = id
        self.value = value
        self.owner = owner
        self.tentative = tentative
        self.version = 0
        self.stamp = 0


class _Tx:
    RUNNING, COMMITTED, ABORTED, MERGED = "running", "committed", "aborted", "merged"

    def __init__(self, id: int):
        self.id = id
        self.parent: _Tx | None = None
        self.status = _Tx.RUNNING
        self.parts: list[_Thread] = []
        self.claims: list[_Handle] = []
        self.reads: set[int] = set()
        self.merged = False

    def find(self) -> "_Tx":
        k = self
        while k.parent is not None:
            k = k.parent
        # path compression
        node = self
        while node.parent is not None and node.parent is not k:
            node.parent, node = k, node.parent
        return k


class _Thread:
    def __init__(self, tid: int, name: str, parent: "_Thread | None" = None):
        self.tid = tid
        self.name = name
        self.parent = parent  # fork parent inside the current transaction
        self.tx: _Tx | None = None
        self.ready = False
        self.done = False
        self.result: Any = None
        self.signal: Exception | None = None
        self.solo = 0
        self.undo: list[Callable[[], None]] = []
        self.undo_events: list = []
        self.probe_reads: set[int] = set()
        self.outcome: tuple[str, Any] | None = None
        self.rng: random.Random | None = None
        self.py: threading.Thread | None = None

    def root(self) -> "_Thread":
        t = self
        while t.parent is not None:
            t = t.parent
        return t


@dataclass
class RunResult:
    heap: dict  # declared name or location id -> committed value
    output: str
    outcomes: dict  # thread name -> (kind, value)
    deadlock: bool
    events: list
    finished: list = field(default_factory=list)

    def named_heap(self) -> dict:
        return {k: v for k, v in self.heap.items() if isinstance(k, str)}


class Runtime:
    def __init__(self, config: RuntimeConfig | None = None):
        self.config = config or RuntimeConfig()
        self.lock = threading.RLock()
        self.cv = threading.Condition(self.lock)
        self.handles: dict[int, _Handle] = {}
        self.locnames: dict[int, str] = {}
        self.next_loc = 0
        self.next_tx = 1
        self.next_tid = 0
        self.progress = 0
        self.rec = self.config.recorder or Recorder()
        self.threads: list[_Thread] = []
        self.input = list(self.config.input)
        self.output: list[str] = []
        self.finished: list[tuple] = []
        self._seed_rng = random.Random(self.config.seed)

    # -- setup -------------------------------------------------------------

    def declare(self, vars: list[tuple[str, Any]]) -> dict[str, T.Loc]:
        env = {}
        with self.lock:
            for name, value in vars:
                r = self._fresh_loc()
                self.handles[r] = _Handle(r, value)
                self.locnames[r] = name
                self.rec.log(INIT_TX, None, EventKind.NEWLOC, loc=r)
                self.rec.log(INIT_TX, None, EventKind.WRITE, loc=r, value=value)
                env[name] = T.Loc(r)
            if vars:
                self.rec.log(INIT_TX, None, EventKind.COMMIT)
        return env

    def _fresh_loc(self) -> int:
        r = self.next_loc
        self.next_loc += 1
        return r

    def _fresh_tx(self) -> _Tx:
        k = _Tx(self.next_tx)
        self.next_tx += 1
        return k

    def _new_thread(self, name: str | None, parent: _Thread | None = None) -> _Thread:
        with self.lock:
            tid = self.next_tid
            self.next_tid += 1
            if name is None:
                base = parent.name if parent is not None else "t"
                name = f"{base}.{tid}"
            th = _Thread(tid, name, parent)
            if self.config.seed is not None:
                th.rng = random.Random(self._seed_rng.random())
            self.threads.append(th)
            return th

    # -- waiting and signals ---------------------------------------------

    def _bump(self):
        self.progress += 1
        self.cv.notify_all()

    def _poll(self, th: _Thread):
        if th.signal is not None:
            sig, th.signal = th.signal, None
            raise sig

    def _wait(self, th: _Thread, until: Callable[[], bool]):
        """Block (lock held) until ``until()`` or a signal; time out when
        nothing in the system changes for ``config.timeout`` seconds."""
        seen = self.progress
        deadline = time.monotonic() + self.config.timeout
        while True:
            self._poll(th)
            if until():
                return
            left = deadline - time.monotonic()
            if self.progress != seen:
                seen = self.progress
                deadline = time.monotonic() + self.config.timeout
                left = self.config.timeout
            if left <= 0:
                raise DeadlockTimeout(f"thread {th.name} made no progress for {self.config.timeout}s")
            self.cv.wait(min(left, 0.05))

    def _maybe_yield(self, th: _Thread):
        if th.rng is not None and th.solo == 0 and th.rng.random() < self.config.yield_prob:
            time.sleep(0)

    # -- interpreter -------------------------------------------------------

    def _exec(self, term: Any, th: _Thread) -> Any:
        """Run ``term`` to a value; raises OTMThrow or _RetrySig."""
        stack: list[tuple[str, Any]] = []
        while True:
            if isinstance(term, T.Bind):
                stack.append(("bind", term.cont))
                term = term.action
                continue
            if isinstance(term, T.Catch):
                stack.append(("catch", term.handler))
                term = term.action
                continue
            if isinstance(term, T.PureOpaque):
                term = _produced(term.thunk())
                continue
            if isinstance(term, T.If):
                cond = T.evaluate(term.cond)
                if type(cond) is not bool:
                    raise T.EvalError(f"if condition is not a boolean: {cond!r}")
                term = term.then if cond else term.orelse
                continue
            try:
                value = self._action(term, th)
            except OTMThrow as ex:
                while stack:
                    kind, f = stack.pop()
                    if kind == "catch":
                        term = _produced(f(ex.value))
                        break
                else:
                    raise
                continue
            while stack:
                kind, f = stack.pop()
                if kind == "bind":
                    term = _produced(f(value))
                    break
            else:
                return value

    def _action(self, term: Any, th: _Thread) -> Any:
        if isinstance(term, T.Return):
            return T.evaluate(term.value)
        if isinstance(term, T.Throw):
            raise OTMThrow(T.evaluate(term.value))
        if isinstance(term, T.Retry):
            raise _RetrySig()
        in_tx = th.tx is not None
        if isinstance(term, T.Atomic):
            if in_tx:
                raise LevelError("atomic inside a transaction")
            return self.run_atomic(th, term.body)
        if isinstance(term, T.Fork):
            if not in_tx:
                T.check_io(term.body)
                return self._spawn_io(term.body, th)
            return self.fork_in_tx(th, term.body)
        if isinstance(term, T.GetChar):
            if in_tx:
                raise LevelError("getChar inside a transaction")
            with self.lock:
                self._wait(th, lambda: bool(self.input))
                c = self.input.pop(0)
                self._bump()
                return c
        if isinstance(term, T.PutChar):
            if in_tx:
                raise LevelError("putChar inside a transaction")
            c = T.evaluate(term.char)
            if type(c) is not str:
                raise T.EvalError(f"putChar of non-character {c!r}")
            with self.lock:
                self.output.append(c)
                self._bump()
            return T.UNIT
        if not in_tx:
            raise LevelError(f"{type(term).__name__} cannot run at IO level outside atomic")
        if isinstance(term, T.Isolated):
            if th.solo:
                raise LevelError("isolated inside isolated")
            return self.run_isolated(th, term.body)
        if isinstance(term, T.OrElse):
            return self._or_else(th, term)
        if isinstance(term, T.NewOTVar):
            return self.otvar_new(th, T.evaluate(term.value))
        if isinstance(term, T.ReadOTVar):
            return self.otvar_read(th, _loc(term.loc))
        if isinstance(term, T.WriteOTVar):
            return self.otvar_write(th, _loc(term.loc), T.evaluate(term.value))
        raise LevelError(f"cannot execute {term!r}")

    # -- memory operations ---------------------------------------------------

    def _record(self, th: _Thread, *args, **kw):
        ev = self.rec.log(*args, **kw)
        if th.solo:
            th.undo_events.append(ev)

    def _claim_or_merge(self, th: _Thread, h: _Handle) -> _Tx:
        rep = th.tx.find()
        if h.owner is None:
            h.owner, h.tentative = rep, h.value
            rep.claims.append(h)
            if th.solo:
                th.undo.append(lambda: _release(h, rep))
            return rep
        j = h.owner.find()
        if j is not rep:
            self._merge(th, rep, j)
        return j

    def _merge(self, th: _Thread, k: _Tx, j: _Tx):
        if th.solo:
            saved = (len(j.parts), len(j.claims), set(j.reads), j.merged)

            def undo():
                k.parent, k.status = None, _Tx.RUNNING
                del j.parts[saved[0]:]
                del j.claims[saved[1]:]
                j.reads, j.merged = saved[2], saved[3]

            th.undo.append(undo)
        k.parent = j
        k.status = _Tx.MERGED
        j.parts.extend(k.parts)
        j.claims.extend(k.claims)
        j.reads |= k.reads
        j.merged = True
        self._record(th, k.id, th.tid, EventKind.MERGE, into=j.id)

    def _handle(self, r: int) -> _Handle:
        h = self.handles.get(r)
        if h is None:
            raise UnallocatedLocation(f"location {r} is not allocated")
        return h

    def otvar_new(self, th: _Thread, v: Any) -> T.Loc:
        self._maybe_yield(th)
        with self.lock:
            self._poll(th)
            rep = th.tx.find()
            r = self._fresh_loc()
            h = _Handle(r, _ABSENT, rep, v)
            self.handles[r] = h
            rep.claims.append(h)
            if th.solo:
                def undo():
                    del self.handles[r]
                    rep.claims.remove(h)
                    self.next_loc = r
                th.undo.append(undo)
            self._record(th, rep.id, th.tid, EventKind.NEWLOC, loc=r)
            self._record(th, rep.id, th.tid, EventKind.WRITE, loc=r, value=v)
            self._bump()
            return T.Loc(r)

    def otvar_read(self, th: _Thread, r: int) -> Any:
        self._maybe_yield(th)
        with self.lock:
            self._poll(th)
            h = self._handle(r)
            rep = self._claim_or_merge(th, h)
            v = h.tentative
            rep.reads.add(r)
            if th.solo:
                th.probe_reads.add(r)
            self._record(th, rep.id, th.tid, EventKind.READ, loc=r, value=v)
            self._bump()
            return v

    def otvar_write(self, th: _Thread, r: int, v: Any) -> Any:
        self._maybe_yield(th)
        with self.lock:
            self._poll(th)
            h = self._handle(r)
            rep = self._claim_or_merge(th, h)
            old = h.tentative
            if th.solo:
                th.undo.append(lambda: setattr(h, "tentative", old))
            h.tentative = v
            h.stamp += 1
            self._record(th, rep.id, th.tid, EventKind.WRITE, loc=r, value=v)
            self._bump()
            return T.UNIT

    # -- solo sections -------------------------------------------------------

    def _undo_to(self, th: _Thread, mark: int, evmark: int):
        while len(th.undo) > mark:
            th.undo.pop()()
        dropped = th.undo_events[evmark:]
        del th.undo_events[evmark:]
        self.rec.discard(dropped)

    def _stamps(self, locs) -> tuple:
        return tuple((r, self.handles[r].stamp, self.handles[r].version) for r in sorted(locs) if r in self.handles)

    def run_isolated(self, th: _Thread, body: Any) -> Any:
        """Run ``body`` without interleaving; block while it retries."""
        while True:
            self._maybe_yield(th)
            with self.lock:
                self._poll(th)
                mark, evmark = len(th.undo), len(th.undo_events)
                th.solo += 1
                th.probe_reads = set()
                try:
                    value = self._exec(body, th)
                except _RetrySig:
                    self._undo_to(th, mark, evmark)
                    seen = self._stamps(th.probe_reads)
                    locs = set(th.probe_reads)
                    th.solo -= 1
                    self._wait(th, lambda: self._stamps(locs) != seen)
                    continue
                except OTMThrow:
                    th.solo -= 1
                    self._end_solo(th, mark, evmark)
                    raise
                th.solo -= 1
                self._end_solo(th, mark, evmark)
                self._bump()
                return value

    def _end_solo(self, th: _Thread, mark: int, evmark: int):
        if th.solo == 0:
            del th.undo[mark:]
            del th.undo_events[evmark:]

    def _or_else(self, th: _Thread, term: T.OrElse) -> Any:
        with self.lock:
            self._poll(th)
            mark, evmark = len(th.undo), len(th.undo_events)
            th.solo += 1
            try:
                value = self._exec(term.first, th)
            except _RetrySig:
                self._undo_to(th, mark, evmark)
                th.solo -= 1
            except OTMThrow:
                th.solo -= 1
                self._end_solo(th, mark, evmark)
                raise
            else:
                th.solo -= 1
                self._end_solo(th, mark, evmark)
                return value
        return self._exec(term.second, th)

    # -- transactions --------------------------------------------------------

    def fork_in_tx(self, th: _Thread, body: Any) -> T.ThreadRef:
        if th.solo:
            raise LevelError("fork inside isolated")
        if T.level_check(body) is T.EffectLevel.IO:
            raise LevelError("fork inside a transaction needs an OTM body")
        child = self._new_thread(None, parent=th)
        with self.lock:
            self._poll(th)
            rep = th.tx.find()
            child.tx = rep
            rep.parts.append(child)
            self._bump()
        child.py = threading.Thread(target=self._child_main, args=(child, body), daemon=True)
        child.py.start()
        return T.ThreadRef(child.tid)

    def _begin(self, th: _Thread, readset) -> None:
        with self.lock:
            if readset:
                self._wait(th, lambda: any(self.handles[r].version != v for r, v in readset))
            k = self._fresh_tx()
            th.tx, th.parent = k, None
            th.ready = th.done = False
            th.signal = None
            k.parts.append(th)
            self.rec.log(k.id, th.tid, EventKind.BEGIN)
            self._bump()

    def run_atomic(self, th: _Thread, body: Any) -> Any:
        """Run ``body`` as a fresh transaction and return its committed result."""
        readset = None
        while True:
            self._begin(th, readset)
            try:
                try:
                    value = self._exec(body, th)
                except OTMThrow as ex:
                    self._veto(th, ex.value)
                except _RetrySig:
                    self._retry(th)
                self._ready_and_wait(th, value)
                th.tx = None
                return value
            except _Restart as r:
                th.tx = None
                readset = r.readset
            except _Rethrow as r:
                th.tx = None
                raise OTMThrow(r.value) from None

    def _child_main(self, th: _Thread, body: Any):
        try:
            try:
                value = self._exec(body, th)
            except OTMThrow as ex:
                self._veto(th, ex.value)
            except _RetrySig:
                self._retry(th)
            self._ready_and_wait(th, value)
            th.outcome = ("returned", value)
        except _Kill:
            th.outcome = ("killed", None)
        except DeadlockTimeout:
            th.outcome = ("stuck", None)
        except Exception as exc:  # runtime bug or level error in user code
            th.outcome = ("error", exc)
        finally:
            th.tx = None

    def _ready_and_wait(self, th: _Thread, value: Any):
        with self.lock:
            self._poll(th)
            th.ready, th.result = True, value
            rep = th.tx.find()
            if all(p.ready for p in rep.parts):
                self._commit(rep)
            self._wait(th, lambda: th.done)

    def _commit(self, rep: _Tx):
        for h in rep.claims:
            if h.owner is not None and h.owner.find() is rep:
                h.value = h.tentative
                h.version += 1
                h.stamp += 1
                h.owner = h.tentative = None
        rep.status = _Tx.COMMITTED
        self.rec.log(rep.id, rep.parts[0].tid, EventKind.COMMIT)
        self.finished.append(("commit", frozenset(p.name for p in rep.parts), rep.merged))
        for p in rep.parts:
            p.done = True
        self._bump()

    def _discard(self, rep: _Tx):
        leaked = []
        for h in rep.claims:
            if h.owner is not None and h.owner.find() is rep:
                if h.value is _ABSENT:
                    h.value = h.tentative
                    leaked.append((h.id, h.value))
                h.owner = h.tentative = None
                h.stamp += 1
        return sorted(leaked)

    def _log_leak(self, leaked):
        if leaked:
            j = self._fresh_tx()
            self.rec.log(j.id, None, EventKind.BEGIN)
            for r, v in leaked:
                self.rec.log(j.id, None, EventKind.WRITE, loc=r, value=v)
            self.rec.log(j.id, None, EventKind.COMMIT)

    def _veto(self, th: _Thread, e: Any):
        """Uncaught throw at the top of a participant: abort everything."""
        with self.lock:
            self._poll(th)
            rep = th.tx.find()
            leaked = self._discard(rep)
            rep.status = _Tx.ABORTED
            self.rec.log(rep.id, th.tid, EventKind.ABORT, value=e)
            self._log_leak(leaked)
            self.finished.append(("abort", frozenset(p.name for p in rep.parts), rep.merged))
            mine = th.root()
            for p in rep.parts:
                if p is th:
                    continue
                if p.parent is not None:
                    p.signal = _Kill()
                elif p is mine:
                    p.signal = _Rethrow(e)
                else:
                    p.signal = _Restart(None)
            self._bump()
        raise _Rethrow(e) if th.parent is None else _Kill()

    def _retry(self, th: _Thread):
        """Top-level retry: discard the transaction and restart every root
        once a location it read has a new committed version."""
        with self.lock:
            self._poll(th)
            rep = th.tx.find()
            readset = tuple(sorted((r, self.handles[r].version) for r in rep.reads))
            leaked = self._discard(rep)
            rep.status = _Tx.ABORTED
            self.rec.log(rep.id, th.tid, EventKind.ABORT, value="retry")
            self._log_leak(leaked)
            self.finished.append(("retry", frozenset(p.name for p in rep.parts), rep.merged))
            for p in rep.parts:
                if p is not th:
                    p.signal = _Kill() if p.parent is not None else _Restart(readset)
            self._bump()
        if th.parent is None:
            raise _Restart(readset)
        raise _Kill()

    # -- IO threads ----------------------------------------------------------

    def _io_main(self, th: _Thread, term: Any):
        try:
            th.outcome = ("returned", self._exec(term, th))
        except OTMThrow as ex:
            th.outcome = ("threw", ex.value)
        except DeadlockTimeout:
            th.outcome = ("stuck", None)
        except Exception as exc:
            th.outcome = ("error", exc)

    def _spawn_io(self, body: Any, parent: _Thread | None, name: str | None = None) -> T.ThreadRef:
        th = self._new_thread(name, None)
        if name is None and parent is not None:
            th.name = f"{parent.name}.{th.tid}"
        th.py = threading.Thread(target=self._io_main, args=(th, body), daemon=True)
        th.py.start()
        return T.ThreadRef(th.tid)

    def join_all(self):
        while True:
            with self.lock:
                pending = [t for t in self.threads if t.py is not None and t.py.is_alive()]
            if not pending:
                return
            for t in pending:
                t.py.join()

    def committed_heap(self) -> dict:
        with self.lock:
            return {
                self.locnames.get(r, r): h.value
                for r, h in sorted(self.handles.items())
                if h.value is not _ABSENT
            }

    def _sample_loop(self, stop: threading.Event):
        fn = self.config.sampler
        while not stop.is_set():
            fn(self.committed_heap())
            time.sleep(self.config.sample_interval)

    def run(self, threads: list[tuple[str, Any]]) -> RunResult:
        for _, term in threads:
            T.check_io(term)
        stop = threading.Event()
        sampler = None
        if self.config.sampler is not None:
            sampler = threading.Thread(target=self._sample_loop, args=(stop,), daemon=True)
            sampler.start()
        for name, term in threads:
            self._spawn_io(term, None, name)
        self.join_all()
        stop.set()
        if sampler is not None:
            sampler.join()
        outcomes = {}
        errors = []
        for t in self.threads:
            if t.outcome is None or t.outcome[0] == "killed":
                continue
            if t.outcome[0] == "error":
                errors.append(t.outcome[1])
            outcomes[t.name] = t.outcome
        if errors:
            raise errors[0]
        deadlock = any(kind == "stuck" for kind, _ in outcomes.values())
        return RunResult(self.committed_heap(), "".join(self.output), outcomes, deadlock,
                         self.rec.events(), list(self.finished))


def _release(h: _Handle, rep: _Tx):
    h.owner = h.tentative = None
    rep.claims.remove(h)


def _produced(term: Any) -> Any:
    if not isinstance(term, T.Term) or isinstance(term, T.Hole):
        raise LevelError(f"continuation did not return an action term: {term!r}")
    return term


def _loc(e: Any) -> int:
    v = T.evaluate(e)
    if not isinstance(v, T.Loc):
        raise T.EvalError(f"not a location: {v!r}")
    return v.id


def run_program(prog, config: RuntimeConfig | None = None) -> RunResult:
    """Run every thread of a :class:`~otm.syntax.SourceProgram` concurrently."""
    rt = Runtime(config)
    env = rt.declare(list(prog.vars))
    threads = []
    for name, term in prog.threads:
        for var, loc in env.items():
            term = T.substitute(term, var, loc)
        threads.append((name, term))
    return rt.run(threads)


def run_threads(threads: list[tuple[str, Any]], vars=(), config: RuntimeConfig | None = None) -> RunResult:
    """Like :func:`run_program` for native terms; ``vars`` become locations
    ``0..n-1`` in order, so terms may refer to them as ``Loc(i)``."""
    rt = Runtime(config)
    rt.declare(list(vars))
    return rt.run(threads)


def run_io(action: Any, config: RuntimeConfig | None = None) -> Any:
    """Run one IO action (plus anything it forks) and return its value."""
    res = run_threads([("main", action)], config=config)
    kind, value = res.outcomes["main"]
    if kind == "threw":
        raise RunFailure(value)
    if kind == "stuck":
        raise DeadlockTimeout("main thread did not finish")
    return value
