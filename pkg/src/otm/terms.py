"""Action terms for open transactions.

Terms are immutable trees.  Continuations of ``Bind``/``Catch`` are either
host callables (``Value -> ActionTerm``) or :class:`Lam` abstractions, which
are structurally comparable and can be printed by :mod:`otm.syntax`.

Values are plain Python data::

    ()            unit
    int           64-bit signed integer
    bool          boolean
    str (len 1)   character
    Loc(n)        transactional variable reference
    ThreadRef(n)  thread identifier
    Exc(payload)  opaque exception payload

Expressions (:class:`Var`, :class:`Prim`) may appear wherever a value is
expected; they are closed by substitution and evaluated by :func:`evaluate`.
"""

from __future__ import annotations

import enum
import operator
from dataclasses import dataclass, fields
from typing import Any, Callable, Union

__all__ = [
    "Loc", "ThreadRef", "Exc", "Var", "Prim", "Lam",
    "Return", "Bind", "Throw", "Catch", "Retry", "OrElse", "NewOTVar",
    "ReadOTVar", "WriteOTVar", "Fork", "Atomic", "Isolated", "GetChar",
    "PutChar", "PureOpaque", "If", "Hole",
    "EffectLevel", "LevelError", "check_io", "EvalError", "level_check", "evaluate",
    "substitute", "is_value", "atomically", "check", "modify_otvar",
    "assert_otvar", "sem_up", "sem_down", "down_any", "fork_cont", "atomic_cont",
    "seq",
    "UNIT",
]

UNIT = ()

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1


class LevelError(TypeError):
    """A term violates the IO / OTM / ITM effect discipline."""


class EvalError(ValueError):
    """A pure expression cannot be evaluated (free variable, bad operand)."""


@dataclass(frozen=True)
class Loc:
    id: int

    def __repr__(self) -> str:
        return f"Loc({self.id})"


@dataclass(frozen=True)
class ThreadRef:
    id: int

    def __repr__(self) -> str:
        return f"ThreadRef({self.id})"


@dataclass(frozen=True)
class Exc:
    payload: Any


# -- expressions -------------------------------------------------------------


@dataclass(frozen=True)
class Var:
    name: str


def _checked_int(n: int) -> int:
    if not INT_MIN <= n <= INT_MAX:
        raise EvalError(f"integer overflow: {n}")
    return n


def _int_op(fn):
    def apply(a, b):
        if type(a) is not int or type(b) is not int:
            raise EvalError(f"arithmetic on non-integers: {a!r}, {b!r}")
        return _checked_int(fn(a, b))
    return apply


def _cmp_op(fn):
    def apply(a, b):
        if type(a) is not int or type(b) is not int:
            raise EvalError(f"comparison on non-integers: {a!r}, {b!r}")
        return fn(a, b)
    return apply


def _not(a):
    if type(a) is not bool:
        raise EvalError(f"not on non-boolean: {a!r}")
    return not a


def _eq(a, b):
    return type(a) is type(b) and a == b


PRIMS: dict[str, tuple[int, Callable[..., Any]]] = {
    "+": (2, _int_op(operator.add)),
    "-": (2, _int_op(operator.sub)),
    "*": (2, _int_op(operator.mul)),
    "<": (2, _cmp_op(operator.lt)),
    "<=": (2, _cmp_op(operator.le)),
    ">": (2, _cmp_op(operator.gt)),
    ">=": (2, _cmp_op(operator.ge)),
    "=": (2, _eq),
    "not": (1, _not),
    "cons": (2, lambda a, b: (a,) + b),
}


@dataclass(frozen=True)
class Prim:
    op: str
    args: tuple

    def __post_init__(self):
        if self.op not in PRIMS:
            raise ValueError(f"unknown primitive {self.op!r}")
        if len(self.args) != PRIMS[self.op][0]:
            raise ValueError(f"{self.op} takes {PRIMS[self.op][0]} argument(s)")


def is_value(x: Any) -> bool:
    """True for closed, fully evaluated values."""
    if type(x) is tuple:
        return all(is_value(v) for v in x)
    if type(x) in (int, bool):
        return True
    if type(x) is str:
        return len(x) == 1
    if isinstance(x, (Loc, ThreadRef)):
        return True
    if isinstance(x, Exc):
        return is_value(x.payload)
    # host functions are values (continuations stored in OTVars)
    return callable(x) and not isinstance(x, Term)


def evaluate(e: Any) -> Any:
    """Evaluate a closed expression to a value."""
    if isinstance(e, Prim):
        return PRIMS[e.op][1](*(evaluate(a) for a in e.args))
    if isinstance(e, Var):
        raise EvalError(f"free variable {e.name!r}")
    if isinstance(e, Exc):
        return Exc(evaluate(e.payload))
    if not is_value(e):
        raise EvalError(f"not a value: {e!r}")
    return e


def _closed(e: Any) -> bool:
    if isinstance(e, Var):
        return False
    if isinstance(e, Prim):
        return all(_closed(a) for a in e.args)
    if isinstance(e, Exc):
        return _closed(e.payload)
    return True


# -- terms -------------------------------------------------------------------


class Term:
    """Marker base class for action terms."""

    __slots__ = ()


@dataclass(frozen=True)
class Return(Term):
    value: Any = UNIT


@dataclass(frozen=True)
class Bind(Term):
    action: Term
    cont: Callable[[Any], Term]


@dataclass(frozen=True)
class Throw(Term):
    value: Any


@dataclass(frozen=True)
class Catch(Term):
    action: Term
    handler: Callable[[Any], Term]


@dataclass(frozen=True)
class Retry(Term):
    pass


@dataclass(frozen=True)
class OrElse(Term):
    first: Term
    second: Term


@dataclass(frozen=True)
class NewOTVar(Term):
    value: Any


@dataclass(frozen=True)
class ReadOTVar(Term):
    loc: Any


@dataclass(frozen=True)
class WriteOTVar(Term):
    loc: Any
    value: Any


@dataclass(frozen=True)
class Fork(Term):
    body: Term


@dataclass(frozen=True)
class Atomic(Term):
    body: Term

    def __post_init__(self):
        level = level_check(self.body)
        if level is EffectLevel.IO:
            raise LevelError("atomic body must be an OTM action, found IO")


@dataclass(frozen=True)
class Isolated(Term):
    body: Term

    def __post_init__(self):
        level = level_check(self.body)
        if level is not EffectLevel.ITM:
            raise LevelError(
                f"isolated body must be an ITM action, found {level.name}"
                " (ITM does not support thread creation)"
            )


@dataclass(frozen=True)
class GetChar(Term):
    pass


@dataclass(frozen=True)
class PutChar(Term):
    char: Any


@dataclass(frozen=True)
class PureOpaque(Term):
    """A host thunk that yields a term when forced (the Eval rule)."""

    thunk: Callable[[], Term]


@dataclass(frozen=True)
class If(Term):
    cond: Any
    then: Term
    orelse: Term


@dataclass(frozen=True)
class Hole(Term):
    """The hole of an evaluation context."""


@dataclass(frozen=True)
class Lam:
    """A single-variable abstraction ``\\param -> body`` over terms."""

    param: str
    body: Term

    def __call__(self, value: Any) -> Term:
        return substitute(self.body, self.param, value)


ActionTerm = Union[
    Return, Bind, Throw, Catch, Retry, OrElse, NewOTVar, ReadOTVar,
    WriteOTVar, Fork, Atomic, Isolated, GetChar, PutChar, PureOpaque, If,
]


# -- substitution ------------------------------------------------------------


def _subst_expr(e: Any, name: str, value: Any) -> Any:
    if isinstance(e, Var):
        return value if e.name == name else e
    if isinstance(e, Prim):
        args = tuple(_subst_expr(a, name, value) for a in e.args)
        if all(_closed(a) for a in args):
            try:
                return evaluate(Prim(e.op, args))
            except EvalError:
                pass
        return Prim(e.op, args)
    if isinstance(e, Exc):
        return Exc(_subst_expr(e.payload, name, value))
    return e


def substitute(term: Any, name: str, value: Any) -> Any:
    """Replace free occurrences of variable ``name`` by ``value``.

    Closed primitive applications produced by the substitution are folded,
    so ``Lam("x", Return(x + 1))(5)`` is ``Return(6)``.
    """
    if isinstance(term, Lam):
        if term.param == name:
            return term
        return Lam(term.param, substitute(term.body, name, value))
    if isinstance(term, _Closure):
        return _Closure(term.fn, _subst_expr(term.env, name, value))
    if not isinstance(term, Term):
        return _subst_expr(term, name, value)
    changes = {}
    for f in fields(term):
        old = getattr(term, f.name)
        if isinstance(old, (Term, Lam, Var, Prim, Exc, _Closure)):
            new = substitute(old, name, value)
            if new is not old:
                changes[f.name] = new
    if not changes:
        return term
    args = {f.name: changes.get(f.name, getattr(term, f.name)) for f in fields(term)}
    return type(term)(**args)


# -- effect levels -----------------------------------------------------------


class EffectLevel(enum.IntEnum):
    ITM = 0
    OTM = 1
    IO = 2


_ITM_LEAVES = (NewOTVar, ReadOTVar, WriteOTVar)


def _levels(term: Any) -> tuple[EffectLevel, bool, bool]:
    """Return (level, retry-in-segment, memory-op-in-segment).

    A segment is the part of the tree reachable without crossing an
    Atomic, Isolated or Fork boundary.
    """
    if isinstance(term, (Return, Throw, Hole, PureOpaque)):
        return EffectLevel.ITM, False, False
    if isinstance(term, Retry):
        return EffectLevel.ITM, True, False
    if isinstance(term, _ITM_LEAVES):
        return EffectLevel.ITM, False, True
    if isinstance(term, (GetChar, PutChar)):
        return EffectLevel.IO, False, False
    if isinstance(term, OrElse):
        for branch in (term.first, term.second):
            if level_check(branch) is not EffectLevel.ITM:
                raise LevelError("orElse branches must be ITM actions")
        return EffectLevel.ITM, True, True
    if isinstance(term, Isolated):
        return EffectLevel.OTM, False, False
    if isinstance(term, Atomic):
        return EffectLevel.IO, False, False
    if isinstance(term, Fork):
        inner = level_check(term.body)
        return max(inner, EffectLevel.OTM), False, False
    if isinstance(term, (Bind, Catch)):
        k = term.cont if isinstance(term, Bind) else term.handler
        parts = [_levels(term.action)]
        if isinstance(k, Lam):
            parts.append(_levels(k.body))
        return _join(parts)
    if isinstance(term, If):
        return _join([_levels(term.then), _levels(term.orelse)])
    raise LevelError(f"not an action term: {term!r}")


def _join(parts):
    level = max(p[0] for p in parts)
    retry = any(p[1] for p in parts)
    mem = any(p[2] for p in parts)
    if retry and level >= EffectLevel.OTM:
        raise LevelError("retry/orElse used at OTM or IO level without isolated")
    if mem and level is EffectLevel.IO:
        raise LevelError("transactional memory operation used at IO level without atomic")
    return level, retry, mem


def level_check(term: Any) -> EffectLevel:
    """Minimal effect level at which ``term`` is typeable.

    Host-function continuations are opaque and contribute ITM; the terms they
    produce are checked again when they are constructed or executed.
    """
    return _levels(term)[0]


def check_io(term: Any) -> EffectLevel:
    """Check that ``term`` can run as a top-level IO thread."""
    level, retry, mem = _levels(term)
    if retry or mem:
        raise LevelError("transactional operation outside atomic in an IO thread")
    return level


# -- derived combinators -----------------------------------------------------


def atomically(term: Term) -> Atomic:
    """``atomically = atomic . isolated``."""
    return Atomic(Isolated(term))


def check(b: bool) -> Term:
    return Return(UNIT) if b else Retry()


def seq(*terms: Term) -> Term:
    """``t1 >> t2 >> ... >> tn`` as right-nested binds."""
    if not terms:
        return Return(UNIT)
    out = terms[-1]
    for t in reversed(terms[:-1]):
        out = Bind(t, Lam("_", out))
    return out


def modify_otvar(r: Any, f: Callable[[Any], Any] | Lam) -> Term:
    """Read ``r`` and write back ``f`` applied to the value.

    ``f`` is either a host function on values or an expression-level
    :class:`Lam` whose body is the new value.
    """
    if isinstance(f, Lam):
        return Bind(ReadOTVar(r), Lam(f.param, WriteOTVar(r, f.body)))
    return Bind(ReadOTVar(r), lambda x: WriteOTVar(r, f(x)))


def assert_otvar(r: Any, p: Callable[[Any], bool] | Lam) -> Term:
    if isinstance(p, Lam):
        return Bind(ReadOTVar(r), Lam(p.param, If(p.body, Return(UNIT), Retry())))
    return Bind(ReadOTVar(r), lambda x: check(p(x)))


def sem_up(s: Any) -> Term:
    return modify_otvar(s, Lam("n", Prim("+", (Var("n"), 1))))


def sem_down(s: Any) -> Term:
    return Bind(
        assert_otvar(s, Lam("n", Prim(">", (Var("n"), 0)))),
        Lam("_", modify_otvar(s, Lam("n", Prim("-", (Var("n"), 1))))),
    )


def down_any(sems: list) -> Term:
    out: Term = Retry()
    for s in reversed(sems):
        out = OrElse(sem_down(s), out)
    return out


FORK_QUEUE = "%forkq"


def fork_cont(action: Term, cont: Callable[[Any], Term]) -> Term:
    """Fork ``action`` as a participant; run ``cont`` on its result as a
    fresh IO thread once the enclosing transaction has committed.

    Must be used inside :func:`atomic_cont`, which owns the queue of
    pending continuations (bound to the variable ``%forkq``).
    """
    if level_check(action) is EffectLevel.IO:
        raise LevelError("fork_cont action must be an OTM or ITM action")
    q = Var(FORK_QUEUE)

    def register(slot, queue):
        entry = Prim("cons", ((slot, cont), Var("items")))
        body = Bind(action, lambda v: Isolated(WriteOTVar(slot, (1, v))))
        return Bind(
            Isolated(Bind(ReadOTVar(queue), Lam("items", WriteOTVar(queue, entry)))),
            lambda _: Fork(body),
        )

    return Bind(Isolated(NewOTVar((0,))), _Closure(register, q))


@dataclass(frozen=True)
class _Closure:
    """Host continuation closed over one substitutable variable."""

    fn: Callable[..., Term]
    env: Any

    def __call__(self, value: Any) -> Term:
        if isinstance(self.env, Var):
            raise EvalError(f"free variable {self.env.name!r}")
        return self.fn(value, self.env)


def _dispatch(items) -> Term:
    out: Term = Return(UNIT)
    for slot, cont in reversed(items):
        out = Bind(atomically(ReadOTVar(slot)), _start(cont, out))
    return out


def _start(cont, rest):
    def go(cell):
        if cell[0] != 1:
            return rest
        return Bind(Fork(cont(cell[1])), lambda _: rest)
    return go


def atomic_cont(body: Term) -> Term:
    """``atomic body`` followed by dispatch of queued ``fork_cont`` continuations."""
    def run(q):
        inner = substitute(body, FORK_QUEUE, q)
        return Bind(
            Atomic(inner),
            lambda v: Bind(
                atomically(ReadOTVar(q)),
                lambda items: Bind(_dispatch(items), lambda _: Return(v)),
            ),
        )

    return Bind(atomically(NewOTVar(())), run)
