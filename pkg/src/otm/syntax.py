"""S-expression surface syntax for action terms (``.otm`` files).

A program is a sequence of top-level items::

    ; comment to end of line
    (var c1 0)                      ; shared OTVar with an initial value
    (thread main (atomic (isolated (up c1))))

Terms::

    (return E) (bind T x T) (throw E) (catch T x T) (retry) (orElse T T)
    (newOTVar E) (readOTVar E) (writeOTVar E E) (fork T) (atomic T)
    (isolated T) (getChar) (putChar E) (if E T T)

Builtin desugarings (printed back in core form)::

    (check E) (modifyOTVar E x E) (assertOTVar E x E) (up E) (down E)
    (downAny E ...) (do T ...)

Expressions::

    42  -7  true  false  ()  'a'  '\\n'  '\\u{3bb}'  x  (loc 3)  (tid 1)
    (exc E) (tuple E ...) (+ E E) (- E E) (* E E) (< E E) (<= E E)
    (> E E) (>= E E) (= E E) (not E) (cons E E)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any

from otm import terms as T
from otm.terms import LevelError

__all__ = ["ParseError", "SourceProgram", "parse", "parse_term", "print_program", "print_term"]


class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int, expected: tuple[str, ...] = ()):
        self.message = message
        self.line = line
        self.col = col
        self.expected = expected
        detail = f" (expected {', '.join(expected)})" if expected else ""
        super().__init__(f"{line}:{col}: {message}{detail}")


@dataclass
class SourceProgram:
    """Top-level variable declarations and named IO threads."""

    vars: list[tuple[str, Any]] = field(default_factory=list)
    threads: list[tuple[str, Any]] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, SourceProgram):
            return NotImplemented
        return self.vars == other.vars and self.threads == other.threads


# -- lexer -------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>;[^\n]*)
  | (?P<lp>\()
  | (?P<rp>\))
  | (?P<char>'(?:\\u\{[0-9a-fA-F]{1,6}\}|\\.|[^\\'\n])')
  | (?P<atom>[^\s()';]+)
    """,
    re.VERBOSE,
)

_IDENT = re.compile(r"[A-Za-z_%][A-Za-z0-9_%'\-]*\Z")
_INT = re.compile(r"-?[0-9]+\Z")
_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", "'": "'", "0": "\0"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


@dataclass
class _List:
    items: list
    line: int
    col: int


def _tokenize(src: str) -> list[_Tok]:
    out = []
    pos, line, col = 0, 1, 1
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None:
            raise ParseError(f"unexpected character {src[pos]!r}", line, col)
        kind, text = m.lastgroup, m.group()
        if kind not in ("ws", "comment"):
            out.append(_Tok(kind, text, line, col))
        nl = text.count("\n")
        if nl:
            line += nl
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = m.end()
    out.append(_Tok("eof", "", line, col))
    return out


def _read(tokens: list[_Tok]) -> list:
    """Group tokens into nested lists (iteratively; no recursion limit)."""
    stack: list[_List] = [_List([], 1, 1)]
    for tok in tokens:
        if tok.kind == "lp":
            stack.append(_List([], tok.line, tok.col))
        elif tok.kind == "rp":
            if len(stack) == 1:
                raise ParseError("unbalanced ')'", tok.line, tok.col)
            done = stack.pop()
            stack[-1].items.append(done)
        elif tok.kind == "eof":
            if len(stack) > 1:
                raise ParseError("unexpected end of input", tok.line, tok.col, ("')'",))
        else:
            stack[-1].items.append(tok)
    return stack[0].items


# -- parser ------------------------------------------------------------------

_TERM_KEYWORDS = {
    "return", "bind", "throw", "catch", "retry", "orElse", "newOTVar",
    "readOTVar", "writeOTVar", "fork", "atomic", "isolated", "getChar",
    "putChar", "if", "check", "modifyOTVar", "assertOTVar", "up", "down",
    "downAny", "do",
}
_EXPR_KEYWORDS = {"loc", "tid", "exc", "tuple", "true", "false"} | set(T.PRIMS)
KEYWORDS = _TERM_KEYWORDS | _EXPR_KEYWORDS | {"var", "thread"}


def _pos(node) -> tuple[int, int]:
    return node.line, node.col


def _fail(node, msg, expected=()):
    raise ParseError(msg, *_pos(node), expected)


def _ident(node) -> str:
    if not isinstance(node, _Tok) or node.kind != "atom" or not _IDENT.match(node.text):
        _fail(node, "expected identifier", ("identifier",))
    if node.text in KEYWORDS:
        _fail(node, f"keyword {node.text!r} cannot be a variable", ("identifier",))
    return node.text


def _char(text: str, node) -> str:
    body = text[1:-1]
    if body.startswith("\\u{"):
        cp = int(body[3:-1], 16)
        if cp > 0x10FFFF or 0xD800 <= cp <= 0xDFFF:
            _fail(node, "invalid unicode scalar value")
        return chr(cp)
    if body.startswith("\\"):
        if body[1] not in _ESCAPES:
            _fail(node, f"unknown escape {body!r}")
        return _ESCAPES[body[1]]
    return body


def _expr(node) -> Any:
    if isinstance(node, _Tok):
        if node.kind == "char":
            return _char(node.text, node)
        text = node.text
        if _INT.match(text):
            n = int(text)
            if not T.INT_MIN <= n <= T.INT_MAX:
                _fail(node, "integer literal out of 64-bit range")
            return n
        if text == "true":
            return True
        if text == "false":
            return False
        return T.Var(_ident(node))
    items = node.items
    if not items:
        return T.UNIT
    head = items[0]
    if not isinstance(head, _Tok) or head.kind != "atom":
        _fail(node, "expected expression", ("expression",))
    op, args = head.text, items[1:]
    if op in ("loc", "tid"):
        _arity(node, args, 1)
        if not isinstance(args[0], _Tok) or not re.match(r"[0-9]+\Z", args[0].text):
            _fail(args[0], "expected natural number", ("natural number",))
        cls = T.Loc if op == "loc" else T.ThreadRef
        return cls(int(args[0].text))
    if op == "exc":
        _arity(node, args, 1)
        return T.Exc(_expr(args[0]))
    if op == "tuple":
        vals = tuple(_expr(a) for a in args)
        if not all(T._closed(v) for v in vals):
            _fail(node, "tuple components must be closed values")
        return vals
    if op in T.PRIMS:
        _arity(node, args, T.PRIMS[op][0])
        return T.Prim(op, tuple(_expr(a) for a in args))
    _fail(head, f"unknown expression form {op!r}", ("expression",))


def _arity(node, args, n):
    if len(args) != n:
        _fail(node, f"expected {n} argument(s), got {len(args)}")


def _term(node) -> Any:
    if not isinstance(node, _List) or not node.items:
        _fail(node, "expected term", ("'('",))
    head = node.items[0]
    if not isinstance(head, _Tok) or head.kind != "atom" or head.text not in _TERM_KEYWORDS:
        _fail(head, "expected term keyword", tuple(sorted(_TERM_KEYWORDS)))
    kw, args = head.text, node.items[1:]

    def need(n):
        _arity(node, args, n)

    if kw == "return":
        need(1)
        return T.Return(_expr(args[0]))
    if kw in ("bind", "catch"):
        need(3)
        m, x, body = _term(args[0]), _ident(args[1]), _term(args[2])
        cls = T.Bind if kw == "bind" else T.Catch
        return cls(m, T.Lam(x, body))
    if kw == "throw":
        need(1)
        return T.Throw(_expr(args[0]))
    if kw == "retry":
        need(0)
        return T.Retry()
    if kw == "orElse":
        need(2)
        return T.OrElse(_term(args[0]), _term(args[1]))
    if kw == "newOTVar":
        need(1)
        return T.NewOTVar(_expr(args[0]))
    if kw == "readOTVar":
        need(1)
        return T.ReadOTVar(_expr(args[0]))
    if kw == "writeOTVar":
        need(2)
        return T.WriteOTVar(_expr(args[0]), _expr(args[1]))
    if kw in ("fork", "atomic", "isolated"):
        need(1)
        body = _term(args[0])
        cls = {"fork": T.Fork, "atomic": T.Atomic, "isolated": T.Isolated}[kw]
        try:
            return cls(body)
        except LevelError as exc:
            raise _LevelAt(exc, node) from None
    if kw == "getChar":
        need(0)
        return T.GetChar()
    if kw == "putChar":
        need(1)
        return T.PutChar(_expr(args[0]))
    if kw == "if":
        need(3)
        return T.If(_expr(args[0]), _term(args[1]), _term(args[2]))
    if kw == "check":
        need(1)
        cond = _expr(args[0])
        if type(cond) is bool:
            return T.check(cond)
        return T.If(cond, T.Return(T.UNIT), T.Retry())
    if kw == "modifyOTVar":
        need(3)
        return T.modify_otvar(_expr(args[0]), T.Lam(_ident(args[1]), _expr(args[2])))
    if kw == "assertOTVar":
        need(3)
        return T.assert_otvar(_expr(args[0]), T.Lam(_ident(args[1]), _expr(args[2])))
    if kw == "up":
        need(1)
        return T.sem_up(_expr(args[0]))
    if kw == "down":
        need(1)
        return T.sem_down(_expr(args[0]))
    if kw == "downAny":
        return T.down_any([_expr(a) for a in args])
    if kw == "do":
        if not args:
            _fail(node, "do needs at least one term")
        return T.seq(*(_term(a) for a in args))
    raise AssertionError(kw)


class _LevelAt(Exception):
    def __init__(self, exc, node):
        self.exc, self.node = exc, node


def _located_level_error(err: _LevelAt) -> LevelError:
    line, col = _pos(err.node)
    out = LevelError(f"{line}:{col}: {err.exc}")
    out.line, out.col = line, col
    return out


def parse_term(src: str) -> Any:
    """Parse a single term (no level requirement beyond well-formedness)."""
    try:
        forms = _read(_tokenize(src))
        if len(forms) != 1:
            line, col = (forms[1].line, forms[1].col) if len(forms) > 1 else (1, 1)
            raise ParseError("expected exactly one term", line, col, ("term",))
        term = _term(forms[0])
        T.level_check(term)
        return term
    except _LevelAt as err:
        raise _located_level_error(err) from None
    except RecursionError:
        raise ParseError("nesting too deep", 1, 1) from None


def parse(src: str | bytes) -> SourceProgram:
    """Parse a program; each thread must be an IO-level action."""
    if isinstance(src, bytes):
        try:
            src = src.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8 at byte {exc.start}", 1, 1) from None
    try:
        return _program(_read(_tokenize(src)))
    except _LevelAt as err:
        raise _located_level_error(err) from None
    except RecursionError:
        raise ParseError("nesting too deep", 1, 1) from None


def _program(forms) -> SourceProgram:
    prog = SourceProgram()
    names: set[str] = set()
    for form in forms:
        if not isinstance(form, _List) or not form.items:
            _fail(form, "expected (var ...) or (thread ...)", ("'('",))
        head = form.items[0]
        kind = head.text if isinstance(head, _Tok) else None
        if kind not in ("var", "thread"):
            _fail(head, "expected top-level item", ("var", "thread"))
        _arity(form, form.items[1:], 2)
        name = _ident(form.items[1])
        if name in names:
            _fail(form.items[1], f"duplicate top-level name {name!r}")
        names.add(name)
        if kind == "var":
            value = _expr(form.items[2])
            if not T._closed(value):
                _fail(form.items[2], "initial value must be closed")
            prog.vars.append((name, T.evaluate(value)))
        else:
            term = _term(form.items[2])
            try:
                T.check_io(term)
            except LevelError as exc:
                raise _LevelAt(exc, form) from None
            prog.threads.append((name, term))
    return prog


# -- printer -----------------------------------------------------------------


def _print_char(c: str) -> str:
    inverse = {v: k for k, v in _ESCAPES.items()}
    if c in inverse:
        return f"'\\{inverse[c]}'"
    if c.isprintable() and not c.isspace() or c == " ":
        return f"'{c}'"
    return f"'\\u{{{ord(c):x}}}'"


def print_expr(e: Any) -> str:
    if type(e) is bool:
        return "true" if e else "false"
    if type(e) is int:
        return str(e)
    if type(e) is str:
        return _print_char(e)
    if type(e) is tuple:
        if not e:
            return "()"
        return "(tuple " + " ".join(print_expr(v) for v in e) + ")"
    if isinstance(e, T.Loc):
        return f"(loc {e.id})"
    if isinstance(e, T.ThreadRef):
        return f"(tid {e.id})"
    if isinstance(e, T.Exc):
        return f"(exc {print_expr(e.payload)})"
    if isinstance(e, T.Var):
        return e.name
    if isinstance(e, T.Prim):
        return "(" + " ".join([e.op, *(print_expr(a) for a in e.args)]) + ")"
    raise ValueError(f"value has no textual form: {e!r}")


def _print_lam(k) -> tuple[str, str]:
    if not isinstance(k, T.Lam):
        raise ValueError("host-function continuations cannot be printed")
    return k.param, print_term(k.body)


def print_term(t: Any) -> str:
    """Canonical text of a term; ``parse_term(print_term(t)) == t``."""
    if isinstance(t, T.Return):
        return f"(return {print_expr(t.value)})"
    if isinstance(t, (T.Bind, T.Catch)):
        kw = "bind" if isinstance(t, T.Bind) else "catch"
        k = t.cont if isinstance(t, T.Bind) else t.handler
        x, body = _print_lam(k)
        return f"({kw} {print_term(t.action)} {x} {body})"
    if isinstance(t, T.Throw):
        return f"(throw {print_expr(t.value)})"
    if isinstance(t, T.Retry):
        return "(retry)"
    if isinstance(t, T.OrElse):
        return f"(orElse {print_term(t.first)} {print_term(t.second)})"
    if isinstance(t, T.NewOTVar):
        return f"(newOTVar {print_expr(t.value)})"
    if isinstance(t, T.ReadOTVar):
        return f"(readOTVar {print_expr(t.loc)})"
    if isinstance(t, T.WriteOTVar):
        return f"(writeOTVar {print_expr(t.loc)} {print_expr(t.value)})"
    if isinstance(t, T.Fork):
        return f"(fork {print_term(t.body)})"
    if isinstance(t, T.Atomic):
        return f"(atomic {print_term(t.body)})"
    if isinstance(t, T.Isolated):
        return f"(isolated {print_term(t.body)})"
    if isinstance(t, T.GetChar):
        return "(getChar)"
    if isinstance(t, T.PutChar):
        return f"(putChar {print_expr(t.char)})"
    if isinstance(t, T.If):
        return f"(if {print_expr(t.cond)} {print_term(t.then)} {print_term(t.orelse)})"
    raise ValueError(f"term has no textual form: {t!r}")


def print_program(p: SourceProgram) -> str:
    lines = [f"(var {name} {print_expr(v)})" for name, v in p.vars]
    lines += [f"(thread {name} {print_term(t)})" for name, t in p.threads]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_value(text: str) -> Any:
    """Parse the textual form of a closed value."""
    try:
        forms = _read(_tokenize(text))
        if len(forms) != 1:
            raise ParseError("expected exactly one value", 1, 1)
        v = _expr(forms[0])
        return T.evaluate(v)
    except (T.EvalError, RecursionError) as exc:
        raise ParseError(str(exc), 1, 1) from None
