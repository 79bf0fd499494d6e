import random
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from otm import terms as T
from otm.syntax import ParseError, SourceProgram, parse, parse_term, parse_value, print_expr, print_program, print_term
from otm.terms import EffectLevel, LevelError

CORPUS = Path(__file__).resolve().parents[1] / "src" / "otm" / "corpus"

NAMES = st.sampled_from(["x", "y", "n", "acc", "v2", "_"])
INTS = st.integers(min_value=T.INT_MIN, max_value=T.INT_MAX)
CHARS = st.characters(blacklist_categories=("Cs",))


def closed_values(depth=2):
    base = st.one_of(INTS, st.booleans(), st.just(()), CHARS,
                     st.builds(T.Loc, st.integers(0, 99)), st.builds(T.ThreadRef, st.integers(0, 99)))
    if depth == 0:
        return base
    inner = closed_values(depth - 1)
    return st.one_of(base, st.builds(T.Exc, inner), st.lists(inner, min_size=1, max_size=3).map(tuple))


def exprs(depth=2):
    leaf = st.one_of(closed_values(1), NAMES.map(T.Var))
    if depth == 0:
        return leaf
    sub = exprs(depth - 1)
    return st.one_of(
        leaf,
        st.builds(lambda a, b, op: T.Prim(op, (a, b)), sub, sub, st.sampled_from(["+", "-", "*", "<", "=", "cons"])),
        st.builds(lambda a: T.Prim("not", (a,)), sub),
        st.builds(T.Exc, sub),
    )


@st.composite
def terms(draw, level: EffectLevel, depth: int):
    """A term typeable at ``level`` whose segment obeys that level's rules."""
    e = exprs(1)
    leaves = [st.builds(T.Return, e), st.builds(T.Throw, e)]
    if level is EffectLevel.ITM:
        leaves += [st.just(T.Retry()), st.builds(T.NewOTVar, e), st.builds(T.ReadOTVar, e),
                   st.builds(T.WriteOTVar, e, e)]
    elif level is EffectLevel.OTM:
        leaves += [st.builds(T.NewOTVar, e), st.builds(T.ReadOTVar, e), st.builds(T.WriteOTVar, e, e)]
    else:
        leaves += [st.just(T.GetChar()), st.builds(T.PutChar, e)]
    if depth <= 1:
        return draw(st.one_of(leaves))
    sub = terms(level, depth - 1)
    nodes = [
        st.builds(lambda m, x, k: T.Bind(m, T.Lam(x, k)), sub, NAMES, sub),
        st.builds(lambda m, x, k: T.Catch(m, T.Lam(x, k)), sub, NAMES, sub),
        st.builds(T.If, e, sub, sub),
    ]
    if level is EffectLevel.ITM:
        nodes.append(st.builds(T.OrElse, sub, sub))
    elif level is EffectLevel.OTM:
        nodes += [st.builds(T.Isolated, terms(EffectLevel.ITM, depth - 1)), st.builds(T.Fork, sub)]
    else:
        inner = st.sampled_from([EffectLevel.ITM, EffectLevel.OTM]).flatmap(lambda lv: terms(lv, depth - 1))
        nodes += [st.builds(T.Atomic, inner), st.builds(T.Fork, sub)]
    return draw(st.one_of(leaves + nodes))


def depth_of(t) -> int:
    kids = []
    for name in ("action", "body", "first", "second", "then", "orelse"):
        if isinstance(getattr(t, name, None), T.Term):
            kids.append(getattr(t, name))
    for name in ("cont", "handler"):
        if isinstance(getattr(t, name, None), T.Lam):
            kids.append(getattr(t, name).body)
    return 1 + max((depth_of(k) for k in kids), default=0)


ANY_TERM = st.sampled_from(list(EffectLevel)).flatmap(
    lambda lv: st.integers(1, 6).flatmap(lambda d: terms(lv, d).map(lambda t: (lv, t))))


@settings(max_examples=1000, deadline=None)
@given(ANY_TERM)
def test_print_parse_round_trip(case):
    level, t = case
    assert depth_of(t) <= 6
    assert T.level_check(t) <= level
    text = print_term(t)
    back = parse_term(text)
    assert back == t
    assert print_term(back) == text


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(NAMES, closed_values()), max_size=3, unique_by=lambda p: p[0]),
       st.lists(terms(EffectLevel.IO, 3), max_size=3))
def test_program_round_trip(vars_, bodies):
    vars_ = [(f"v{name}", T.evaluate(v)) for name, v in vars_]
    # IO-level generated bodies have no retry or memory op in their own segment
    prog = SourceProgram(vars_, [(f"t{i}", b) for i, b in enumerate(bodies)])
    assert parse(print_program(prog)) == prog


@given(closed_values(3))
def test_value_round_trip(v):
    assert parse_value(print_expr(v)) == v


def test_char_escapes():
    for c in ["\n", "\t", "\\", "'", "\u03bb", " ", "\x00"]:
        assert parse_value(print_expr(c)) == c
    assert parse_value("'\\u{3bb}'") == "\u03bb"


def test_sugar_desugars_to_core():
    assert parse_term("(up (loc 0))") == T.sem_up(T.Loc(0))
    assert parse_term("(down s)") == T.sem_down(T.Var("s"))
    assert parse_term("(check true)") == T.Return(())
    assert parse_term("(check false)") == T.Retry()
    assert parse_term("(do (return 1) (return 2))") == T.seq(T.Return(1), T.Return(2))
    assert parse_term("(downAny a b)") == T.down_any([T.Var("a"), T.Var("b")])


def test_level_errors_are_located():
    with pytest.raises(LevelError) as err:
        parse("(var c 0)\n(thread m\n  (isolated (atomic (return 1))))")
    assert (err.value.line, err.value.col) == (3, 3)
    with pytest.raises(LevelError):
        parse("(var c 0) (thread m (readOTVar c))")
    with pytest.raises(LevelError):
        parse_term("(bind (isolated (return 1)) x (retry))")


@pytest.mark.parametrize("src,line,col", [
    ("(thread m (return 1)", 1, 21),
    ("(thread m (frob))", 1, 12),
    ("(var c 99999999999999999999)", 1, 8),
    ("(thread m (return 1))\n(thread m (return 2))", 2, 9),
    ("(var 3 0)", 1, 6),
])
def test_parse_errors(src, line, col):
    with pytest.raises(ParseError) as err:
        parse(src)
    assert (err.value.line, err.value.col) == (line, col)


def test_invalid_utf8():
    with pytest.raises(ParseError):
        parse(b"(var c \xff)")


def test_corpus_parses():
    files = sorted(CORPUS.glob("*.otm"))
    assert files
    for f in files:
        prog = parse(f.read_bytes())
        assert prog.threads
        assert parse(print_program(prog)) == prog


def _mutate(rng: random.Random, data: bytes) -> bytes:
    b = bytearray(data)
    for _ in range(rng.randint(1, 6)):
        op = rng.randrange(4)
        pos = rng.randrange(len(b) + 1)
        if op == 0 and b:
            del b[min(pos, len(b) - 1)]
        elif op == 1:
            b.insert(pos, rng.choice(b"()' \\;xu{}0-9\xff\xc3"))
        elif op == 2 and b:
            b[min(pos, len(b) - 1)] = rng.randrange(256)
        else:
            cut = rng.randrange(len(b) + 1)
            b = b[:cut]
    return bytes(b)


def test_fuzz_only_parse_or_level_errors():
    rng = random.Random(1234)
    seeds = [f.read_bytes() for f in sorted(CORPUS.glob("*.otm"))]
    for i in range(10_000):
        if i % 5 == 0:
            data = bytes(rng.randrange(256) for _ in range(rng.randint(0, 40)))
        else:
            data = _mutate(rng, rng.choice(seeds))
        try:
            parse(data)
        except (ParseError, LevelError):
            pass
