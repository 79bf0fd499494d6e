import pytest

from otm import machine as M
from otm import terms as T
from otm.explore import SeededRandom, explore, run
from otm.syntax import SourceProgram
from otm.terms import EffectLevel, EvalError, LevelError, Loc

r = Loc(0)


def test_levels():
    assert T.level_check(T.Return(())) is EffectLevel.ITM
    assert T.level_check(T.Isolated(T.ReadOTVar(r))) is EffectLevel.OTM
    assert T.level_check(T.Atomic(T.Bind(T.Isolated(T.ReadOTVar(r)), lambda v: T.Return(v)))) is EffectLevel.IO
    assert T.level_check(T.Fork(T.ReadOTVar(r))) is EffectLevel.OTM
    assert T.level_check(T.PutChar("a")) is EffectLevel.IO


@pytest.mark.parametrize("build", [
    lambda: T.Isolated(T.Fork(T.Return(()))),
    lambda: T.Isolated(T.Atomic(T.Return(()))),
    lambda: T.Atomic(T.PutChar("x")),
    lambda: T.atomically(T.Fork(T.Return(()))),
    lambda: T.Isolated(T.Isolated(T.Return(()))),
])
def test_level_errors(build):
    with pytest.raises(LevelError):
        build()


def test_retry_needs_isolation_outside_itm():
    with pytest.raises(LevelError):
        T.level_check(T.seq(T.Isolated(T.Return(())), T.Retry()))
    with pytest.raises(LevelError):
        T.check_io(T.ReadOTVar(r))
    assert T.check_io(T.Atomic(T.seq(T.WriteOTVar(r, 1), T.Isolated(T.Retry())))) is EffectLevel.IO


def test_atomically_is_atomic_isolated():
    assert T.atomically(T.Return(5)) == T.Atomic(T.Isolated(T.Return(5)))
    assert T.atomically(T.ReadOTVar(r)) == T.Atomic(T.Isolated(T.ReadOTVar(r)))


def test_check():
    assert T.check(True) == T.Return(())
    assert T.check(False) == T.Retry()
    assert T.check(0 > 0) == T.Retry()


def test_down_any_empty_is_retry():
    assert T.down_any([]) == T.Retry()


def _final(threads, vars_):
    res = explore(SourceProgram(vars_, threads))
    return res.terminals


def test_sem_up_then_down_restores():
    prog = [("m", T.atomically(T.seq(T.sem_up(T.Var("s")), T.sem_down(T.Var("s")))))]
    (s,) = _final(prog, [("s", 5)])
    assert s.named_heap() == {"s": 5} and not s.deadlock


def test_sem_down_on_zero_blocks():
    (s,) = _final([("m", T.atomically(T.sem_down(T.Var("s"))))], [("s", 0)])
    assert s.deadlock


def test_modify_and_assert_with_host_functions():
    body = T.seq(T.modify_otvar(r, lambda v: v * 3), T.assert_otvar(r, lambda v: v == 6))
    (s,) = _final([("m", T.atomically(body))], [("c", 2)])
    assert s.named_heap() == {"c": 6}


def test_substitution_folds_closed_prims():
    lam = T.Lam("x", T.Return(T.Prim("+", (T.Var("x"), 1))))
    assert lam(5) == T.Return(6)
    shadow = T.Lam("x", T.Bind(T.Return(1), T.Lam("x", T.Return(T.Var("x")))))
    assert shadow(9) == shadow.body


def test_evaluation_errors():
    with pytest.raises(EvalError):
        T.evaluate(T.Var("free"))
    with pytest.raises(EvalError):
        T.evaluate(T.Prim("+", (2**63 - 1, 1)))
    with pytest.raises(EvalError):
        T.evaluate(T.Prim("+", (True, 1)))
    assert T.evaluate(T.Prim("=", (T.Loc(1), T.Loc(1)))) is True


def test_values():
    assert T.is_value(())
    assert T.is_value(T.Exc((1, "a")))
    assert not T.is_value("ab")
    assert not T.is_value(T.Var("x"))


# -- fork_cont -------------------------------------------------------------------


def _cont_program(throw: bool):
    def cont(v):
        return T.atomically(T.WriteOTVar(T.Loc(1), v))

    body = T.seq(T.fork_cont(T.Return(7), cont), T.Throw(T.Exc(0)) if throw else T.Return(()))
    return SourceProgram([("flag", 0), ("seen", 0)], [("m", T.atomic_cont(body))])


def test_fork_cont_runs_after_commit():
    res = explore(_cont_program(throw=False))
    assert {s.named_heap()["seen"] for s in res.terminals} == {7}
    assert all(not s.deadlock for s in res.terminals)


def test_fork_cont_never_runs_after_abort():
    res = explore(_cont_program(throw=True))
    for s in res.terminals:
        assert s.named_heap()["seen"] == 0
        assert ("m", "threw", T.Exc(0)) in s.outcomes
        assert len(s.outcomes) == 1  # no continuation thread was ever created


def test_fork_cont_continuation_only_after_commit():
    s = M.load_program(_cont_program(throw=False))
    res = run(s, SeededRandom(3), keep_trace=True)
    commits, first_cont, participants = [], None, {0}
    for i, tr in enumerate(res.trace):
        s = M.fire(s, tr)
        if tr.kind == "commit":
            commits.append(i)
        participants |= {t for t, th in s.threads.items() if isinstance(th, M.InTx) and s.parent[t] is not None}
        extra = [t for t in s.threads if t not in participants]
        if extra and first_cont is None:
            first_cont = i
    # commit 1 allocates the queue, commit 2 is the transaction using fork_cont
    assert first_cont is not None and first_cont > commits[1]
    assert s.heap[1] == 7


def test_fork_cont_inside_isolated_is_rejected():
    with pytest.raises(LevelError):
        T.Isolated(T.fork_cont(T.Return(1), lambda v: T.Return(v)))
