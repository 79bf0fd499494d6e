"""One exact post-state test per reduction rule and auxiliary function."""

import pytest

from otm import machine as M
from otm import terms as T
from otm.history import Event, EventKind as K
from otm.machine import InTx, Plain
from otm.terms import Bind, Catch, Exc, Hole, Lam, Loc, Prim, Return, ThreadRef, Var

# rule or auxiliary function -> the test asserting its exact post-state
RULES = {
    "BindVal": "test_bind_val", "BindEx": "test_bind_ex_throw", "CatchVal": "test_catch_val",
    "CatchEx": "test_catch_ex", "Eval": "test_eval_if_and_opaque",
    "InChar": "test_in_char", "OutChar": "test_out_char", "TermIO": "test_term_io", "ForkIO": "test_fork_io",
    "TermT": "test_term_t", "ForkT": "test_fork_t", "NewVar": "test_new_var",
    "Read1": "test_read1_claims_unclaimed", "Read2": "test_read2_merges_into_owner",
    "Write1": "test_write1_claims", "Write2": "test_write2_merges_and_overwrites",
    "Or1": "test_or1_keeps_first_branch", "Or2": "test_or2_discards_first_branch",
    "Isolated": "test_isolated_runs_body_without_interleaving",
    "New": "test_new", "Commit": "test_commit_publishes_for_all_participants",
    "Abort1": "test_abort1_thrower_rethrows_and_memory_leaks",
    "Abort2": "test_abort2_same_tree_thread_is_erased",
    "Abort3": "test_abort3_foreign_root_restarts_from_snapshot",
    "commit": "test_commit_fn", "cleanup": "test_cleanup_fn", "leak": "test_leak_fn",
}

x = Var("x")
INC = Lam("x", Return(Prim("+", (x, 1))))


def state(threads, heap=(), wm=None, parent=None, **kw):
    s = M.initial_state([(f"t{i}", Plain(Return(()))) for i in range(0)], list(heap))
    for t, th in threads.items():
        s.threads[t] = th
        s.parent[t] = None
        s.names[t] = f"t{t}"
    s.next_thread = max(threads) + 1 if threads else 0
    s.wm = dict(wm or {})
    s.parent.update(parent or {})
    for k, v in kw.items():
        setattr(s, k, v)
    return s


def assert_state(post, expected, new_events=()):
    """Exact equality of every component except the log, which must have
    grown by exactly ``new_events`` (kind, tx, thread, loc, value, into)."""
    for f in ("heap", "wm", "parent", "threads", "next_tx", "next_thread", "next_loc",
              "input", "output", "versions", "reads", "waiting", "names", "finished", "merged"):
        assert getattr(post, f) == getattr(expected, f), f
    got = post.events()[len(expected.events()):]
    assert [(e.kind, e.tx, e.thread, e.loc, e.value, e.into) for e in got] == list(new_events)


# -- pure term rules ---------------------------------------------------------


def test_bind_val():
    assert M.reduce_term(Bind(Return(3), INC)) == Return(4)


def test_bind_ex_throw():
    assert M.reduce_term(Bind(T.Throw(Exc(1)), INC)) == T.Throw(Exc(1))


def test_bind_ex_retry():
    assert M.reduce_term(Bind(T.Retry(), INC)) == T.Retry()


def test_catch_val():
    assert M.reduce_term(Catch(Return(5), Lam("e", Return(0)))) == Return(5)


def test_catch_ex():
    assert M.reduce_term(Catch(T.Throw(7), Lam("e", Return(Var("e"))))) == Return(7)


def test_eval_if_and_opaque():
    assert M.reduce_term(T.If(Prim("<", (1, 2)), Return(1), Return(2))) == Return(1)
    assert M.reduce_term(T.PureOpaque(lambda: Return(9))) == Return(9)
    with pytest.raises(M.NotARedex):
        M.reduce_term(Return(1))


# -- IO rules ------------------------------------------------------------------


def test_in_char():
    k = Lam("c", T.PutChar(Var("c")))
    pre = state({0: Plain(Bind(T.GetChar(), k))}, input="ab")
    exp = pre.copy()
    exp.threads[0] = Plain(Bind(Return("a"), k))
    exp.input = "b"
    assert_state(M.step_io(pre, 0), exp)


def test_in_char_blocks_without_input():
    with pytest.raises(M.Blocked):
        M.step_io(state({0: Plain(T.GetChar())}), 0)


def test_out_char():
    pre = state({0: Plain(Bind(T.PutChar("z"), INC))})
    exp = pre.copy()
    exp.threads[0] = Plain(Bind(Return(()), INC))
    exp.output = "z"
    assert_state(M.step_io(pre, 0), exp)


def test_term_io():
    pre = state({0: Plain(Bind(Return(1), INC))})
    exp = pre.copy()
    exp.threads[0] = Plain(Return(2))
    assert_state(M.step_io(pre, 0), exp)


def test_fork_io():
    body = T.PutChar("q")
    pre = state({0: Plain(Bind(T.Fork(body), INC))})
    exp = pre.copy()
    exp.threads[0] = Plain(Bind(Return(ThreadRef(1)), INC))
    exp.threads[1] = Plain(body)
    exp.parent[1] = None
    exp.names[1] = "t0.1"
    exp.next_thread = 2
    assert_state(M.step_io(pre, 0), exp)


# -- transactional rules -------------------------------------------------------


def in_tx(term, k=1, ctx=Hole(), snap=None):
    return InTx(k, term, ctx, snap if snap is not None else term)


def test_term_t():
    pre = state({0: in_tx(Bind(Return(1), INC))}, next_tx=2)
    exp = pre.copy()
    exp.threads[0] = in_tx(Return(2), snap=Bind(Return(1), INC))
    assert_state(M.step_tau(pre, 0), exp)


def test_fork_t():
    child = T.Isolated(T.WriteOTVar(Loc(0), 1))
    th = in_tx(Bind(T.Fork(child), INC))
    pre = state({0: th}, heap=[("a", 0)], next_tx=2)
    exp = pre.copy()
    exp.threads[0] = in_tx(Bind(Return(ThreadRef(1)), INC), snap=th.snapshot)
    exp.threads[1] = InTx(1, child, Hole(), child)
    exp.parent[1] = 0
    exp.names[1] = "t0.1"
    exp.next_thread = 2
    assert_state(M.step_tau(pre, 0), exp)


def test_new_var():
    th = in_tx(T.NewOTVar(42))
    pre = state({0: th}, heap=[("a", 0)], next_tx=2)
    exp = pre.copy()
    exp.threads[0] = in_tx(Return(Loc(1)), snap=th.snapshot)
    exp.wm[1] = (42, 1)
    exp.versions[1] = 0
    exp.next_loc = 2
    assert_state(M.step_tau(pre, 0), exp, [(K.NEWLOC, 1, 0, 1, None, None), (K.WRITE, 1, 0, 1, 42, None)])


def test_read1_claims_unclaimed():
    th = in_tx(T.ReadOTVar(Loc(0)))
    pre = state({0: th}, heap=[("a", 7)], next_tx=2, reads={1: frozenset()})
    exp = pre.copy()
    exp.threads[0] = in_tx(Return(7), snap=th.snapshot)
    exp.wm[0] = (7, 1)
    exp.reads = {1: frozenset({0})}
    assert_state(M.step_tau(pre, 0), exp, [(K.READ, 1, 0, 0, 7, None)])


def test_read2_merges_into_owner():
    th = in_tx(T.ReadOTVar(Loc(0)), k=1)
    other = in_tx(T.Isolated(T.Retry()), k=2)
    pre = state({0: th, 1: other}, heap=[("a", 0), ("b", 0)], wm={0: (9, 2), 1: (3, 1)},
                next_tx=3, reads={1: frozenset({1}), 2: frozenset()})
    exp = pre.copy()
    exp.threads[0] = InTx(2, Return(9), Hole(), th.snapshot)
    exp.wm = {0: (9, 2), 1: (3, 2)}
    exp.reads = {2: frozenset({0, 1})}
    exp.merged = frozenset({2})
    assert_state(M.step_tau(pre, 0), exp, [(K.MERGE, 1, 0, None, None, 2), (K.READ, 2, 0, 0, 9, None)])


def test_write1_claims():
    th = in_tx(T.WriteOTVar(Loc(0), 5))
    pre = state({0: th}, heap=[("a", 1)], next_tx=2)
    exp = pre.copy()
    exp.threads[0] = in_tx(Return(()), snap=th.snapshot)
    exp.wm[0] = (5, 1)
    assert_state(M.step_tau(pre, 0), exp, [(K.WRITE, 1, 0, 0, 5, None)])


def test_write2_merges_and_overwrites():
    th = in_tx(T.WriteOTVar(Loc(0), 5), k=1)
    other = in_tx(T.Isolated(T.Retry()), k=2)
    pre = state({0: th, 1: other}, heap=[("a", 1)], wm={0: (8, 2)}, next_tx=3)
    exp = pre.copy()
    exp.threads[0] = InTx(2, Return(()), Hole(), th.snapshot)
    exp.wm = {0: (5, 2)}
    exp.reads = {2: frozenset()}
    exp.merged = frozenset({2})
    assert_state(M.step_tau(pre, 0), exp, [(K.MERGE, 1, 0, None, None, 2), (K.WRITE, 2, 0, 0, 5, None)])


def test_or1_keeps_first_branch():
    th = in_tx(T.OrElse(T.seq(T.WriteOTVar(Loc(0), 5), Return(1)), Return(2)))
    pre = state({0: th}, heap=[("a", 0)], next_tx=2)
    exp = pre.copy()
    exp.threads[0] = in_tx(Return(1), snap=th.snapshot)
    exp.wm[0] = (5, 1)
    assert_state(M.step_tau(pre, 0), exp, [(K.WRITE, 1, 0, 0, 5, None)])


def test_or2_discards_first_branch():
    first = T.seq(T.WriteOTVar(Loc(0), 5), T.ReadOTVar(Loc(1)), T.Retry())
    th = in_tx(T.OrElse(first, Return(2)))
    pre = state({0: th}, heap=[("a", 0), ("b", 0)], next_tx=2, reads={1: frozenset()})
    exp = pre.copy()
    exp.threads[0] = in_tx(Return(2), snap=th.snapshot)
    exp.reads = {1: frozenset({1})}  # the read-set survives for retry wake-up
    assert_state(M.step_tau(pre, 0), exp)


def test_isolated_runs_body_without_interleaving():
    body = T.seq(T.WriteOTVar(Loc(0), 5), Return(3))
    th = in_tx(Bind(T.Isolated(body), INC))
    pre = state({0: th}, heap=[("a", 0)], next_tx=2)
    exp = pre.copy()
    exp.threads[0] = in_tx(Bind(Return(3), INC), snap=th.snapshot)
    exp.wm[0] = (5, 1)
    assert_state(M.step_tau(pre, 0), exp, [(K.WRITE, 1, 0, 0, 5, None)])


def test_isolated_retry_is_not_enabled():
    pre = state({0: in_tx(T.Isolated(T.Retry()))}, next_tx=2)
    with pytest.raises(M.Blocked):
        M.step_tau(pre, 0)


# -- transaction management ----------------------------------------------------


def test_new():
    body = T.Isolated(T.ReadOTVar(Loc(0)))
    pre = state({0: Plain(Bind(T.Atomic(body), INC))}, heap=[("a", 0)])
    exp = pre.copy()
    exp.threads[0] = InTx(1, body, Bind(Hole(), INC), body)
    exp.reads = {1: frozenset()}
    exp.next_tx = 2
    assert_state(M.begin_tx(pre, 0), exp, [(K.BEGIN, 1, 0, None, None, None)])


def test_commit_publishes_for_all_participants():
    ctx = Bind(Hole(), INC)
    pre = state({0: InTx(1, Return(1), ctx, Return(1)), 1: InTx(1, Return(()), Hole(), Return(()))},
                heap=[("a", 0), ("b", 0)], wm={0: (5, 1), 1: (6, 2)}, parent={1: 0}, next_tx=3,
                reads={1: frozenset({0})})
    exp = pre.copy()
    exp.heap = {0: 5, 1: 0}
    exp.wm = {1: (6, 2)}
    exp.versions = {0: 1, 1: 0}
    exp.threads = {0: Plain(Bind(Return(1), INC)), 1: Plain(Return(()))}
    exp.parent = {0: None, 1: None}
    exp.reads = {}
    exp.finished = (("commit", frozenset({"t0", "t1"}), False),)
    assert_state(M.try_commit(pre, 1), exp, [(K.COMMIT, 1, 0, None, None, None)])


def test_commit_waits_for_every_participant():
    pre = state({0: InTx(1, Return(1), Hole(), Return(1)), 1: InTx(1, T.Isolated(Return(2)), Hole(), Return(2))},
                next_tx=2)
    with pytest.raises(M.NotAllReady):
        M.try_commit(pre, 1)


def _abort_fixture():
    # tree 0 -> 1 (forked), foreign root 2 merged into the same transaction
    snap0 = T.seq(T.Isolated(T.WriteOTVar(Loc(0), 1)), T.Throw(Exc(9)))
    snap2 = T.Isolated(T.ReadOTVar(Loc(0)))
    threads = {
        0: InTx(1, T.Throw(Exc(9)), Bind(Hole(), INC), snap0),
        1: InTx(1, T.Isolated(T.Retry()), Hole(), T.Isolated(T.Retry())),
        2: InTx(1, Return(1), Bind(Hole(), INC), snap2),
    }
    return state(threads, heap=[("a", 0)], wm={0: (1, 1), 1: (5, 1)}, parent={1: 0},
                 next_tx=2, next_loc=2, versions={0: 0, 1: 0}, reads={1: frozenset({0})})


def test_abort1_thrower_rethrows_and_memory_leaks():
    pre = _abort_fixture()
    post = M.abort_tx(pre, 1, 0, Exc(9))
    assert post.threads[0] == Plain(Bind(T.Throw(Exc(9)), INC))
    assert post.heap == {0: 0, 1: 5}  # fresh location 1 leaks, location 0 untouched
    assert post.wm == {}
    assert [e.kind for e in post.events()[len(pre.events()):]] == [K.ABORT, K.BEGIN, K.WRITE, K.COMMIT]


def test_abort2_same_tree_thread_is_erased():
    post = M.abort_tx(_abort_fixture(), 1, 0, Exc(9))
    assert 1 not in post.threads and 1 not in post.parent


def test_abort2_non_root_thrower_erased_root_rethrows():
    pre = _abort_fixture()
    pre.threads[1] = InTx(1, T.Throw(Exc(4)), Hole(), T.Throw(Exc(4)))
    pre.threads[0] = InTx(1, T.Isolated(T.Retry()), Bind(Hole(), INC), pre.threads[0].snapshot)
    post = M.abort_tx(pre, 1, 1, Exc(4))
    assert 1 not in post.threads
    assert post.threads[0] == Plain(Bind(T.Throw(Exc(4)), INC))


def test_abort3_foreign_root_restarts_from_snapshot():
    pre = _abort_fixture()
    post = M.abort_tx(pre, 1, 0, Exc(9))
    assert post.threads[2] == Plain(Bind(T.Atomic(pre.threads[2].snapshot), INC))
    assert 2 not in post.waiting
    assert post.finished == (("abort", frozenset({"t0", "t1", "t2"}), False),)


def test_restart_on_top_level_retry():
    snap = T.Isolated(T.ReadOTVar(Loc(0)))
    pre = state({0: InTx(1, T.Retry(), Bind(Hole(), INC), snap)}, heap=[("a", 3)], wm={0: (3, 1)},
                next_tx=2, reads={1: frozenset({0})})
    exp = pre.copy()
    exp.threads[0] = Plain(Bind(T.Atomic(snap), INC))
    exp.wm = {}
    exp.reads = {}
    exp.waiting = {0: ((0, 0),)}
    exp.finished = (("retry", frozenset({"t0"}), False),)
    assert_state(M.restart_tx(pre, 1, 0), exp, [(K.ABORT, 1, 0, None, "retry", None)])


# -- auxiliary functions -------------------------------------------------------


def _aux_state():
    return state({}, heap=[("a", 1), ("b", 2)], wm={0: (10, 1), 1: (20, 2), 2: (30, 1), 3: (40, 2)})


def test_commit_fn():
    assert M.commit_fn(1, _aux_state()) == {0: 10, 1: 2, 2: 30}


def test_cleanup_fn():
    assert M.cleanup_fn(1, _aux_state()) == {1: (20, 2), 3: (40, 2)}


def test_leak_fn():
    assert M.leak_fn(1, _aux_state()) == {0: 1, 1: 2, 2: 30}
