import datetime
import random
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsm.datagen import random_kb
from nsm.interpreter import (
    ContractViolation,
    CurriculumConstraints,
    ExecutionError,
    Expression,
    ParseError,
    Program,
    ProgramState,
    VariableStore,
    execute_expression,
    execute_program,
    replay,
    valid_tokens,
)
from nsm.kb import KnowledgeBase

from conftest import oracle_program, random_linked, random_program, scan_forward

USA = VariableStore.linked([{"USA"}])


def test_hop_example(kb0):
    result, store = execute_expression(kb0, USA, Expression("Hop", ("R1", "city")))
    assert result == {"NYC", "SF"}
    assert store["R2"] == {"NYC", "SF"} and len(store) == 2
    assert len(USA) == 1  # copy-on-extend


def test_filter_example(kb0):
    store = VariableStore.linked([{"USA"}, {"NYC", "SF"}, {Decimal("8.6")}])
    result, _ = execute_expression(kb0, store, Expression("Filter", ("R2", "R3", "pop")))
    assert result == {"NYC"}


def test_argmax_example(kb0):
    store = VariableStore.linked([{"USA"}, {"NYC", "SF"}])
    assert execute_expression(kb0, store, Expression("ArgMax", ("R2", "pop")))[0] == {"NYC"}
    assert execute_expression(kb0, store, Expression("ArgMin", ("R2", "pop")))[0] == {"SF"}


def test_program_examples(kb0):
    assert execute_program(kb0, USA, "( Hop R1 city ) Return") == {"NYC", "SF"}
    assert execute_program(kb0, USA, "( Hop R1 city ) ( ArgMax R2 pop ) Return") == {"NYC"}
    assert execute_program(kb0, USA, "Return") == frozenset()


def test_argmax_uses_each_entity_best_value_and_keeps_ties():
    kb = KnowledgeBase([
        ("a", "h", Decimal(1)), ("a", "h", Decimal(9)),
        ("b", "h", Decimal(9)),
        ("c", "h", Decimal(5)),
        ("d", "name", "x"),
    ])
    r = VariableStore.linked([{"a", "b", "c", "d"}])
    assert execute_program(kb, r, "( ArgMax R1 h ) Return") == {"a", "b"}
    assert execute_program(kb, r, "( ArgMin R1 h ) Return") == {"a"}
    assert execute_program(kb, r, "( ArgMax R1 missing ) Return") == frozenset()


def test_argmax_dates():
    kb = KnowledgeBase([("a", "born", datetime.date(1990, 1, 1)), ("b", "born", datetime.date(1980, 5, 5))])
    r = VariableStore.linked([{"a", "b"}])
    assert execute_program(kb, r, "( ArgMin R1 born ) Return") == {"b"}


@pytest.mark.parametrize("triples", [
    [("a", "v", Decimal(1)), ("b", "v", datetime.date(2000, 1, 1))],
    [("a", "v", "x"), ("b", "v", "y")],
])
def test_argmax_incomparable(triples):
    kb = KnowledgeBase(triples)
    with pytest.raises(ExecutionError, match="incomparable types"):
        execute_program(kb, VariableStore.linked([{"a", "b"}]), "( ArgMax R1 v ) Return")


def test_unknown_variable(kb0):
    with pytest.raises(ExecutionError):
        execute_program(kb0, USA, "( Hop R5 city ) Return")


@pytest.mark.parametrize("text", [
    "( Hop R1 city Return",
    "( Hop R1 ) Return",
    "( Jump R1 city ) Return",
    "( Hop R1 city )",
    "( Filter R1 city ) Return",
    "Return ( Hop R1 city )",
    "( Hop city R1 ) Return",
])
def test_parse_errors(kb0, text):
    with pytest.raises(ParseError):
        execute_program(kb0, USA, text)


def test_program_text_round_trip():
    text = "( Hop R1 /a/b/c ) ( Filter R2 R1 /x/y/z ) Return"
    prog = Program.parse(text)
    assert str(prog) == text
    assert prog.num_expressions == 2


# --------------------------------------------------------------------------- code assistance


def test_valid_tokens_examples(kb0):
    assert valid_tokens(kb0, USA, "") == {"(", "Return"}
    assert valid_tokens(kb0, USA, "(") == {"Hop", "Filter"}  # USA has no orderable property
    assert valid_tokens(kb0, USA, "( Hop R1") == {"city", "capital"}
    assert valid_tokens(kb0, USA, "( Hop R1 city") == {")"}
    assert valid_tokens(kb0, USA, "( Hop R1 city ) ( ArgMax") == {"R2"}
    assert valid_tokens(kb0, USA, "( Hop R1 city ) ( ArgMax R2") == {"pop"}
    assert valid_tokens(kb0, USA, "( Hop R1 city ) ( Filter R2") == {"R1", "R2"}
    assert valid_tokens(kb0, USA, "( Hop R1 city ) Return") == set()


def test_all_functions_offered_when_completable(kb0):
    store = VariableStore.linked([{"USA"}, {"NYC", "SF"}])
    assert valid_tokens(kb0, store, "(") == {"Hop", "ArgMax", "ArgMin", "Filter"}


def test_constraints(kb0):
    hop_only = CurriculumConstraints(frozenset({"Hop"}), max_expressions=1)
    assert valid_tokens(kb0, USA, "(", hop_only) == {"Hop"}
    assert valid_tokens(kb0, USA, "( Hop R1 city )", hop_only) == {"Return"}
    restricted = CurriculumConstraints(allowed_properties=frozenset({"capital"}))
    assert valid_tokens(kb0, USA, "( Hop R1", restricted) == {"capital"}


def test_invalid_prefix_raises(kb0):
    with pytest.raises(ContractViolation):
        valid_tokens(kb0, USA, "( Hop R1 pop")
    with pytest.raises(ContractViolation):
        valid_tokens(kb0, USA, "( Hop R2")


def test_return_only_denotes_empty(kb0):
    state = replay(kb0, USA, ["Return"])[-1]
    assert state.done and state.result == frozenset()
    assert state.program().num_expressions == 0


def test_valid_tokens_deterministic_order():
    kb = random_kb(30, 6, 4, seed=1)
    store = VariableStore.linked([{sorted(kb.entities)[0]}])
    a = ProgramState.start(kb, store).extend("(").valid_tokens()
    b = ProgramState.start(kb, store).extend("(").valid_tokens()
    assert a == b


def rollout(rng, kb, store, constraints=CurriculumConstraints()):
    state = ProgramState.start(kb, store, constraints)
    hop_slots = []
    for _ in range(64):
        valid = state.valid_tokens()
        if state.partial[1:2] == ("Hop",) and len(state.partial) == 3:
            hop_slots.append((state.store[state.partial[2]], valid))
        state = state.extend(rng.choice(valid))
        if state.done:
            return state, hop_slots
    raise AssertionError("rollout did not terminate")


def test_rollouts_execute_and_hop_slots_nonempty():
    rng = random.Random(7)
    for trial in range(300):
        kb = random_kb(rng.randint(2, 40), rng.randint(1, 8), rng.randint(1, 5), seed=trial)
        linked = random_linked(rng, kb, rng.randint(1, 2))
        state, hop_slots = rollout(rng, kb, VariableStore.linked(linked))
        assert execute_program(kb, VariableStore.linked(linked), state.program()) == state.result
        for r, props in hop_slots:
            for p in props:
                assert scan_forward(kb.triples, r, p)


def test_oracle_agreement_small():
    rng = random.Random(11)
    for trial in range(200):
        kb = random_kb(rng.randint(1, 50), rng.randint(1, 8), rng.randint(1, 5), seed=1000 + trial)
        linked = random_linked(rng, kb, rng.randint(1, 3))
        tokens = random_program(rng, kb, linked)
        try:
            expected = oracle_program(kb.triples, linked, tokens)
        except ValueError:
            with pytest.raises(ExecutionError):
                execute_program(kb, VariableStore.linked(linked), Program(tuple(tokens)))
            continue
        assert execute_program(kb, VariableStore.linked(linked), Program(tuple(tokens))) == expected


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), max_expr=st.integers(1, 3))
def test_expression_cap_respected(seed, max_expr):
    rng = random.Random(seed)
    kb = random_kb(20, 5, 3, seed=seed)
    cons = CurriculumConstraints(max_expressions=max_expr)
    state, _ = rollout(rng, kb, VariableStore.linked(random_linked(rng, kb, 1)), cons)
    assert state.num_expressions <= max_expr
    # every variable in the final store is either linked or a result, never mutated
    assert len(state.store) == 1 + state.num_expressions
