import random
from decimal import Decimal

import pytest

from nsm.kb import KnowledgeBase
from nsm.interpreter import ARGMAX, FILTER, FUNCTIONS, HOP, SIGNATURES, parse_expressions, var_index


@pytest.fixture
def kb0():
    return KnowledgeBase(
        [
            ("USA", "city", "NYC"),
            ("USA", "city", "SF"),
            ("NYC", "pop", Decimal("8.6")),
            ("SF", "pop", Decimal("0.9")),
            ("USA", "capital", "DC"),
        ]
    )


# --------------------------------------------------------------------------- brute-force oracle
# Scans the raw triple set for every query; shares no code with the indexed interpreter.


def scan_forward(triples, source, prop):
    return {o for (s, p, o) in triples if p == prop and s in source}


def scan_reachable(triples, source):
    return {p for (s, p, o) in triples if s in source}


def scan_extreme(triples, r, prop, want_max):
    """Entities of r whose own extreme value of prop equals the extreme over all of r."""
    values = {}
    for s, p, o in triples:
        if p == prop and s in r:
            values.setdefault(s, []).append(o)
    if not values:
        return set()
    kinds = {type(o) for vs in values.values() for o in vs}
    if len(kinds) != 1 or str in kinds:
        raise ValueError("incomparable")
    pick = max if want_max else min
    own = {s: pick(vs) for s, vs in values.items()}
    overall = pick(o for vs in values.values() for o in vs)
    return {s for s, v in own.items() if v == overall}


def oracle_program(triples, linked, tokens):
    """Brute-force set-semantics evaluation of a token sequence."""
    store = [set(v) for v in linked]
    result = set()
    for expr in parse_expressions(tokens):
        args = [store[var_index(a)] if kind == "var" else a for kind, a in zip(SIGNATURES[expr.function], expr.args)]
        if expr.function == HOP:
            result = scan_forward(triples, args[0], args[1])
        elif expr.function == FILTER:
            r1, r2, p = args
            result = {s for (s, p2, o) in triples if p2 == p and s in r1 and o in r2}
        else:
            result = scan_extreme(triples, args[0], args[1], expr.function == ARGMAX)
        store.append(result)
    return result


def random_program(rng: random.Random, kb, linked: list, max_expressions: int = 3) -> list:
    """A syntactically well-formed token list. Properties usually come from those reachable
    from the chosen variable (so results stay non-trivial) and sometimes from the whole KB;
    execution may still fail, e.g. ArgMax over entity-valued properties."""
    props = sorted(kb.properties) or ["p"]
    tokens = []
    store = [set(v) for v in linked]
    for _ in range(rng.randint(1, max_expressions)):
        fn = rng.choice(FUNCTIONS)
        args = []
        first = None
        for kind in SIGNATURES[fn]:
            if kind == "var":
                i = rng.randrange(len(store))
                first = store[i] if first is None else first
                args.append(f"R{i + 1}")
            else:
                near = sorted(scan_reachable(kb.triples, first))
                args.append(rng.choice(near) if near and rng.random() < 0.85 else rng.choice(props))
        tokens += ["(", fn, *args, ")"]
        try:
            store.append(oracle_program(kb.triples, linked, tokens + ["Return"]))
        except ValueError:
            break
    return tokens + ["Return"]


def random_linked(rng: random.Random, kb, n: int) -> list:
    ents = sorted(kb.entities) or ["m.isolated"]
    return [{rng.choice(ents)} for _ in range(n)]


@pytest.fixture(scope="session")
def small_bench():
    """A 50-question benchmark on 60 entities (30 train / 10 valid / 10 test)."""
    from nsm.datagen import BenchmarkSpec, generate_benchmark, link_examples

    kb, lexicon, splits = generate_benchmark(BenchmarkSpec(seed=5, entities=60, questions=50))
    return kb, lexicon, {name: link_examples(exs, lexicon) for name, exs in splits.items()}


# fast settings for exercising the training loop on small fixtures
FAST = dict(n_ml=3, stage1_iterations=2, n_rl=2, b_ml=5, b_rl=3, epochs_per_ml_round=2, hidden_dim=8, word_dim=4,
            batch_size=8, rl_batch_size=8)


# --------------------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
