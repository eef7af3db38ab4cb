"""Lisp-style program execution over a KnowledgeBase, with code assistance.

A program is a flat token sequence such as ``( Hop R1 city ) ( ArgMax R2 pop ) Return``.
Every ``( F args )`` expression is executed as soon as its closing parenthesis
is emitted and its denotation is bound to the next variable. ``R1`` is the
first variable; entity-linked variables come first, expression results after.

`ProgramState` is the incremental form used by the decoder: it knows the
exact set of next tokens that keep the program both grammatical and free of
run-time errors.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Iterable, Optional, Sequence

from .kb import DATE, ENTITY, NUMBER, KnowledgeBase, Value, forward, reachable_properties, value_tag

OPEN = "("
CLOSE = ")"
RETURN = "Return"
GO = "GO"
HOP = "Hop"
ARGMAX = "ArgMax"
ARGMIN = "ArgMin"
FILTER = "Filter"

FUNCTIONS = (HOP, ARGMAX, ARGMIN, FILTER)
# Argument kinds per function, in order: "var" or "prop".
SIGNATURES = {
    HOP: ("var", "prop"),
    ARGMAX: ("var", "prop"),
    ARGMIN: ("var", "prop"),
    FILTER: ("var", "var", "prop"),
}
KEYWORDS = frozenset((OPEN, CLOSE, RETURN, GO) + FUNCTIONS)

_VAR_RE = re.compile(r"R([1-9][0-9]*)$")


class ProgramError(Exception):
    """Base class for interpreter failures."""


class ParseError(ProgramError):
    pass


class ExecutionError(ProgramError):
    pass


class ContractViolation(ProgramError):
    """A caller broke a precondition, e.g. extended a prefix with an invalid token."""


def var_token(index: int) -> str:
    """Token for the variable at 0-based store position ``index``."""
    return f"R{index + 1}"


def var_index(token: str) -> Optional[int]:
    m = _VAR_RE.match(token)
    return int(m.group(1)) - 1 if m else None


def is_property_token(token: str) -> bool:
    return token not in KEYWORDS and var_index(token) is None


@dataclass(frozen=True)
class Expression:
    function: str
    args: tuple[str, ...]

    def tokens(self) -> tuple[str, ...]:
        return (OPEN, self.function, *self.args, CLOSE)


@dataclass(frozen=True)
class Program:
    tokens: tuple[str, ...]

    @classmethod
    def parse(cls, text: str | Sequence[str]) -> "Program":
        tokens = tuple(text.split()) if isinstance(text, str) else tuple(text)
        parse_expressions(tokens)
        return cls(tokens)

    @property
    def expressions(self) -> list[Expression]:
        return parse_expressions(self.tokens)

    @property
    def num_expressions(self) -> int:
        return sum(1 for t in self.tokens if t == OPEN)

    def __len__(self) -> int:
        return len(self.tokens)

    def __str__(self) -> str:
        return " ".join(self.tokens)


def parse_expressions(tokens: Sequence[str]) -> list[Expression]:
    """Parse ``expr* Return``; raise ParseError on anything else."""
    exprs = []
    i = 0
    n = len(tokens)
    while i < n and tokens[i] == OPEN:
        if i + 1 >= n or tokens[i + 1] not in SIGNATURES:
            raise ParseError(f"expected a function name at token {i + 1}")
        fn = tokens[i + 1]
        sig = SIGNATURES[fn]
        args = tuple(tokens[i + 2 : i + 2 + len(sig)])
        if len(args) != len(sig):
            raise ParseError(f"truncated {fn} expression at token {i}")
        for pos, (kind, arg) in enumerate(zip(sig, args)):
            ok = var_index(arg) is not None if kind == "var" else is_property_token(arg)
            if not ok:
                raise ParseError(f"{fn} argument {pos + 1} should be a {kind}, got {arg!r}")
        close = i + 2 + len(sig)
        if close >= n or tokens[close] != CLOSE:
            raise ParseError(f"expected ')' at token {close}")
        exprs.append(Expression(fn, args))
        i = close + 1
    if i != n - 1 or tokens[i] != RETURN:
        raise ParseError("program must end with a single Return")
    return exprs


@dataclass(frozen=True)
class VariableStore:
    """Append-only list of denotations; position i is bound to token R{i+1}."""

    values: tuple[frozenset, ...] = ()
    num_linked: int = 0

    @classmethod
    def linked(cls, entity_sets: Iterable[Iterable[Value]]) -> "VariableStore":
        values = tuple(frozenset(s) for s in entity_sets)
        return cls(values, len(values))

    def extend(self, denotation: Iterable[Value]) -> "VariableStore":
        return VariableStore(self.values + (frozenset(denotation),), self.num_linked)

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, token: str) -> frozenset:
        idx = var_index(token)
        if idx is None or idx >= len(self.values):
            raise ExecutionError(f"unknown variable {token!r}")
        return self.values[idx]

    @property
    def tokens(self) -> list[str]:
        return [var_token(i) for i in range(len(self.values))]


@dataclass(frozen=True)
class CurriculumConstraints:
    allowed_functions: frozenset = frozenset(FUNCTIONS)
    max_expressions: int = 3
    # Restricts Hop's property slot only; None means unrestricted.
    allowed_properties: Optional[frozenset] = None

    def __post_init__(self):
        if self.max_expressions < 0:
            raise ValueError("max_expressions must be >= 0")
        unknown = set(self.allowed_functions) - set(FUNCTIONS)
        if unknown:
            raise ValueError(f"unknown functions {sorted(unknown)}")

    def with_properties(self, props: Optional[Iterable[str]]) -> "CurriculumConstraints":
        return CurriculumConstraints(
            frozenset(self.allowed_functions),
            self.max_expressions,
            None if props is None else frozenset(props),
        )

    def key(self) -> tuple:
        props = None if self.allowed_properties is None else tuple(sorted(self.allowed_properties))
        return (tuple(f for f in FUNCTIONS if f in self.allowed_functions), self.max_expressions, props)


def _extreme(kb: KnowledgeBase, r: frozenset, prop: str, pick) -> frozenset:
    per_entity = {}
    tags = set()
    for e in r:
        vals = kb.objects(e, prop)
        if not vals:
            continue
        tags.update(value_tag(v) for v in vals)
        per_entity[e] = vals
    if not per_entity:
        return frozenset()
    if len(tags) != 1 or ENTITY in tags:
        raise ExecutionError(f"incomparable types for {prop!r}: {sorted(tags)}")
    best = {e: pick(vals) for e, vals in per_entity.items()}
    target = pick(best.values())
    return frozenset(e for e, v in best.items() if v == target)


def apply_function(kb: KnowledgeBase, function: str, args: Sequence) -> frozenset:
    """Evaluate one function on already-resolved arguments (sets and property ids)."""
    if function == HOP:
        r, p = args
        return forward(kb, r, p)
    if function == FILTER:
        r1, r2, p = args
        return frozenset(e for e in r1 if not kb.objects(e, p).isdisjoint(r2))
    if function == ARGMAX:
        return _extreme(kb, args[0], args[1], max)
    if function == ARGMIN:
        return _extreme(kb, args[0], args[1], min)
    raise ExecutionError(f"unknown function {function!r}")


def execute_expression(kb: KnowledgeBase, store: VariableStore, expr: Expression) -> tuple[frozenset, VariableStore]:
    """Run one expression; return its denotation and the store with it appended."""
    sig = SIGNATURES.get(expr.function)
    if sig is None or len(sig) != len(expr.args):
        raise ExecutionError(f"bad expression {expr}")
    resolved = [store[a] if kind == "var" else a for kind, a in zip(sig, expr.args)]
    result = apply_function(kb, expr.function, resolved)
    return result, store.extend(result)


def execute_program(kb: KnowledgeBase, linked: VariableStore, program: Program | str) -> frozenset:
    if isinstance(program, str):
        program = Program.parse(program)
    store = linked
    result: frozenset = frozenset()
    for expr in parse_expressions(program.tokens):
        result, store = execute_expression(kb, store, expr)
    return result


class QuestionContext:
    """Per-question KB view with memoized property lookups and executions.

    Denotations are frozensets, so results are cached on (function, args)
    across beam branches of the same question.
    """

    def __init__(self, kb: KnowledgeBase, constraints: CurriculumConstraints = CurriculumConstraints()):
        self.kb = kb
        self.constraints = constraints
        self._reach: dict = {}
        self._orderable: dict = {}
        self._exec: dict = {}

    def reachable(self, r: frozenset) -> frozenset:
        hit = self._reach.get(r)
        if hit is None:
            hit = self._reach[r] = reachable_properties(self.kb, r)
        return hit

    def hop_properties(self, r: frozenset) -> frozenset:
        props = self.reachable(r)
        allowed = self.constraints.allowed_properties
        return props if allowed is None else props & allowed

    def orderable_properties(self, r: frozenset) -> frozenset:
        """Properties whose values over ``r`` are all numbers or all dates."""
        hit = self._orderable.get(r)
        if hit is None:
            ok = set()
            for p in self.reachable(r):
                tags = {value_tag(v) for e in r for v in self.kb.objects(e, p)}
                if tags == {NUMBER} or tags == {DATE}:
                    ok.add(p)
            hit = self._orderable[r] = frozenset(ok)
        return hit

    def property_slot(self, function: str, r: frozenset) -> frozenset:
        if function == HOP:
            return self.hop_properties(r)
        if function in (ARGMAX, ARGMIN):
            return self.orderable_properties(r)
        return self.reachable(r)

    def execute(self, function: str, args: tuple) -> frozenset:
        key = (function, args)
        hit = self._exec.get(key)
        if hit is None:
            hit = self._exec[key] = apply_function(self.kb, function, args)
        return hit


def _sort_props(props: Iterable[str]) -> list[str]:
    return sorted(props)


class ProgramState:
    """Immutable partial program; `extend` returns a new state."""

    __slots__ = ("ctx", "store", "tokens", "partial", "num_expressions", "done")

    def __init__(self, ctx: QuestionContext, store: VariableStore, tokens=(), partial=(), num_expressions=0, done=False):
        self.ctx = ctx
        self.store = store
        self.tokens = tuple(tokens)
        self.partial = tuple(partial)
        self.num_expressions = num_expressions
        self.done = done

    @classmethod
    def start(cls, kb: KnowledgeBase, store: VariableStore, constraints: CurriculumConstraints = CurriculumConstraints()):
        return cls(QuestionContext(kb, constraints), store)

    @property
    def result(self) -> frozenset:
        """Denotation of the last computed variable (empty if none was computed)."""
        if self.num_expressions == 0:
            return frozenset()
        return self.store.values[-1]

    def _completable(self, function: str, r: frozenset) -> bool:
        return bool(self.ctx.property_slot(function, r))

    def _function_ok(self, function: str) -> bool:
        return any(self._completable(function, v) for v in self.store.values)

    def valid_tokens(self) -> list[str]:
        """Exact next-token set, in a fixed deterministic order."""
        if self.done:
            return []
        cons = self.ctx.constraints
        part = self.partial
        if not part:
            out = []
            if self.num_expressions < cons.max_expressions and any(
                self._function_ok(f) for f in FUNCTIONS if f in cons.allowed_functions
            ):
                out.append(OPEN)
            out.append(RETURN)
            return out
        if len(part) == 1:
            return [f for f in FUNCTIONS if f in cons.allowed_functions and self._function_ok(f)]
        fn = part[1]
        sig = SIGNATURES[fn]
        filled = len(part) - 2
        if filled == len(sig):
            return [CLOSE]
        if filled == 0:
            return [var_token(i) for i, v in enumerate(self.store.values) if self._completable(fn, v)]
        kind = sig[filled]
        if kind == "var":
            return self.store.tokens
        r1 = self.store[part[2]]
        return _sort_props(self.ctx.property_slot(fn, r1))

    def extend(self, token: str, check: bool = True) -> "ProgramState":
        if check and token not in self.valid_tokens():
            raise ContractViolation(f"token {token!r} is not valid after {' '.join(self.tokens)!r}")
        tokens = self.tokens + (token,)
        if token == RETURN:
            return ProgramState(self.ctx, self.store, tokens, (), self.num_expressions, True)
        if token == CLOSE:
            fn = self.partial[1]
            sig = SIGNATURES[fn]
            args = tuple(self.store[a] if kind == "var" else a for kind, a in zip(sig, self.partial[2:]))
            result = self.ctx.execute(fn, args)
            return ProgramState(self.ctx, self.store.extend(result), tokens, (), self.num_expressions + 1, False)
        return ProgramState(self.ctx, self.store, tokens, self.partial + (token,), self.num_expressions, False)

    def program(self) -> Program:
        if not self.done:
            raise ContractViolation("program is not finished")
        return Program(self.tokens)


def replay(kb_or_ctx, store: VariableStore, prefix: Sequence[str], constraints: CurriculumConstraints = CurriculumConstraints()) -> list[ProgramState]:
    """States after each prefix token (index 0 is the empty prefix). Validates every token."""
    ctx = kb_or_ctx if isinstance(kb_or_ctx, QuestionContext) else QuestionContext(kb_or_ctx, constraints)
    state = ProgramState(ctx, store)
    states = [state]
    for tok in prefix:
        state = state.extend(tok)
        states.append(state)
    return states


def valid_tokens(
    kb: KnowledgeBase,
    store: VariableStore,
    prefix: Sequence[str] | str = (),
    constraints: CurriculumConstraints = CurriculumConstraints(),
) -> set[str]:
    if isinstance(prefix, str):
        prefix = prefix.split()
    return set(replay(kb, store, prefix, constraints)[-1].valid_tokens())
