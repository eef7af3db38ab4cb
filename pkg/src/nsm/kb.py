"""Immutable triple store with the forward indexes used by Hop and code assistance.

Values are plain Python objects so they hash and compare cheaply:

* entity ids are ``str``
* numbers are ``decimal.Decimal``
* dates are ``datetime.date``

On disk (TSV and JSON-lines) numbers carry an ``n:`` prefix and dates a ``d:``
prefix; anything else is an entity id.
"""
from __future__ import annotations

import datetime
import logging
from collections import defaultdict
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Union

logger = logging.getLogger(__name__)

Value = Union[str, Decimal, datetime.date]

ENTITY = "entity"
NUMBER = "number"
DATE = "date"


class KBLoadError(ValueError):
    """Raised for a malformed triple file; carries the offending line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def value_tag(value: Value) -> str:
    if isinstance(value, str):
        return ENTITY
    if isinstance(value, Decimal):
        return NUMBER
    if isinstance(value, datetime.date):
        return DATE
    raise TypeError(f"not a KB value: {value!r}")


def parse_value(text: str) -> Value:
    """Parse the typed text form (``n:8.6``, ``d:1999-01-01`` or an entity id)."""
    if text.startswith("n:"):
        try:
            number = Decimal(text[2:])
        except InvalidOperation:
            raise ValueError(f"unparseable number {text!r}") from None
        if not number.is_finite():
            raise ValueError(f"non-finite number {text!r}")
        return number
    if text.startswith("d:"):
        try:
            return datetime.date.fromisoformat(text[2:])
        except ValueError:
            raise ValueError(f"unparseable date {text!r}") from None
    if not text:
        raise ValueError("empty entity id")
    return text


def format_value(value: Value) -> str:
    tag = value_tag(value)
    if tag == NUMBER:
        return f"n:{value}"
    if tag == DATE:
        return f"d:{value.isoformat()}"
    return value


def value_sort_key(value: Value) -> tuple:
    """Total order across tags, only for deterministic printing and serialization."""
    return (value_tag(value), format_value(value))


class KnowledgeBase:
    """A set of (subject, property, object) assertions plus forward indexes.

    Subjects are entity ids; objects may be entities, numbers or dates.
    Instances are never mutated after construction, so they can be shared
    freely between decode workers.
    """

    __slots__ = ("triples", "entities", "properties", "fwd_index", "prop_index")

    def __init__(self, triples: Iterable[tuple[str, str, Value]] = ()):
        fwd: dict[str, dict[str, set]] = defaultdict(lambda: defaultdict(set))
        unique = set()
        for s, p, o in triples:
            if not isinstance(s, str):
                raise TypeError(f"subject must be an entity id, got {s!r}")
            value_tag(o)
            unique.add((s, p, o))
            fwd[s][p].add(o)
        self.triples = frozenset(unique)
        self.fwd_index = {s: {p: frozenset(objs) for p, objs in by_p.items()} for s, by_p in fwd.items()}
        self.prop_index = {s: frozenset(by_p) for s, by_p in self.fwd_index.items()}
        entities = set(self.fwd_index)
        entities.update(o for _, _, o in unique if isinstance(o, str))
        self.entities = frozenset(entities)
        self.properties = frozenset(p for _, p, _ in unique)

    def __len__(self) -> int:
        return len(self.triples)

    def __repr__(self) -> str:
        return (
            f"KnowledgeBase({len(self.triples)} triples, {len(self.entities)} entities, "
            f"{len(self.properties)} properties)"
        )

    def objects(self, subject: Value, prop: str) -> frozenset:
        by_p = self.fwd_index.get(subject) if isinstance(subject, str) else None
        if not by_p:
            return frozenset()
        return by_p.get(prop, frozenset())

    def max_out_degree(self) -> int:
        """Largest number of distinct outgoing properties of any subject."""
        return max((len(ps) for ps in self.prop_index.values()), default=0)


def forward(kb: KnowledgeBase, source: Iterable[Value], prop: str) -> frozenset:
    """Objects reachable from any member of ``source`` along ``prop``."""
    out: set = set()
    for e in source:
        out.update(kb.objects(e, prop))
    return frozenset(out)


def reachable_properties(kb: KnowledgeBase, source: Iterable[Value]) -> frozenset:
    props: set = set()
    for e in source:
        if isinstance(e, str):
            props.update(kb.prop_index.get(e, ()))
    return frozenset(props)


def load_triples(path: str | Path) -> KnowledgeBase:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise KBLoadError(lineno, f"expected 3 tab-separated fields, got {len(fields)}")
            s, p, o = fields
            if not s or not p:
                raise KBLoadError(lineno, "empty subject or property")
            if s.startswith(("n:", "d:")):
                raise KBLoadError(lineno, f"subject must be an entity id, got {s!r}")
            try:
                rows.append((s, p, parse_value(o)))
            except ValueError as exc:
                raise KBLoadError(lineno, str(exc)) from None
    kb = KnowledgeBase(rows)
    logger.debug("loaded %r from %s", kb, path)
    return kb


def write_triples(kb: KnowledgeBase, path: str | Path) -> None:
    rows = sorted((s, p, format_value(o)) for s, p, o in kb.triples)
    with open(path, "w", encoding="utf-8") as fh:
        for s, p, o in rows:
            fh.write(f"{s}\t{p}\t{o}\n")
