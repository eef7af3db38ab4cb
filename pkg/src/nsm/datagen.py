"""Synthetic knowledge bases and question/answer benchmarks, plus entity linking.

The default benchmark mimics a small slice of Freebase: people, cities,
countries, companies, films and currencies, 20 properties with
``/domain/type/property`` ids, numbers and dates as object values, and a
few explicit inverse properties so that multi-hop questions exist.
Questions are generated from templates whose gold programs are executed to
produce the answers.
"""
from __future__ import annotations

import datetime
import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .interpreter import Program, VariableStore, execute_program
from .kb import KnowledgeBase, Value, format_value, load_triples, parse_value, value_sort_key, write_triples

logger = logging.getLogger(__name__)

ENT = "ENT"

# (property id, subject type, object type, question phrases)
SCHEMA = [
    ("/people/person/place_of_birth", "person", "city", ["birthplace", "place of birth"]),
    ("/location/city/population", "city", "number", ["population", "number of inhabitants"]),
    ("/location/country/capital", "country", "city", ["capital", "capital city"]),
    ("/location/city/containedby", "city", "country", ["country", "home country"]),
    ("/people/person/nationality", "person", "country", ["nationality", "citizenship"]),
    ("/people/person/employer", "person", "company", ["employer", "workplace"]),
    ("/people/person/date_of_birth", "person", "date", ["birth date", "date of birth"]),
    ("/people/person/height", "person", "number", ["height", "stature"]),
    ("/location/city/people_born_here", "city", "person", ["natives", "people born"]),
    ("/location/country/cities", "country", "city", ["cities", "towns"]),
    ("/location/country/area", "country", "number", ["area", "land area"]),
    ("/location/country/currency", "country", "currency", ["currency", "money"]),
    ("/business/company/headquarters", "company", "city", ["headquarters", "head office"]),
    ("/business/company/founded", "company", "date", ["founding date", "foundation date"]),
    ("/business/company/revenue", "company", "number", ["revenue", "annual revenue"]),
    ("/business/company/founder", "company", "person", ["founders", "founder"]),
    ("/location/city/mayor", "city", "person", ["mayor", "city leader"]),
    ("/film/film/director", "film", "person", ["director", "filmmaker"]),
    ("/film/film/release_date", "film", "date", ["release date", "premiere date"]),
    ("/film/film/country", "film", "country", ["production country", "country of origin"]),
]
TYPE_SHARE = {"person": 0.40, "city": 0.20, "country": 0.06, "company": 0.12, "film": 0.15, "currency": 0.07}
VALUE_TYPES = ("number", "date")

FRAMES = {
    "one_hop": ["what is the {p1} of {e1}", "tell me the {p1} of {e1}", "what are the {p1} of {e1}"],
    "two_hop": ["what is the {p2} of the {p1} of {e1}", "tell me the {p2} of the {p1} of {e1}"],
    "filter": ["which {p1} of {e1} have {p2} {e2}", "among the {p1} of {e1} which have {p2} {e2}"],
    "argmax": ["which {p1} of {e1} has the largest {p2}", "which of the {p1} of {e1} has the highest {p2}"],
    "argmin": ["which {p1} of {e1} has the smallest {p2}", "which of the {p1} of {e1} has the lowest {p2}"],
    "three": ["which {p2} of the {p1} of {e1} has the largest {p3}"],
}
GOLD = {
    "one_hop": "( Hop R1 {p1} ) Return",
    "two_hop": "( Hop R1 {p1} ) ( Hop R2 {p2} ) Return",
    "filter": "( Hop R1 {p1} ) ( Filter R3 R2 {p2} ) Return",
    "argmax": "( Hop R1 {p1} ) ( ArgMax R2 {p2} ) Return",
    "argmin": "( Hop R1 {p1} ) ( ArgMin R2 {p2} ) Return",
    "three": "( Hop R1 {p1} ) ( Hop R2 {p2} ) ( ArgMax R3 {p3} ) Return",
}
DEFAULT_MIX = {"one_hop": 0.40, "two_hop": 0.25, "filter": 0.12, "argmax": 0.08, "argmin": 0.07, "three": 0.08}

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "", "n", "r", "l", "s", "x", "th"]


class BenchmarkError(RuntimeError):
    pass


@dataclass
class BenchmarkSpec:
    seed: int = 0
    entities: int = 200
    properties: int = 20
    questions: int = 500
    train_fraction: float = 0.6
    valid_fraction: float = 0.2
    mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    max_retries: int = 200

    def __post_init__(self):
        if self.entities < 1 or self.properties < 1 or self.questions < 1:
            raise BenchmarkError("entities, properties and questions must all be >= 1")
        if self.properties > len(SCHEMA):
            raise BenchmarkError(f"at most {len(SCHEMA)} properties are available")
        if not (0 < self.train_fraction and 0 <= self.valid_fraction and self.train_fraction + self.valid_fraction <= 1):
            raise BenchmarkError("split fractions must leave room for a test split")


@dataclass
class Example:
    id: str
    question: str
    answer: frozenset
    gold_program: Optional[Program] = None
    entities: Optional[list] = None  # pre-linked (start, end, entity) spans
    template: str = ""

    def to_json(self) -> dict:
        rec = {
            "id": self.id,
            "question": self.question,
            "answer": [format_value(v) for v in sorted(self.answer, key=value_sort_key)],
        }
        if self.entities is not None:
            rec["entities"] = [list(s) for s in self.entities]
        if self.gold_program is not None:
            rec["gold_program"] = str(self.gold_program)
        if self.template:
            rec["template"] = self.template
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "Example":
        gold = rec.get("gold_program")
        ents = rec.get("entities")
        return cls(
            rec["id"],
            rec["question"],
            frozenset(parse_value(v) for v in rec["answer"]),
            Program.parse(gold) if gold else None,
            [tuple(s) for s in ents] if ents is not None else None,
            rec.get("template", ""),
        )


@dataclass(frozen=True)
class Question:
    """A linked, anonymized example ready for the decoder."""

    id: str
    words: tuple
    spans: tuple  # (start, end, entity) inclusive word ranges
    answer: frozenset
    text: str = ""
    gold_program: Optional[Program] = None

    @property
    def linked_store(self) -> VariableStore:
        return VariableStore.linked({s[2]} for s in self.spans)


class Lexicon(dict):
    """Surface form (lowercase, single-space joined) -> entity id."""

    def add(self, surface: str, entity: str) -> None:
        key = " ".join(surface.lower().split())
        if key == ENT.lower():
            raise ValueError(f"{ENT!r} is reserved")
        if key in self and self[key] != entity:
            raise ValueError(f"surface form {key!r} already maps to {self[key]}")
        self[key] = entity

    @property
    def max_words(self) -> int:
        return max((len(k.split()) for k in self), default=0)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for surface, ent in sorted(self.items()):
                fh.write(f"{surface}\t{ent}\n")

    @classmethod
    def load(cls, path) -> "Lexicon":
        lex = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line and not line.startswith("#"):
                    surface, ent = line.split("\t")
                    lex.add(surface, ent)
        return lex


def anonymize_and_link(question: str | Sequence[str], lexicon: Lexicon) -> tuple[list[str], list[tuple]]:
    """Greedy longest-match linking; each matched word becomes ``ENT``.

    Returns (words, spans) with spans as inclusive (start, end, entity) ranges
    over the original word positions.
    """
    words = question.split() if isinstance(question, str) else list(question)
    lowered = [w.lower() for w in words]
    longest = lexicon.max_words
    out = list(words)
    spans = []
    i = 0
    while i < len(words):
        match = None
        for n in range(min(longest, len(words) - i), 0, -1):
            ent = lexicon.get(" ".join(lowered[i : i + n]))
            if ent is not None:
                match = (n, ent)
                break
        if match is None:
            i += 1
            continue
        n, ent = match
        spans.append((i, i + n - 1, ent))
        for j in range(i, i + n):
            out[j] = ENT
        i += n
    return out, spans


def link_examples(examples: Iterable[Example], lexicon: Lexicon) -> list[Question]:
    out = []
    for ex in examples:
        if ex.entities is not None:
            words = ex.question.split()
            spans = [tuple(s) for s in ex.entities]
            for s, e, _ in spans:
                for j in range(s, e + 1):
                    words[j] = ENT
        else:
            words, spans = anonymize_and_link(ex.question, lexicon)
        out.append(Question(ex.id, tuple(words), tuple(spans), ex.answer, ex.question, ex.gold_program))
    return out


# --------------------------------------------------------------------------- generation


def _make_names(rng: random.Random, count: int, taken: set, words_range=(1, 2)) -> list[str]:
    names = []
    while len(names) < count:
        n = rng.randint(*words_range)
        parts = []
        for _ in range(n):
            syl = rng.randint(2, 3)
            parts.append("".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS) for _ in range(syl)))
        name = " ".join(parts)
        if name in taken or any(p in taken for p in parts):
            continue
        taken.add(name)
        taken.update(parts)
        names.append(name)
    return names


def _template_words() -> set:
    words = {ENT.lower()}
    for frames in FRAMES.values():
        for f in frames:
            words.update(w for w in f.split() if not w.startswith("{"))
    for *_, phrases in SCHEMA:
        for ph in phrases:
            words.update(ph.split())
    for pid, *_ in SCHEMA:
        words.update(w for part in pid.strip("/").split("/") for w in part.split("_"))
    return words


def _allocate_types(n: int, types: list[str]) -> dict[str, int]:
    if n < len(types):
        raise BenchmarkError(f"{n} entities cannot cover the {len(types)} entity types in use")
    share = {t: TYPE_SHARE[t] for t in types}
    total = sum(share.values())
    counts = {t: max(1, int(n * s / total)) for t, s in share.items()}
    order = sorted(types, key=lambda t: -share[t])
    i = 0
    while sum(counts.values()) < n:
        counts[order[i % len(order)]] += 1
        i += 1
    while sum(counts.values()) > n:
        t = max(counts, key=lambda t: counts[t])
        counts[t] -= 1
    return counts


def _random_date(rng: random.Random, lo: int, hi: int) -> datetime.date:
    start = datetime.date(lo, 1, 1).toordinal()
    end = datetime.date(hi, 12, 31).toordinal()
    return datetime.date.fromordinal(rng.randint(start, end))


def build_kb(spec: BenchmarkSpec, rng: random.Random) -> tuple[KnowledgeBase, Lexicon, dict]:
    schema = SCHEMA[: spec.properties]
    types = sorted({t for _, s, o, _ in schema for t in (s, o) if t not in VALUE_TYPES}, key=list(TYPE_SHARE).index)
    counts = _allocate_types(spec.entities, types)
    taken = set(_template_words())
    by_type = {}
    names = {}
    lexicon = Lexicon()
    for t in types:
        span = (2, 2) if t == "person" else (1, 2)
        ids = [f"m.{t}{i:03d}" for i in range(counts[t])]
        for eid, name in zip(ids, _make_names(rng, len(ids), taken, span)):
            names[eid] = name
            lexicon.add(name, eid)
        by_type[t] = ids

    def pick(t):
        return rng.choice(by_type[t]) if by_type.get(t) else None

    rel = defaultdict(set)  # property -> set of (s, o)
    for p in by_type.get("person", []):
        if by_type.get("city"):
            rel["/people/person/place_of_birth"].add((p, pick("city")))
        if by_type.get("country"):
            rel["/people/person/nationality"].add((p, pick("country")))
        if by_type.get("company") and rng.random() < 0.8:
            rel["/people/person/employer"].add((p, pick("company")))
        rel["/people/person/date_of_birth"].add((p, _random_date(rng, 1930, 2000)))
        rel["/people/person/height"].add((p, Decimal(rng.randint(150, 205)) / 100))
    for c in by_type.get("city", []):
        if by_type.get("country"):
            rel["/location/city/containedby"].add((c, pick("country")))
        rel["/location/city/population"].add((c, Decimal(rng.randint(10_000, 9_000_000))))
        if by_type.get("person") and rng.random() < 0.7:
            rel["/location/city/mayor"].add((c, pick("person")))
    for s, o in rel["/people/person/place_of_birth"]:
        rel["/location/city/people_born_here"].add((o, s))
    for s, o in rel["/location/city/containedby"]:
        rel["/location/country/cities"].add((o, s))
    cities_of = defaultdict(list)
    for s, o in sorted(rel["/location/city/containedby"]):
        cities_of[o].append(s)
    for k in by_type.get("country", []):
        if by_type.get("city"):
            rel["/location/country/capital"].add((k, rng.choice(cities_of[k]) if cities_of[k] else pick("city")))
        rel["/location/country/area"].add((k, Decimal(rng.randint(1_000, 5_000_000))))
        if by_type.get("currency"):
            rel["/location/country/currency"].add((k, pick("currency")))
    for co in by_type.get("company", []):
        if by_type.get("city"):
            rel["/business/company/headquarters"].add((co, pick("city")))
        rel["/business/company/founded"].add((co, _random_date(rng, 1850, 2015)))
        rel["/business/company/revenue"].add((co, Decimal(rng.randint(1, 90_000)) * 1000))
        if by_type.get("person"):
            for _ in range(rng.choice((1, 1, 2))):
                rel["/business/company/founder"].add((co, pick("person")))
    for f in by_type.get("film", []):
        if by_type.get("person"):
            rel["/film/film/director"].add((f, pick("person")))
        rel["/film/film/release_date"].add((f, _random_date(rng, 1920, 2016)))
        if by_type.get("country"):
            rel["/film/film/country"].add((f, pick("country")))
    keep = [pid for pid, *_ in schema]
    triples = [(s, p, o) for p in keep for s, o in rel.get(p, ())]
    return KnowledgeBase(triples), lexicon, names


class _QuestionFactory:
    def __init__(self, kb: KnowledgeBase, names: dict, rng: random.Random, schema):
        self.kb = kb
        self.names = names
        self.rng = rng
        self.phrases = {pid: ph for pid, _, _, ph in schema}
        self.obj_type = {pid: o for pid, _, o, _ in schema}
        self.subj_type = {pid: s for pid, s, _, _ in schema}
        self.props = sorted(self.phrases)
        self.subjects = defaultdict(list)
        for s, p, _ in sorted(kb.triples, key=lambda t: (t[1], t[0], format_value(t[2]))):
            if not self.subjects[p] or self.subjects[p][-1] != s:
                self.subjects[p].append(s)

    def _entity_props(self):
        return [p for p in self.props if self.obj_type[p] not in VALUE_TYPES]

    def _ordered_props(self, t):
        return [p for p in self.props if self.subj_type[p] == t and self.obj_type[p] in VALUE_TYPES]

    def _phrase(self, p):
        return self.rng.choice(self.phrases[p])

    def make(self, template: str):
        """One (question text, gold program text) or None when the draw was unsatisfiable."""
        rng, kb = self.rng, self.kb
        frame = rng.choice(FRAMES[template])
        if template == "one_hop":
            p1 = rng.choice(self.props)
            if not self.subjects[p1]:
                return None
            e1 = rng.choice(self.subjects[p1])
            fill = dict(p1=p1, e1=e1)
        elif template in ("two_hop", "three"):
            p1 = rng.choice(self._entity_props())
            nxt = [p for p in self.props if self.subj_type[p] == self.obj_type[p1]]
            if template == "three":
                nxt = [p for p in nxt if self.obj_type[p] not in VALUE_TYPES and self._ordered_props(self.obj_type[p])]
            if not nxt or not self.subjects[p1]:
                return None
            p2 = rng.choice(nxt)
            e1 = rng.choice(self.subjects[p1])
            fill = dict(p1=p1, p2=p2, e1=e1)
            if template == "three":
                fill["p3"] = rng.choice(self._ordered_props(self.obj_type[p2]))
        elif template == "filter":
            p1 = rng.choice(self._entity_props())
            conds = [p for p in self._entity_props() if self.subj_type[p] == self.obj_type[p1]]
            if not conds or not self.subjects[p1]:
                return None
            p2 = rng.choice(conds)
            e1 = rng.choice(self.subjects[p1])
            base = kb.objects(e1, p1)
            values = sorted({v for m in base for v in kb.objects(m, p2)}, key=value_sort_key)
            if len(base) < 2 or not values:
                return None
            fill = dict(p1=p1, p2=p2, e1=e1, e2=rng.choice(values))
        else:
            p1 = rng.choice(self._entity_props())
            ordered = self._ordered_props(self.obj_type[p1])
            if not ordered or not self.subjects[p1]:
                return None
            fill = dict(p1=p1, p2=rng.choice(ordered), e1=rng.choice(self.subjects[p1]))
        return frame, fill

    def render(self, template, frame, fill):
        words = {}
        for key, val in fill.items():
            words[key] = self.names[val] if key.startswith("e") else self._phrase(val)
        text = frame.format(**words)
        gold = GOLD[template].format(**{k: v for k, v in fill.items() if k.startswith("p")})
        # R-variable order follows the order entity mentions appear in the text
        order = sorted((k for k in fill if k.startswith("e")), key=lambda k: frame.index("{" + k + "}"))
        return text, gold, [fill[k] for k in order], order


def _acceptable(template: str, kb: KnowledgeBase, linked: list, gold: Program, answer: frozenset) -> bool:
    if not answer:
        return False
    if template == "filter":
        base = kb.objects(linked[0], gold.expressions[0].args[1])
        return len(answer) < len(base)
    if template in ("argmax", "argmin"):
        base = kb.objects(linked[0], gold.expressions[0].args[1])
        return len(base) >= 2 and len(answer) < len(base)
    if template == "three":
        return len(answer) == 1
    return True


def generate_benchmark(spec: BenchmarkSpec):
    """Returns (kb, lexicon, {"train": [...], "valid": [...], "test": [...]})."""
    rng = random.Random(spec.seed)
    kb, lexicon, names = build_kb(spec, rng)
    factory = _QuestionFactory(kb, names, rng, SCHEMA[: spec.properties])
    mix = {t: w for t, w in spec.mix.items() if w > 0}
    templates = sorted(mix)
    weights = [mix[t] for t in templates]
    examples: list[Example] = []
    seen = set()
    failures = 0
    usable = set(templates)
    while len(examples) < spec.questions:
        if not usable:
            raise BenchmarkError("no question template is satisfiable on this knowledge base")
        template = rng.choices(templates, weights)[0]
        if template not in usable:
            continue
        made = None
        for _ in range(spec.max_retries):
            draw = factory.make(template)
            if draw is None:
                continue
            text, gold_text, linked, _ = factory.render(template, *draw)
            if text in seen:
                continue
            gold = Program.parse(gold_text)
            store = VariableStore.linked({e} for e in linked)
            try:
                answer = execute_program(kb, store, gold)
            except Exception:
                continue
            if _acceptable(template, kb, linked, gold, answer):
                made = (text, gold, answer)
                break
        if made is None:
            failures += 1
            usable.discard(template)
            logger.warning("template %s unsatisfiable after %d retries", template, spec.max_retries)
            continue
        text, gold, answer = made
        seen.add(text)
        examples.append(Example("", text, answer, gold, template=template))
    rng.shuffle(examples)
    for i, ex in enumerate(examples):
        ex.id = f"q{i:05d}"
    n = len(examples)
    n_train = max(1, int(round(n * spec.train_fraction)))
    n_valid = int(round(n * spec.valid_fraction))
    splits = {
        "train": examples[:n_train],
        "valid": examples[n_train : n_train + n_valid],
        "test": examples[n_train + n_valid :],
    }
    return kb, lexicon, splits


def template_counts(examples: Iterable[Example]) -> Counter:
    return Counter(ex.template for ex in examples)


# --------------------------------------------------------------------------- I/O


def save_examples(examples: Iterable[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")


def load_examples(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            ex = Example.from_json(json.loads(line))
            if not ex.answer:
                logger.warning("%s:%d: dropping %s with an empty gold answer", path, lineno, ex.id)
                continue
            out.append(ex)
    return out


def write_benchmark(out_dir, spec: BenchmarkSpec, kb: KnowledgeBase, lexicon: Lexicon, splits: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_triples(kb, out / "kb.tsv")
    lexicon.save(out / "lexicon.tsv")
    for name, exs in splits.items():
        save_examples(exs, out / f"{name}.jsonl")
    meta = {
        "spec": asdict(spec),
        "counts": {
            "triples": len(kb),
            "entities": len(kb.entities),
            "properties": len(kb.properties),
            **{name: len(exs) for name, exs in splits.items()},
        },
    }
    (out / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


@dataclass
class Benchmark:
    kb: KnowledgeBase
    lexicon: Lexicon
    splits: dict  # split name -> list[Example]
    path: Optional[Path] = None

    def questions(self, split: str) -> list[Question]:
        return link_examples(self.splits[split], self.lexicon)


def load_benchmark(path) -> Benchmark:
    root = Path(path)
    if not (root / "kb.tsv").exists():
        raise FileNotFoundError(f"no benchmark at {root} (kb.tsv missing)")
    kb = load_triples(root / "kb.tsv")
    lexicon = Lexicon.load(root / "lexicon.tsv") if (root / "lexicon.tsv").exists() else Lexicon()
    splits = {}
    for name in ("train", "valid", "test"):
        f = root / f"{name}.jsonl"
        if f.exists():
            splits[name] = load_examples(f)
    return Benchmark(kb, lexicon, splits, root)


# --------------------------------------------------------------------------- random KBs for testing


def random_kb(n_entities: int, n_properties: int, max_out_degree: int, seed: int = 0,
              max_fanout: int = 3) -> KnowledgeBase:
    """Unstructured random KB with typed properties (entity, number, date and one mixed).

    Every subject has at most ``max_out_degree`` distinct outgoing properties.
    """
    rng = random.Random(seed)
    ents = [f"e{i}" for i in range(n_entities)]
    kinds = []
    for j in range(n_properties):
        kinds.append(("entity", "number", "entity", "date", "mixed")[j % 5] if n_properties >= 5 else ("entity", "number", "date")[j % 3])
    props = [f"/d{j % 3}/t{j}/p{j}" for j in range(n_properties)]

    def obj(kind):
        if kind == "mixed":
            kind = rng.choice(("number", "date"))
        if kind == "entity":
            return rng.choice(ents)
        if kind == "number":
            return Decimal(rng.randint(0, 20))
        return datetime.date(2000, 1, 1) + datetime.timedelta(days=rng.randint(0, 30))

    triples = []
    for e in ents:
        deg = rng.randint(0, min(max_out_degree, n_properties))
        for j in rng.sample(range(n_properties), deg):
            for _ in range(rng.randint(1, max_fanout)):
                triples.append((e, props[j], obj(kinds[j])))
    return KnowledgeBase(triples)
