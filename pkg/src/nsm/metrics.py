"""Per-question precision/recall/F1, corpus averages and complexity breakdowns."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .interpreter import CurriculumConstraints
from .parallel import decode_many


def prf1(predicted: Iterable, gold: Iterable) -> tuple[float, float, float]:
    """Precision, recall, F1; an empty prediction scores 0 on all three."""
    pred = set(predicted)
    gold = set(gold)
    if not pred or not gold:
        return 0.0, 0.0, 0.0
    hit = len(pred & gold)
    if hit == 0:
        return 0.0, 0.0, 0.0
    p = hit / len(pred)
    r = hit / len(gold)
    return p, r, 2 * p * r / (p + r)


def complexity_bucket(num_expressions: int) -> str:
    return "3+" if num_expressions >= 3 else str(num_expressions)


BUCKETS = ("0", "1", "2", "3+")


@dataclass
class EvalReport:
    precision: float
    recall: float
    avg_f1: float
    accuracy: float
    per_complexity: dict  # bucket -> {"fraction", "avg_f1", "count"}
    per_question: list = field(default_factory=list)  # {"id", "f1", "program", ...}

    @property
    def n(self) -> int:
        return len(self.per_question)

    def to_json(self, include_questions: bool = False) -> dict:
        d = asdict(self)
        if not include_questions:
            d.pop("per_question")
        d["n"] = self.n
        return d

    def table(self) -> str:
        lines = [
            f"questions  {self.n}",
            f"precision  {100 * self.precision:6.2f}",
            f"recall     {100 * self.recall:6.2f}",
            f"avg F1     {100 * self.avg_f1:6.2f}",
            f"accuracy   {100 * self.accuracy:6.2f}",
            "",
            "#expr  fraction  avg F1",
        ]
        for b in BUCKETS:
            c = self.per_complexity[b]
            lines.append(f"{b:>5}  {100 * c['fraction']:7.2f}%  {100 * c['avg_f1']:6.2f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, name: str = "report") -> None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        (out / f"{name}.txt").write_text(self.table())
        with open(out / f"{name}.questions.jsonl", "w", encoding="utf-8") as fh:
            for row in self.per_question:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def summarize(rows: Sequence[dict]) -> EvalReport:
    """Aggregate per-question rows holding precision, recall, f1, exact and num_expressions."""
    n = len(rows)
    buckets = defaultdict(list)
    for row in rows:
        buckets[complexity_bucket(row["num_expressions"])].append(row["f1"])
    per_complexity = {
        b: {
            "count": len(buckets[b]),
            "fraction": len(buckets[b]) / n if n else 0.0,
            "avg_f1": sum(buckets[b]) / len(buckets[b]) if buckets[b] else 0.0,
        }
        for b in BUCKETS
    }

    def mean(key):
        return sum(float(r[key]) for r in rows) / n if n else 0.0

    return EvalReport(mean("precision"), mean("recall"), mean("f1"), mean("exact"), per_complexity, list(rows))


def score_prediction(qid: str, program, predicted, gold) -> dict:
    p, r, f = prf1(predicted, gold)
    return {
        "id": qid,
        "program": str(program) if program is not None else "",
        "num_expressions": program.num_expressions if program is not None else 0,
        "precision": p,
        "recall": r,
        "f1": f,
        "exact": float(bool(predicted) and set(predicted) == set(gold)),
    }


def evaluate(model, kb, questions: Sequence, beam_size: int = 5,
             constraints: CurriculumConstraints = CurriculumConstraints(), workers: int = 1) -> EvalReport:
    """Decode the top-1 program for each question (no dropout), execute and score it."""
    beams = decode_many(model, kb, questions, beam_size, lambda q: constraints, workers)
    rows = []
    for q, beam in zip(questions, beams):
        top = beam[0] if beam else None
        rows.append(score_prediction(q.id, top.program if top else None, top.answer if top else frozenset(), q.answer))
    return summarize(rows)
