"""Decode many questions over an immutable parameter snapshot, optionally in worker processes.

Questions are partitioned round-robin by index; results are merged back in
the input order, so the output does not depend on the worker count.
"""
from __future__ import annotations

import multiprocessing as mp
from typing import Callable, Optional, Sequence

from .interpreter import CurriculumConstraints, QuestionContext
from .search import DEFAULT_MAX_TOKENS, beam_decode

_WORKER_KB = None


def _init_worker(kb):
    global _WORKER_KB
    _WORKER_KB = kb


def _decode_partition(args):
    model, items, k, max_tokens = args
    out = []
    for idx, question, constraints in items:
        out.append((idx, beam_decode(model, _WORKER_KB, question, k, constraints, max_tokens)))
    return out


def decode_many(
    model,
    kb,
    questions: Sequence,
    k: int,
    constraints_for: Callable = lambda q: CurriculumConstraints(),
    workers: int = 1,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> list[list]:
    """Beam-decode every question; returns one beam per question, in input order."""
    items = [(i, q, constraints_for(q)) for i, q in enumerate(questions)]
    if workers <= 1 or len(items) <= 1:
        return [beam_decode(model, kb, q, k, c, max_tokens) for _, q, c in items]
    parts = [items[w::workers] for w in range(workers)]
    parts = [p for p in parts if p]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
    with ctx.Pool(len(parts), initializer=_init_worker, initargs=(kb,)) as pool:
        chunks = pool.map(_decode_partition, [(model, p, k, max_tokens) for p in parts])
    results: list[Optional[list]] = [None] * len(items)
    for chunk in chunks:
        for idx, beam in chunk:
            results[idx] = beam
    return results
