"""Beam search under code assistance, and the best-program-so-far cache."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .interpreter import CLOSE, RETURN, CurriculumConstraints, Program, ProgramState, QuestionContext, VariableStore
from .kb import KnowledgeBase
from .model import GO_ID

DEFAULT_MAX_TOKENS = 30


@dataclass(frozen=True)
class Decoded:
    program: Program
    log_prob: float
    answer: frozenset
    ids: tuple = ()

    @property
    def text(self) -> str:
        return str(self.program)


@dataclass
class _Item:
    ids: tuple
    state: ProgramState
    hidden: np.ndarray
    keys: tuple
    log_prob: float


def linked_store(spans: Sequence[tuple]) -> VariableStore:
    """One singleton entity set per linked (start, end, entity) span."""
    return VariableStore.linked({span[2]} for span in spans)


def beam_decode(
    model,
    kb: KnowledgeBase,
    question,
    k: int,
    constraints: CurriculumConstraints = CurriculumConstraints(),
    max_tokens: int = DEFAULT_MAX_TOKENS,
    ctx: Optional[QuestionContext] = None,
    trace: Optional[list] = None,
) -> list[Decoded]:
    """Top-k finished programs for ``question`` (needs ``.words`` and ``.spans``), best first.

    Ties in log-prob are broken by the token-id sequence so results are
    reproducible. ``trace``, when given, collects (step, prefix, valid tokens)
    for every expanded beam item.
    """
    if k < 1:
        raise ValueError("beam size must be >= 1")
    ctx = ctx or QuestionContext(kb, constraints)
    enc, init, memory = model.encode(question.words, question.spans)
    store = linked_store(question.spans)
    static = model.static_embeddings()
    n_static = model.n_static
    alive = [_Item((), ProgramState(ctx, store), init.hidden, memory.keys, 0.0)]
    last = [GO_ID]
    pool: list[tuple] = []
    attend = enc.attend[None, :, :]
    for step in range(max_tokens):
        if not alive:
            break
        U = np.stack([it.hidden for it in alive])
        C = np.stack([static[t] if t < n_static else it.keys[t - n_static] for t, it in zip(last, alive)])
        U_new, O = model.step_batch(U, C, attend)
        static_scores = O @ static.T
        cands = []
        for i, it in enumerate(alive):
            valid = it.state.valid_tokens()
            if trace is not None:
                trace.append((step, it.state.tokens, tuple(valid)))
            ids = [model.token_id(t) for t in valid]
            logits = np.empty(len(ids))
            for j, tid in enumerate(ids):
                logits[j] = static_scores[i, tid] if tid < n_static else it.keys[tid - n_static] @ O[i]
            logits -= logits.max()
            lp = logits - np.log(np.exp(logits).sum())
            order = sorted(range(len(ids)), key=lambda j: (-lp[j], ids[j]))[:k]
            for j in order:
                cands.append((-(it.log_prob + lp[j]), it.ids + (ids[j],), i, valid[j]))
        cands.sort(key=lambda c: (c[0], c[1]))
        new_alive, new_last = [], []
        for neg, ids, i, tok in cands[:k]:
            it = alive[i]
            state = it.state.extend(tok, check=False)
            keys = it.keys + (U_new[i],) if tok == CLOSE else it.keys
            if tok == RETURN:
                pool.append((neg, ids, state))
            elif len(ids) < max_tokens:
                new_alive.append(_Item(ids, state, U_new[i], keys, -neg))
                new_last.append(ids[-1])
        alive, last = new_alive, new_last
        if len(pool) >= k and alive:
            pool.sort(key=lambda c: (c[0], c[1]))
            del pool[k:]
            # log-probs only decrease, so no alive item can still enter the top k
            if max(it.log_prob for it in alive) < -pool[-1][0]:
                break
    pool.sort(key=lambda c: (c[0], c[1]))
    out, seen = [], set()
    for neg, ids, state in pool:
        prog = state.program()
        text = str(prog)
        if text in seen:
            continue
        seen.add(text)
        out.append(Decoded(prog, -neg, state.result, ids))
        if len(out) == k:
            break
    return out


# --------------------------------------------------------------------------- pseudo-gold cache


@dataclass(frozen=True)
class CacheEntry:
    program: Program
    reward: float
    length: int


class PseudoGoldCache(dict):
    """question id -> CacheEntry holding the best (highest reward, then shortest) program so far."""

    def coverage(self, n_questions: int) -> float:
        return len(self) / n_questions if n_questions else 0.0

    def to_json(self) -> dict:
        return {
            qid: {"program": str(e.program), "reward": e.reward, "length": e.length}
            for qid, e in sorted(self.items())
        }

    @classmethod
    def from_json(cls, data: dict) -> "PseudoGoldCache":
        cache = cls()
        for qid, e in data.items():
            cache[qid] = CacheEntry(Program.parse(e["program"]), float(e["reward"]), int(e["length"]))
        return cache


def update_pseudo_gold(
    cache: PseudoGoldCache,
    question_id: str,
    candidates: Iterable[Program],
    reward_fn: Callable[[Program], float],
) -> bool:
    """Offer candidates to the cache; returns True if the stored entry changed."""
    changed = False
    for prog in candidates:
        r = float(reward_fn(prog))
        if r <= 0.0:
            continue
        cur = cache.get(question_id)
        if cur is None or r > cur.reward or (r == cur.reward and len(prog) < cur.length):
            cache[question_id] = CacheEntry(prog, r, len(prog))
            changed = True
    return changed


def beams_to_jsonl(rows: Iterable[tuple[str, Sequence[Decoded], Sequence[float]]], path) -> None:
    """Write {question_id, programs: [{text, log_prob, reward}]} per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid, beam, rewards in rows:
            rec = {
                "question_id": qid,
                "programs": [
                    {"text": d.text, "log_prob": d.log_prob, "reward": r} for d, r in zip(beam, rewards)
                ],
            }
            fh.write(json.dumps(rec) + "\n")
