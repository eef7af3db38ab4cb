"""Training: iterative maximum likelihood, augmented REINFORCE and the curriculum.

`run_iml_reinforce` is the full procedure: random init, iterative ML rounds
(optionally in two curriculum stages) that fill the pseudo-gold cache, then a
fresh random init and REINFORCE iterations over beams mixed with the cached
programs.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .interpreter import (
    ARGMAX,
    ARGMIN,
    FILTER,
    FUNCTIONS,
    HOP,
    ContractViolation,
    CurriculumConstraints,
    Program,
    QuestionContext,
    is_property_token,
    replay,
)
from .metrics import evaluate, prf1
from .model import TRAINABLE, Model, ModelConfig, load_checkpoint
from .parallel import decode_many
from .search import DEFAULT_MAX_TOKENS, CacheEntry, PseudoGoldCache, update_pseudo_gold

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 0.1
    n_ml: int = 12
    n_rl: int = 30
    b_ml: int = 50
    b_rl: int = 5
    epochs_per_ml_round: int = 20
    g0: float = 0.001
    beta: float = 0.5
    m: float = 1000.0
    t_s: int = 0
    fixed_lr_iterations: int = 200
    dropout: float = 0.5
    word_dim: int = 16
    hidden_dim: int = 50
    seed: int = 0
    batch_size: int = 32
    rl_batch_size: int = 32
    curriculum: bool = True
    stage1_iterations: int = 10
    stage2_superlatives: bool = True
    max_expressions: int = 3
    max_tokens: int = DEFAULT_MAX_TOKENS
    eval_beam: int = 5
    grad_clip: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.b_ml < 1 or self.b_rl < 1:
            raise ValueError("beam sizes must be >= 1")
        if self.g0 <= 0:
            raise ValueError("g0 must be > 0")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must be in (0, 1]")
        if self.batch_size < 1 or self.rl_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.n_ml < 0 or self.n_rl < 0:
            raise ValueError("iteration counts must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# Overrides on top of the TrainConfig defaults (which follow the original large-scale setup).
# "desk" is tuned for the ~500-question synthetic benchmark on one CPU: a small model needs less
# dropout and a larger step size to fit in a few hundred updates, a narrower ML beam keeps the
# unconstrained search hard enough for the curriculum to matter, and small RL batches give the
# freshly initialized policy enough updates.
PRESETS = {
    "original": {},
    "desk": {"dropout": 0.2, "g0": 0.003, "b_ml": 10, "rl_batch_size": 8, "n_rl": 100},
}


# --------------------------------------------------------------------------- small pieces


def reward(predicted: Iterable, gold: Iterable) -> float:
    """F1 between the executed answer and the gold answer (0 for an empty prediction)."""
    return prf1(predicted, gold)[2]


def lr_at(t: int, config: TrainConfig, t_s: Optional[int] = None) -> float:
    """g0 * beta ** (max(0, t - t_s) / m)."""
    if t < 0:
        raise ValueError("step must be >= 0")
    start = config.t_s if t_s is None else t_s
    return config.g0 * config.beta ** (max(0, t - start) / config.m)


class Adam:
    """Adam with the usual default moments, over the trainable parameter blocks."""

    def __init__(self, params: dict, names=TRAINABLE, b1=0.9, b2=0.999, eps=1e-8):
        self.names = tuple(names)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {k: np.zeros_like(params[k]) for k in self.names}
        self.v = {k: np.zeros_like(params[k]) for k in self.names}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """Minimizing update: params -= lr * mhat / (sqrt(vhat) + eps)."""
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in self.names:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict, t: int) -> None:
        for k in self.names:
            self.m[k] = arrays[f"adam_m/{k}"].copy()
            self.v[k] = arrays[f"adam_v/{k}"].copy()
        self.t = t


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class WeightedProgram:
    program: Program
    weight: float
    reward: float


def augmented_weights(probs: Sequence[float], best_index: Optional[int], alpha: float) -> np.ndarray:
    """(1 - alpha) * p_j / sum(p), then alpha added to the pseudo-gold entry.

    With ``best_index`` None (no pseudo-gold injected) the weights are the plain
    beam-normalized probabilities.
    """
    p = np.asarray(probs, dtype=np.float64)
    total = p.sum()
    if best_index is None:
        return p / total if total > 0 else np.full(len(p), 1.0 / len(p))
    w = (1.0 - alpha) * (p / total if total > 0 else np.full(len(p), 1.0 / len(p)))
    w[best_index] += alpha
    return w


def baseline(weights: Sequence[float], rewards: Sequence[float]) -> float:
    return float(np.dot(weights, rewards))


# --------------------------------------------------------------------------- curriculum


def curriculum_stages(config: TrainConfig) -> list[tuple[CurriculumConstraints, int]]:
    """[(constraints, iterations)] for iterative ML.

    Stage 2's per-question Hop restriction is applied at run time from the
    stage-1 cache (see `Trainer.constraints_for`).
    """
    full = frozenset(FUNCTIONS)
    if not config.curriculum:
        return [(CurriculumConstraints(full, config.max_expressions), config.n_ml)]
    n1 = min(config.stage1_iterations, config.n_ml)
    stage2_fns = {HOP, FILTER} | ({ARGMAX, ARGMIN} if config.stage2_superlatives else set())
    stages = [(CurriculumConstraints(frozenset({HOP}), 2), n1)]
    if config.n_ml > n1:
        stages.append((CurriculumConstraints(frozenset(stage2_fns), config.max_expressions), config.n_ml - n1))
    return stages


def program_properties(program: Program) -> frozenset:
    return frozenset(t for t in program.tokens if is_property_token(t))


# --------------------------------------------------------------------------- trainer


class Trainer:
    """Owns the mutable training state: parameters, optimizer, cache, rngs and the log."""

    def __init__(self, model: Model, kb, train: Sequence, valid: Sequence = (), config: TrainConfig = TrainConfig(),
                 workers: int = 1):
        self.model = model
        self.kb = kb
        self.train = list(train)
        self.valid = list(valid)
        self.config = config
        self.workers = workers
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        self.init_rng = np.random.default_rng(seeds[0])
        self.shuffle_rng = np.random.default_rng(seeds[1])
        self.dropout_rng = np.random.default_rng(seeds[2])
        self.optimizer = Adam(model.params)
        self.cache = PseudoGoldCache()
        self.stage1_props: dict = {}
        self.log: list = []
        self.step = 0
        self.t_s: Optional[int] = None
        self.default_constraints = CurriculumConstraints(frozenset(FUNCTIONS), config.max_expressions)
        self._tf_cache: dict = {}
        self._ctx: dict = {}

    # ---- helpers

    def constraints_for(self, q, base: CurriculumConstraints, restrict: bool) -> CurriculumConstraints:
        if restrict and q.id in self.stage1_props:
            return base.with_properties(self.stage1_props[q.id])
        return base

    def teacher_forced(self, q, program: Program, constraints: CurriculumConstraints):
        key = (q.id, program.tokens, constraints.key())
        tf = self._tf_cache.get(key)
        if tf is None:
            ctx_key = (q.id, constraints.key())
            ctx = self._ctx.get(ctx_key)
            if ctx is None:
                ctx = self._ctx[ctx_key] = QuestionContext(self.kb, constraints)
            states = replay(ctx, q.linked_store, program.tokens)
            tf = self._tf_cache[key] = self.model.teacher_forced(q.words, q.spans, program, states)
        return tf

    def reinitialize(self) -> None:
        self.model.reinitialize(self.init_rng)
        self.optimizer = Adam(self.model.params)

    def apply(self, grads: dict, scale: float, lr: float) -> None:
        for g in grads.values():
            g *= scale
        clip_gradients(grads, self.config.grad_clip)
        self.optimizer.step(self.model.params, grads, lr)
        self.step += 1

    def current_lr(self) -> float:
        if self.t_s is None:
            return self.config.g0
        return lr_at(self.step, self.config, self.t_s)

    def offer(self, q, beam) -> None:
        rewards = {d.program: reward(d.answer, q.answer) for d in beam}
        update_pseudo_gold(self.cache, q.id, [d.program for d in beam], rewards.__getitem__)

    def _batches(self, items: list, bs: Optional[int] = None) -> list:
        order = self.shuffle_rng.permutation(len(items))
        bs = bs or self.config.batch_size
        return [[items[i] for i in order[s : s + bs]] for s in range(0, len(items), bs)]

    # ---- iterative ML

    def ml_round(self, constraints: CurriculumConstraints, restrict: bool = False) -> dict:
        """Decode with beam b_ml, update the cache, then ML epochs on the cached programs."""
        cfg = self.config
        cons = {q.id: self.constraints_for(q, constraints, restrict) for q in self.train}
        beams = decode_many(self.model, self.kb, self.train, cfg.b_ml, lambda q: cons[q.id], self.workers, cfg.max_tokens)
        top_f1 = []
        for q, beam in zip(self.train, beams):
            self.offer(q, beam)
            top_f1.append(reward(beam[0].answer, q.answer) if beam else 0.0)
        data = []
        for q in self.train:
            entry = self.cache.get(q.id)
            if entry is None:
                continue
            try:
                # the curriculum narrows the search only; the likelihood is normalized over the
                # unrestricted valid set so the learned policy transfers to unconstrained decoding
                data.append(self.teacher_forced(q, entry.program, self.default_constraints))
            except ContractViolation as exc:
                logger.debug("skipping %s: cached program not valid under current constraints (%s)", q.id, exc)
        losses = []
        if data:
            for _ in range(cfg.epochs_per_ml_round):
                losses.append(self.ml_epoch(data))
        return {"train_f1": float(np.mean(top_f1)) if top_f1 else 0.0, "ml_loss": losses[-1] if losses else None,
                "ml_examples": len(data)}

    def ml_epoch(self, data: list) -> float:
        """One pass of maximum likelihood over teacher-forced programs; returns the mean loss."""
        total = 0.0
        for batch in self._batches(data):
            loss, _, grads = self.model.loss_and_grads([(tf, 1.0) for tf in batch], True, self.dropout_rng)
            self.apply(grads, 1.0 / len(batch), self.config.g0)
            total += loss
        return total / len(data)

    # ---- REINFORCE

    def reinforce_batch_gradient(self, batch: Sequence, alpha: float):
        """Decode, update the cache, and return (grads, n_contributing, top-1 F1s, weight checks)."""
        cfg = self.config
        cons = self.default_constraints
        beams = decode_many(self.model, self.kb, batch, cfg.b_rl, lambda q: cons, self.workers, cfg.max_tokens)
        items = []
        top_f1 = []
        checks = []
        for q, beam in zip(batch, beams):
            self.offer(q, beam)
            top_f1.append(reward(beam[0].answer, q.answer) if beam else 0.0)
            wp = self.weighted_programs(q, beam, alpha)
            if not wp:
                continue
            w = np.array([x.weight for x in wp])
            r = np.array([x.reward for x in wp])
            b = baseline(w, r)
            adv = r - b
            checks.append((float(w.sum()), float(np.dot(w, adv))))
            for x, a in zip(wp, adv):
                coef = x.weight * a
                if coef != 0.0:
                    items.append((self.teacher_forced(q, x.program, cons), coef))
        grads = None
        if items:
            _, _, grads = self.model.loss_and_grads(items, True, self.dropout_rng)
        return grads, len(batch), top_f1, checks

    def weighted_programs(self, q, beam, alpha: float) -> list[WeightedProgram]:
        progs = [d.program for d in beam]
        probs = [math.exp(d.log_prob) for d in beam]
        rewards = [reward(d.answer, q.answer) for d in beam]
        best = self.cache.get(q.id)
        best_index = None
        if alpha > 0 and best is not None:
            if best.program in progs:
                best_index = progs.index(best.program)
            else:
                tf = self.teacher_forced(q, best.program, self.default_constraints)
                _, logps, _ = self.model.loss_and_grads([(tf, 1.0)], backward=False)
                progs.append(best.program)
                probs.append(math.exp(float(logps[0])))
                rewards.append(best.reward)
                best_index = len(progs) - 1
        if not progs:
            return []
        w = augmented_weights(probs, best_index, alpha)
        return [WeightedProgram(p, float(wi), float(r)) for p, wi, r in zip(progs, w, rewards)]

    def rl_iteration(self) -> dict:
        cfg = self.config
        f1s = []
        sums = []
        for batch in self._batches(self.train, cfg.rl_batch_size):
            grads, n, top, checks = self.reinforce_batch_gradient(batch, cfg.alpha)
            f1s.extend(top)
            sums.extend(checks)
            if grads is not None:
                self.apply(grads, 1.0 / n, self.current_lr())
        return {"train_f1": float(np.mean(f1s)) if f1s else 0.0,
                "max_weight_error": max((abs(s - 1.0) for s, _ in sums), default=0.0),
                "max_advantage_sum": max((abs(a) for _, a in sums), default=0.0)}

    # ---- logging / evaluation

    def valid_f1(self) -> Optional[float]:
        if not self.valid:
            return None
        return evaluate(self.model, self.kb, self.valid, self.config.eval_beam, self.default_constraints,
                        self.workers).avg_f1

    def record(self, iteration: int, phase: str, stats: dict, lr: float) -> dict:
        entry = {
            "iteration": iteration,
            "phase": phase,
            "train_f1": stats.pop("train_f1"),
            "valid_f1": self.valid_f1(),
            "cache_coverage": self.cache.coverage(len(self.train)),
            "lr": lr,
            "step": self.step,
            **stats,
            "cache": {qid: [e.reward, e.length] for qid, e in sorted(self.cache.items())},
        }
        self.log.append(entry)
        logger.info(
            "%s it %d: train_f1=%.3f valid_f1=%s coverage=%.2f",
            phase, iteration, entry["train_f1"],
            "n/a" if entry["valid_f1"] is None else f"{entry['valid_f1']:.3f}", entry["cache_coverage"],
        )
        return entry

    # ---- schedule

    def schedule(self) -> list[dict]:
        """Flat list of iterations; each is resumable on its own."""
        plan = []
        it = 0
        for s, (cons, n) in enumerate(curriculum_stages(self.config)):
            for _ in range(n):
                plan.append({"phase": "ml", "stage": s, "iteration": it})
                it += 1
        for j in range(self.config.n_rl):
            plan.append({"phase": "rl", "stage": None, "iteration": it, "rl_index": j})
            it += 1
        return plan

    def run_step(self, item: dict) -> dict:
        cfg = self.config
        if item["phase"] == "ml":
            stages = curriculum_stages(cfg)
            cons, _ = stages[item["stage"]]
            restrict = cfg.curriculum and item["stage"] == 1
            if restrict and not self.stage1_props:
                self.stage1_props = {qid: sorted(program_properties(e.program)) for qid, e in self.cache.items()}
            stats = self.ml_round(cons, restrict)
            stats["stage"] = item["stage"]
            return self.record(item["iteration"], "ml", stats, cfg.g0)
        if item["rl_index"] == 0:
            self.reinitialize()
        lr = self.current_lr()
        stats = self.rl_iteration()
        if item["rl_index"] + 1 == cfg.fixed_lr_iterations:
            self.t_s = self.step
        return self.record(item["iteration"], "rl", stats, lr)

    # ---- checkpoints

    def save(self, path, done: int) -> None:
        extra = {
            "train_config": asdict(self.config),
            "done": done,
            "step": self.step,
            "t_s": self.t_s,
            "adam_t": self.optimizer.t,
            "cache": self.cache.to_json(),
            "stage1_props": self.stage1_props,
            "rngs": [r.bit_generator.state for r in (self.init_rng, self.shuffle_rng, self.dropout_rng)],
        }
        self.model.save(path, extra)
        # optimizer moments go in a sibling file to keep the model checkpoint loadable on its own
        np.savez(str(path) + ".adam.npz", **self.optimizer.state())

    def restore(self, path) -> int:
        model, extra, _ = load_checkpoint(path)
        self.model.params = model.params
        self.optimizer = Adam(self.model.params)
        with np.load(str(path) + ".adam.npz") as data:
            self.optimizer.load_state({k: data[k] for k in data.files}, extra["adam_t"])
        self.step = extra["step"]
        self.t_s = extra["t_s"]
        self.cache = PseudoGoldCache.from_json(extra["cache"])
        self.stage1_props = extra["stage1_props"]
        for r, st in zip((self.init_rng, self.shuffle_rng, self.dropout_rng), extra["rngs"]):
            r.bit_generator.state = st
        self._tf_cache.clear()
        return extra["done"]


def build_model(config: TrainConfig, questions: Sequence, properties: Iterable[str], embeddings=None) -> Model:
    words = [w for q in questions for w in q.words]
    mc = ModelConfig(config.word_dim, config.hidden_dim, config.dropout, config.seed)
    seeds = np.random.SeedSequence([config.seed, 1]).spawn(1)
    return Model(mc, words, sorted(properties), embeddings, np.random.default_rng(seeds[0]))


def run_iml_reinforce(
    kb,
    train: Sequence,
    valid: Sequence = (),
    config: TrainConfig = TrainConfig(),
    workers: int = 1,
    checkpoint_dir=None,
    log_path=None,
    resume: bool = False,
    model: Optional[Model] = None,
    on_phase_end: Optional[Callable] = None,
):
    """Full training run. Returns (model, cache, log).

    With ``checkpoint_dir`` a checkpoint is written after every iteration
    (``latest.npz``) and at the end of each phase (``ml.npz``, ``final.npz``);
    ``resume`` continues from ``latest.npz``.
    """
    model = model or build_model(config, list(train) + list(valid), kb.properties)
    trainer = Trainer(model, kb, train, valid, config, workers)
    plan = trainer.schedule()
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt:
        ckpt.mkdir(parents=True, exist_ok=True)
    start = 0
    if resume and ckpt and (ckpt / "latest.npz").exists():
        start = trainer.restore(ckpt / "latest.npz")
        if log_path and Path(log_path).exists():
            trainer.log = [json.loads(l) for l in Path(log_path).read_text().splitlines() if l.strip()][:start]
        logger.info("resuming at iteration %d of %d", start, len(plan))
    elif log_path:
        Path(log_path).write_text("")
    for i in range(start, len(plan)):
        item = plan[i]
        entry = trainer.run_step(item)
        if log_path:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        last_of_phase = i + 1 == len(plan) or plan[i + 1]["phase"] != item["phase"]
        if ckpt:
            trainer.save(ckpt / "latest.npz", i + 1)
            if last_of_phase:
                trainer.save(ckpt / f"{item['phase']}.npz", i + 1)
        if last_of_phase and on_phase_end:
            on_phase_end(item["phase"], trainer)
    if ckpt:
        trainer.save(ckpt / "final.npz", len(plan))
    return trainer.model, trainer.cache, trainer.log
