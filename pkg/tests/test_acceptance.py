"""Acceptance suite: one test per criterion, each recording a pass/fail line that is
printed in the pytest terminal summary. Training runs are shared through session fixtures,
so the whole file takes roughly a quarter of an hour on one CPU."""
import random
import time

import numpy as np
import pytest

from nsm.datagen import BenchmarkSpec, generate_benchmark, link_examples, random_kb
from nsm.interpreter import ExecutionError, Program, ProgramState, VariableStore, execute_program
from nsm.learning import PRESETS, TrainConfig, augmented_weights, baseline, lr_at, run_iml_reinforce
from nsm.metrics import evaluate
from nsm.model import load_checkpoint

from conftest import FAST, oracle_program, random_linked, random_program, record_criterion
from test_model import block_errors, forced, toy_model

SEED = 0


@pytest.fixture(scope="module")
def bench():
    kb, lexicon, splits = generate_benchmark(BenchmarkSpec(seed=SEED))
    return kb, {name: link_examples(exs, lexicon) for name, exs in splits.items()}


def desk(**over) -> TrainConfig:
    return TrainConfig(**{**PRESETS["desk"], "seed": SEED, **over})


@pytest.fixture(scope="module")
def augmented(bench, tmp_path_factory):
    kb, q = bench
    ck = tmp_path_factory.mktemp("aug")
    start = time.time()
    model, cache, log = run_iml_reinforce(kb, q["train"], q["valid"], desk(), checkpoint_dir=ck)
    return {"model": model, "log": log, "seconds": time.time() - start, "ckpt": ck}


# --------------------------------------------------------------------------- 1-3: interpreter


def test_c1_interpreter_matches_oracle():
    rng = random.Random(2024)
    start = time.time()
    agree = total = 0
    while total < 1000:
        kb = random_kb(rng.randint(1, 50), rng.randint(1, 8), rng.randint(1, 5), seed=rng.randrange(10**6))
        linked = random_linked(rng, kb, rng.randint(1, 3))
        tokens = random_program(rng, kb, linked)
        store = VariableStore.linked(linked)
        try:
            expected = oracle_program(kb.triples, linked, tokens)
        except ValueError:
            expected = ExecutionError
        try:
            got = execute_program(kb, store, Program(tuple(tokens)))
        except ExecutionError:
            got = ExecutionError
        total += 1
        agree += got == expected
    elapsed = time.time() - start
    ok = agree == total and elapsed < 30
    record_criterion(1, ok, f"oracle agreement {agree}/{total} in {elapsed:.1f}s (need 100%, < 30s)")
    assert ok


def test_c2_rollouts_always_execute():
    rng = random.Random(99)
    failures = 0
    kbs = [random_kb(rng.randint(2, 50), rng.randint(1, 10), rng.randint(1, 5), seed=i) for i in range(200)]
    for trial in range(10_000):
        kb = kbs[trial % len(kbs)]
        linked = random_linked(rng, kb, rng.randint(1, 3))
        store = VariableStore.linked(linked)
        state = ProgramState.start(kb, store)
        while not state.done:
            state = state.extend(rng.choice(state.valid_tokens()))
        try:
            if execute_program(kb, store, state.program()) != state.result:
                failures += 1
        except ExecutionError:
            failures += 1
    record_criterion(2, failures == 0, f"{failures} failures in 10000 uniform rollouts (need 0)")
    assert failures == 0


def test_c3_hop_slot_pruning(bench):
    kb, q = bench
    rng = random.Random(3)
    sizes = []
    questions = q["train"]
    for i in range(2000):
        question = questions[i % len(questions)]
        state = ProgramState.start(kb, question.linked_store)
        while not state.done:
            valid = state.valid_tokens()
            if len(state.partial) == 3 and state.partial[1] == "Hop":
                sizes.append(len(valid))
            state = state.extend(rng.choice(valid))
    mean = float(np.mean(sizes))
    vocab = len(kb.properties)
    ok = mean <= 5 and vocab == 20 and kb.max_out_degree() <= 5
    record_criterion(3, ok, f"mean Hop-slot valid set {mean:.2f} over {len(sizes)} slots vs vocabulary {vocab} "
                            f"(max out-degree {kb.max_out_degree()}; need <= 5)")
    assert ok


# --------------------------------------------------------------------------- 4-6: learning arithmetic


def test_c4_gradient_check():
    start = time.time()
    model = toy_model()
    batch = [(forced(model, "( Hop R1 /loc/country/city ) ( ArgMax R2 /loc/city/pop ) Return"), 0.7),
             (forced(model, "( Hop R1 /loc/country/capital ) Return"), -0.3)]
    errs = block_errors(model, batch, train_mode=False)
    elapsed = time.time() - start
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and elapsed < 10 and all(v.dtype == np.float64 for v in model.params.values())
    record_criterion(4, ok, f"max block relative error {errs[worst]:.2e} ({worst}) over {len(errs)} blocks "
                            f"in {elapsed:.1f}s (need < 1e-4, < 10s)")
    assert ok


def test_c5_algorithm_arithmetic(augmented):
    w = augmented_weights([0.6, 0.2], 0, 0.1)
    b = baseline(w, [1.0, 0.0])
    worked = max(abs(w[0] - 0.775), abs(w[1] - 0.225), abs(b - 0.775))
    rl = [e for e in augmented["log"] if e["phase"] == "rl"]
    weight_err = max(e["max_weight_error"] for e in rl)
    adv_sum = max(e["max_advantage_sum"] for e in rl)
    ok = worked <= 1e-12 and weight_err <= 1e-9 and adv_sum <= 1e-12
    record_criterion(5, ok, f"worked example error {worked:.1e}; over {len(rl)} RL iterations max |sum p-1| "
                            f"{weight_err:.1e}, max |sum p(R-B)| {adv_sum:.1e}")
    assert ok


def test_c6_learning_rate_schedule():
    cfg = TrainConfig(g0=0.001, beta=0.5, m=1000, t_s=500)
    got = [lr_at(500 + d, cfg) for d in (0, 1000, 2000)]
    ok = got == [0.001, 0.0005, 0.00025]
    record_criterion(6, ok, f"lr at t_s, t_s+1000, t_s+2000 = {got}")
    assert ok


# --------------------------------------------------------------------------- 7-9, 11: training runs


def test_c7_training_method_ordering(bench, augmented):
    kb, q = bench
    aug = evaluate(augmented["model"], kb, q["valid"], 5).avg_f1
    iml_model = load_checkpoint(augmented["ckpt"] / "ml.npz")[0]
    iml = evaluate(iml_model, kb, q["valid"], 5).avg_f1
    plain_cfg = desk(alpha=0.0, n_ml=0, n_rl=PRESETS["desk"]["n_rl"] + TrainConfig().n_ml)
    plain_model, _, _ = run_iml_reinforce(kb, q["train"], (), plain_cfg)
    plain = evaluate(plain_model, kb, q["valid"], 5).avg_f1
    secs = augmented["seconds"]
    ok = aug >= iml and aug >= plain + 0.05 and secs < 15 * 60
    record_criterion(7, ok, f"valid F1 augmented {100 * aug:.1f} vs IML-only {100 * iml:.1f} vs plain REINFORCE "
                            f"{100 * plain:.1f}; augmented run {secs:.0f}s")
    assert ok


def test_c8_curriculum_gain(bench):
    kb, q = bench
    multi = np.mean([ex.gold_program.num_expressions >= 2 for ex in q["train"] + q["valid"] + q["test"]])
    scores = {}
    for flag in (True, False):
        _, cache, _ = run_iml_reinforce(kb, q["train"], (), desk(n_rl=0, curriculum=flag))
        scores[flag] = sum(e.reward for e in cache.values()) / len(q["train"])
    ok = scores[True] >= scores[False] and multi >= 0.30
    record_criterion(8, ok, f"pseudo-gold train F1 with curriculum {100 * scores[True]:.1f} vs without "
                            f"{100 * scores[False]:.1f} ({100 * multi:.0f}% multi-expression questions)")
    assert ok


def test_c9_cache_monotone(augmented):
    log = augmented["log"]
    violations = 0
    prev = {}
    for entry in log:
        for qid, (r, n) in entry["cache"].items():
            if qid in prev:
                pr, pn = prev[qid]
                violations += r < pr or (r == pr and n > pn)
        violations += len(set(prev) - set(entry["cache"]))  # entries never disappear
        prev = entry["cache"]
    record_criterion(9, violations == 0, f"{violations} violations over {len(log)} logged iterations")
    assert violations == 0


def test_c11_compositionality(bench, augmented):
    kb, q = bench
    rep = evaluate(augmented["model"], kb, q["test"], 5)
    pc = rep.per_complexity
    multi_frac = pc["2"]["fraction"] + pc["3+"]["fraction"]
    multi_n = pc["2"]["count"] + pc["3+"]["count"]
    multi_f1 = (pc["2"]["avg_f1"] * pc["2"]["count"] + pc["3+"]["avg_f1"] * pc["3+"]["count"]) / max(multi_n, 1)
    gap = pc["1"]["avg_f1"] - multi_f1
    ok = multi_frac >= 0.20 and gap <= 0.15
    record_criterion(11, ok, f"{100 * multi_frac:.0f}% of test programs have >= 2 expressions; their F1 "
                             f"{100 * multi_f1:.1f} vs 1-expression {100 * pc['1']['avg_f1']:.1f} "
                             f"(gap {100 * gap:.1f}, need <= 15)")
    assert ok


# --------------------------------------------------------------------------- 10: determinism


def test_c10_determinism_and_worker_invariance(small_bench):
    kb, _, q = small_bench
    cfg = TrainConfig(**FAST)
    runs = [run_iml_reinforce(kb, q["train"], q["valid"], cfg, workers=w) for w in (1, 1, 4)]
    same_log = runs[0][2] == runs[1][2]
    same_workers = runs[0][2] == runs[2][2] and all(
        np.array_equal(runs[0][0].params[k], runs[2][0].params[k]) for k in runs[0][0].params)
    ok = same_log and same_workers
    record_criterion(10, ok, f"repeat run identical: {same_log}; workers 4 == workers 1 bit-for-bit: {same_workers}")
    assert ok
