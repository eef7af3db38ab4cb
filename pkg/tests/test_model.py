import math
from decimal import Decimal

import numpy as np
import pytest

from nsm.interpreter import ContractViolation, Program, VariableStore, replay
from nsm.kb import KnowledgeBase
from nsm.model import (
    GO,
    TRAINABLE,
    UNK,
    KeyVariableMemory,
    Model,
    ModelConfig,
    build_property_embedding,
    gru_forward,
    load_checkpoint,
    register_result_variable,
    split_property_id,
)

TOY = KnowledgeBase([
    ("USA", "/loc/country/city", "NYC"),
    ("USA", "/loc/country/city", "SF"),
    ("NYC", "/loc/city/pop", Decimal("8.6")),
    ("SF", "/loc/city/pop", Decimal("0.9")),
    ("USA", "/loc/country/capital", "DC"),
])
WORDS = "largest city ENT".split()
SPANS = [(2, 2, "USA")]
STORE = VariableStore.linked([{"USA"}])


def toy_model(word_dim=3, hidden_dim=4, dropout=0.3, seed=0):
    return Model(ModelConfig(word_dim, hidden_dim, dropout, seed), ["largest", "city"], sorted(TOY.properties),
                 rng=np.random.default_rng(seed))


def forced(model, text):
    prog = Program.parse(text)
    return model.teacher_forced(WORDS, SPANS, prog, replay(TOY, STORE, prog.tokens))


def block_errors(model, batch, train_mode, eps=1e-4):
    """Per-block max|analytic - numeric| / max(max|numeric|, 1e-8), central differences."""

    def loss():
        return model.loss_and_grads(batch, train_mode, np.random.default_rng(3), backward=False)[0]

    _, _, grads = model.loss_and_grads(batch, train_mode, np.random.default_rng(3))
    out = {}
    for name in TRAINABLE:
        P = model.params[name]
        num = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            orig = P[idx]
            P[idx] = orig + eps
            up = loss()
            P[idx] = orig - eps
            down = loss()
            P[idx] = orig
            num[idx] = (up - down) / (2 * eps)
        out[name] = float(np.max(np.abs(num - grads[name])) / max(np.max(np.abs(num)), 1e-8))
    return out


def test_gradient_check_without_dropout():
    model = toy_model()
    batch = [(forced(model, "( Hop R1 /loc/country/city ) ( ArgMax R2 /loc/city/pop ) Return"), 0.7),
             (forced(model, "( Hop R1 /loc/country/capital ) Return"), -0.3)]
    errs = block_errors(model, batch, train_mode=False)
    assert max(errs.values()) < 1e-4, errs


def test_gradient_flows_through_result_key():
    """Choosing R2 must be sensitive to the decoder parameters that produced R2's key."""
    model = toy_model(dropout=0.0)
    tf = forced(model, "( Hop R1 /loc/country/city ) ( ArgMax R2 /loc/city/pop ) Return")
    _, _, g = model.loss_and_grads([(tf, 1.0)])
    assert np.abs(g["dec_Wh"]).max() > 0
    # perturbing the key-producing decoder weights changes the R2 score
    base = model.loss_and_grads([(tf, 1.0)], backward=False)[0]
    model.params["dec_Wh"] += 1e-3
    assert model.loss_and_grads([(tf, 1.0)], backward=False)[0] != base


def test_teacher_forcing_matches_stepwise_decoding():
    model = toy_model(dropout=0.0)
    prog = Program.parse("( Hop R1 /loc/country/city ) ( ArgMax R2 /loc/city/pop ) Return")
    states = replay(TOY, STORE, prog.tokens)
    tf = model.teacher_forced(WORDS, SPANS, prog, states)
    _, logps, _ = model.loss_and_grads([(tf, 1.0)], backward=False)

    enc, state, memory = model.encode(WORDS, SPANS)
    total = 0.0
    from nsm.model import DecoderState

    for t, tok in enumerate(prog.tokens):
        valid = states[t].valid_tokens()
        probs, hidden = model.decode_step(state, enc, valid)
        assert abs(probs.sum() - 1.0) < 1e-9
        total += math.log(probs[valid.index(tok)])
        if tok == ")":
            memory = register_result_variable(memory, hidden, f"R{len(memory) + 1}")
        state = DecoderState(hidden, tok, memory, t + 1)
    assert total == pytest.approx(float(logps[0]), abs=1e-10)
    assert total <= 0.0


def test_single_valid_token_has_probability_one():
    model = toy_model()
    enc, state, _ = model.encode(WORDS, SPANS)
    probs, _ = model.decode_step(state, enc, ["Return"])
    assert probs.tolist() == [1.0]
    with pytest.raises(ContractViolation):
        model.decode_step(state, enc, [])


def test_symmetric_logits_give_uniform_distribution():
    model = toy_model()
    model.params["out_W"][:] = 0.0
    model.params["out_b"][:] = 0.0
    enc, state, _ = model.encode(WORDS, SPANS)
    probs, _ = model.decode_step(state, enc, ["(", "Return", "Hop", "Filter"])
    assert np.allclose(probs, 0.25, atol=1e-12)
    tf = forced(model, "Return")
    _, logps, _ = model.loss_and_grads([(tf, 1.0)], backward=False)
    assert logps[0] == pytest.approx(math.log(0.5), abs=1e-12)


def test_encode_memory_keys():
    model = toy_model()
    enc, state, memory = model.encode(["ENT"], [(0, 0, "X")])
    assert np.array_equal(memory.keys[0], enc.states[0])
    assert np.array_equal(state.hidden, enc.states[-1]) and state.last_token == GO
    enc, _, memory = model.encode(["largest", "city"], [])
    assert len(memory) == 0
    enc, _, memory = model.encode("ENT and ENT ENT".split(), [(0, 0, "a"), (2, 3, "b")])
    assert memory.tokens == ("R1", "R2")
    assert np.allclose(memory.keys[1], enc.states[2:4].mean(axis=0))
    with pytest.raises(ContractViolation):
        model.encode([], [])
    with pytest.raises(ContractViolation):
        model.encode(["a"], [(0, 3, "x")])


def test_evaluation_is_bitwise_deterministic():
    model = toy_model()
    a = model.encode(WORDS, SPANS)[0].states
    b = model.encode(WORDS, SPANS)[0].states
    assert np.array_equal(a, b)
    tf = forced(model, "( Hop R1 /loc/country/city ) Return")
    assert model.loss_and_grads([(tf, 1.0)])[0] == model.loss_and_grads([(tf, 1.0)])[0]


def test_dropout_needs_rng_and_changes_loss():
    model = toy_model(dropout=0.5)
    tf = forced(model, "( Hop R1 /loc/country/city ) Return")
    with pytest.raises(ValueError):
        model.loss_and_grads([(tf, 1.0)], train_mode=True)
    a = model.loss_and_grads([(tf, 1.0)], True, np.random.default_rng(1))[0]
    b = model.loss_and_grads([(tf, 1.0)], True, np.random.default_rng(1))[0]
    c = model.loss_and_grads([(tf, 1.0)], False)[0]
    assert a == b and a != c


def test_register_result_variable_contract():
    mem = KeyVariableMemory((np.zeros(2),), ("R1",))
    mem2 = register_result_variable(mem, np.ones(2), "R2")
    assert len(mem2) == len(mem) + 1 and mem2.tokens == ("R1", "R2")
    with pytest.raises(ContractViolation):
        register_result_variable(mem2, np.ones(2), "R2")


def test_invalid_program_names_step():
    model = toy_model()
    prog = Program.parse("( Hop R1 /loc/country/city ) Return")
    states = replay(TOY, STORE, prog.tokens)
    bad = Program.parse("( Hop R1 /loc/city/pop ) Return")
    with pytest.raises(ContractViolation, match="step 3"):
        model.teacher_forced(WORDS, SPANS, bad, states)


def test_property_embedding_construction():
    emb = np.arange(12, dtype=float).reshape(4, 3)
    index = {UNK: 0, "people": 1, "person": 2, "parents": 3}
    vec = build_property_embedding(emb, index, "/people/person/parents")
    assert vec.shape == (6,)
    assert np.allclose(vec[:3], (emb[1] + emb[2]) / 2) and np.allclose(vec[3:], emb[3])
    assert np.allclose(build_property_embedding(emb, index, "/people/people/people"), np.tile(emb[1], 2))
    assert np.allclose(build_property_embedding(emb, index, "/x/y/z"), np.tile(emb[0], 2))
    assert split_property_id("/people/person/place_of_birth") == (["people", "person"], ["place", "of", "birth"])


def test_malformed_property_falls_back_to_unk(caplog):
    emb = np.eye(2)
    vec = build_property_embedding(emb, {UNK: 0, "a": 1}, "not-a-property")
    assert np.allclose(vec, [1, 0, 1, 0])
    assert "malformed" in caplog.text


def test_init_ranges():
    model = Model(ModelConfig(16, 50, 0.5, 0), ["w"], ["/a/b/c"], rng=np.random.default_rng(0))
    bound = math.sqrt(3.0) / 50
    assert np.abs(model.params["enc_Wh"]).max() <= bound
    assert np.abs(model.params["tok_emb"]).max() <= 0.2
    for name, value in model.params.items():
        assert value.dtype == np.float64 and np.isfinite(value).all(), name


def test_gru_shapes():
    rng = np.random.default_rng(0)
    x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    h_new, _ = gru_forward(x, h, rng.normal(size=(3, 12)), rng.normal(size=(4, 12)), np.zeros(12))
    assert h_new.shape == (2, 4)


def test_checkpoint_round_trip(tmp_path):
    model = toy_model()
    path = tmp_path / "m.npz"
    model.save(path, {"note": 1})
    loaded, extra, _ = load_checkpoint(path)
    assert extra == {"note": 1}
    for k, v in model.params.items():
        assert np.array_equal(v, loaded.params[k])
    tf = forced(model, "( Hop R1 /loc/country/city ) Return")
    assert model.loss_and_grads([(tf, 1.0)])[0] == loaded.loss_and_grads([(tf, 1.0)])[0]
