"""The programmer: GRU encoder/decoder with dot-product attention and a key-variable memory.

Everything is float64 numpy with hand-written backprop. The same step
functions serve beam search (inference, one question, many beam items) and
teacher-forced training (many programs, padded into a batch).

Decoder vocabulary at any step is ``static + variables``:

* static ids ``0 .. n_static-1``: the special tokens in `SPECIALS` followed
  by every KB property, sorted;
* variable ids ``n_static + i`` for variable ``R{i+1}``, scored with its
  memory key.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .interpreter import (
    ARGMAX,
    ARGMIN,
    CLOSE,
    FILTER,
    GO,
    HOP,
    OPEN,
    RETURN,
    ContractViolation,
    Program,
    ProgramState,
    var_index,
    var_token,
)

logger = logging.getLogger(__name__)

UNK = "UNK"
ENT = "ENT"
SPECIALS = (OPEN, CLOSE, HOP, ARGMAX, ARGMIN, FILTER, RETURN, GO, UNK)
GO_ID = SPECIALS.index(GO)

TRAINABLE = (
    "enc_proj",
    "enc_Wx",
    "enc_Wh",
    "enc_b",
    "dec_Wx",
    "dec_Wh",
    "dec_b",
    "tok_emb",
    "prop_proj",
    "out_W",
    "out_b",
)
FROZEN = ("word_emb", "prop_feats")


@dataclass
class ModelConfig:
    word_dim: int = 16
    hidden_dim: int = 50
    dropout: float = 0.5
    seed: int = 0


# --------------------------------------------------------------------------- init


def _uniform(rng, d_in, shape):
    bound = math.sqrt(3.0) / d_in
    return rng.uniform(-bound, bound, size=shape)


def _truncated_normal(rng, shape, std=0.1):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def split_property_id(prop: str) -> Optional[tuple[list[str], list[str]]]:
    """``/people/person/parents`` -> (["people", "person"], ["parents"]); None if malformed."""
    parts = prop.strip("/").split("/")
    if len(parts) != 3 or not all(parts):
        return None
    head = [w for part in parts[:2] for w in part.split("_") if w]
    tail = [w for w in parts[2].split("_") if w]
    if not head or not tail:
        return None
    return head, tail


def build_property_embedding(word_emb: np.ndarray, word_index: dict, prop: str) -> np.ndarray:
    """Pre-projection property vector: [mean(domain+type words); mean(property words)]."""
    unk = word_emb[word_index[UNK]]
    split = split_property_id(prop)
    if split is None:
        logger.warning("malformed property id %r, using UNK embedding", prop)
        return np.concatenate([unk, unk])

    def mean(words):
        return np.mean([word_emb[word_index[w]] if w in word_index else unk for w in words], axis=0)

    head, tail = split
    return np.concatenate([mean(head), mean(tail)])


def load_embedding_file(path: str | Path) -> dict[str, np.ndarray]:
    """Read ``word v1 v2 ...`` rows (GloVe text layout)."""
    vectors = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            vec = np.asarray(parts[1:], dtype=np.float64)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ValueError(f"inconsistent embedding dimension for {parts[0]!r}")
            vectors[parts[0]] = vec
    return vectors


def property_words(props: Sequence[str]) -> list[str]:
    words = []
    for p in props:
        split = split_property_id(p)
        if split:
            words.extend(split[0] + split[1])
    return words


# --------------------------------------------------------------------------- GRU


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_forward(x, h, Wx, Wh, b):
    """One GRU step for a batch. Gates are stacked [update z, reset r, candidate n]."""
    H = h.shape[-1]
    gx = x @ Wx + b
    gh = h @ Wh[:, : 2 * H]
    z = _sigmoid(gx[:, :H] + gh[:, :H])
    r = _sigmoid(gx[:, H : 2 * H] + gh[:, H:])
    rh = r * h
    n = np.tanh(gx[:, 2 * H :] + rh @ Wh[:, 2 * H :])
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, z, r, rh, n)


def gru_backward(dh_new, cache, Wx, Wh, grads, prefix):
    x, h, z, r, rh, n = cache
    H = h.shape[-1]
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    grads[prefix + "Wh"][:, 2 * H :] += rh.T @ dan
    drh = dan @ Wh[:, 2 * H :].T
    dr = drh * h
    dh += drh * r
    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    dzr = np.concatenate([daz, dar], axis=1)
    grads[prefix + "Wh"][:, : 2 * H] += h.T @ dzr
    dh += dzr @ Wh[:, : 2 * H].T
    dg = np.concatenate([daz, dar, dan], axis=1)
    grads[prefix + "Wx"] += x.T @ dg
    grads[prefix + "b"] += dg.sum(axis=0)
    dx = dg @ Wx.T
    return dx, dh


# --------------------------------------------------------------------------- memory / state


@dataclass(frozen=True)
class KeyVariableMemory:
    """Keys v_i paired with variable tokens R_i, in creation order."""

    keys: tuple = ()
    tokens: tuple = ()

    def __len__(self):
        return len(self.tokens)

    def matrix(self, hidden_dim: int) -> np.ndarray:
        if not self.keys:
            return np.zeros((0, hidden_dim))
        return np.stack(self.keys)


def register_result_variable(memory: KeyVariableMemory, key: np.ndarray, token: str) -> KeyVariableMemory:
    if token in memory.tokens:
        raise ContractViolation(f"variable {token} already in memory")
    if var_index(token) != len(memory.tokens):
        raise ContractViolation(f"expected variable {var_token(len(memory.tokens))}, got {token}")
    return KeyVariableMemory(memory.keys + (np.array(key, dtype=np.float64),), memory.tokens + (token,))


@dataclass(frozen=True)
class EncodedQuestion:
    states: np.ndarray  # (L, H) encoder hidden states, used for keys
    attend: np.ndarray  # (L, H) attention memory (dropout applied in train mode)


@dataclass(frozen=True)
class DecoderState:
    hidden: np.ndarray
    last_token: str
    memory: KeyVariableMemory
    step: int = 0


# --------------------------------------------------------------------------- teacher forcing data


@dataclass
class TeacherForced:
    """One (question, program) pair unrolled into per-step decoder ids and masks."""

    word_ids: np.ndarray
    spans: list
    in_ids: np.ndarray
    tgt_ids: np.ndarray
    valid: list  # per step: np.ndarray of valid combined ids
    created: np.ndarray  # per step: memory slot created by this step's ")" or -1
    num_slots: int


class Model:
    """Parameters, vocabularies and the forward/backward passes."""

    def __init__(self, config: ModelConfig, words: Sequence[str], properties: Sequence[str],
                 embeddings: Optional[dict] = None, rng: Optional[np.random.Generator] = None):
        self.config = config
        words = list(dict.fromkeys([UNK, ENT, *words, *property_words(properties)]))
        self.words = words
        self.word_index = {w: i for i, w in enumerate(words)}
        self.properties = sorted(properties)
        self.static_tokens = list(SPECIALS) + self.properties
        self.static_index = {t: i for i, t in enumerate(self.static_tokens)}
        self.n_static = len(self.static_tokens)
        self.n_special = len(SPECIALS)
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.params = self.init_params(rng, embeddings)

    # ---- construction

    def init_params(self, rng, embeddings=None) -> dict:
        Dw, H = self.config.word_dim, self.config.hidden_dim
        word_emb = rng.normal(0.0, 0.1, size=(len(self.words), Dw))
        if embeddings:
            hits = 0
            for w, i in self.word_index.items():
                vec = embeddings.get(w)
                if vec is not None:
                    if vec.shape != (Dw,):
                        raise ValueError(f"embedding file dim {vec.shape[0]} != word_dim {Dw}")
                    word_emb[i] = vec
                    hits += 1
            logger.info("embedding file covers %d/%d words", hits, len(self.words))
        params = {"word_emb": word_emb}
        params["prop_feats"] = self.property_features(word_emb)
        params["enc_proj"] = _uniform(rng, Dw, (Dw, H))
        params["enc_Wx"] = _uniform(rng, H, (H, 3 * H))
        params["enc_Wh"] = _uniform(rng, H, (H, 3 * H))
        params["enc_b"] = np.zeros(3 * H)
        params["dec_Wx"] = _uniform(rng, H, (H, 3 * H))
        params["dec_Wh"] = _uniform(rng, H, (H, 3 * H))
        params["dec_b"] = np.zeros(3 * H)
        params["tok_emb"] = _truncated_normal(rng, (self.n_special, H))
        params["prop_proj"] = _uniform(rng, 2 * Dw, (2 * Dw, H))
        params["out_W"] = _uniform(rng, 2 * H, (2 * H, H))
        params["out_b"] = np.zeros(H)
        return params

    def reinitialize(self, rng: np.random.Generator) -> None:
        """Fresh trainable parameters; frozen word/property features are kept."""
        fresh = self.init_params(rng)
        for name in TRAINABLE:
            self.params[name] = fresh[name]

    def property_features(self, word_emb) -> np.ndarray:
        if not self.properties:
            return np.zeros((0, 2 * self.config.word_dim))
        return np.stack([build_property_embedding(word_emb, self.word_index, p) for p in self.properties])

    def static_embeddings(self, params=None) -> np.ndarray:
        p = params or self.params
        return np.concatenate([p["tok_emb"], p["prop_feats"] @ p["prop_proj"]], axis=0)

    # ---- ids

    def word_ids(self, words: Sequence[str]) -> np.ndarray:
        unk = self.word_index[UNK]
        return np.array([self.word_index.get(w, unk) for w in words], dtype=np.int64)

    def token_id(self, token: str) -> int:
        idx = var_index(token)
        if idx is not None:
            return self.n_static + idx
        try:
            return self.static_index[token]
        except KeyError:
            raise ContractViolation(f"token {token!r} is not in the decoder vocabulary") from None

    def token_of(self, token_id: int) -> str:
        if token_id >= self.n_static:
            return var_token(token_id - self.n_static)
        return self.static_tokens[token_id]

    # ---- inference path (one question)

    def encode(self, words: Sequence[str], spans: Sequence[tuple], train_mode: bool = False,
               rng: Optional[np.random.Generator] = None):
        """Run the encoder; returns (EncodedQuestion, initial DecoderState, KeyVariableMemory).

        ``spans`` are inclusive (start, end) word ranges; each becomes one memory entry.
        """
        if len(words) == 0:
            raise ContractViolation("cannot encode an empty question")
        ids = self.word_ids(words)
        L = len(ids)
        for s, e, *_ in spans:
            if not 0 <= s <= e < L:
                raise ContractViolation(f"span ({s}, {e}) out of range for {L} words")
        batch = self._encode_batch(self.params, ids[None, :], np.array([L]), self._masks(rng, train_mode, 1, L))
        states = batch["H"][0]
        enc = EncodedQuestion(states, batch["Ht"][0])
        keys = tuple(states[s : e + 1].mean(axis=0) for s, e, *_ in spans)
        memory = KeyVariableMemory(keys, tuple(var_token(i) for i in range(len(keys))))
        state = DecoderState(states[-1].copy(), GO, memory, 0)
        return enc, state, memory

    def decode_step(self, state: DecoderState, enc: EncodedQuestion, valid: Sequence[str]):
        """Advance one step (evaluation mode). Returns (probs aligned with ``valid``, new hidden)."""
        if not valid:
            raise ContractViolation("valid token set is empty")
        mem = state.memory.matrix(self.config.hidden_dim)
        static = self.static_embeddings()
        c = self._input_embedding(state.last_token, static, mem)
        u, o = self.step_batch(state.hidden[None, :], c[None, :], enc.attend[None, :, :])
        ids = [self.token_id(t) for t in valid]
        table = np.concatenate([static, mem], axis=0)
        logits = table[ids] @ o[0]
        return _softmax(logits), u[0]

    def _input_embedding(self, token: str, static, mem):
        tid = self.token_id(token)
        return static[tid] if tid < self.n_static else mem[tid - self.n_static]

    def step_batch(self, u_prev, c, attend):
        """Evaluation-mode decoder step for a batch; returns (hidden, output vector)."""
        p = self.params
        u, _ = gru_forward(c, u_prev, p["dec_Wx"], p["dec_Wh"], p["dec_b"])
        if attend.shape[0] == 1 and u.shape[0] > 1:
            scores = u @ attend[0].T
            alpha = _softmax_rows(scores)
            ctx = alpha @ attend[0]
        else:
            scores = np.einsum("bh,blh->bl", u, attend)
            alpha = _softmax_rows(scores)
            ctx = np.einsum("bl,blh->bh", alpha, attend)
        o = np.concatenate([u, ctx], axis=1) @ p["out_W"] + p["out_b"]
        return u, o

    # ---- teacher forcing

    def teacher_forced(self, words: Sequence[str], spans: Sequence[tuple], program: Program,
                       states: Sequence[ProgramState]) -> TeacherForced:
        """Unroll ``program`` given the interpreter states after each prefix (from `replay`)."""
        tokens = program.tokens
        if len(states) != len(tokens) + 1:
            raise ValueError("need one interpreter state per prefix")
        n_linked = len(spans)
        in_ids, tgt_ids, valid, created = [], [], [], []
        prev = GO_ID
        slot = n_linked
        for t, tok in enumerate(tokens):
            options = states[t].valid_tokens()
            if tok not in options:
                raise ContractViolation(f"step {t}: token {tok!r} is not among the valid tokens {options}")
            in_ids.append(prev)
            tid = self.token_id(tok)
            tgt_ids.append(tid)
            valid.append(np.array([self.token_id(o) for o in options], dtype=np.int64))
            if tok == CLOSE:
                created.append(slot)
                slot += 1
            else:
                created.append(-1)
            prev = tid
        return TeacherForced(
            self.word_ids(words), [(s, e) for s, e, *_ in spans], np.array(in_ids), np.array(tgt_ids),
            valid, np.array(created), slot,
        )

    def _masks(self, rng, train_mode, B, L, T=0):
        rate = self.config.dropout
        if not train_mode or rate <= 0.0:
            return None
        if rng is None:
            raise ValueError("train_mode needs an rng for dropout masks")
        keep = 1.0 - rate
        H = self.config.hidden_dim

        def m(*shape):
            return (rng.random(shape) < keep) / keep

        return {
            "enc_in": m(B, L, H),
            "enc_out": m(B, L, H),
            "dec_in": m(T, B, H),
            "dec_out": m(T, B, H),
            "pre_softmax": m(T, B, H),
        }

    def _encode_batch(self, p, ids, lengths, masks):
        B, L = ids.shape
        H = self.config.hidden_dim
        X = p["word_emb"][ids]
        Q = X @ p["enc_proj"]
        if masks is not None:
            Q = Q * masks["enc_in"]
        step_mask = (np.arange(L)[None, :] < lengths[:, None]).astype(np.float64)
        h = np.zeros((B, H))
        Hs = np.zeros((B, L, H))
        caches = []
        for t in range(L):
            h_new, cache = gru_forward(Q[:, t], h, p["enc_Wx"], p["enc_Wh"], p["enc_b"])
            m = step_mask[:, t : t + 1]
            h = m * h_new + (1.0 - m) * h
            Hs[:, t] = h
            caches.append(cache)
        Ht = Hs * masks["enc_out"] if masks is not None else Hs
        return {"X": X, "H": Hs, "Ht": Ht, "final": h, "caches": caches, "step_mask": step_mask}

    def loss_and_grads(self, batch: Sequence[tuple], train_mode: bool = False,
                       rng: Optional[np.random.Generator] = None, params: Optional[dict] = None,
                       backward: bool = True):
        """Weighted negative log-likelihood and its exact gradient.

        ``batch`` holds (TeacherForced, weight) pairs. Returns
        (loss, per-item log-probs, grads) where loss = -sum(weight * log P(program)).
        """
        p = params if params is not None else self.params
        H = self.config.hidden_dim
        B = len(batch)
        tfs = [tf for tf, _ in batch]
        weights = np.array([w for _, w in batch], dtype=np.float64)
        L = max(len(tf.word_ids) for tf in tfs)
        T = max(len(tf.tgt_ids) for tf in tfs)
        M = max(max(tf.num_slots, 1) for tf in tfs)
        Vs = self.n_static
        V = Vs + M

        ids = np.zeros((B, L), dtype=np.int64)
        lengths = np.array([len(tf.word_ids) for tf in tfs])
        in_ids = np.zeros((B, T), dtype=np.int64)
        tgt_ids = np.zeros((B, T), dtype=np.int64)
        created = np.full((B, T), -1, dtype=np.int64)
        dec_mask = np.zeros((B, T))
        valid = np.zeros((B, T, V), dtype=bool)
        for b, tf in enumerate(tfs):
            ids[b, : len(tf.word_ids)] = tf.word_ids
            n = len(tf.tgt_ids)
            in_ids[b, :n] = tf.in_ids
            tgt_ids[b, :n] = tf.tgt_ids
            created[b, :n] = tf.created
            dec_mask[b, :n] = 1.0
            for t, v in enumerate(tf.valid):
                valid[b, t, v] = True
        masks = self._masks(rng, train_mode, B, L, T)

        # ---- forward
        enc = self._encode_batch(p, ids, lengths, masks)
        Hs, Ht = enc["H"], enc["Ht"]
        enc_valid = enc["step_mask"] > 0
        static = np.concatenate([p["tok_emb"], p["prop_feats"] @ p["prop_proj"]], axis=0)
        mem = np.zeros((B, M, H))
        for b, tf in enumerate(tfs):
            for i, (s, e) in enumerate(tf.spans):
                mem[b, i] = Hs[b, s : e + 1].mean(axis=0)
        rows = np.arange(B)
        u = enc["final"]
        steps = []
        logps = np.zeros(B)
        for t in range(T):
            full = np.concatenate([np.broadcast_to(static, (B, Vs, H)), mem], axis=1)
            c = full[rows, in_ids[:, t]]
            c_in = c * masks["dec_in"][t] if masks else c
            u_new, gcache = gru_forward(c_in, u, p["dec_Wx"], p["dec_Wh"], p["dec_b"])
            m = dec_mask[:, t : t + 1]
            u_next = m * u_new + (1.0 - m) * u
            ut = u_next * masks["dec_out"][t] if masks else u_next
            scores = np.einsum("bh,blh->bl", ut, Ht)
            scores = np.where(enc_valid, scores, -np.inf)
            alpha = _softmax_rows(scores)
            ctx = np.einsum("bl,blh->bh", alpha, Ht)
            cat = np.concatenate([ut, ctx], axis=1)
            o = cat @ p["out_W"] + p["out_b"]
            ot = o * masks["pre_softmax"][t] if masks else o
            logits = np.einsum("bh,bvh->bv", ot, full)
            vmask = valid[:, t]
            vmask_safe = vmask.copy()
            vmask_safe[dec_mask[:, t] == 0, 0] = True
            logits = np.where(vmask_safe, logits, -np.inf)
            probs = _softmax_rows(logits)
            lp = np.log(probs[rows, tgt_ids[:, t]])
            logps += np.where(dec_mask[:, t] > 0, lp, 0.0)
            steps.append((full, c_in, gcache, u, u_next, ut, alpha, ctx, cat, ot, probs))
            for b in np.nonzero((created[:, t] >= 0) & (dec_mask[:, t] > 0))[0]:
                mem[b, created[b, t]] = u_next[b]
            u = u_next
        loss = -float(np.dot(weights, logps))
        if not backward:
            return loss, logps, None

        # ---- backward
        grads = {k: np.zeros_like(p[k]) for k in TRAINABLE}
        dstatic = np.zeros_like(static)
        dmem = np.zeros((B, M, H))
        dHt = np.zeros_like(Ht)
        du = np.zeros((B, H))
        for t in reversed(range(T)):
            full, c_in, gcache, u_prev, u_next, ut, alpha, ctx, cat, ot, probs = steps[t]
            live = dec_mask[:, t]
            # key created at this step: all later uses are already accumulated
            for b in np.nonzero((created[:, t] >= 0) & (live > 0))[0]:
                du[b] += dmem[b, created[b, t]]
            dlogits = probs.copy()
            dlogits[rows, tgt_ids[:, t]] -= 1.0
            dlogits *= (weights * live)[:, None]
            dot = np.einsum("bv,bvh->bh", dlogits, full)
            dstatic += np.einsum("bv,bh->vh", dlogits[:, :Vs], ot)
            dmem += dlogits[:, Vs:, None] * ot[:, None, :]
            do = dot * masks["pre_softmax"][t] if masks else dot
            grads["out_W"] += cat.T @ do
            grads["out_b"] += do.sum(axis=0)
            dcat = do @ p["out_W"].T
            dut = dcat[:, :H]
            dctx = dcat[:, H:]
            dalpha = np.einsum("bh,blh->bl", dctx, Ht)
            dHt += alpha[:, :, None] * dctx[:, None, :]
            dscores = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
            dut += np.einsum("bl,blh->bh", dscores, Ht)
            dHt += dscores[:, :, None] * ut[:, None, :]
            du_next = du + (dut * masks["dec_out"][t] if masks else dut)
            m = live[:, None]
            dx, dh = gru_backward(m * du_next, gcache, p["dec_Wx"], p["dec_Wh"], grads, "dec_")
            du = (1.0 - m) * du_next + dh
            dc = dx * masks["dec_in"][t] if masks else dx
            tin = in_ids[:, t]
            is_static = tin < Vs
            np.add.at(dstatic, tin[is_static], dc[is_static])
            for b in np.nonzero(~is_static)[0]:
                dmem[b, tin[b] - Vs] += dc[b]
        grads["tok_emb"] += dstatic[: self.n_special]
        grads["prop_proj"] += p["prop_feats"].T @ dstatic[self.n_special :]

        dH = dHt * masks["enc_out"] if masks else dHt.copy()
        for b, tf in enumerate(tfs):
            for i, (s, e) in enumerate(tf.spans):
                dH[b, s : e + 1] += dmem[b, i] / (e - s + 1)
        dh = du
        dQ = np.zeros((B, L, H))
        for t in reversed(range(L)):
            dh = dh + dH[:, t]
            m = enc["step_mask"][:, t : t + 1]
            dx, dprev = gru_backward(m * dh, enc["caches"][t], p["enc_Wx"], p["enc_Wh"], grads, "enc_")
            dQ[:, t] = dx
            dh = (1.0 - m) * dh + dprev
        if masks:
            dQ = dQ * masks["enc_in"]
        grads["enc_proj"] += np.einsum("blw,blh->wh", enc["X"], dQ)
        return loss, logps, grads

    def program_log_prob(self, tf: TeacherForced, train_mode=False, rng=None):
        """log P(program | question) and the gradient of that log-prob."""
        loss, logps, grads = self.loss_and_grads([(tf, 1.0)], train_mode, rng)
        return float(logps[0]), {k: -g for k, g in grads.items()}

    # ---- checkpoints

    def save(self, path: str | Path, extra: Optional[dict] = None) -> None:
        meta = {
            "config": asdict(self.config),
            "words": self.words,
            "properties": self.properties,
            "extra": extra or {},
        }
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        model, _, _ = load_checkpoint(path)
        return model


def load_checkpoint(path: str | Path):
    """Returns (Model, extra dict, other arrays)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        model = Model.__new__(Model)
        model.config = ModelConfig(**meta["config"])
        model.words = meta["words"]
        model.word_index = {w: i for i, w in enumerate(model.words)}
        model.properties = meta["properties"]
        model.static_tokens = list(SPECIALS) + model.properties
        model.static_index = {t: i for i, t in enumerate(model.static_tokens)}
        model.n_static = len(model.static_tokens)
        model.n_special = len(SPECIALS)
        model.params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
        others = {k: data[k].copy() for k in data.files if not k.startswith("param/") and k != "__meta__"}
    return model, meta.get("extra", {}), others


def _softmax(x):
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def _softmax_rows(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
