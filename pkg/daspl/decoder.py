"""
Decoder Module

Parallel-LSTM report decoder. One LSTM encodes the weighted attention feature
fused with the class feature and the structured factors (h1); a second LSTM
reads [T1, h1, word embedding] with its own recurrence and emits p1; a third
LSTM reads [T2, h2, word embedding] and emits p2, the distribution used for
report generation. T1 and T2 come from a single-layer attention context block
over the image tokens and the corpus description.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from daspl import autodiff as ad
from daspl.autodiff import Tensor
from daspl.errors import ContractError
from daspl.params import ParamStore

logger = logging.getLogger(__name__)

BOS_ID = 0
EOS_ID = 1
PAD_ID = 2
UNK_ID = 3
NEVER_EMITTED = (BOS_ID, PAD_ID, UNK_ID)


# ==================== LSTM cell ====================

@dataclass
class LstmCellParams:
    """Gate blocks are stacked in the order input, forget, output, candidate."""

    hidden_size: int
    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden_size: int) -> "LstmState":
        return cls(ad.as_tensor(np.zeros(hidden_size)), ad.as_tensor(np.zeros(hidden_size)))


def build_lstm_params(store: ParamStore, name: str, input_size: int, hidden_size: int,
                      rng: np.random.Generator) -> LstmCellParams:
    bias = np.zeros(4 * hidden_size)
    # forget gate starts open
    bias[hidden_size:2 * hidden_size] = 1.0
    b = store.create(f"{name}.b", (4 * hidden_size,), "zeros")
    b.data = bias
    return LstmCellParams(
        hidden_size=hidden_size,
        w_x=store.create(f"{name}.w_x", (input_size, 4 * hidden_size), "normal", rng),
        w_h=store.create(f"{name}.w_h", (hidden_size, 4 * hidden_size), "normal", rng),
        b=b,
    )


def _columns(z: Tensor, start: int, stop: int) -> Tensor:
    return z[start:stop] if z.ndim == 1 else z[:, start:stop]


def lstm_gates(z: Tensor, c_prev: Optional[Tensor], hidden_size: int) -> LstmState:
    """
    Gate nonlinearities over pre-activations ``z`` of shape (4n,) or (L, 4n).

    ``c_prev`` None stands for a zero cell, so ``c = i * g``.
    """
    n = hidden_size
    gates = ad.sigmoid(_columns(z, 0, 3 * n))
    i = _columns(gates, 0, n)
    f = _columns(gates, n, 2 * n)
    o = _columns(gates, 2 * n, 3 * n)
    g = ad.tanh(_columns(z, 3 * n, 4 * n))
    c = i * g if c_prev is None else f * c_prev + i * g
    return LstmState(h=o * ad.tanh(c), c=c)


def lstm_drive(inputs: Sequence[Tensor], params: LstmCellParams) -> Tensor:
    """
    Input projection ``concat(inputs)·W_x + b``.

    The inputs are joined along their last axis, so (L, ·) sequences give one
    row per step.

    Raises:
        ContractError: The joined width differs from the cell's input size.
    """
    parts = [ad.as_tensor(v) for v in inputs]
    x = ad.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    if x.ndim > 2 or x.shape[-1] != params.input_size:
        raise ContractError(f"LSTM input has shape {x.shape}, cell expects width {params.input_size}")
    return ad.matmul(x, params.w_x) + params.b


def lstm_step(inputs: Sequence[Tensor], prev: LstmState, params: LstmCellParams) -> LstmState:
    """
    One LSTM step over the concatenation of ``inputs``.

    Args:
        inputs: Vectors concatenated into the cell input.
        prev (LstmState): Previous hidden and cell vectors.
        params (LstmCellParams): Cell weights.

    Returns:
        LstmState: ``h = o * tanh(c)``, ``c = f * c_prev + i * g``.

    Raises:
        ContractError: The concatenated input length differs from the cell's
                       input size.
    """
    drive = lstm_drive(inputs, params)
    if drive.ndim != 1:
        raise ContractError(f"lstm_step takes input vectors, got a sequence of {drive.shape[0]}")
    return lstm_gates(drive + ad.matmul(prev.h, params.w_h), prev.c, params.hidden_size)


def lstm_unroll(drive: Tensor, params: LstmCellParams, steps: Optional[int] = None) -> Tensor:
    """
    Recurrence from a zero state over precomputed ``lstm_drive`` output.

    ``drive`` holds one (4n,) row per step, or is a single (4n,) vector fed
    at each of ``steps`` steps. Returns the hidden vectors stacked as
    (steps, n); stepping ``lstm_step`` gives the same values.
    """
    constant = drive.ndim == 1
    count = steps if constant else drive.shape[0]
    if count is None or count < 1:
        raise ContractError(f"LSTM unroll needs at least one step, got {count}")
    state = LstmState.zeros(params.hidden_size)
    hidden = []
    for t in range(count):
        row = drive if constant else drive[t]
        state = lstm_gates(row + ad.matmul(state.h, params.w_h), state.c, params.hidden_size)
        hidden.append(state.h)
    return ad.stack(hidden, axis=0)


# ==================== Context block ====================

@dataclass
class ContextEmbedding:
    T1: Tensor
    T2: Tensor


@dataclass
class ContextParams:
    w_query: Tensor
    w_corpus: Tensor
    w_t1: Tensor
    b_t1: Tensor
    w_t2: Tensor
    b_t2: Tensor


def build_context_params(store: ParamStore, feature_dim: int, factor_dim: int, embed_dim: int,
                         rng: np.random.Generator, prefix: str = "context") -> ContextParams:
    return ContextParams(
        w_query=store.create(f"{prefix}.w_query", (feature_dim + factor_dim, feature_dim), "normal", rng),
        w_corpus=store.create(f"{prefix}.w_corpus", (embed_dim, feature_dim), "normal", rng),
        w_t1=store.create(f"{prefix}.w_t1", (feature_dim, embed_dim), "normal", rng),
        b_t1=store.create(f"{prefix}.b_t1", (embed_dim,), "zeros"),
        w_t2=store.create(f"{prefix}.w_t2", (feature_dim, embed_dim), "normal", rng),
        b_t2=store.create(f"{prefix}.b_t2", (embed_dim,), "zeros"),
    )


def context_embedding(class_feature: Tensor, factors: np.ndarray, image_tokens: Tensor,
                      corpus_ids: Sequence[int], word_table: Tensor, params: ContextParams) -> ContextEmbedding:
    """
    Single-query attention over [image tokens ; corpus token embeddings].

    The query is ``[class_feature ⊕ factors]·W_q``; corpus ids are embedded
    with the decoder's word table and projected to the feature width. An empty
    corpus leaves the image tokens as the whole memory.
    """
    query = ad.matmul(ad.concat([class_feature, ad.as_tensor(factors)], axis=0), params.w_query)
    memory = image_tokens
    if len(corpus_ids) > 0:
        corpus = ad.matmul(ad.embedding(word_table, list(corpus_ids)), params.w_corpus)
        memory = ad.concat([image_tokens, corpus], axis=0)
    scores = ad.matmul(memory, ad.reshape(query, (-1, 1))) * (1.0 / math.sqrt(query.shape[0]))
    weights = ad.softmax(ad.reshape(scores, (-1,)))
    pooled = ad.matmul(weights, memory)
    return ContextEmbedding(
        T1=ad.tanh(ad.matmul(pooled, params.w_t1) + params.b_t1),
        T2=ad.tanh(ad.matmul(pooled, params.w_t2) + params.b_t2),
    )


# ==================== Parallel decoder ====================

@dataclass
class VocabProjection:
    w_fc1: Tensor
    b_fc1: Tensor
    w_fc2: Optional[Tensor]
    b_fc2: Optional[Tensor]
    word_table: Tensor

    @property
    def vocab_size(self) -> int:
        return self.word_table.shape[0]


@dataclass
class DecoderParams:
    encoder_lstm: LstmCellParams
    lstm2: LstmCellParams
    lstm3: Optional[LstmCellParams]
    vocab: VocabProjection

    @property
    def parallel(self) -> bool:
        return self.lstm3 is not None


def build_decoder_params(store: ParamStore, feature_dim: int, hidden_size: int, embed_dim: int,
                         vocab_size: int, rng: np.random.Generator, parallel: bool = True,
                         fused_dim: int = 0, prefix: str = "decoder") -> DecoderParams:
    """
    Register the three LSTMs, both vocabulary heads and the word table.

    ``fused_dim`` widens the encoder LSTM input for the class feature and
    factor vector carried by ``DecoderInputs.fused``.
    """
    lstm3 = None
    w_fc2 = b_fc2 = None
    if parallel:
        lstm3 = build_lstm_params(store, f"{prefix}.lstm3", embed_dim + hidden_size + embed_dim, hidden_size, rng)
        w_fc2 = store.create(f"{prefix}.w_fc2", (hidden_size, vocab_size), "normal", rng)
        b_fc2 = store.create(f"{prefix}.b_fc2", (vocab_size,), "zeros")
    return DecoderParams(
        encoder_lstm=build_lstm_params(store, f"{prefix}.lstm1", embed_dim + feature_dim + fused_dim, hidden_size, rng),
        lstm2=build_lstm_params(store, f"{prefix}.lstm2", embed_dim + hidden_size + embed_dim, hidden_size, rng),
        lstm3=lstm3,
        vocab=VocabProjection(
            w_fc1=store.create(f"{prefix}.w_fc1", (hidden_size, vocab_size), "normal", rng),
            b_fc1=store.create(f"{prefix}.b_fc1", (vocab_size,), "zeros"),
            w_fc2=w_fc2,
            b_fc2=b_fc2,
            word_table=store.create(f"{prefix}.word_table", (vocab_size, embed_dim), "normal", rng),
        ),
    )


def _encoder_lstm_inputs(T1: Tensor, weighted_attention: Tensor, fused: Optional[Tensor]) -> List[Tensor]:
    return [T1, weighted_attention] if fused is None else [T1, weighted_attention, fused]


def encoder_lstm(T1: Tensor, weighted_attention: Tensor, params: DecoderParams,
                 prev: Optional[LstmState] = None, fused: Optional[Tensor] = None) -> LstmState:
    """h1 = LSTM([T1, weighted attention, fused]) from a zero or carried state."""
    prev = prev or LstmState.zeros(params.encoder_lstm.hidden_size)
    return lstm_step(_encoder_lstm_inputs(T1, weighted_attention, fused), prev, params.encoder_lstm)


@dataclass
class DecoderStepOutput:
    state2: LstmState
    state3: Optional[LstmState]
    p1: Tensor
    p2: Tensor


def _check_token(token: int, vocab: VocabProjection) -> int:
    if not 0 <= int(token) < vocab.vocab_size:
        raise ContractError(f"token id {token} outside vocabulary of size {vocab.vocab_size}")
    return int(token)


def decoder_step(h1: Tensor, prev2: LstmState, token_prev: int, contexts: ContextEmbedding,
                 params: DecoderParams) -> DecoderStepOutput:
    """
    One step of both decoding LSTMs.

    h2 reads [T1, h1, emb(token_prev)] with its own recurrent state; p1 comes
    from h2. h3 reads [T2, h2, emb(token_prev)] from a zero state each step;
    p2 comes from h3. Without the parallel branch p2 is p1.

    Raises:
        ContractError: ``token_prev`` is outside the vocabulary.
    """
    vocab = params.vocab
    emb = ad.embedding(vocab.word_table, _check_token(token_prev, vocab))
    state2 = lstm_step([contexts.T1, h1, emb], prev2, params.lstm2)
    p1 = ad.softmax(ad.matmul(state2.h, vocab.w_fc1) + vocab.b_fc1)
    if not params.parallel:
        return DecoderStepOutput(state2=state2, state3=None, p1=p1, p2=p1)
    state3 = lstm_step([contexts.T2, state2.h, emb], LstmState.zeros(params.lstm3.hidden_size), params.lstm3)
    p2 = ad.softmax(ad.matmul(state3.h, vocab.w_fc2) + vocab.b_fc2)
    return DecoderStepOutput(state2=state2, state3=state3, p1=p1, p2=p2)


@dataclass
class DecoderInputs:
    """
    Per-sample quantities fixed for the whole decode.

    ``fused`` is the class feature joined with the factor vector; it feeds
    the encoder LSTM when the decoder was built with a matching ``fused_dim``.
    """

    weighted_attention: Tensor
    contexts: ContextEmbedding
    fused: Optional[Tensor] = None


@dataclass
class DecoderTrace:
    """One teacher-forced unroll, one row per step; ``h3`` is None without the parallel branch."""

    h1: Tensor
    h2: Tensor
    h3: Optional[Tensor]
    p1: Tensor
    p2: Tensor

    def __len__(self) -> int:
        return self.p2.shape[0]


@dataclass
class _DecodeState:
    s1: LstmState
    s2: LstmState


def _initial_state(params: DecoderParams) -> _DecodeState:
    n = params.lstm2.hidden_size
    return _DecodeState(LstmState.zeros(params.encoder_lstm.hidden_size), LstmState.zeros(n))


def _advance(state: _DecodeState, token_prev: int, inputs: DecoderInputs,
             params: DecoderParams) -> Tuple[_DecodeState, DecoderStepOutput]:
    s1 = encoder_lstm(inputs.contexts.T1, inputs.weighted_attention, params, state.s1, inputs.fused)
    out = decoder_step(s1.h, state.s2, token_prev, inputs.contexts, params)
    return _DecodeState(s1, out.state2), out


def _repeat_rows(v: Tensor, steps: int) -> Tensor:
    return ad.matmul(np.ones((steps, 1)), ad.reshape(v, (1, -1)))


def teacher_forced(inputs: DecoderInputs, input_tokens: Sequence[int], params: DecoderParams) -> DecoderTrace:
    """
    Unroll over ``input_tokens`` (BOS first), one p1/p2 row per step.

    Only the two recurrences run step by step. Input projections, the third
    LSTM (zero state at every step) and both vocabulary heads are evaluated
    for all steps in one go; the rows agree with stepping ``decoder_step``.

    Raises:
        ContractError: No tokens, or a token outside the vocabulary.
    """
    vocab = params.vocab
    tokens = [_check_token(t, vocab) for t in input_tokens]
    if not tokens:
        raise ContractError("teacher forcing needs at least one input token")
    steps = len(tokens)
    T1, T2 = inputs.contexts.T1, inputs.contexts.T2
    emb = ad.embedding(vocab.word_table, tokens)

    drive1 = lstm_drive(_encoder_lstm_inputs(T1, inputs.weighted_attention, inputs.fused), params.encoder_lstm)
    h1 = lstm_unroll(drive1, params.encoder_lstm, steps)
    h2 = lstm_unroll(lstm_drive([_repeat_rows(T1, steps), h1, emb], params.lstm2), params.lstm2)
    p1 = ad.softmax(ad.matmul(h2, vocab.w_fc1) + vocab.b_fc1, axis=-1)
    if not params.parallel:
        return DecoderTrace(h1=h1, h2=h2, h3=None, p1=p1, p2=p1)
    drive3 = lstm_drive([_repeat_rows(T2, steps), h2, emb], params.lstm3)
    h3 = lstm_gates(drive3, None, params.lstm3.hidden_size).h
    p2 = ad.softmax(ad.matmul(h3, vocab.w_fc2) + vocab.b_fc2, axis=-1)
    return DecoderTrace(h1=h1, h2=h2, h3=h3, p1=p1, p2=p2)


def _step_log_probs(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    for token in NEVER_EMITTED:
        if token < logp.size and token != EOS_ID:
            logp[token] = -np.inf
    return logp


def greedy_decode(inputs: DecoderInputs, params: DecoderParams, max_len: int) -> List[int]:
    """
    Argmax decoding over p2 from BOS until EOS or ``max_len`` steps.

    BOS, PAD and UNK are never emitted; ties go to the lowest id. The EOS
    token is not part of the returned sequence.
    """
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    tokens: List[int] = []
    with ad.no_grad():
        state = _initial_state(params)
        token = BOS_ID
        for _ in range(max_len):
            state, out = _advance(state, token, inputs, params)
            token = int(np.argmax(_step_log_probs(out.p2.data)))
            if token == EOS_ID:
                break
            tokens.append(token)
    return tokens


@dataclass
class _Hypothesis:
    tokens: List[int]
    log_prob: float
    state: Optional[_DecodeState]
    finished: bool

    @property
    def score(self) -> float:
        return sequence_score(self.tokens, self.log_prob)


def sequence_score(tokens: Sequence[int], log_prob: float) -> float:
    """Length-normalised log-probability; ``tokens`` includes EOS when present."""
    return log_prob / max(1, len(tokens))


def beam_search(inputs: DecoderInputs, params: DecoderParams, width: int, max_len: int,
                return_score: bool = False):
    """
    Length-normalised beam search over p2.

    Candidates are ranked by (score desc, parent rank, token id). Finished
    hypotheses keep their beam slot and compete with new expansions, so
    width 1 reproduces ``greedy_decode``. A hypothesis that reaches
    ``max_len`` tokens without EOS is finished as is.

    Args:
        inputs (DecoderInputs): Encoder feature and contexts of one sample.
        params (DecoderParams): Decoder weights.
        width (int): Beam width, at least 1.
        max_len (int): Maximum number of decoding steps.
        return_score (bool): Also return the winning hypothesis's score.

    Returns:
        list or tuple: Token ids without EOS, or (tokens, score).

    Raises:
        ContractError: ``width < 1`` or ``max_len < 1``.
    """
    if width < 1:
        raise ContractError(f"beam width must be >= 1, got {width}")
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    with ad.no_grad():
        beam = [_Hypothesis([], 0.0, _initial_state(params), False)]
        for step in range(max_len):
            pool = []
            for rank, hyp in enumerate(beam):
                if hyp.finished:
                    pool.append((-hyp.score, rank, -1, hyp))
                    continue
                prev = hyp.tokens[-1] if hyp.tokens else BOS_ID
                state, out = _advance(hyp.state, prev, inputs, params)
                logp = _step_log_probs(out.p2.data)
                for token in np.flatnonzero(np.isfinite(logp)):
                    token = int(token)
                    tokens = hyp.tokens + [token]
                    done = token == EOS_ID or len(tokens) >= max_len
                    child = _Hypothesis(tokens, hyp.log_prob + float(logp[token]), None if done else state, done)
                    pool.append((-child.score, rank, token, child))
            pool.sort(key=lambda item: item[:3])
            beam = [item[3] for item in pool[:width]]
            if all(h.finished for h in beam):
                break
    best = beam[0]
    tokens = [t for t in best.tokens if t != EOS_ID]
    logger.debug("beam search width %d: %d tokens, score %.4f", width, len(tokens), best.score)
    if return_score:
        return tokens, best.score
    return tokens
