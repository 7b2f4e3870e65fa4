import itertools

import numpy as np
import pytest

from daspl import autodiff as ad
from daspl.autodiff import Tensor, grad_check
from daspl.decoder import (
    BOS_ID,
    EOS_ID,
    ContextEmbedding,
    DecoderInputs,
    LstmCellParams,
    LstmState,
    beam_search,
    build_context_params,
    build_decoder_params,
    build_lstm_params,
    context_embedding,
    decoder_step,
    encoder_lstm,
    greedy_decode,
    lstm_drive,
    lstm_step,
    lstm_unroll,
    sequence_score,
    teacher_forced,
)
from daspl.errors import ContractError
from daspl.params import ParamStore

FEATURE, HIDDEN, EMBED, FUSED = 6, 5, 4, 3


def _random_decoder(seed, vocab, parallel=True, scale=1.0, fused=False):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    params = build_decoder_params(store, FEATURE, HIDDEN, EMBED, vocab, rng, parallel=parallel,
                                  fused_dim=FUSED if fused else 0)
    for _, tensor in store:
        tensor.data = tensor.data * scale
    inputs = DecoderInputs(
        weighted_attention=Tensor(rng.normal(size=FEATURE)),
        contexts=ContextEmbedding(T1=Tensor(rng.normal(size=EMBED)), T2=Tensor(rng.normal(size=EMBED))),
        fused=Tensor(rng.normal(size=FUSED)) if fused else None,
    )
    return store, params, inputs


def _stepwise(inputs, params, tokens):
    """p1 and p2 rows from stepping decoder_step one token at a time."""
    s1 = LstmState.zeros(HIDDEN)
    s2 = LstmState.zeros(HIDDEN)
    p1, p2 = [], []
    with ad.no_grad():
        for token in tokens:
            s1 = encoder_lstm(inputs.contexts.T1, inputs.weighted_attention, params, s1, inputs.fused)
            out = decoder_step(s1.h, s2, token, inputs.contexts, params)
            s2 = out.state2
            p1.append(out.p1.data)
            p2.append(out.p2.data)
    return np.stack(p1), np.stack(p2)


def _sequence_log_prob(inputs, params, sequence):
    _, p2 = _stepwise(inputs, params, [BOS_ID] + list(sequence[:-1]))
    return sum(float(np.log(p2[t][token])) for t, token in enumerate(sequence))


class TestLstmCell:
    def _zero_cell(self, n, m):
        return LstmCellParams(hidden_size=n, w_x=Tensor(np.zeros((m, 4 * n))),
                              w_h=Tensor(np.zeros((n, 4 * n))), b=Tensor(np.zeros(4 * n)))

    def test_zero_weights_by_hand(self):
        cell = self._zero_cell(2, 3)
        prev = LstmState(h=Tensor(np.zeros(2)), c=Tensor([1.0, 2.0]))
        out = lstm_step([Tensor(np.ones(3))], prev, cell)
        np.testing.assert_allclose(out.c.data, [0.5, 1.0])
        np.testing.assert_allclose(out.h.data, 0.5 * np.tanh([0.5, 1.0]))

    def test_zero_state_zero_input(self):
        cell = self._zero_cell(3, 2)
        out = lstm_step([Tensor(np.zeros(2))], LstmState.zeros(3), cell)
        np.testing.assert_array_equal(out.h.data, np.zeros(3))

    def test_forget_bias_starts_at_one(self):
        _, params, _ = _random_decoder(0, 8)
        b = params.lstm2.b.data
        np.testing.assert_array_equal(b[HIDDEN:2 * HIDDEN], np.ones(HIDDEN))
        assert np.all(b[:HIDDEN] == 0) and np.all(b[2 * HIDDEN:] == 0)

    def test_input_length_checked(self):
        cell = self._zero_cell(2, 3)
        with pytest.raises(ContractError):
            lstm_step([Tensor(np.ones(2))], LstmState.zeros(2), cell)

    def test_gradients(self, rng):
        store = ParamStore()
        cell = build_lstm_params(store, "cell", 3, 2, rng)
        x = Tensor(rng.normal(size=3), requires_grad=True, name="x")
        prev = LstmState(h=Tensor(rng.normal(size=2)), c=Tensor(rng.normal(size=2)))

        def fn():
            s = lstm_step([x], prev, cell)
            s = lstm_step([x], s, cell)
            return ad.sum_(s.h) + ad.sum_(ad.mul(s.c, s.c))

        assert grad_check(fn, [x, cell.w_x, cell.w_h, cell.b]) < 1e-4

    def test_unroll_matches_stepping(self, rng):
        store = ParamStore()
        cell = build_lstm_params(store, "cell", 3, 4, rng)
        xs = Tensor(rng.normal(size=(5, 3)))
        state = LstmState.zeros(4)
        expected = []
        for t in range(5):
            state = lstm_step([xs[t]], state, cell)
            expected.append(state.h.data)
        np.testing.assert_allclose(lstm_unroll(lstm_drive([xs], cell), cell).data, np.stack(expected),
                                   rtol=0, atol=1e-12)

    def test_constant_drive_needs_steps(self, rng):
        store = ParamStore()
        cell = build_lstm_params(store, "cell", 3, 2, rng)
        drive = lstm_drive([Tensor(rng.normal(size=3))], cell)
        assert lstm_unroll(drive, cell, steps=4).shape == (4, 2)
        with pytest.raises(ContractError):
            lstm_unroll(drive, cell)


class TestDecoderStep:
    def test_distributions(self):
        _, params, inputs = _random_decoder(1, 9)
        h1 = encoder_lstm(inputs.contexts.T1, inputs.weighted_attention, params).h
        out = decoder_step(h1, LstmState.zeros(HIDDEN), BOS_ID, inputs.contexts, params)
        for p in (out.p1.data, out.p2.data):
            assert p.shape == (9,)
            assert np.all(p >= 0)
            assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_single_token_vocabulary(self):
        _, params, inputs = _random_decoder(2, 1)
        h1 = encoder_lstm(inputs.contexts.T1, inputs.weighted_attention, params).h
        out = decoder_step(h1, LstmState.zeros(HIDDEN), 0, inputs.contexts, params)
        np.testing.assert_array_equal(out.p1.data, [1.0])
        np.testing.assert_array_equal(out.p2.data, [1.0])

    def test_out_of_vocabulary(self):
        _, params, inputs = _random_decoder(3, 6)
        with pytest.raises(ContractError):
            decoder_step(Tensor(np.zeros(HIDDEN)), LstmState.zeros(HIDDEN), 6, inputs.contexts, params)
        with pytest.raises(ContractError):
            teacher_forced(inputs, [BOS_ID, 6], params)
        with pytest.raises(ContractError):
            teacher_forced(inputs, [], params)

    def test_without_parallel_branch_p2_is_p1(self):
        _, params, inputs = _random_decoder(4, 7, parallel=False)
        assert not params.parallel
        trace = teacher_forced(inputs, [BOS_ID, 4, 5], params)
        assert trace.p2 is trace.p1
        assert trace.h3 is None

    def test_teacher_forced_trace(self):
        _, params, inputs = _random_decoder(5, 7)
        trace = teacher_forced(inputs, [BOS_ID, 4, 5, 6], params)
        assert len(trace) == 4
        assert trace.p1.shape == trace.p2.shape == (4, 7)
        assert trace.h1.shape == trace.h2.shape == trace.h3.shape == (4, HIDDEN)

    @pytest.mark.parametrize("parallel, fused", [(True, False), (True, True), (False, True)])
    def test_teacher_forced_matches_stepping(self, parallel, fused):
        for seed in range(5):
            _, params, inputs = _random_decoder(20 + seed, 9, parallel=parallel, scale=2.0, fused=fused)
            tokens = [BOS_ID, 4, 8, 5, 5, 7]
            with ad.no_grad():
                trace = teacher_forced(inputs, tokens, params)
            p1, p2 = _stepwise(inputs, params, tokens)
            np.testing.assert_allclose(trace.p1.data, p1, rtol=0, atol=1e-12)
            np.testing.assert_allclose(trace.p2.data, p2, rtol=0, atol=1e-12)

    def test_teacher_forced_gradients(self):
        store, params, inputs = _random_decoder(9, 8, fused=True)
        targets = [4, 6, EOS_ID]

        def fn():
            trace = teacher_forced(inputs, [BOS_ID, 4, 6], params)
            log_p = ad.log(trace.p1) + ad.log(trace.p2)
            return -ad.sum_(ad.mul(log_p, np.eye(8)[targets]))

        assert grad_check(fn, store.tensors()) < 1e-4

    def test_long_unroll_stays_finite(self):
        _, params, inputs = _random_decoder(6, 10)
        rng = np.random.default_rng(6)
        tokens = [BOS_ID] + [int(t) for t in rng.integers(4, 10, size=999)]
        with ad.no_grad():
            trace = teacher_forced(inputs, tokens, params)
        assert len(trace) == 1000
        assert np.all(np.isfinite(trace.p2.data))
        assert np.all(np.isfinite(trace.h2.data))


class TestEncoderLstmFusion:
    def test_fused_vector_enters_the_first_lstm(self):
        _, params, inputs = _random_decoder(11, 8, fused=True)
        assert params.encoder_lstm.input_size == EMBED + FEATURE + FUSED
        other = DecoderInputs(inputs.weighted_attention, inputs.contexts, fused=Tensor(inputs.fused.data + 1.0))
        with ad.no_grad():
            a = teacher_forced(inputs, [BOS_ID, 4], params)
            b = teacher_forced(other, [BOS_ID, 4], params)
        assert not np.allclose(a.h1.data, b.h1.data)
        assert not np.allclose(a.p2.data, b.p2.data)

    def test_fused_width_checked(self):
        _, params, inputs = _random_decoder(12, 8, fused=False)
        bad = DecoderInputs(inputs.weighted_attention, inputs.contexts, fused=Tensor(np.ones(FUSED)))
        with pytest.raises(ContractError):
            teacher_forced(bad, [BOS_ID], params)
        with pytest.raises(ContractError):
            greedy_decode(bad, params, 3)


class TestContext:
    def test_shapes_and_range(self, rng):
        store = ParamStore()
        params = build_context_params(store, FEATURE, 3, EMBED, rng)
        table = Tensor(rng.normal(size=(10, EMBED)))
        tokens = Tensor(rng.normal(size=(5, FEATURE)))
        ctx = context_embedding(tokens[-1], np.array([1.0, 0.0, 0.5]), tokens, [4, 5, 6], table, params)
        assert ctx.T1.shape == (EMBED,) and ctx.T2.shape == (EMBED,)
        assert np.all(np.abs(ctx.T1.data) < 1) and np.all(np.abs(ctx.T2.data) < 1)

    def test_empty_corpus(self, rng):
        store = ParamStore()
        params = build_context_params(store, FEATURE, 2, EMBED, rng)
        tokens = Tensor(rng.normal(size=(3, FEATURE)))
        ctx = context_embedding(tokens[-1], np.zeros(2), tokens, [], Tensor(np.zeros((4, EMBED))), params)
        assert np.all(np.isfinite(ctx.T1.data))


class TestGreedyAndBeam:
    def test_width_one_equals_greedy(self):
        for seed in range(50):
            _, params, inputs = _random_decoder(seed, 8, scale=2.0)
            assert beam_search(inputs, params, 1, 10) == greedy_decode(inputs, params, 10)

    def test_specials_never_emitted(self):
        for seed in range(10):
            _, params, inputs = _random_decoder(100 + seed, 6, scale=3.0)
            for tokens in (greedy_decode(inputs, params, 12), beam_search(inputs, params, 3, 12)):
                assert len(tokens) <= 12
                assert not set(tokens) & {0, 1, 2, 3}

    def test_exhaustive_enumeration(self):
        words = (4, 5, 6)
        candidates = [[EOS_ID]]
        for length in (1, 2):
            candidates += [list(p) + [EOS_ID] for p in itertools.product(words, repeat=length)]
        candidates += [list(p) for p in itertools.product(words, repeat=3)]
        assert len(candidates) == 40
        for seed in range(10):
            _, params, inputs = _random_decoder(200 + seed, 7, scale=2.0)
            scored = [(sequence_score(s, _sequence_log_prob(inputs, params, s)), s) for s in candidates]
            best_score, best = max(scored, key=lambda item: item[0])
            tokens, score = beam_search(inputs, params, 64, 3, return_score=True)
            assert tokens == [t for t in best if t != EOS_ID]
            assert score == pytest.approx(best_score, abs=1e-10)

    def test_score_monotone_in_width(self):
        for seed in range(20):
            _, params, inputs = _random_decoder(300 + seed, 5, scale=2.0)
            _, s1 = beam_search(inputs, params, 1, 3, return_score=True)
            _, s2 = beam_search(inputs, params, 2, 3, return_score=True)
            _, s5 = beam_search(inputs, params, 5, 3, return_score=True)
            assert s1 <= s5 + 1e-12
            assert s2 <= s5 + 1e-12

    def test_invalid_arguments(self):
        _, params, inputs = _random_decoder(7, 6)
        with pytest.raises(ContractError):
            beam_search(inputs, params, 0, 5)
        with pytest.raises(ContractError):
            greedy_decode(inputs, params, 0)

    def test_decode_is_deterministic(self):
        _, params, inputs = _random_decoder(8, 9, scale=2.0)
        assert beam_search(inputs, params, 5, 15) == beam_search(inputs, params, 5, 15)
