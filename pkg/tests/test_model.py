from dataclasses import replace

import numpy as np
import pytest

from daspl import autodiff as ad
from daspl.autodiff import backward
from daspl.config import LossConfig
from daspl.dataset import FACTOR_DIM, LABEL_NAMES, build_vocabulary, to_model_inputs
from daspl.decoder import BOS_ID, beam_search, teacher_forced
from daspl.encoder import encode_batch
from daspl.errors import ContractError
from daspl.label_module import embed_report, predict_labels
from daspl.losses import multilabel_softmargin
from daspl.model import DasplModel


@pytest.fixture
def vocab(samples):
    return build_vocabulary(samples)


@pytest.fixture
def batch(samples, vocab):
    return [to_model_inputs(s, vocab, 16) for s in samples[:2]]


def _model(cfg, vocab, **switches):
    return DasplModel(replace(cfg, **switches), len(vocab), LABEL_NAMES, FACTOR_DIM, seed=0)


class TestForward:
    def test_shapes(self, toy_model_cfg, vocab, batch):
        model = _model(toy_model_cfg, vocab)
        result = model.forward(batch)
        for res, sample in zip(result.samples, batch):
            steps = len(sample.target_ids) + 1
            assert res.p2.shape == (steps, len(vocab))
            assert res.p1.shape == (steps, len(vocab))
            assert res.label.shape == (len(LABEL_NAMES),)
            assert res.targets[-1] == 1
        assert len(result.head_outputs) == 2

    def test_same_seed_same_model(self, toy_model_cfg, vocab, batch):
        a = _model(toy_model_cfg, vocab).forward(batch[:1]).samples[0].p2.data
        b = _model(toy_model_cfg, vocab).forward(batch[:1]).samples[0].p2.data
        assert a.tobytes() == b.tobytes()

    def test_empty_batch(self, toy_model_cfg, vocab):
        with pytest.raises(ContractError):
            _model(toy_model_cfg, vocab).forward([])


class TestLoss:
    def test_all_components(self, toy_model_cfg, vocab, batch):
        model = _model(toy_model_cfg, vocab)
        values = model.loss(model.forward(batch), batch, LossConfig()).values()
        assert values["loss1"] > 0 and values["loss2"] > 0 and values["loss_t"] > 0
        expected = values["loss1"] + 0.5 * values["loss2"] + 5.0 * values["loss_t"]
        assert values["total"] == pytest.approx(expected)

    def test_disabled_components_contribute_zero(self, toy_model_cfg, vocab, batch):
        model = _model(toy_model_cfg, vocab, use_parallel=False, use_label=False)
        values = model.loss(model.forward(batch), batch, LossConfig()).values()
        assert values["loss2"] == 0.0 and values["loss_t"] == 0.0
        assert values["total"] == pytest.approx(values["loss1"])

    def test_label_loss_reaches_decoder(self, toy_model_cfg, vocab, batch):
        model = _model(toy_model_cfg, vocab)
        res = model.forward(batch[:1]).samples[0]
        backward(multilabel_softmargin(res.label, batch[0].labels))
        grad = model.decoder.vocab.w_fc2.grad
        assert grad is not None and np.any(grad != 0)
        assert model.decoder.lstm2.w_x.grad is not None


class TestInference:
    def test_generate(self, toy_model_cfg, vocab, batch):
        model = _model(toy_model_cfg, vocab)
        for width in (1, 3):
            ids = model.generate(batch[0], width, 10)
            assert len(ids) <= 10
            assert not set(ids) & {0, 1, 2, 3}

    def test_width_one_is_greedy(self, toy_model_cfg, vocab, batch):
        model = _model(toy_model_cfg, vocab)
        with ad.no_grad():
            enc = encode_batch([batch[0].image], model.encoder, model.tracker)[0]
            inputs = model._decoder_inputs(enc, batch[0])
        assert model.generate(batch[0], 1, 10) == beam_search(inputs, model.decoder, 1, 10)

    def test_predict_label(self, toy_model_cfg, vocab, batch):
        label = _model(toy_model_cfg, vocab).predict_label(batch[0])
        assert label.sum() == pytest.approx(1.0)
        with pytest.raises(ContractError):
            _model(toy_model_cfg, vocab, use_label=False).predict_label(batch[0])

    def test_initial_head_weights_are_uniform(self, toy_model_cfg, vocab):
        np.testing.assert_allclose(_model(toy_model_cfg, vocab).head_weights(), np.ones(2))

    def test_predict_label_ignores_the_reference_report(self, toy_model_cfg, vocab, batch):
        model = _model(toy_model_cfg, vocab)
        rng = np.random.default_rng(5)
        noise = tuple(int(t) for t in rng.integers(4, len(vocab), size=23))
        noisy = replace(batch[0], target_ids=noise)
        np.testing.assert_array_equal(model.predict_label(noisy), model.predict_label(batch[0]))

    def test_predict_label_reads_the_generated_report(self, toy_model_cfg, vocab, batch):
        model = _model(toy_model_cfg, vocab)
        ids = model.generate(batch[0], 1, 12)
        with ad.no_grad():
            enc = encode_batch([batch[0].image], model.encoder, model.tracker)[0]
            trace = teacher_forced(model._decoder_inputs(enc, batch[0]), [BOS_ID] + ids, model.decoder)
            expected = predict_labels(embed_report(trace.p2, model.decoder.vocab.word_table, training=False),
                                      model.label).data
        np.testing.assert_array_equal(model.predict_label(batch[0], 1, 12), expected)

    def test_risk_index(self, toy_model_cfg, vocab):
        assert _model(toy_model_cfg, vocab).risk_index == LABEL_NAMES.index("high_risk")


class TestFactorFusion:
    def test_encoder_lstm_reads_class_feature_and_factors(self, toy_model_cfg, vocab, batch):
        model = _model(toy_model_cfg, vocab)
        cfg = toy_model_cfg
        assert model.decoder.encoder_lstm.input_size == cfg.embed_dim + 2 * cfg.feature_dim + FACTOR_DIM
        with ad.no_grad():
            enc = encode_batch([batch[0].image], model.encoder, model.tracker)[0]
            inputs = model._decoder_inputs(enc, batch[0])
        np.testing.assert_array_equal(inputs.fused.data[:cfg.feature_dim], enc.class_feature.data)
        np.testing.assert_array_equal(inputs.fused.data[cfg.feature_dim:], batch[0].factors)

    def test_factors_change_the_first_hidden_state(self, toy_model_cfg, vocab, batch):
        model = _model(toy_model_cfg, vocab)
        flipped = replace(batch[0], factors=1.0 - batch[0].factors)
        with ad.no_grad():
            a, b = model.forward([batch[0]]).samples[0], model.forward([flipped]).samples[0]
        assert not np.allclose(a.trace.h1.data[0], b.trace.h1.data[0])
