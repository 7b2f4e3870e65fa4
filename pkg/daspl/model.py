"""
Model Module

DA-SPL assembly: encoder → context block (T1, T2) → encoder LSTM → parallel
decoder LSTMs → label module, with batched teacher-forced forward passes, the
composite loss and report generation.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from daspl import autodiff as ad
from daspl.autodiff import Tensor
from daspl.config import LossConfig, ModelConfig
from daspl.dataset import ModelInputs
from daspl.decoder import (
    BOS_ID,
    EOS_ID,
    DecoderInputs,
    DecoderTrace,
    beam_search,
    build_context_params,
    build_decoder_params,
    context_embedding,
    greedy_decode,
    teacher_forced,
)
from daspl.encoder import DualWeightTracker, EncoderOutput, build_encoder_params, encode_batch
from daspl.errors import ContractError
from daspl.label_module import RISK_LABEL, LabelVocabulary, build_label_params, embed_report, predict_labels
from daspl.losses import LossBreakdown, composite_loss, cross_entropy, multilabel_softmargin
from daspl.params import ParamStore

logger = logging.getLogger(__name__)


@dataclass
class SampleResult:
    encoder: EncoderOutput
    trace: DecoderTrace
    p1: Tensor
    p2: Tensor
    label: Optional[Tensor]
    targets: List[int]


@dataclass
class ForwardResult:
    samples: List[SampleResult]

    @property
    def head_outputs(self) -> List[List[np.ndarray]]:
        return [s.encoder.head_outputs for s in self.samples]


class DasplModel:
    """
    All DA-SPL parameters plus the dual-weight tracker.

    Args:
        cfg (ModelConfig): Dimensions and switches.
        vocab_size (int): Report vocabulary size, specials included.
        label_names: Label module outputs, in order.
        factor_dim (int): Length of the structured factor vector.
        seed (int): Initialisation seed.
    """

    def __init__(self, cfg: ModelConfig, vocab_size: int, label_names: Sequence[str],
                 factor_dim: int, seed: int = 0):
        if vocab_size < 1:
            raise ContractError(f"vocab_size must be >= 1, got {vocab_size}")
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.labels = LabelVocabulary(tuple(label_names))
        self.factor_dim = factor_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        self.encoder = build_encoder_params(self.store, cfg, rng)
        self.decoder = build_decoder_params(
            self.store, cfg.feature_dim, cfg.hidden_size, cfg.embed_dim, vocab_size, rng,
            parallel=cfg.use_parallel, fused_dim=cfg.feature_dim + factor_dim,
        )
        self.context = build_context_params(self.store, cfg.feature_dim, factor_dim, cfg.embed_dim, rng)
        self.label = build_label_params(self.store, cfg.embed_dim, cfg.label_hidden, self.labels.n, rng) if cfg.use_label else None
        self.tracker = DualWeightTracker(cfg.weight_mode)
        logger.info("model built: %d tensors, %d weights, vocab %d", len(self.store), self.store.count(), vocab_size)

    # -- forward ---------------------------------------------------------

    def _decoder_inputs(self, enc: EncoderOutput, sample: ModelInputs) -> DecoderInputs:
        contexts = context_embedding(
            enc.class_feature, sample.factors, enc.tokens, sample.corpus_ids,
            self.decoder.vocab.word_table, self.context,
        )
        fused = ad.concat([enc.class_feature, ad.as_tensor(sample.factors)], axis=0)
        return DecoderInputs(weighted_attention=enc.weighted_attention, contexts=contexts, fused=fused)

    def forward(self, batch: Sequence[ModelInputs], training: bool = True) -> ForwardResult:
        """Teacher-forced pass over a batch; inputs are BOS + report, targets are report + EOS."""
        if len(batch) == 0:
            raise ContractError("forward needs a nonempty batch")
        encoded = encode_batch([s.image for s in batch], self.encoder, self.tracker)
        results = []
        for enc, sample in zip(encoded, batch):
            inputs = self._decoder_inputs(enc, sample)
            targets = list(sample.target_ids) + [EOS_ID]
            trace = teacher_forced(inputs, [BOS_ID] + list(sample.target_ids), self.decoder)
            p1, p2 = trace.p1, trace.p2
            label = None
            if self.label is not None:
                rp = embed_report(p2, self.decoder.vocab.word_table, training=training)
                label = predict_labels(rp, self.label)
            results.append(SampleResult(enc, trace, p1, p2, label, targets))
        return ForwardResult(results)

    def loss(self, result: ForwardResult, batch: Sequence[ModelInputs], cfg: LossConfig) -> LossBreakdown:
        """Batch-mean composite loss; disabled components contribute exactly 0."""
        n = len(result.samples)
        l1 = ad.add(0.0, 0.0)
        l2 = ad.add(0.0, 0.0)
        lt = ad.add(0.0, 0.0)
        for res, sample in zip(result.samples, batch):
            l1 = l1 + cross_entropy(res.p1, res.targets)
            if self.decoder.parallel:
                l2 = l2 + cross_entropy(res.p2, res.targets)
            if res.label is not None:
                lt = lt + multilabel_softmargin(res.label, sample.labels)
        return composite_loss(l1 * (1.0 / n), l2 * (1.0 / n), lt * (1.0 / n), cfg)

    # -- inference -------------------------------------------------------

    def generate(self, sample: ModelInputs, width: int = 5, max_len: int = 60) -> List[int]:
        """Beam-search report ids for one sample (greedy when ``width == 1``)."""
        with ad.no_grad():
            enc = encode_batch([sample.image], self.encoder, self.tracker)[0]
            inputs = self._decoder_inputs(enc, sample)
        return self._decode(inputs, width, max_len)

    def _decode(self, inputs: DecoderInputs, width: int, max_len: int) -> List[int]:
        if width == 1:
            return greedy_decode(inputs, self.decoder, max_len)
        return beam_search(inputs, self.decoder, width, max_len)

    def predict_label(self, sample: ModelInputs, width: int = 1, max_len: int = 60) -> np.ndarray:
        """
        Label distribution for one sample from its generated report.

        The report is decoded first (greedy when ``width == 1``); the decoder
        is then run over the generated ids and the label module reads the
        argmax embedding of that p2. ``sample.target_ids`` is never used.
        """
        if self.label is None:
            raise ContractError("label module is disabled in this model")
        with ad.no_grad():
            enc = encode_batch([sample.image], self.encoder, self.tracker)[0]
            inputs = self._decoder_inputs(enc, sample)
            ids = self._decode(inputs, width, max_len)
            trace = teacher_forced(inputs, [BOS_ID] + ids, self.decoder)
            rp = embed_report(trace.p2, self.decoder.vocab.word_table, training=False)
            return predict_labels(rp, self.label).data.copy()

    @property
    def risk_index(self) -> int:
        """Position of the high-risk bit among the label outputs."""
        return self.labels.index(RISK_LABEL)

    def head_weights(self) -> np.ndarray:
        """Current learnable head weights ``w_a``."""
        logits = self.encoder.head_logits.data
        e = np.exp(logits - logits.max())
        return e / e.sum() * logits.size
