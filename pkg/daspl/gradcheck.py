"""
Gradient Check Module

Finite-difference verification of every parameterised block at toy sizes:
the dual-weight encoder, the encoder LSTM plus parallel decoder, the label
module and the composite loss.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from daspl import autodiff as ad
from daspl.autodiff import Tensor, grad_check
from daspl.config import ModelConfig, LossConfig
from daspl.decoder import (
    ContextEmbedding,
    DecoderInputs,
    build_decoder_params,
    teacher_forced,
)
from daspl.encoder import DualWeightTracker, build_encoder_params, encode_batch
from daspl.label_module import build_label_params, embed_report, label_logits
from daspl.losses import composite_loss, cross_entropy, multilabel_softmargin
from daspl.params import ParamStore

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4

TOY_MODEL = ModelConfig(
    image_size=16, patch_size=8, d_model=8, heads=2, gpsa_blocks=1,
    feature_dim=8, hidden_size=6, embed_dim=4, label_hidden=5,
)
TOY_VOCAB = 12
TOY_LABELS = 8
TOY_FACTORS = 3

Block = Tuple[Callable[[], Tensor], List[Tensor]]


@dataclass
class BlockResult:
    name: str
    error: float
    seconds: float
    passed: bool


def encoder_block(rng: np.random.Generator, cfg: ModelConfig = TOY_MODEL) -> Block:
    """Full encode on a batch of two images with a non-degenerate dual-weight state."""
    store = ParamStore()
    params = build_encoder_params(store, cfg, rng)
    # distinct logits keep the base head fixed under perturbation
    params.head_logits.data = rng.normal(0.0, 1.0, size=cfg.heads)
    tracker = DualWeightTracker("dual")
    d_k = cfg.feature_dim // cfg.heads
    seq = (cfg.image_size // cfg.patch_size) ** 2 + 1
    tracker.advance([[rng.normal(size=(seq, d_k)) for _ in range(cfg.heads)] for _ in range(2)])
    images = [rng.random((cfg.image_size, cfg.image_size)) for _ in range(2)]
    direction = rng.normal(size=cfg.feature_dim)

    def fn() -> Tensor:
        total = ad.as_tensor(0.0)
        for out in encode_batch(images, params, tracker):
            total = total + ad.sum_(ad.mul(out.weighted_attention, direction)) + ad.sum_(ad.mul(out.class_feature, direction))
        return total

    return fn, store.tensors()


def decoder_block(rng: np.random.Generator, cfg: ModelConfig = TOY_MODEL) -> Block:
    """Teacher-forced unroll of three steps through all three LSTMs and both heads."""
    store = ParamStore()
    fused_dim = cfg.feature_dim + TOY_FACTORS
    params = build_decoder_params(store, cfg.feature_dim, cfg.hidden_size, cfg.embed_dim, TOY_VOCAB, rng,
                                  fused_dim=fused_dim)
    watt = store.create("inputs.weighted_attention", (cfg.feature_dim,), "normal", rng)
    fused = store.create("inputs.fused", (fused_dim,), "normal", rng)
    t1 = store.create("inputs.T1", (cfg.embed_dim,), "normal", rng)
    t2 = store.create("inputs.T2", (cfg.embed_dim,), "normal", rng)
    inputs = DecoderInputs(weighted_attention=watt, contexts=ContextEmbedding(T1=t1, T2=t2), fused=fused)
    tokens = [0, 5, 7]
    targets = [5, 7, 1]

    def fn() -> Tensor:
        trace = teacher_forced(inputs, tokens, params)
        return cross_entropy(trace.p1, targets) + cross_entropy(trace.p2, targets)

    return fn, store.tensors()


def label_block(rng: np.random.Generator, cfg: ModelConfig = TOY_MODEL) -> Block:
    """
    Soft report embedding, category LSTM and the soft-margin loss.

    The softmax and soft-margin stages shrink gradients far below the
    tolerance, so the label logits are also checked directly through a random
    projection. Enlarged LSTM weights keep the gates away from their linear
    range.
    """
    store = ParamStore()
    logits = store.create("inputs.p2_logits", (4, TOY_VOCAB), "normal", rng)
    table = store.create("inputs.word_table", (TOY_VOCAB, cfg.embed_dim), "normal", rng)
    table.data = rng.normal(0.0, 1.0, size=table.shape)
    params = build_label_params(store, cfg.embed_dim, cfg.label_hidden, TOY_LABELS, rng)
    for weight in (params.lstm.w_x, params.lstm.w_h):
        weight.data = weight.data * 4.0
    truth = (rng.random(TOY_LABELS) < 0.5).astype(np.float64)
    direction = rng.normal(size=TOY_LABELS)

    def fn() -> Tensor:
        rp = embed_report(ad.softmax(logits, axis=-1), table, training=True)
        z = label_logits(rp, params)
        return ad.sum_(ad.mul(z, direction)) + multilabel_softmargin(ad.softmax(z), truth)

    return fn, store.tensors()


def loss_block(rng: np.random.Generator, cfg: ModelConfig = TOY_MODEL) -> Block:
    """Composite loss over two cross-entropies and the soft-margin term."""
    store = ParamStore()
    z1 = store.create("inputs.z1", (3, TOY_VOCAB), "normal", rng)
    z2 = store.create("inputs.z2", (3, TOY_VOCAB), "normal", rng)
    label = store.create("inputs.label", (TOY_LABELS,), "normal", rng)
    targets = [int(t) for t in rng.integers(0, TOY_VOCAB, size=3)]
    truth = (rng.random(TOY_LABELS) < 0.5).astype(np.float64)
    loss_cfg = LossConfig()

    def fn() -> Tensor:
        l1 = cross_entropy(ad.softmax(z1, axis=-1), targets)
        l2 = cross_entropy(ad.softmax(z2, axis=-1), targets)
        lt = multilabel_softmargin(ad.softmax(label), truth)
        return composite_loss(l1, l2, lt, loss_cfg).total

    return fn, store.tensors()


BLOCKS: Dict[str, Callable[[np.random.Generator], Block]] = {
    "encoder": encoder_block,
    "decoder": decoder_block,
    "label_module": label_block,
    "composite_loss": loss_block,
}


def run_gradcheck(seed: int = 0, tolerance: float = TOLERANCE,
                  names: Optional[Sequence[str]] = None) -> List[BlockResult]:
    """
    Check every block (or the named subset) and report its max relative error.

    Returns:
        list: One BlockResult per block, in BLOCKS order.
    """
    results = []
    for name in names or list(BLOCKS):
        rng = np.random.default_rng([seed, len(results)])
        fn, params = BLOCKS[name](rng)
        start = time.perf_counter()
        error = grad_check(fn, params, step=1e-5)
        elapsed = time.perf_counter() - start
        results.append(BlockResult(name, error, elapsed, error < tolerance))
        logger.info("gradcheck %s: max relative error %.2e (%.1fs)", name, error, elapsed)
    return results
