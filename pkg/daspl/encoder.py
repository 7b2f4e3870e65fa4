"""
Encoder Module

Image-to-feature encoder: non-overlapping patch embedding, gated positional
self-attention (GPSA) blocks, a class token with a fully connected projection,
and the dual-weight multi-head attention that rebalances heads by learnable
importance and by their cosine similarity to the dominant head.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from daspl import autodiff as ad
from daspl.autodiff import Tensor
from daspl.config import ModelConfig
from daspl.errors import ConfigError, ContractError
from daspl.params import ParamStore

logger = logging.getLogger(__name__)

GEOMEAN_FLOOR = 1e-8
ZERO_WEIGHT_TOL = 1e-12


# ==================== Parameter groups ====================

@dataclass
class PatchEmbedderParams:
    patch_size: int
    projection: Tensor
    positional_table: Tensor


@dataclass
class GpsaBlockParams:
    heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    positional_scores: Tensor
    gate: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


@dataclass
class MultiHeadAttentionParams:
    """Per-head projections stacked on the first axis: shape (N, width, d_k)."""

    heads: int
    d_k: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor


@dataclass
class EncoderParams:
    patch: PatchEmbedderParams
    blocks: List[GpsaBlockParams]
    class_token: Tensor
    fc_w: Tensor
    fc_b: Tensor
    mha: MultiHeadAttentionParams
    head_logits: Tensor
    backbone: str = "convit"


def build_encoder_params(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator,
                         prefix: str = "encoder") -> EncoderParams:
    """Register every encoder tensor in ``store`` and group them."""
    if cfg.image_size % cfg.patch_size != 0:
        raise ConfigError(f"image side {cfg.image_size} is not a multiple of patch size {cfg.patch_size}")
    num_patches = (cfg.image_size // cfg.patch_size) ** 2
    patch_pixels = cfg.patch_size ** 2
    d, heads, width = cfg.d_model, cfg.heads, cfg.feature_dim

    patch = PatchEmbedderParams(
        patch_size=cfg.patch_size,
        projection=store.create(f"{prefix}.patch.projection", (patch_pixels, d), "normal", rng),
        positional_table=store.create(f"{prefix}.patch.positional", (num_patches, d), "normal", rng),
    )
    blocks = []
    for b in range(cfg.gpsa_blocks):
        p = f"{prefix}.gpsa{b}"
        blocks.append(GpsaBlockParams(
            heads=heads,
            w_q=store.create(f"{p}.w_q", (d, d), "normal", rng),
            w_k=store.create(f"{p}.w_k", (d, d), "normal", rng),
            w_v=store.create(f"{p}.w_v", (d, d), "normal", rng),
            w_o=store.create(f"{p}.w_o", (d, d), "normal", rng),
            positional_scores=store.create(f"{p}.positional_scores", (heads, num_patches, num_patches), "normal", rng),
            gate=store.create(f"{p}.gate", (heads,), "ones"),
            ffn_w1=store.create(f"{p}.ffn_w1", (d, 2 * d), "normal", rng),
            ffn_b1=store.create(f"{p}.ffn_b1", (2 * d,), "zeros"),
            ffn_w2=store.create(f"{p}.ffn_w2", (2 * d, d), "normal", rng),
            ffn_b2=store.create(f"{p}.ffn_b2", (d,), "zeros"),
        ))
    d_k = width // heads
    mha = MultiHeadAttentionParams(
        heads=heads,
        d_k=d_k,
        w_q=store.create(f"{prefix}.mha.w_q", (heads, width, d_k), "normal", rng),
        w_k=store.create(f"{prefix}.mha.w_k", (heads, width, d_k), "normal", rng),
        w_v=store.create(f"{prefix}.mha.w_v", (heads, width, d_k), "normal", rng),
        w_out=store.create(f"{prefix}.mha.w_out", (width, width), "normal", rng),
    )
    return EncoderParams(
        patch=patch,
        blocks=blocks,
        class_token=store.create(f"{prefix}.class_token", (1, d), "normal", rng),
        fc_w=store.create(f"{prefix}.fc_w", (d, width), "normal", rng),
        fc_b=store.create(f"{prefix}.fc_b", (width,), "zeros"),
        mha=mha,
        head_logits=store.create(f"{prefix}.head_logits", (heads,), "constant", value=1.0 / heads),
        backbone=cfg.backbone,
    )


# ==================== Patch embedding and GPSA ====================

def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a square image into flattened patches in raster order."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ConfigError(f"image must be a square grid, got shape {image.shape}")
    side = image.shape[0]
    if side % patch_size != 0:
        raise ConfigError(f"image side {side} is not a multiple of patch size {patch_size}")
    g = side // patch_size
    blocks = image.reshape(g, patch_size, g, patch_size).transpose(0, 2, 1, 3)
    return blocks.reshape(g * g, patch_size * patch_size)


def patch_embed(image: np.ndarray, params: PatchEmbedderParams) -> Tensor:
    """
    Embed an H×W image as (H/p)² d_model vectors.

    Each vector is ``projection(flattened patch) + positional row``; patches
    are numbered in raster order (row of patches first).

    Raises:
        ConfigError: The image is not square or its side is not a multiple of
                     the patch size, or the positional table has the wrong
                     number of rows.
    """
    patches = extract_patches(image, params.patch_size)
    if patches.shape[0] != params.positional_table.shape[0]:
        raise ConfigError(
            f"image yields {patches.shape[0]} patches but positional table has "
            f"{params.positional_table.shape[0]} rows"
        )
    return ad.matmul(patches, params.projection) + params.positional_table


def _split_heads(x: Tensor, heads: int) -> Tensor:
    seq, width = x.shape
    return ad.transpose(ad.reshape(x, (seq, heads, width // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    heads, seq, d_k = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (seq, heads * d_k))


def gpsa_attention(seq: Tensor, params: GpsaBlockParams, backbone: str = "convit") -> Tensor:
    """
    Mixed attention matrices, shape (heads, P, P).

    Each head blends ``softmax(content scores)`` and
    ``softmax(positional_scores)`` with weight ``sigmoid(gate)`` on the
    positional side. The ``vit`` backbone keeps the content part only.
    """
    length = seq.shape[0]
    if params.positional_scores.shape[-1] != length:
        raise ConfigError(
            f"sequence length {length} does not match positional score side "
            f"{params.positional_scores.shape[-1]}"
        )
    d_k = seq.shape[1] // params.heads
    q = _split_heads(ad.matmul(seq, params.w_q), params.heads)
    k = _split_heads(ad.matmul(seq, params.w_k), params.heads)
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(d_k))
    content = ad.softmax(scores, axis=-1)
    if backbone == "vit":
        return content
    positional = ad.softmax(params.positional_scores, axis=-1)
    g = ad.reshape(ad.sigmoid(params.gate), (params.heads, 1, 1))
    return content + g * (positional - content)


def gpsa_block(seq: Tensor, params: GpsaBlockParams, backbone: str = "convit") -> Tensor:
    """One GPSA layer: gated attention sublayer and GeLU FFN, each with a residual."""
    attention = gpsa_attention(seq, params, backbone)
    v = _split_heads(ad.matmul(seq, params.w_v), params.heads)
    mixed = ad.matmul(_merge_heads(ad.matmul(attention, v)), params.w_o)
    x = seq + mixed
    hidden = ad.gelu(ad.matmul(x, params.ffn_w1) + params.ffn_b1)
    return x + (ad.matmul(hidden, params.ffn_w2) + params.ffn_b2)


# ==================== Multi-head attention ====================

def head_attention(x: Tensor, params: MultiHeadAttentionParams) -> Tuple[Tensor, Tensor]:
    """Return (attention matrices (N, S, S), stacked head outputs (N, S, d_k))."""
    width = x.shape[-1]
    if width != params.heads * params.d_k:
        raise ConfigError(f"model width {width} != heads {params.heads} × d_k {params.d_k}")
    q = ad.matmul(x, params.w_q)
    k = ad.matmul(x, params.w_k)
    v = ad.matmul(x, params.w_v)
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(params.d_k))
    attention = ad.softmax(scores, axis=-1)
    return attention, ad.matmul(attention, v)


def multi_head_attention(x: Tensor, params: MultiHeadAttentionParams,
                         head_weights: Optional[Union[Tensor, np.ndarray]] = None) -> Tuple[List[Tensor], Tensor]:
    """
    Scaled dot-product attention per head.

    Args:
        x (Tensor): Sequence, shape (S, width).
        params: Head projections and output matrix.
        head_weights: Optional per-head scale applied with
                      ``apply_head_weights`` before the heads are merged.

    Returns:
        tuple: (list of N unscaled head outputs each (S, d_k),
        Concat_j(w[j]·head_j)·W of shape (S, width)).

    Raises:
        ConfigError: ``width != N × d_k``.
    """
    _, stacked = head_attention(x, params)
    heads = [stacked[j] for j in range(params.heads)]
    merged = heads if head_weights is None else apply_head_weights(head_weights, heads)
    return heads, ad.matmul(ad.concat(merged, axis=-1), params.w_out)


# ==================== Head weights ====================

def update_head_weights(w_prev: Union[Tensor, Sequence[float], np.ndarray]) -> Tensor:
    """
    ``softmax(w_prev) · N``; the result always sums to N.

    Raises:
        ContractError: ``w_prev`` is empty.

    Examples:
        >>> update_head_weights([0.125] * 8).data
        array([1., 1., 1., 1., 1., 1., 1., 1.])
    """
    w = ad.as_tensor(w_prev)
    if w.size == 0:
        raise ContractError("head weight vector is empty")
    return ad.softmax(w) * float(w.size)


def apply_head_weights(w: Union[Tensor, Sequence[float], np.ndarray], head_outputs: Sequence[Tensor]) -> List[Tensor]:
    """Scale head j by ``w[j]``."""
    w = ad.as_tensor(w)
    if w.ndim != 1 or w.shape[0] != len(head_outputs):
        raise ContractError(f"{w.size} head weights for {len(head_outputs)} heads")
    return [ad.mul(head, w[j]) for j, head in enumerate(head_outputs)]


@dataclass
class DualAttentionState:
    head_outputs: List[np.ndarray]
    w_a: np.ndarray
    w_cos: np.ndarray
    beta: float
    w_dwa: np.ndarray
    base_index: int


def select_base_head(state: Union[DualAttentionState, Sequence[float], np.ndarray]) -> int:
    """Index of the largest learnable head weight; ties go to the lowest index."""
    w_a = state.w_a if isinstance(state, DualAttentionState) else state
    return int(np.argmax(np.asarray(w_a, dtype=np.float64)))


def cosine_head_weights(batch_heads: Sequence[Sequence[np.ndarray]], base_index: int) -> np.ndarray:
    """
    Batch-mean cosine similarity of every head to the base head.

    Args:
        batch_heads: For each sample, its N head outputs (any shape; they are
                     flattened).
        base_index (int): Head everything is compared with.

    Returns:
        np.ndarray: Length-N vector with entries in [-1, 1].

    Raises:
        ContractError: Empty batch, or samples with differing head counts.
    """
    if len(batch_heads) == 0:
        raise ContractError("cosine head weights need a nonempty batch")
    n = len(batch_heads[0])
    total = np.zeros(n)
    with ad.no_grad():
        for heads in batch_heads:
            if len(heads) != n:
                raise ContractError(f"sample exposes {len(heads)} heads, expected {n}")
            flat = np.stack([np.asarray(h, dtype=np.float64).reshape(-1) for h in heads])
            base = np.broadcast_to(flat[base_index], flat.shape)
            total += ad.cosine_similarity(flat, base).data
    return total / len(batch_heads)


def dual_weight(w_cos: Union[Sequence[float], np.ndarray]) -> Tuple[float, np.ndarray]:
    """
    Rebalance cosine weights around their geometric mean.

    ``beta`` is the geometric mean of ``|w_cos|`` (entries floored at 1e-8)
    and ``w_dwa = relu(beta - w_cos)``. Heads least similar to the base head
    get the most weight. When every entry rectifies to zero the uniform
    vector ``1/N`` is returned instead.

    Examples:
        >>> beta, w = dual_weight([1.0, 0.5])
        >>> round(beta, 5), [round(x, 5) for x in w]
        (0.70711, [0.0, 0.20711])
    """
    w_cos = np.asarray(w_cos, dtype=np.float64).reshape(-1)
    if w_cos.size == 0:
        raise ContractError("cosine weight vector is empty")
    floored = np.maximum(np.abs(w_cos), GEOMEAN_FLOOR)
    beta = float(np.exp(np.mean(np.log(floored))))
    w_dwa = np.maximum(beta - w_cos, 0.0)
    # geometric mean of equal entries comes back a few ulps off
    w_dwa[w_dwa <= ZERO_WEIGHT_TOL * max(1.0, beta)] = 0.0
    if not np.any(w_dwa > 0):
        w_dwa = np.full(w_cos.size, 1.0 / w_cos.size)
    return beta, w_dwa


class DualWeightTracker:
    """
    Carries detached head outputs from one training step to the next.

    ``single`` mode pins ``w_dwa`` to ones. In ``dual`` mode the first step
    has no previous heads, so ``w_cos`` is all ones and the uniform fallback
    applies.
    """

    def __init__(self, mode: str = "dual"):
        if mode not in ("single", "dual"):
            raise ContractError(f"unknown weight mode '{mode}'")
        self.mode = mode
        self.prev_heads: Optional[List[List[np.ndarray]]] = None

    def weights(self, w_a: np.ndarray) -> Tuple[np.ndarray, float, np.ndarray, int]:
        """Return (w_cos, beta, w_dwa, base_index) for the current step."""
        n = int(np.asarray(w_a).size)
        base = select_base_head(w_a)
        if self.mode == "single":
            return np.ones(n), 1.0, np.ones(n), base
        if self.prev_heads is None:
            w_cos = np.ones(n)
        else:
            w_cos = cosine_head_weights(self.prev_heads, base)
        beta, w_dwa = dual_weight(w_cos)
        return w_cos, beta, w_dwa, base

    def advance(self, batch_heads: Sequence[Sequence[np.ndarray]]) -> None:
        if self.mode == "dual" and len(batch_heads) > 0:
            self.prev_heads = [[np.array(h, dtype=np.float64) for h in heads] for heads in batch_heads]

    def state_arrays(self) -> Optional[np.ndarray]:
        if self.prev_heads is None:
            return None
        return np.stack([np.stack(heads) for heads in self.prev_heads])

    def load_state_arrays(self, array: Optional[np.ndarray]) -> None:
        if array is None:
            self.prev_heads = None
            return
        self.prev_heads = [[np.array(h) for h in sample] for sample in array]


# ==================== Full encoder ====================

@dataclass
class EncoderOutput:
    weighted_attention: Tensor
    class_feature: Tensor
    tokens: Tensor
    dual_state: DualAttentionState
    head_outputs: List[np.ndarray] = field(default_factory=list)


def encode_batch(images: Sequence[np.ndarray], params: EncoderParams, tracker: DualWeightTracker) -> List[EncoderOutput]:
    """
    Encode a batch that shares one set of head weights.

    Pipeline per image: patch_embed → GPSA stack → append class token (last
    position) → FC projection to feature_dim → multi-head attention → the
    class row of ``Concat_j(w_dwa[j]·w_a[j]·head_j)·W``.
    """
    w_a = update_head_weights(params.head_logits)
    w_cos, beta, w_dwa, base = tracker.weights(w_a.data)
    scale = ad.mul(w_a, w_dwa)
    outputs = []
    for image in images:
        x = patch_embed(image, params.patch)
        for block in params.blocks:
            x = gpsa_block(x, block, params.backbone)
        x = ad.concat([x, params.class_token], axis=0)
        tokens = ad.matmul(x, params.fc_w) + params.fc_b
        heads, attended = multi_head_attention(tokens, params.mha, head_weights=scale)
        head_arrays = [h.data.copy() for h in heads]
        state = DualAttentionState(
            head_outputs=head_arrays,
            w_a=w_a.data.copy(),
            w_cos=w_cos,
            beta=beta,
            w_dwa=w_dwa,
            base_index=base,
        )
        outputs.append(EncoderOutput(
            weighted_attention=attended[-1],
            class_feature=tokens[-1],
            tokens=tokens,
            dual_state=state,
            head_outputs=head_arrays,
        ))
    logger.debug("encoded %d images, base head %d, beta %.4f", len(images), base, beta)
    return outputs


def encode(image: np.ndarray, params: EncoderParams, tracker: DualWeightTracker) -> EncoderOutput:
    """Encode a single image (a batch of one)."""
    return encode_batch([image], params, tracker)[0]
