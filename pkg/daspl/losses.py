"""
Losses Module

Cross-entropy for both decoder heads, multi-label soft-margin loss for the
label module, and the weighted composite objective.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np

from daspl import autodiff as ad
from daspl.autodiff import Tensor
from daspl.config import LossConfig
from daspl.errors import ConfigError, ContractError, ShapeError

PROB_FLOOR = 1e-12

Scalar = Union[Tensor, float]


def cross_entropy(pred_sequence: Tensor, target: Sequence[int], pad_mask: Optional[Sequence[bool]] = None) -> Tensor:
    """
    Mean of ``-log pred[t, target[t]]`` over unmasked steps.

    Args:
        pred_sequence (Tensor): (L, V) rows of probabilities.
        target: L token ids.
        pad_mask: L booleans, True where the step counts. Defaults to all True.

    Returns:
        Tensor: Scalar loss; probabilities are floored at 1e-12.

    Raises:
        ShapeError: Lengths differ.
        ContractError: Target outside the vocabulary, or every step masked.

    Examples:
        >>> cross_entropy(Tensor([[0.5, 0.5]]), [1]).item()  # log 2
        0.6931471805599453
    """
    target = np.asarray(target, dtype=np.int64)
    length, vocab = pred_sequence.shape
    if target.shape != (length,):
        raise ShapeError(f"cross_entropy: {length} prediction steps, {target.size} targets")
    if target.size and (target.min() < 0 or target.max() >= vocab):
        raise ContractError(f"cross_entropy: target ids outside vocabulary of size {vocab}")
    mask = np.ones(length, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if mask.shape != (length,):
        raise ShapeError(f"cross_entropy: mask length {mask.size} != {length}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("cross_entropy: every step is masked")
    one_hot = np.zeros((length, vocab))
    one_hot[np.arange(length), target] = 1.0
    picked = ad.sum_(ad.mul(pred_sequence, one_hot), axis=1)
    nll = ad.scalar_mul(ad.log(ad.clamp_min(picked, PROB_FLOOR)), -1.0)
    return ad.sum_(ad.mul(nll, mask.astype(np.float64))) * (1.0 / count)


def multilabel_softmargin(label: Tensor, truth: Sequence[float]) -> Tensor:
    """
    ``-(1/C) Σ [t·log σ(x) + (1-t)·log(1-σ(x))]`` over the C label entries.

    Raises:
        ContractError: Lengths differ or truth entries are not 0/1.

    Examples:
        >>> multilabel_softmargin(Tensor([0.0, 0.0]), [1, 0]).item()  # log 2
        0.6931471805599453
    """
    label = ad.as_tensor(label)
    truth = np.asarray(truth, dtype=np.float64)
    if label.shape != truth.shape or label.ndim != 1:
        raise ContractError(f"multilabel_softmargin: label shape {label.shape} vs truth shape {truth.shape}")
    if not np.all((truth == 0.0) | (truth == 1.0)):
        raise ContractError("multilabel_softmargin: truth entries must be 0 or 1")
    positive = ad.mul(ad.log_sigmoid(label), truth)
    negative = ad.mul(ad.log_sigmoid(ad.scalar_mul(label, -1.0)), 1.0 - truth)
    return ad.scalar_mul(ad.sum_(positive + negative), -1.0 / truth.size)


@dataclass
class LossBreakdown:
    loss1: Tensor
    loss2: Tensor
    loss_t: Tensor
    total: Tensor

    def values(self) -> Dict[str, float]:
        return {
            "loss1": self.loss1.item(),
            "loss2": self.loss2.item(),
            "loss_t": self.loss_t.item(),
            "total": self.total.item(),
        }


def composite_loss(l1: Scalar, l2: Scalar, lt: Scalar, cfg: LossConfig) -> LossBreakdown:
    """
    ``total = l1 + lam·l2 + alpha·lt``.

    Raises:
        ConfigError: ``lam`` or ``alpha`` outside its range.

    Examples:
        >>> composite_loss(2.0, 1.0, 0.3, LossConfig()).total.item()
        4.0
    """
    problems = cfg.problems()
    if problems:
        raise ConfigError("invalid loss weights", problems)
    l1, l2, lt = ad.as_tensor(l1), ad.as_tensor(l2), ad.as_tensor(lt)
    total = ad.add(ad.add(l1, ad.scalar_mul(l2, cfg.lam)), ad.scalar_mul(lt, cfg.alpha))
    return LossBreakdown(loss1=l1, loss2=l2, loss_t=lt, total=total)
