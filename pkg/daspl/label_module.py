"""
Label Module

Category-prediction LSTM over the embedded generated report. Its softmax
label distribution feeds the multi-label soft-margin loss that regularises
report generation.
"""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from daspl import autodiff as ad
from daspl.autodiff import Tensor
from daspl.decoder import LstmCellParams, build_lstm_params, lstm_drive, lstm_unroll
from daspl.errors import ContractError
from daspl.params import ParamStore

RISK_LABEL = "high_risk"


@dataclass(frozen=True)
class LabelVocabulary:
    names: tuple

    def __post_init__(self):
        if len(self.names) < 1:
            raise ContractError("label vocabulary needs at least one label")
        if len(set(self.names)) != len(self.names):
            raise ContractError(f"label names must be unique: {list(self.names)}")

    @property
    def n(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        if name not in self.names:
            raise ContractError(f"unknown label '{name}', expected one of {list(self.names)}")
        return self.names.index(name)


@dataclass
class LabelParams:
    lstm: LstmCellParams
    w_t: Tensor
    b_t: Tensor


def build_label_params(store: ParamStore, embed_dim: int, hidden_size: int, n_labels: int,
                       rng: np.random.Generator, prefix: str = "label") -> LabelParams:
    return LabelParams(
        lstm=build_lstm_params(store, f"{prefix}.lstm", embed_dim, hidden_size, rng),
        w_t=store.create(f"{prefix}.w_t", (hidden_size, n_labels), "normal", rng),
        b_t=store.create(f"{prefix}.b_t", (n_labels,), "zeros"),
    )


def embed_report(p2_sequence: Tensor, embedding_table: Tensor, training: bool = True) -> Tensor:
    """
    Embed a generated report given as per-step vocabulary distributions.

    Training mode mixes embedding rows by the distribution (``p2 @ table``)
    so gradients reach the decoder; inference mode looks up the argmax token.

    Raises:
        ContractError: Empty sequence or vocabulary size mismatch.
    """
    if p2_sequence.ndim != 2 or p2_sequence.shape[0] == 0:
        raise ContractError(f"report distribution sequence must be nonempty (L, V), got {p2_sequence.shape}")
    if p2_sequence.shape[1] != embedding_table.shape[0]:
        raise ContractError(
            f"distributions over {p2_sequence.shape[1]} tokens, embedding table has {embedding_table.shape[0]} rows"
        )
    if training:
        return ad.matmul(p2_sequence, embedding_table)
    return ad.embedding(embedding_table, np.argmax(p2_sequence.data, axis=1))


def label_logits(rp: Tensor, params: LabelParams) -> Tensor:
    """Run the category LSTM over ``rp`` and return ``W_t·h + b_t`` for its final hidden state."""
    if rp.ndim != 2 or rp.shape[0] == 0:
        raise ContractError(f"report embedding must be a nonempty (L, E) sequence, got {rp.shape}")
    hidden = lstm_unroll(lstm_drive([rp], params.lstm), params.lstm)
    return ad.matmul(hidden[-1], params.w_t) + params.b_t


def predict_labels(rp: Tensor, params: LabelParams) -> Tensor:
    """``softmax(label_logits(rp))``, one probability per label."""
    return ad.softmax(label_logits(rp, params))


def predicts_high_risk(label: np.ndarray, risk_index: int) -> bool:
    """The risk bit is on when its entry exceeds half the uniform share."""
    label = np.asarray(label, dtype=np.float64)
    return bool(label[risk_index] > 0.5 / label.size)


def risk_accuracy(labels: Sequence[np.ndarray], truths: Sequence[np.ndarray], risk_index: int) -> float:
    if len(labels) == 0:
        raise ContractError("risk accuracy needs at least one sample")
    hits: List[bool] = [
        predicts_high_risk(label, risk_index) == bool(truth[risk_index] > 0.5)
        for label, truth in zip(labels, truths)
    ]
    return float(np.mean(hits))
