"""
Training Module

Teacher-forced training loop: encoder → parallel decoder → label module,
composite loss, backward pass, Adam step. Writes one JSON line per epoch and
checkpoints atomically at the end (and every ``checkpoint_every`` epochs).
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from daspl.autodiff import backward, first_non_finite
from daspl.checkpoint import save_checkpoint
from daspl.config import RunConfig
from daspl.dataset import ModelInputs
from daspl.errors import ContractError, NonFiniteError
from daspl.model import DasplModel
from daspl.optim import Adam
from daspl.text import Vocabulary

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    history: List[Dict[str, float]] = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    log_path: Optional[str] = None

    @property
    def initial(self) -> Optional[Dict[str, float]]:
        return self.history[0] if self.history else None

    @property
    def final(self) -> Optional[Dict[str, float]]:
        return self.history[-1] if self.history else None


def _batches(size: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(size)
    return [order[i:i + batch_size] for i in range(0, size, batch_size)]


def train_step(model: DasplModel, batch: Sequence[ModelInputs], cfg: RunConfig, optimizer: Adam) -> Dict[str, float]:
    """
    One optimisation step on ``batch``.

    Raises:
        NonFiniteError: A loss component or gradient is NaN/Inf; the message
                        names the first offender.
    """
    optimizer.zero_grad()
    result = model.forward(batch, training=True)
    breakdown = model.loss(result, batch, cfg.loss)
    values = breakdown.values()
    offender = first_non_finite(values.items())
    if offender is not None:
        raise NonFiniteError("non-finite loss", offender)
    backward(breakdown.total)
    offender = first_non_finite((name, t.grad) for name, t in model.store if t.grad is not None)
    if offender is not None:
        raise NonFiniteError("non-finite gradient", f"{offender}.grad")
    optimizer.step()
    model.tracker.advance(result.head_outputs)
    return values


def train(dataset: Sequence[ModelInputs], model: DasplModel, vocab: Vocabulary, cfg: RunConfig,
          epochs: Optional[int] = None, out_dir: Optional[str] = None) -> TrainResult:
    """
    Train ``model`` on ``dataset`` and checkpoint it.

    Args:
        dataset: Model-ready samples (already modality-masked).
        model (DasplModel): Model to update in place.
        vocab (Vocabulary): Stored in the checkpoint.
        cfg (RunConfig): Optimiser, loss and training settings.
        epochs (int): Overrides ``cfg.train.epochs`` when given.
        out_dir (str): Where the log and checkpoint go; defaults to
                       ``cfg.train.output_dir``. None values in both skip
                       writing files.

    Returns:
        TrainResult: Per-epoch mean loss records and output paths. With zero
        epochs the checkpoint holds the initial weights.

    Raises:
        ContractError: Empty dataset.
        NonFiniteError: Training diverged.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    epochs = cfg.train.epochs if epochs is None else epochs
    out_dir = cfg.train.output_dir if out_dir is None else out_dir
    optimizer = Adam(model.store.tensors(), cfg.optim)
    result = TrainResult()
    log_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.log_path = os.path.join(out_dir, cfg.train.log_name)
        result.checkpoint_path = os.path.join(out_dir, cfg.train.checkpoint_name)
        log_file = open(result.log_path, "w", encoding="utf-8")

    logger.info("training on %d samples for %d epochs", len(dataset), epochs)
    try:
        bar = tqdm(range(epochs), desc="train", disable=not cfg.train.progress)
        for epoch in bar:
            start = time.perf_counter()
            rng = np.random.default_rng([cfg.data.seed, epoch])
            rows = []
            for index in _batches(len(dataset), cfg.train.batch_size, rng):
                rows.append(train_step(model, [dataset[i] for i in index], cfg, optimizer))
            record = {key: float(np.mean([r[key] for r in rows])) for key in ("loss1", "loss2", "loss_t", "total")}
            record = {"epoch": epoch + 1, **record, "wall_time": time.perf_counter() - start}
            result.history.append(record)
            bar.set_postfix(total=f"{record['total']:.4f}")
            logger.debug("epoch %d: %s", epoch + 1, record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            every = cfg.train.checkpoint_every
            if result.checkpoint_path and every and (epoch + 1) % every == 0 and epoch + 1 < epochs:
                save_checkpoint(result.checkpoint_path, model, vocab, cfg)
    finally:
        if log_file is not None:
            log_file.close()

    if result.checkpoint_path:
        save_checkpoint(result.checkpoint_path, model, vocab, cfg)
    w_a = model.head_weights()
    ratio = float(w_a.max() / np.median(w_a))
    logger.info("final head weights %s (max/median %.3f)", np.round(w_a, 4).tolist(), ratio)
    return result
