"""
Ablation Module

Sweep drivers: one cross-validated train/evaluate run per sweep point,
collected into a markdown table.

Sweeps:
- alpha: label-loss weight 1..10
- modality: the seven non-empty image/corpus/factor combinations (the empty
  one is shown as a rejected dash row)
- weight: single vs dual head weights
- component: +DAM, +PLN, +LEM, +all
- backbone: ViT / ConViT encoder under single and dual weights
"""

import logging
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from daspl.config import ModalityFlags, RunConfig
from daspl.dataset import (
    FACTOR_DIM,
    LABEL_NAMES,
    GlaucomaSample,
    ModelInputs,
    build_vocabulary,
    mask_modalities,
    split_folds,
    to_model_inputs,
)
from daspl.errors import ConfigError, ContractError
from daspl.metrics import MetricReport, TokenizedPair, score_corpus
from daspl.model import DasplModel
from daspl.text import tokenize
from daspl.training import train

logger = logging.getLogger(__name__)

SWEEPS = ("alpha", "modality", "weight", "component", "backbone")
METRIC_COLUMNS = ("B-1", "B-2", "B-3", "B-4", "ROU", "CID")

COMPONENTS = {
    "+DAM": (False, False),
    "+PLN": (True, False),
    "+LEM": (False, True),
    "+all": (True, True),
}


@dataclass
class SweepPoint:
    label: Dict[str, str]
    config: RunConfig


@dataclass
class AblationTable:
    sweep: str
    columns: List[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(self.columns) + " |", "|" + "|".join("---" for _ in self.columns) + "|"]
        for row in self.rows:
            cells = []
            for col in self.columns:
                value = row.get(col, "-")
                cells.append(f"{value:.2f}" if isinstance(value, float) else str(value))
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines)


def sweep_points(sweep: str, base: RunConfig) -> List[SweepPoint]:
    """Expand a sweep name into labelled run configs."""
    if sweep == "alpha":
        return [
            SweepPoint({"α": str(a)}, replace(base, loss=replace(base.loss, alpha=float(a), alpha_sweep=True)))
            for a in range(1, 11)
        ]
    if sweep == "modality":
        points = []
        for image, corpus, factor in product((True, False), repeat=3):
            flags = ModalityFlags(image, corpus, factor)
            if flags.any_enabled():
                label = dict(zip(("Image", "Corpus", "Factor"), flags.marks().split()))
                points.append(SweepPoint(label, replace(base, modality=flags)))
        return points
    if sweep == "weight":
        return [
            SweepPoint({"Weight": mode}, replace(base, model=replace(base.model, weight_mode=mode)))
            for mode in ("single", "dual")
        ]
    if sweep == "component":
        return [
            SweepPoint({"Model": name}, replace(base, model=replace(base.model, use_parallel=par, use_label=lab)))
            for name, (par, lab) in COMPONENTS.items()
        ]
    if sweep == "backbone":
        return [
            SweepPoint(
                {"Backbone": "ViT" if backbone == "vit" else "ConViT", "Weight": mode},
                replace(base, model=replace(base.model, backbone=backbone, weight_mode=mode)),
            )
            for backbone, mode in product(("vit", "convit"), ("single", "dual"))
        ]
    raise ConfigError(f"unknown sweep '{sweep}'", [f"expected one of {', '.join(SWEEPS)}"])


def evaluate_point(samples: Sequence[GlaucomaSample], cfg: RunConfig, epochs: int,
                   jobs: int = 1) -> Dict[str, float]:
    """
    Cross-validated run: train on each requested fold's training part, beam
    decode its validation part, average the metrics over folds.

    The vocabulary of a fold is built from its training samples only; words
    that appear only in the validation part map to ``<unk>``.
    """
    folds = split_folds(len(samples), cfg.data.folds, cfg.data.seed)[: cfg.data.eval_folds]
    reports: List[MetricReport] = []
    ratios = []
    for train_idx, val_idx in folds:
        vocab = build_vocabulary([samples[i] for i in train_idx])

        def encode(i: int) -> ModelInputs:
            return mask_modalities(to_model_inputs(samples[i], vocab, cfg.model.image_size), cfg.modality)

        model = DasplModel(cfg.model, len(vocab), LABEL_NAMES, FACTOR_DIM, cfg.data.seed)
        train([encode(i) for i in train_idx], model, vocab, cfg, epochs=epochs, out_dir="")
        pairs = []
        for i in val_idx:
            ids = model.generate(encode(i), cfg.decode.beam_width, cfg.decode.max_len)
            pairs.append(TokenizedPair(tuple(vocab.decode(ids)), (tuple(tokenize(samples[i].report)),)))
        reports.append(score_corpus(pairs, jobs=jobs))
        w_a = model.head_weights()
        ratios.append(float(w_a.max() / np.median(w_a)))
    percents = [r.as_percent() for r in reports]
    row = {col: float(np.mean([p[col] for p in percents])) for col in METRIC_COLUMNS}
    row["w_a max/median"] = float(np.mean(ratios))
    return row


def run_ablation(sweep: str, samples: Sequence[GlaucomaSample], base: RunConfig,
                 epochs: Optional[int] = None, jobs: int = 1) -> AblationTable:
    """
    Run every point of ``sweep`` and collect one table row per point.

    Raises:
        ConfigError: Unknown sweep name.
        ContractError: Fewer samples than folds.
    """
    points = sweep_points(sweep, base)
    if len(samples) < base.data.folds:
        raise ContractError(f"{len(samples)} samples cannot fill {base.data.folds} folds")
    epochs = base.train.epochs if epochs is None else epochs
    label_cols = list(points[0].label)
    extra = ["w_a max/median"] if sweep in ("weight", "backbone") else []
    table = AblationTable(sweep=sweep, columns=label_cols + list(METRIC_COLUMNS) + extra)
    quiet = replace(base.train, progress=False)
    for point in tqdm(points, desc=f"ablate {sweep}", disable=not base.train.progress):
        cfg = replace(point.config, train=quiet)
        logger.info("sweep %s point %s", sweep, point.label)
        row = dict(point.label)
        row.update(evaluate_point(samples, cfg, epochs, jobs))
        table.rows.append({k: v for k, v in row.items() if k in table.columns})
    if sweep == "modality":
        try:
            mask_modalities(to_model_inputs(samples[0], build_vocabulary(samples[:1]), base.model.image_size),
                            ModalityFlags(False, False, False))
        except ContractError:
            table.rows.append({"Image": "✗", "Corpus": "✗", "Factor": "✗"})
    return table
