"""
CLI Module

Command-line surface: gen-data, train, generate, evaluate, ablate, gradcheck.
Library errors are turned into a message and an exit code here and nowhere
else: 0 success, 1 validation/config/parse error, 2 runtime or numeric
failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional, Sequence

from daspl.ablation import SWEEPS, run_ablation
from daspl.checkpoint import load_checkpoint
from daspl.config import RunConfig, desk_scale, env_settings, load_run_config, validate_run_config
from daspl.dataset import (
    FACTOR_DIM,
    LABEL_NAMES,
    REQUIRED_FIELDS,
    build_vocabulary,
    generate_dataset,
    load_jsonl,
    mask_modalities,
    published_sample,
    save_jsonl,
    to_model_inputs,
)
from daspl.errors import ConfigError, DasplError, ValidationError
from daspl.gradcheck import BLOCKS, run_gradcheck
from daspl.label_module import risk_accuracy
from daspl.metrics import TokenizedPair, score_corpus
from daspl.model import DasplModel
from daspl.text import detokenize
from daspl.training import train

logger = logging.getLogger(__name__)


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _run_config(path: Optional[str], use_desk_scale: bool, epochs: Optional[int] = None) -> RunConfig:
    """Load the run config, apply the ``--epochs`` override and validate the result."""
    cfg = desk_scale() if use_desk_scale else RunConfig()
    if path:
        cfg = load_run_config(path, cfg)
    if epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=epochs))
    problems = validate_run_config(cfg)
    if problems:
        raise ConfigError("invalid run config", problems)
    return cfg


def _read_lines(path: str) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


# ==================== Commands ====================

def cmd_gen_data(args: argparse.Namespace) -> int:
    """Write ``count`` synthetic samples (or the published sample) as JSON lines."""
    samples = [published_sample()] if args.published_sample else generate_dataset(args.count, args.seed, args.risk_mix)
    save_jsonl(args.out, samples)
    high = sum(1 for s in samples if s.high_risk)
    print(f"✅ wrote {len(samples)} samples to {args.out}")
    print(f"   high risk: {high}  low risk: {len(samples) - high}")
    print(f"   fields: {', '.join(REQUIRED_FIELDS)}, additional_observations, report")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _run_config(args.config, args.desk_scale, args.epochs)
    dataset_path = args.dataset or cfg.data.dataset
    samples = load_jsonl(dataset_path)
    if not samples:
        raise ValidationError(f"dataset {dataset_path} is empty")
    vocab = build_vocabulary(samples)
    inputs = [mask_modalities(to_model_inputs(s, vocab, cfg.model.image_size), cfg.modality) for s in samples]
    model = DasplModel(cfg.model, len(vocab), LABEL_NAMES, FACTOR_DIM, cfg.data.seed)
    out_dir = args.out_dir or cfg.train.output_dir
    print(f"🚀 training on {len(samples)} samples (vocab {len(vocab)}, {model.store.count()} weights)")
    result = train(inputs, model, vocab, cfg, out_dir=out_dir)
    if result.final:
        print(f"📉 total loss {result.initial['total']:.4f} → {result.final['total']:.4f}")
    if model.label is not None:
        labels = [model.predict_label(item, 1, cfg.decode.max_len) for item in inputs]
        accuracy = risk_accuracy(labels, [item.labels for item in inputs], model.risk_index)
        print(f"🩺 risk accuracy on the training set: {accuracy:.2f}")
    w_a = model.head_weights()
    print(f"🎯 head weights: {', '.join(f'{w:.3f}' for w in w_a)}")
    print(f"✅ checkpoint: {result.checkpoint_path}")
    print(f"✅ log: {result.log_path}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    loaded = load_checkpoint(args.checkpoint)
    cfg = loaded.config
    width = args.beam_width or cfg.decode.beam_width
    max_len = args.max_len or cfg.decode.max_len
    samples = load_jsonl(args.input)
    lines = []
    for sample in samples:
        inputs = mask_modalities(to_model_inputs(sample, loaded.vocab, cfg.model.image_size, strict=True), cfg.modality)
        ids = loaded.model.generate(inputs, width, max_len)
        lines.append(detokenize(loaded.vocab.decode(ids)))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("".join(line + "\n" for line in lines))
    for line in lines:
        print(line)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    candidates = _read_lines(args.candidates)
    references = _read_lines(args.references)
    if len(candidates) != len(references):
        raise ValidationError(
            f"line count mismatch: {len(candidates)} candidates vs {len(references)} references"
        )
    if not candidates:
        raise ValidationError("no reports to evaluate")
    pairs = [TokenizedPair.from_text(c, [r]) for c, r in zip(candidates, references)]
    report = score_corpus(pairs, jobs=args.jobs)
    percent = report.as_percent()
    print("  ".join(f"{name} {value:.2f}" for name, value in percent.items()))
    print(json.dumps({name: float(f"{value:.2f}") for name, value in percent.items()}))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _run_config(args.config, args.desk_scale, args.epochs)
    samples = load_jsonl(args.dataset or cfg.data.dataset)
    table = run_ablation(args.sweep, samples, cfg, jobs=args.jobs)
    text = table.to_markdown()
    if args.out:
        directory = os.path.dirname(args.out)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradcheck(seed=args.seed, names=args.block or None)
    failed = [r.name for r in results if not r.passed]
    for r in results:
        mark = "✅" if r.passed else "❌"
        print(f"{mark} {r.name:<16} max relative error {r.error:.2e}  ({r.seconds:.1f}s)")
    if failed:
        print(f"❌ gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


# ==================== Parser ====================

def build_parser(seed: int = 0, jobs: int = 1) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daspl", description="DA-SPL glaucoma report generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", required=True)
    p.add_argument("--risk-mix", type=float, default=0.5, help="probability of a high-risk sample")
    p.add_argument("--published-sample", action="store_true", help="write only the published example record")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train and checkpoint a model")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--desk-scale", action="store_true", help="start from the small preset")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("generate", help="generate reports from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="JSON lines file of samples")
    p.add_argument("--beam-width", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("evaluate", help="score candidate reports against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--jobs", type=int, default=jobs)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an ablation sweep")
    p.add_argument("--config")
    p.add_argument("--sweep", choices=SWEEPS, required=True)
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=jobs)
    p.add_argument("--desk-scale", action="store_true")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--block", action="append", choices=list(BLOCKS))
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        env = env_settings()
    except ConfigError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return exc.exit_code
    configure_logging(env.log_level)
    parser = build_parser(seed=env.seed, jobs=env.jobs)
    args = parser.parse_args(argv)
    if getattr(args, "out_dir", None) is None and hasattr(args, "out_dir") and os.getenv("DASPL_OUTPUT_DIR"):
        args.out_dir = env.output_dir
    try:
        return args.handler(args)
    except DasplError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"❌ I/O error: {exc}", file=sys.stderr)
        return 2
