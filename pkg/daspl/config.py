"""
Config Module

Run configuration for every DA-SPL command. Settings come from two layers:

1. Environment variables (read after ``load_dotenv()`` in the entry script):
   DASPL_SEED, DASPL_LOG_LEVEL, DASPL_OUTPUT_DIR, DASPL_JOBS.
2. An INI run file with the sections [model] [optim] [loss] [decode] [data]
   [modality] [train] and flat ``key = value`` entries.

Every value is validated before any data is touched; all violations are
reported together.
"""

import configparser
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional

from daspl.errors import ConfigError

logger = logging.getLogger(__name__)

WEIGHT_MODES = ("single", "dual")
BACKBONES = ("convit", "vit")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    d_model: int = 64
    heads: int = 8
    gpsa_blocks: int = 2
    feature_dim: int = 512
    hidden_size: int = 512
    embed_dim: int = 512
    label_hidden: int = 64
    weight_mode: str = "dual"
    backbone: str = "convit"
    use_parallel: bool = True
    use_label: bool = True


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.0004
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class LossConfig:
    """
    Weights of the composite objective ``loss1 + lam * loss2 + alpha * loss_t``.

    ``alpha_sweep`` widens the alpha range to include 10, the last point of the
    alpha sweep.
    """

    lam: float = 0.5
    alpha: float = 5.0
    alpha_sweep: bool = False

    def problems(self) -> List[str]:
        found = []
        if not (0.0 < self.lam <= 1.0):
            found.append(f"loss.lambda must lie in (0, 1], got {self.lam}")
        upper_ok = self.alpha <= 10.0 if self.alpha_sweep else self.alpha < 10.0
        if not (self.alpha >= 1.0 and upper_ok):
            bound = "[1, 10]" if self.alpha_sweep else "[1, 10)"
            found.append(f"loss.alpha must lie in {bound}, got {self.alpha}")
        return found


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 5
    max_len: int = 60


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "data/train.jsonl"
    folds: int = 10
    eval_folds: int = 1
    seed: int = 0


@dataclass(frozen=True)
class ModalityFlags:
    image: bool = True
    corpus: bool = True
    factor: bool = True

    def any_enabled(self) -> bool:
        return self.image or self.corpus or self.factor

    def marks(self) -> str:
        return " ".join("✓" if flag else "✗" for flag in (self.image, self.corpus, self.factor))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    checkpoint_every: int = 0
    output_dir: str = "runs"
    checkpoint_name: str = "model.ckpt"
    log_name: str = "train_log.jsonl"
    progress: bool = True


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    modality: ModalityFlags = field(default_factory=ModalityFlags)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, Any]]) -> "RunConfig":
        return cls(
            model=ModelConfig(**data.get("model", {})),
            optim=OptimConfig(**data.get("optim", {})),
            loss=LossConfig(**data.get("loss", {})),
            decode=DecodeConfig(**data.get("decode", {})),
            data=DataConfig(**data.get("data", {})),
            modality=ModalityFlags(**data.get("modality", {})),
            train=TrainConfig(**data.get("train", {})),
        )


def desk_scale(base: Optional[RunConfig] = None) -> RunConfig:
    """Small preset used by the overfit run and the ablation drivers."""
    base = base or RunConfig()
    return replace(
        base,
        model=replace(base.model, feature_dim=64, hidden_size=64, embed_dim=32, label_hidden=32),
        train=replace(base.train, batch_size=1),
    )


# ==================== Environment ====================

@dataclass(frozen=True)
class EnvSettings:
    seed: int = 0
    log_level: str = "INFO"
    output_dir: str = "runs"
    jobs: int = 1


def env_settings() -> EnvSettings:
    """
    Read DASPL_* variables from the process environment.

    Raises:
        ConfigError: A numeric variable does not parse or is out of range.
    """
    problems = []

    def _int(name: str, default: int) -> int:
        raw = os.getenv(name)
        if raw is None or raw.strip() == "":
            return default
        try:
            return int(raw)
        except ValueError:
            problems.append(f"{name} must be an integer, got {raw!r}")
            return default

    seed = _int("DASPL_SEED", 0)
    jobs = _int("DASPL_JOBS", 1)
    if jobs < 1:
        problems.append(f"DASPL_JOBS must be >= 1, got {jobs}")
    level = os.getenv("DASPL_LOG_LEVEL", "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        problems.append(f"DASPL_LOG_LEVEL must be a logging level name, got {level!r}")
    if problems:
        raise ConfigError("invalid environment", problems)
    return EnvSettings(seed=seed, log_level=level, output_dir=os.getenv("DASPL_OUTPUT_DIR", "runs"), jobs=jobs)


# ==================== INI parsing ====================

_SECTIONS = {
    "model": ModelConfig,
    "optim": OptimConfig,
    "loss": LossConfig,
    "decode": DecodeConfig,
    "data": DataConfig,
    "modality": ModalityFlags,
    "train": TrainConfig,
}

# INI spellings that differ from the dataclass field names
_ALIASES = {("loss", "lambda"): "lam"}


def _coerce(raw: str, template: Any, key: str, problems: List[str]) -> Any:
    text = raw.strip()
    if isinstance(template, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        problems.append(f"{key}: expected a boolean, got {raw!r}")
        return template
    if isinstance(template, int):
        try:
            return int(text)
        except ValueError:
            problems.append(f"{key}: expected an integer, got {raw!r}")
            return template
    if isinstance(template, float):
        try:
            return float(text)
        except ValueError:
            problems.append(f"{key}: expected a number, got {raw!r}")
            return template
    return text


def parse_run_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """
    Parse INI text into a RunConfig, starting from ``base`` (defaults if None).

    Raises:
        ConfigError: Unknown sections or keys, values of the wrong type, or
                     any failure reported by ``validate_run_config``.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("run config is not valid INI", [str(exc)]) from None

    base = base or RunConfig()
    problems: List[str] = []
    sections: Dict[str, Any] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        current = getattr(base, section)
        known = {f.name for f in fields(current)}
        updates = {}
        for key, raw in parser.items(section):
            name = _ALIASES.get((section, key), key)
            if name not in known:
                problems.append(f"[{section}] unknown key '{key}'")
                continue
            updates[name] = _coerce(raw, getattr(current, name), f"{section}.{key}", problems)
        sections[section] = replace(current, **updates)
    if problems:
        raise ConfigError("invalid run config", problems)

    cfg = replace(base, **sections)
    problems = validate_run_config(cfg)
    if problems:
        raise ConfigError("invalid run config", problems)
    return cfg


def load_run_config(path: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Read and validate an INI run file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        cfg = parse_run_config(f.read(), base)
    logger.info("loaded run config from %s", path)
    return cfg


def validate_run_config(cfg: RunConfig) -> List[str]:
    """
    Check every value against the preconditions of the modules that use it.

    Returns:
        list: Human-readable violations, empty when the config is valid.
    """
    problems: List[str] = []
    m = cfg.model
    for name in ("image_size", "patch_size", "d_model", "heads", "gpsa_blocks",
                 "feature_dim", "hidden_size", "embed_dim", "label_hidden"):
        if getattr(m, name) < 1:
            problems.append(f"model.{name} must be >= 1, got {getattr(m, name)}")
    if m.patch_size >= 1 and m.image_size % m.patch_size != 0:
        problems.append(f"model.image_size {m.image_size} is not a multiple of model.patch_size {m.patch_size}")
    if m.heads >= 1 and m.d_model % m.heads != 0:
        problems.append(f"model.d_model {m.d_model} is not divisible by model.heads {m.heads}")
    if m.heads >= 1 and m.feature_dim % m.heads != 0:
        problems.append(f"model.feature_dim {m.feature_dim} is not divisible by model.heads {m.heads}")
    if m.weight_mode not in WEIGHT_MODES:
        problems.append(f"model.weight_mode must be one of {WEIGHT_MODES}, got {m.weight_mode!r}")
    if m.backbone not in BACKBONES:
        problems.append(f"model.backbone must be one of {BACKBONES}, got {m.backbone!r}")

    o = cfg.optim
    if o.lr < 0:
        problems.append(f"optim.lr must be >= 0, got {o.lr}")
    if o.weight_decay < 0:
        problems.append(f"optim.weight_decay must be >= 0, got {o.weight_decay}")
    for name in ("beta1", "beta2"):
        if not (0.0 <= getattr(o, name) < 1.0):
            problems.append(f"optim.{name} must lie in [0, 1), got {getattr(o, name)}")
    if o.eps <= 0:
        problems.append(f"optim.eps must be > 0, got {o.eps}")

    problems.extend(cfg.loss.problems())

    if cfg.decode.beam_width < 1:
        problems.append(f"decode.beam_width must be >= 1, got {cfg.decode.beam_width}")
    if cfg.decode.max_len < 1:
        problems.append(f"decode.max_len must be >= 1, got {cfg.decode.max_len}")

    d = cfg.data
    if d.folds < 2:
        problems.append(f"data.folds must be >= 2, got {d.folds}")
    if not (1 <= d.eval_folds <= max(d.folds, 1)):
        problems.append(f"data.eval_folds must lie in [1, data.folds], got {d.eval_folds}")

    if not cfg.modality.any_enabled():
        problems.append("modality: at least one of image, corpus, factor must be enabled")

    t = cfg.train
    if t.epochs < 0:
        problems.append(f"train.epochs must be >= 0, got {t.epochs}")
    if t.batch_size < 1:
        problems.append(f"train.batch_size must be >= 1, got {t.batch_size}")
    if t.checkpoint_every < 0:
        problems.append(f"train.checkpoint_every must be >= 0, got {t.checkpoint_every}")
    return problems
