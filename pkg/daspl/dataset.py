"""
Dataset Module

Synthetic multimodal glaucoma records with the public dataset's field names,
plus everything needed to feed them to the model:

- generate_sample / generate_dataset: seeded record generator
- render_fundus: grayscale fundus-like image drawn from the record
- encode_factors / label_vector: structured inputs and multi-hot targets
- load_jsonl / save_jsonl: line-delimited JSON, unknown fields kept
- split_folds: seeded k-fold partitions (scikit-learn KFold)
- mask_modalities: neutral replacements for disabled input modalities

Random draws use numpy's PCG64 generator seeded with ``[seed, index]``, so a
record depends only on the run seed and its position.
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import KFold

from daspl.config import ModalityFlags
from daspl.errors import ContractError, ParseError, ValidationError, VocabularyMismatchError
from daspl.text import Vocabulary, tokenize

logger = logging.getLogger(__name__)

DISC_SIZES = ("small", "medium", "large")
RISKS = ("high risk", "low risk")
RIM_COLORS = ("pink", "pale")
BOOLEAN_FACTORS = (
    "isnt_rule_followed",
    "rim_pallor",
    "bayoneting",
    "sharp_edge",
    "laminar_dot_sign",
    "notching",
    "rim_thinning",
)
LABEL_NAMES = BOOLEAN_FACTORS + ("high_risk",)

# Factor vector index map
FACTOR_INDEX = {
    "optic_disc_size=small": 0,
    "optic_disc_size=medium": 1,
    "optic_disc_size=large": 2,
    "cup_to_disc_ratio": 3,
    "isnt_rule_followed": 4,
    "rim_pallor": 5,
    "bayoneting": 6,
    "sharp_edge": 7,
    "laminar_dot_sign": 8,
    "notching": 9,
    "rim_thinning": 10,
    "rim_color=pale": 11,
    "confidence_level": 12,
}
FACTOR_DIM = len(FACTOR_INDEX)

REQUIRED_FIELDS = (
    "optic_disc_size",
    "cup_to_disc_ratio",
) + BOOLEAN_FACTORS + (
    "rim_color",
    "neuroretinal_rim",
    "glaucoma_risk_assessment",
    "confidence_level",
)
KNOWN_FIELDS = REQUIRED_FIELDS + ("additional_observations", "report", "image_path")

_DIGITS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")

_FINDING_PHRASES = {
    "rim_pallor": "rim pallor",
    "bayoneting": "bayoneting",
    "sharp_edge": "sharp edge",
    "laminar_dot_sign": "laminar dot sign",
    "notching": "notching",
    "rim_thinning": "rim thinning",
}


@dataclass
class GlaucomaSample:
    optic_disc_size: str
    cup_to_disc_ratio: float
    isnt_rule_followed: bool
    rim_pallor: bool
    bayoneting: bool
    sharp_edge: bool
    laminar_dot_sign: bool
    notching: bool
    rim_thinning: bool
    rim_color: str
    neuroretinal_rim: str
    glaucoma_risk_assessment: str
    confidence_level: float
    additional_observations: Optional[str] = None
    report: str = ""
    image_path: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def high_risk(self) -> bool:
        return self.glaucoma_risk_assessment == "high risk"

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {name: getattr(self, name) for name in REQUIRED_FIELDS}
        record["additional_observations"] = self.additional_observations
        record["report"] = self.report
        if self.image_path is not None:
            record["image_path"] = self.image_path
        record.update(self.extra)
        return record

    def image(self, side: int) -> np.ndarray:
        if self.image_path:
            return load_grid(self.image_path)
        return render_fundus(self, side)


# ==================== Report templating ====================

def number_words(value: float) -> str:
    """0.85 → 'zero point eight five'; values are rounded to two decimals."""
    text = f"{value:.2f}".rstrip("0").rstrip(".")
    if "." not in text:
        return _DIGITS[int(text)]
    whole, frac = text.split(".")
    return " ".join([_DIGITS[int(whole)], "point"] + [_DIGITS[int(d)] for d in frac])


def compose_report(sample: GlaucomaSample) -> str:
    """Short templated report: disc, ratio, rim findings, rim color, risk."""
    sentences = [f"{sample.optic_disc_size} optic disc with cup to disc ratio {number_words(sample.cup_to_disc_ratio)}."]
    findings = []
    if not sample.isnt_rule_followed:
        findings.append("isnt rule violated")
    findings.extend(phrase for name, phrase in _FINDING_PHRASES.items() if getattr(sample, name))
    if findings:
        sentences.append("findings include " + " , ".join(findings) + ".")
    else:
        sentences.append("isnt rule followed with no rim findings.")
    sentences.append(f"{sample.rim_color} rim.")
    risk = "high" if sample.high_risk else "low"
    sentences.append(f"{risk} risk of glaucoma with confidence {number_words(sample.confidence_level)}.")
    return " ".join(sentences)


def describe_rim(sample: GlaucomaSample) -> str:
    parts = ["thin" if sample.rim_thinning else "healthy", "neuroretinal rim", sample.rim_color]
    if sample.notching:
        parts.append("with notching")
    if not sample.isnt_rule_followed:
        parts.append("breaking isnt order")
    return " ".join(parts)


# ==================== Generation ====================

def _as_rng(seed: Union[int, Sequence[int], np.random.Generator]) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def generate_sample(seed: Union[int, Sequence[int], np.random.Generator], risk: str) -> GlaucomaSample:
    """
    Draw one record consistent with ``risk``.

    High risk: ratio in [0.6, 0.95] on a 0.05 grid, ISNT violated with
    probability 0.9, each other finding present with probability 0.7, large
    discs most likely. Low risk: ratio in [0.1, 0.55], ISNT violated and
    findings present with probability 0.1.

    Raises:
        ContractError: ``risk`` is not 'high risk' or 'low risk'.
    """
    if risk not in RISKS:
        raise ContractError(f"risk must be one of {RISKS}, got {risk!r}")
    rng = _as_rng(seed)
    high = risk == "high risk"
    disc_p = [0.2, 0.3, 0.5] if high else [0.3, 0.5, 0.2]
    disc = DISC_SIZES[int(rng.choice(3, p=disc_p))]
    steps = rng.integers(12, 20) if high else rng.integers(2, 12)
    ratio = round(float(steps) * 0.05, 2)
    flag_p = 0.7 if high else 0.1
    isnt_violated = bool(rng.random() < (0.9 if high else 0.1))
    flags = {name: bool(rng.random() < flag_p) for name in _FINDING_PHRASES}
    confidence = round(float(rng.integers(14, 20)) * 0.05, 2)
    sample = GlaucomaSample(
        optic_disc_size=disc,
        cup_to_disc_ratio=ratio,
        isnt_rule_followed=not isnt_violated,
        rim_color="pale" if flags["rim_pallor"] else "pink",
        neuroretinal_rim="",
        glaucoma_risk_assessment=risk,
        confidence_level=confidence,
        **flags,
    )
    sample.neuroretinal_rim = describe_rim(sample)
    sample.report = compose_report(sample)
    return sample


def published_sample() -> GlaucomaSample:
    """The published example record: large disc, ratio 0.8, every finding present."""
    sample = GlaucomaSample(
        optic_disc_size="large",
        cup_to_disc_ratio=0.8,
        isnt_rule_followed=False,
        rim_pallor=True,
        bayoneting=True,
        sharp_edge=True,
        laminar_dot_sign=True,
        notching=True,
        rim_thinning=True,
        rim_color="pale",
        neuroretinal_rim="",
        glaucoma_risk_assessment="high risk",
        confidence_level=0.9,
        additional_observations=None,
    )
    sample.neuroretinal_rim = describe_rim(sample)
    sample.report = compose_report(sample)
    return sample


def generate_dataset(count: int, seed: int, risk_mix: float = 0.5) -> List[GlaucomaSample]:
    """``count`` records; record i uses ``default_rng([seed, i])`` and is high risk with probability ``risk_mix``."""
    if count < 0:
        raise ContractError(f"count must be >= 0, got {count}")
    if not 0.0 <= risk_mix <= 1.0:
        raise ContractError(f"risk_mix must lie in [0, 1], got {risk_mix}")
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        risk = "high risk" if rng.random() < risk_mix else "low risk"
        samples.append(generate_sample(rng, risk))
    return samples


# ==================== Rendering ====================

BACKGROUND = 0.2
RIM_LEVEL = 0.85
PALE_RIM_LEVEL = 0.65
CUP_LEVEL = 0.4
DISC_RADIUS = {"small": 0.18, "medium": 0.24, "large": 0.30}


def render_fundus(sample: GlaucomaSample, side: int) -> np.ndarray:
    """
    Grayscale grid in [0, 1]: dark background, bright disc, darker cup.

    Disc radius is a fraction of ``side`` set by disc size; cup radius is
    disc radius × cup_to_disc_ratio. Pallor dims the rim. Edges are
    anti-aliased by linear coverage.
    """
    if side < 1:
        raise ContractError(f"image side must be >= 1, got {side}")
    centre = side / 2.0
    ys, xs = np.mgrid[0:side, 0:side]
    dist = np.hypot(ys + 0.5 - centre, xs + 0.5 - centre)
    disc_r = DISC_RADIUS[sample.optic_disc_size] * side
    cup_r = disc_r * sample.cup_to_disc_ratio
    disc = np.clip(disc_r - dist + 0.5, 0.0, 1.0)
    cup = np.clip(cup_r - dist + 0.5, 0.0, 1.0) if cup_r > 0 else np.zeros_like(dist)
    rim = PALE_RIM_LEVEL if sample.rim_pallor else RIM_LEVEL
    image = BACKGROUND + disc * (rim - BACKGROUND) + cup * (CUP_LEVEL - rim)
    return np.clip(image, 0.0, 1.0)


GRID_HEADER = "daspl-grid"


def save_grid(path: str, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    np.savetxt(path, image, fmt="%.17g", header=f"{GRID_HEADER} {image.shape[0]} {image.shape[1]}")


def load_grid(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().lstrip("#").split()
    if len(header) != 3 or header[0] != GRID_HEADER:
        raise ParseError(f"{path}: missing '{GRID_HEADER} h w' header", 1)
    h, w = int(header[1]), int(header[2])
    grid = np.loadtxt(path, ndmin=2)
    if grid.shape != (h, w):
        raise ValidationError(f"{path}: header says {h}x{w}, data is {grid.shape[0]}x{grid.shape[1]}")
    return grid


# ==================== Encodings ====================

def encode_factors(sample: GlaucomaSample) -> np.ndarray:
    """Fixed-order numeric encoding of the structured fields (see FACTOR_INDEX)."""
    vec = np.zeros(FACTOR_DIM)
    vec[FACTOR_INDEX[f"optic_disc_size={sample.optic_disc_size}"]] = 1.0
    vec[FACTOR_INDEX["cup_to_disc_ratio"]] = sample.cup_to_disc_ratio
    for name in BOOLEAN_FACTORS:
        vec[FACTOR_INDEX[name]] = float(getattr(sample, name))
    vec[FACTOR_INDEX["rim_color=pale"]] = float(sample.rim_color == "pale")
    vec[FACTOR_INDEX["confidence_level"]] = sample.confidence_level
    return vec


def label_vector(sample: GlaucomaSample) -> np.ndarray:
    """One bit per boolean factor, then the high-risk bit (order of LABEL_NAMES)."""
    return np.array([float(getattr(sample, name)) for name in BOOLEAN_FACTORS] + [float(sample.high_risk)])


@dataclass(frozen=True)
class ModelInputs:
    image: np.ndarray
    corpus_ids: Tuple[int, ...]
    factors: np.ndarray
    target_ids: Tuple[int, ...]
    labels: np.ndarray


def build_vocabulary(samples: Sequence[GlaucomaSample]) -> Vocabulary:
    corpus = []
    for s in samples:
        corpus.append(tokenize(s.report or compose_report(s)))
        corpus.append(tokenize(s.neuroretinal_rim))
    return Vocabulary.build(corpus)


def to_model_inputs(sample: GlaucomaSample, vocab: Vocabulary, image_size: int, strict: bool = False) -> ModelInputs:
    """
    Tensors-to-be for one record.

    Raises:
        VocabularyMismatchError: ``strict`` and the record uses words the
                                 vocabulary does not know.
    """
    corpus_tokens = tokenize(sample.neuroretinal_rim)
    report_tokens = tokenize(sample.report or compose_report(sample))
    if strict:
        unknown = vocab.unknown(corpus_tokens)
        if unknown:
            raise VocabularyMismatchError(f"words missing from the checkpoint vocabulary: {', '.join(unknown)}")
    return ModelInputs(
        image=sample.image(image_size),
        corpus_ids=tuple(vocab.encode(corpus_tokens)),
        factors=encode_factors(sample),
        target_ids=tuple(vocab.encode(report_tokens)),
        labels=label_vector(sample),
    )


def mask_modalities(inputs: ModelInputs, flags: ModalityFlags) -> ModelInputs:
    """
    Replace disabled modalities with neutral values: zero image, empty corpus,
    zero factor vector.

    Raises:
        ContractError: Every modality is disabled.
    """
    if not flags.any_enabled():
        raise ContractError("no input modality")
    return replace(
        inputs,
        image=inputs.image if flags.image else np.zeros_like(inputs.image),
        corpus_ids=inputs.corpus_ids if flags.corpus else (),
        factors=inputs.factors if flags.factor else np.zeros_like(inputs.factors),
    )


# ==================== JSON lines ====================

def _parse_bool(value: Any, name: str, line: int) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    raise ParseError(f"field '{name}' must be a boolean, got {value!r}", line)


def _parse_float(value: Any, name: str, line: int) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ParseError(f"field '{name}' must be a number, got {value!r}", line)
    try:
        return float(value)
    except ValueError:
        raise ParseError(f"field '{name}' must be a number, got {value!r}", line) from None


def _parse_choice(value: Any, name: str, choices: Sequence[str], line: int) -> str:
    text = str(value).strip().lower() if value is not None else ""
    if text not in choices:
        raise ParseError(f"field '{name}' must be one of {list(choices)}, got {value!r}", line)
    return text


def sample_from_record(record: Dict[str, Any], line: int = 1) -> GlaucomaSample:
    """
    Build a sample from one JSON object.

    Raises:
        ParseError: Missing field or wrong type.
        ValidationError: Ratio or confidence outside [0, 1].
    """
    missing = [name for name in REQUIRED_FIELDS if name not in record]
    if missing:
        raise ParseError(f"missing required field(s): {', '.join(missing)}", line)
    ratio = _parse_float(record["cup_to_disc_ratio"], "cup_to_disc_ratio", line)
    confidence = _parse_float(record["confidence_level"], "confidence_level", line)
    for name, value in (("cup_to_disc_ratio", ratio), ("confidence_level", confidence)):
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"line {line}: {name} {value} outside [0, 1]")
    observations = record.get("additional_observations")
    sample = GlaucomaSample(
        optic_disc_size=_parse_choice(record["optic_disc_size"], "optic_disc_size", DISC_SIZES, line),
        cup_to_disc_ratio=ratio,
        rim_color=_parse_choice(record["rim_color"], "rim_color", RIM_COLORS, line),
        neuroretinal_rim=str(record["neuroretinal_rim"]),
        glaucoma_risk_assessment=_parse_choice(record["glaucoma_risk_assessment"], "glaucoma_risk_assessment", RISKS, line),
        confidence_level=confidence,
        additional_observations=None if observations is None else str(observations),
        image_path=record.get("image_path"),
        extra={k: v for k, v in record.items() if k not in KNOWN_FIELDS},
        **{name: _parse_bool(record[name], name, line) for name in BOOLEAN_FACTORS},
    )
    sample.report = str(record.get("report") or compose_report(sample))
    return sample


def load_jsonl(path: str) -> List[GlaucomaSample]:
    """Read one record per nonblank line; errors cite the 1-based line number."""
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line_number) from None
            if not isinstance(record, dict):
                raise ParseError("expected a JSON object", line_number)
            samples.append(sample_from_record(record, line_number))
    logger.info("loaded %d samples from %s", len(samples), path)
    return samples


def save_jsonl(path: str, samples: Sequence[GlaucomaSample]) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for sample in samples:
            f.write(json.dumps(sample.to_record(), ensure_ascii=False) + "\n")
    logger.info("wrote %d samples to %s", len(samples), path)


# ==================== Folds ====================

def split_folds(dataset: Union[int, Sequence[Any]], k: int = 10, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Seeded k-fold partitions as (train indices, validation indices).

    Validation folds are disjoint, cover the dataset and differ in size by at
    most one.

    Raises:
        ContractError: ``k < 2`` or ``k`` exceeds the dataset size.
    """
    size = dataset if isinstance(dataset, int) else len(dataset)
    if k < 2:
        raise ContractError(f"fold count must be >= 2, got {k}")
    if k > size:
        raise ContractError(f"fold count {k} exceeds dataset size {size}")
    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    return [(train, val) for train, val in splitter.split(np.arange(size))]
