"""
Checkpoint Module

Single-file model checkpoints, little-endian throughout:

    magic     8 bytes  b"DASPLCK\\0"
    version   uint32
    meta_len  uint32, then meta_len bytes of UTF-8 JSON (run config, vocabulary
              tokens, label names, factor_dim, seed, dual-weight mode)
    count     uint32 number of sections, then per section:
        name_len uint32, name bytes, ndim uint32, ndim × uint32 dims,
        product(dims) float64 values ('<f8')

Files are written to a temporary sibling and moved into place with
``os.replace`` so a reader never sees a half-written checkpoint.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

import numpy as np

from daspl.config import RunConfig
from daspl.errors import CheckpointError
from daspl.model import DasplModel
from daspl.text import Vocabulary

logger = logging.getLogger(__name__)

MAGIC = b"DASPLCK\x00"
VERSION = 1
DUAL_SECTION = "dual.prev_heads"


@dataclass
class LoadedCheckpoint:
    model: DasplModel
    vocab: Vocabulary
    config: RunConfig
    meta: Dict[str, Any]


def _pack_section(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    array = np.asarray(array, dtype="<f8", order="C")
    head = struct.pack("<I", len(encoded)) + encoded + struct.pack("<I", array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape) if array.ndim else b""
    return head + array.tobytes()


def write_checkpoint(path: str, meta: Dict[str, Any], sections: List[Tuple[str, np.ndarray]]) -> None:
    """Serialise ``meta`` and named arrays to ``path`` atomically."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(sections))]
    chunks.extend(_pack_section(name, array) for name, array in sections)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def uint32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Parse a checkpoint file into (meta, sections).

    Raises:
        CheckpointError: Missing file, bad magic, unknown version, or
                         truncated data.
    """
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a DA-SPL checkpoint")
    version = reader.uint32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(reader.take(reader.uint32()).decode("utf-8"))
    sections: Dict[str, np.ndarray] = {}
    for _ in range(reader.uint32()):
        name = reader.take(reader.uint32()).decode("utf-8")
        ndim = reader.uint32()
        shape = tuple(reader.uint32() for _ in range(ndim))
        count = int(np.prod(shape)) if ndim else 1
        sections[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if reader.offset != len(reader.data):
        raise CheckpointError(f"{path}: trailing bytes after last section")
    return meta, sections


def save_checkpoint(path: str, model: DasplModel, vocab: Vocabulary, config: RunConfig) -> None:
    """Write every parameter, the dual-weight state and the metadata needed to rebuild ``model``."""
    meta = {
        "config": config.to_dict(),
        "vocab": list(vocab.tokens),
        "labels": list(model.labels.names),
        "factor_dim": model.factor_dim,
        "seed": model.seed,
        "weight_mode": model.tracker.mode,
    }
    sections = list(model.store.state_dict().items())
    dual = model.tracker.state_arrays()
    if dual is not None:
        sections.append((DUAL_SECTION, dual))
    write_checkpoint(path, meta, sections)
    logger.info("checkpoint written to %s (%d sections)", path, len(sections))


def load_checkpoint(path: str) -> LoadedCheckpoint:
    """Rebuild the model, vocabulary and run config stored in ``path``."""
    meta, sections = read_checkpoint(path)
    try:
        config = RunConfig.from_dict(meta["config"])
        vocab = Vocabulary(list(meta["vocab"]))
        model = DasplModel(config.model, len(vocab), meta["labels"], int(meta["factor_dim"]), int(meta["seed"]))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete metadata ({exc})") from None
    dual = sections.pop(DUAL_SECTION, None)
    model.store.load_state_dict(sections)
    model.tracker.load_state_arrays(dual)
    logger.info("checkpoint loaded from %s", path)
    return LoadedCheckpoint(model=model, vocab=vocab, config=config, meta=meta)
