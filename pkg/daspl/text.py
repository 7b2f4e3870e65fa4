"""
Text Module

Tokenization shared by the dataset, the model vocabulary and the metrics,
plus the token/id vocabulary with reserved special ids.
"""

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence

from daspl.decoder import BOS_ID, EOS_ID, PAD_ID, UNK_ID
from daspl.errors import ContractError

SPECIAL_TOKENS = ("<bos>", "<eos>", "<pad>", "<unk>")

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(text: str) -> List[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    if not text:
        return []
    return _PUNCT.sub(" ", text.lower()).split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass
class Vocabulary:
    """
    Token ↔ id map. Ids 0–3 are <bos>, <eos>, <pad>, <unk>; the rest are
    ordered by descending frequency, then alphabetically.
    """

    tokens: List[str] = field(default_factory=lambda: list(SPECIAL_TOKENS))

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ContractError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("vocabulary tokens must be unique")
        self._index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, corpus: Iterable[Sequence[str]]) -> "Vocabulary":
        counts = Counter()
        for tokens in corpus:
            counts.update(tokens)
        for special in SPECIAL_TOKENS:
            counts.pop(special, None)
        ordered = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
        return cls(list(SPECIAL_TOKENS) + [token for token, _ in ordered])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        """Map ids back to words, stopping at EOS and dropping other specials."""
        words = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (BOS_ID, PAD_ID, UNK_ID) or not 0 <= i < len(self.tokens):
                continue
            words.append(self.tokens[i])
        return words

    def unknown(self, tokens: Iterable[str]) -> List[str]:
        return sorted({t for t in tokens if t not in self._index})
