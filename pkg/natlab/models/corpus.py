"""
Pydantic models for vocabularies, sentence pairs and padded batches.
"""
from pathlib import Path
from typing import Dict, Iterable, List

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr, field_validator, model_validator

from natlab.errors import CorpusError

PAD_ID = 0
MASK_ID = 1
LEN_ID = 2
UNK_ID = 3
BOS_ID = 4
EOS_ID = 5

RESERVED_TOKENS = ["[PAD]", "[MASK]", "[LEN]", "[UNK]", "[BOS]", "[EOS]"]
# Ids the decoder never emits
NON_EMITTABLE_IDS = [PAD_ID, MASK_ID, LEN_ID, BOS_ID, EOS_ID]


class Vocab(BaseModel):
    """Token <-> id bijection; reserved ids occupy 0..5."""

    tokens: List[str] = Field(default_factory=list, description="Corpus tokens in id order, after the reserved ids")

    _index: Dict[str, int] = PrivateAttr(default_factory=dict)

    @field_validator("tokens")
    @classmethod
    def validate_tokens(cls, v: List[str]) -> List[str]:
        """Reject duplicates and reserved names."""
        seen = set()
        for token in v:
            if token in RESERVED_TOKENS:
                raise ValueError(f"Reserved token '{token}' cannot be a corpus token")
            if token in seen:
                raise ValueError(f"Duplicate token '{token}'")
            if not token or any(ch.isspace() for ch in token):
                raise ValueError(f"Invalid token {token!r}")
            seen.add(token)
        return v

    def model_post_init(self, __context) -> None:
        self._index = {token: i for i, token in enumerate(RESERVED_TOKENS + self.tokens)}

    def __len__(self) -> int:
        return len(RESERVED_TOKENS) + len(self.tokens)

    @property
    def size(self) -> int:
        return len(self)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if token_id < len(RESERVED_TOKENS):
            return RESERVED_TOKENS[token_id]
        return self.tokens[token_id - len(RESERVED_TOKENS)]

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> List[str]:
        """Map ids back to tokens, dropping reserved ids other than [UNK] if requested."""
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in NON_EMITTABLE_IDS:
                continue
            out.append(self.token_of(i))
        return out

    def save(self, filepath: str) -> None:
        """Write one corpus token per line (id = line number - 1 + reserved offset)."""
        Path(filepath).parent.mkdir(parents=True, exist_ok=True)
        Path(filepath).write_text("".join(f"{t}\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, filepath: str) -> "Vocab":
        path = Path(filepath)
        if not path.exists():
            raise FileNotFoundError(f"Vocabulary file not found: {path}")
        tokens = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        try:
            return cls(tokens=tokens)
        except ValueError as e:
            raise CorpusError(f"Invalid vocabulary file {path}: {e}") from e


class SentencePair(BaseModel):
    """One source/target pair as vocabulary ids."""

    index: int = Field(default=0, ge=0, description="Line number in the corpus (0-based)")
    source_ids: List[int] = Field(..., description="Source ids with [LEN] prepended")
    target_ids: List[int] = Field(..., description="Target ids, no special tokens")

    @model_validator(mode="after")
    def check_pair(self) -> "SentencePair":
        if len(self.source_ids) < 2 or self.source_ids[0] != LEN_ID:
            raise ValueError("source_ids must be non-empty and start with [LEN]")
        if not self.target_ids:
            raise ValueError("target_ids must be non-empty")
        if min(self.source_ids) < 0 or min(self.target_ids) < 0:
            raise ValueError("ids must be non-negative")
        return self

    @property
    def target_length(self) -> int:
        return len(self.target_ids)


def pad_sequences(sequences: List[List[int]], pad_to: int = 0) -> np.ndarray:
    """
    Right-pad id lists into an int64 array with [PAD].

    Args:
        sequences: Id lists
        pad_to: Minimum width of the result

    Returns:
        Array of shape (len(sequences), max(pad_to, longest))
    """
    width = max([pad_to] + [len(s) for s in sequences])
    out = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    for i, seq in enumerate(sequences):
        out[i, :len(seq)] = seq
    return out


class Batch(BaseModel):
    """A group of sentence pairs trained together."""

    pairs: List[SentencePair] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def target_tokens(self) -> int:
        return sum(p.target_length for p in self.pairs)

    def sources(self) -> List[List[int]]:
        return [p.source_ids for p in self.pairs]

    def targets(self) -> List[List[int]]:
        return [p.target_ids for p in self.pairs]

    def target_lengths(self) -> np.ndarray:
        return np.array([p.target_length for p in self.pairs], dtype=np.int64)

    def source_array(self) -> np.ndarray:
        return pad_sequences(self.sources())

    def target_array(self) -> np.ndarray:
        return pad_sequences(self.targets())

    def target_pad_mask(self) -> np.ndarray:
        """True where the padded target array holds [PAD]."""
        lengths = self.target_lengths()
        width = int(lengths.max()) if len(lengths) else 0
        return np.arange(width)[None, :] >= lengths[:, None]

    def unpad_targets(self) -> List[List[int]]:
        """Recover the member targets from the padded array via the pad mask."""
        array, mask = self.target_array(), self.target_pad_mask()
        return [row[~pad].tolist() for row, pad in zip(array, mask)]
