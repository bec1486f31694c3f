"""
Pydantic models for randomly masked views of target sentences.
"""
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from natlab.models.corpus import MASK_ID, pad_sequences


class MaskedView(BaseModel):
    """One random masking of a target sentence."""

    input_ids: List[int] = Field(..., description="Target with [MASK] at masked positions")
    masked_positions: List[int] = Field(..., description="Sorted masked positions (0-based)")
    observed_positions: List[int] = Field(..., description="Sorted observed positions (0-based)")
    original_ids: List[int] = Field(..., description="Ground-truth target ids")

    @model_validator(mode="after")
    def check_partition(self) -> "MaskedView":
        n = len(self.original_ids)
        if len(self.input_ids) != n:
            raise ValueError("input_ids and original_ids differ in length")
        masked, observed = self.masked_positions, self.observed_positions
        if masked != sorted(set(masked)) or observed != sorted(set(observed)):
            raise ValueError("position sets must be sorted and duplicate-free")
        if not 1 <= len(masked) <= n:
            raise ValueError(f"masked count {len(masked)} outside [1, {n}]")
        if set(masked) & set(observed) or len(masked) + len(observed) != n:
            raise ValueError("masked and observed positions must partition the target")
        if masked[0] < 0 or masked[-1] >= n:
            raise ValueError("masked position out of range")
        if any(self.input_ids[i] != MASK_ID for i in masked):
            raise ValueError("masked positions must hold [MASK]")
        if any(self.input_ids[i] != self.original_ids[i] for i in observed):
            raise ValueError("observed positions must hold the original token")
        return self

    @property
    def length(self) -> int:
        return len(self.original_ids)

    def masked_targets(self) -> List[int]:
        """Ground-truth ids at the masked positions."""
        return [self.original_ids[i] for i in self.masked_positions]

    def reconstruct(self) -> List[int]:
        """Put the masked ground truth back into input_ids."""
        ids = list(self.input_ids)
        for pos, token in zip(self.masked_positions, self.masked_targets()):
            ids[pos] = token
        return ids


class DualViewBatch(BaseModel):
    """Two masked views per sentence plus the positions masked in both."""

    view1: List[MaskedView] = Field(default_factory=list)
    view2: List[MaskedView] = Field(default_factory=list)
    shared_positions: List[List[int]] = Field(default_factory=list)
    source_ids: List[List[int]] = Field(default_factory=list, description="Source ids per sentence ([LEN] first)")

    @model_validator(mode="after")
    def check_shared(self) -> "DualViewBatch":
        if not len(self.view1) == len(self.view2) == len(self.shared_positions):
            raise ValueError("view1, view2 and shared_positions must have one entry per sentence")
        if self.source_ids and len(self.source_ids) != len(self.view1):
            raise ValueError("source_ids must have one entry per sentence")
        for v1, v2, shared in zip(self.view1, self.view2, self.shared_positions):
            if v1.original_ids != v2.original_ids:
                raise ValueError("both views must mask the same target")
            if shared != sorted(set(v1.masked_positions) & set(v2.masked_positions)):
                raise ValueError("shared_positions must equal the intersection of the masked sets")
        return self

    def __len__(self) -> int:
        return len(self.view1)

    def swapped(self) -> "DualViewBatch":
        return DualViewBatch(
            view1=self.view2, view2=self.view1,
            shared_positions=self.shared_positions, source_ids=self.source_ids,
        )

    def true_lengths(self) -> np.ndarray:
        return np.array([v.length for v in self.view1], dtype=np.int64)

    def source_array(self) -> np.ndarray:
        return pad_sequences(self.source_ids)

    def input_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Padded decoder inputs of both views."""
        return (
            pad_sequences([v.input_ids for v in self.view1]),
            pad_sequences([v.input_ids for v in self.view2]),
        )

    def masked_token_count(self) -> Tuple[int, int]:
        return (
            sum(len(v.masked_positions) for v in self.view1),
            sum(len(v.masked_positions) for v in self.view2),
        )
