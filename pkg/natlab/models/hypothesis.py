"""
Pydantic model for a decoded translation candidate.
"""
from typing import List

import numpy as np
from pydantic import BaseModel, Field, model_validator


class Hypothesis(BaseModel):
    """A decoded target sequence with per-token confidences."""

    tokens: List[int] = Field(..., description="Decoded target ids")
    token_logprobs: List[float] = Field(..., description="Log-probability of each token when last predicted")
    score: float = Field(default=0.0, description="Mean token log-probability")

    @model_validator(mode="before")
    @classmethod
    def fill_score(cls, data):
        if isinstance(data, dict) and "score" not in data and data.get("token_logprobs") is not None and len(data["token_logprobs"]):
            data = dict(data)
            data["score"] = float(np.mean(data["token_logprobs"]))
        return data

    @model_validator(mode="after")
    def check_lengths(self) -> "Hypothesis":
        if len(self.tokens) != len(self.token_logprobs):
            raise ValueError(
                f"tokens ({len(self.tokens)}) and token_logprobs ({len(self.token_logprobs)}) differ in length"
            )
        if self.tokens and not np.isclose(self.score, float(np.mean(self.token_logprobs)), rtol=0.0, atol=1e-9):
            raise ValueError("score must equal the mean of token_logprobs")
        return self

    @property
    def length(self) -> int:
        return len(self.tokens)

    def sort_key(self):
        """Best first: higher score, then shorter, then lexicographic ids."""
        return (-self.score, len(self.tokens), tuple(self.tokens))
