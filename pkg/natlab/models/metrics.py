"""
Pydantic records for losses, metrics logs, BLEU and gradient checks.
"""
import json
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, Field

KL_SLACK = 1e-7


class LossBreakdown(BaseModel):
    """The eight objective terms plus the weighted total, in nats."""

    nll1: float = Field(..., description="Masked-token NLL of view 1")
    nll2: float = Field(..., description="Masked-token NLL of view 2")
    mkl1: float = Field(..., description="Online/average consistency on view 1")
    mkl2: float = Field(..., description="Online/average consistency on view 2")
    skl1: float = Field(..., description="Shared-mask consistency, online vs online")
    skl2: float = Field(..., description="Shared-mask consistency, online v1 vs average v2")
    skl3: float = Field(..., description="Shared-mask consistency, average v1 vs online v2")
    len: float = Field(..., description="Length classification loss")
    total: float = Field(..., description="Weighted training objective")

    def kl_terms(self) -> List[float]:
        return [self.mkl1, self.mkl2, self.skl1, self.skl2, self.skl3]

    def kl_nonnegative(self, slack: float = KL_SLACK) -> bool:
        return all(v >= -slack for v in self.kl_terms())


class MetricsRecord(LossBreakdown):
    """One line of the training metrics log."""

    step: int = Field(..., ge=0)
    lr: float = Field(default=0.0, description="Learning rate used for this step")
    grad_norm: float = Field(default=0.0, description="Global gradient norm before clipping")
    masked_tokens1: int = Field(default=0, ge=0)
    masked_tokens2: int = Field(default=0, ge=0)
    shared_tokens: int = Field(default=0, ge=0)
    sentences: int = Field(default=0, ge=0)
    nll_per_token: float = Field(default=0.0, description="Mean masked-token NLL over both views, before batch reduction")


class EvalRecord(BaseModel):
    """Held-out evaluation during training."""

    step: int = Field(..., ge=0)
    bleu: float = Field(..., ge=0.0, le=100.0)
    length_accuracy: float = Field(..., ge=0.0, le=1.0)
    iterations: int = Field(..., ge=1)


class BleuReport(BaseModel):
    """Corpus-level BLEU with its components."""

    bleu: float = Field(..., ge=0.0, le=100.0, description="Corpus BLEU in [0, 100]")
    precisions: List[float] = Field(..., description="Modified n-gram precisions p1..p4")
    brevity_penalty: float = Field(..., ge=0.0, le=1.0)
    hyp_length: int = Field(..., ge=0)
    ref_length: int = Field(..., ge=0)

    def __str__(self) -> str:
        precisions = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (
            f"BLEU = {self.bleu:.2f} {precisions} "
            f"(BP = {self.brevity_penalty:.3f}, hyp_len = {self.hyp_length}, ref_len = {self.ref_length})"
        )


class GradCheckFailure(BaseModel):
    """A coordinate whose analytic and numeric gradients disagree."""

    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


class GradCheckReport(BaseModel):
    """Result of comparing analytic gradients with central differences."""

    max_rel_error: float = Field(..., ge=0.0)
    coordinates: int = Field(..., ge=0)
    tolerance: float
    failures: List[GradCheckFailure] = Field(default_factory=list)
    skipped: int = Field(default=0, ge=0, description="Coordinates left out because every step crossed a relu kink")

    @property
    def passed(self) -> bool:
        return not self.failures


class AblationRow(BaseModel):
    """One grid point of an ablation sweep."""

    variant: str = "mvsr"
    lambda_: float = Field(..., alias="lambda")
    dropout_average: float
    iterations: int
    bleu: Optional[float] = None
    length_accuracy: Optional[float] = None
    sentences_per_second: Optional[float] = None
    status: str = "ok"
    error: Optional[str] = None

    model_config = {"populate_by_name": True}


def append_jsonl(record: BaseModel, filepath: str) -> None:
    """Append one record as a JSON line."""
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "a", encoding="utf-8") as f:
        f.write(record.model_dump_json() + "\n")


def read_jsonl(filepath: str, model: type) -> list:
    """Load every record of a JSON-lines file into `model` instances."""
    path = Path(filepath)
    if not path.exists():
        return []
    with open(path, "r", encoding="utf-8") as f:
        return [model(**json.loads(line)) for line in f if line.strip()]
