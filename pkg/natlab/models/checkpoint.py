"""
Checkpoint container: named tensors in a parquet table with a JSON header.

Each row is one tensor of one store (online, average, adam_m, adam_v) with
its dtype, shape and little-endian raw bytes. The header lives in the
parquet schema metadata under the key b"natlab".
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.parquet as pq
from pydantic import BaseModel, Field, ValidationError

from natlab.errors import CheckpointError
from natlab.models.config import ModelConfig

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HEADER_KEY = b"natlab"
STORE_NAMES = ("online", "average", "adam_m", "adam_v")

Stores = Dict[str, Dict[str, np.ndarray]]


class CheckpointHeader(BaseModel):
    """Everything needed to resume training besides the tensors."""

    version: int = Field(..., description="Checkpoint format version")
    model: ModelConfig
    experiment: Dict[str, object] = Field(default_factory=dict, description="Flat experiment config")
    step: int = Field(default=0, ge=0, description="Optimizer steps taken")
    epoch: int = Field(default=0, ge=0, description="Data epoch the next batch belongs to")
    batch_cursor: int = Field(default=0, ge=0, description="Index of the next batch within the epoch")
    vocab_tokens: List[str] = Field(default_factory=list, description="Corpus tokens after the reserved ids")


def stores_to_dataframe(stores: Stores) -> pd.DataFrame:
    """Flatten stores into one row per tensor."""
    rows = []
    for store, tensors in stores.items():
        for name, value in tensors.items():
            # shape first: ascontiguousarray promotes 0-d arrays to (1,)
            value = np.asarray(value)
            little = np.ascontiguousarray(value.astype(value.dtype.newbyteorder("<"), copy=False))
            rows.append({
                "store": store,
                "name": name,
                "dtype": value.dtype.name,
                "shape": json.dumps(list(value.shape)),
                "data": little.tobytes(),
            })
    return pd.DataFrame(rows, columns=["store", "name", "dtype", "shape", "data"])


def dataframe_to_stores(df: pd.DataFrame) -> Stores:
    """Inverse of stores_to_dataframe, preserving row order within each store."""
    stores: Stores = {}
    for row in df.itertuples(index=False):
        dtype = np.dtype(row.dtype).newbyteorder("<")
        shape = tuple(json.loads(row.shape))
        value = np.frombuffer(row.data, dtype=dtype).reshape(shape)
        stores.setdefault(row.store, {})[row.name] = value.astype(np.dtype(row.dtype), copy=True)
    return stores


def save_checkpoint_file(filepath: str, header: CheckpointHeader, stores: Stores) -> None:
    """
    Write a checkpoint to parquet.

    Args:
        filepath: Output path (parent directories are created)
        header: Resume metadata
        stores: store name -> tensor name -> array
    """
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)

    table = pa.Table.from_pandas(stores_to_dataframe(stores), preserve_index=False)
    metadata = dict(table.schema.metadata or {})
    metadata[HEADER_KEY] = header.model_dump_json().encode("utf-8")
    table = table.replace_schema_metadata(metadata)

    # Write to a sibling and rename so a crash never leaves a truncated checkpoint
    tmp = path.with_suffix(path.suffix + ".tmp")
    pq.write_table(table, str(tmp), compression="snappy")
    tmp.replace(path)
    logger.info("Saved checkpoint step %d to %s", header.step, path)


def read_checkpoint_header(filepath: str) -> CheckpointHeader:
    """Read only the header of a checkpoint."""
    path = Path(filepath)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        metadata = pq.read_schema(str(path)).metadata or {}
    except pa.ArrowInvalid as e:
        raise CheckpointError(f"{path} is not a parquet checkpoint: {e}") from e
    return _parse_header(path, metadata)


def _parse_header(path: Path, metadata: dict) -> CheckpointHeader:
    raw = metadata.get(HEADER_KEY)
    if raw is None:
        raise CheckpointError(f"{path} has no natlab header")
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} has a corrupt header: {e}") from e
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})"
        )
    try:
        return CheckpointHeader(**payload)
    except ValidationError as e:
        raise CheckpointError(f"{path} has an invalid header:\n{e}") from e


def load_checkpoint_file(filepath: str) -> Tuple[CheckpointHeader, Stores]:
    """
    Read a checkpoint written by save_checkpoint_file.

    Returns:
        (header, stores)

    Raises:
        FileNotFoundError: If the file does not exist
        CheckpointError: On missing header or unsupported version
    """
    path = Path(filepath)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        table = pq.read_table(str(path))
    except pa.ArrowInvalid as e:
        raise CheckpointError(f"{path} is not a parquet checkpoint: {e}") from e

    header = _parse_header(path, table.schema.metadata or {})
    stores = dataframe_to_stores(table.to_pandas())
    if "online" not in stores:
        raise CheckpointError(f"{path} has no online store")
    return header, stores
