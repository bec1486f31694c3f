"""
FastAPI server for browsing training runs and translating with a checkpoint.
"""
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import pandas as pd
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel as PydanticBaseModel, Field

from natlab import __version__
from natlab.models.config import DecodeConfig
from natlab.models.corpus import LEN_ID
from natlab.models.metrics import EvalRecord, MetricsRecord, read_jsonl
from natlab.services.ablation import RESULTS_FILE, load_ablation
from natlab.services.corpus import get_tokenizer
from natlab.services.decoder import mask_predict
from natlab.services.trainer import (
    EVAL_FILE,
    METRICS_FILE,
    average_checkpoints,
    list_checkpoints,
    load_params,
)

DEFAULT_RUNS_DIR = Path(__file__).parent.parent.parent / "runs"


class TranslateRequest(PydanticBaseModel):
    """Request body for translating sentences."""
    sentences: List[str] = Field(..., min_length=1)
    iterations: int = Field(default=10, ge=1)
    length_candidates: int = Field(default=5, ge=1)
    weights: Literal["online", "average", "checkpoint-average"] = "checkpoint-average"
    tokenizer: str = "whitespace"


class _MtimeCache:
    """Reload a file-derived value only when the file's mtime changes."""

    def __init__(self):
        self._entries: Dict[Any, tuple] = {}

    def get(self, key: Any, path: Path, loader):
        mtime = path.stat().st_mtime
        cached = self._entries.get(key)
        if cached is not None and cached[0] == mtime:
            return cached[1]
        value = loader()
        self._entries[key] = (mtime, value)
        return value


def create_app(runs_dir: Optional[str] = None, checkpoint: Optional[str] = None) -> FastAPI:
    """
    Build the API.

    Args:
        runs_dir: Directory whose subdirectories are training runs
        checkpoint: Checkpoint used by /api/translate
    """
    runs_root = Path(runs_dir) if runs_dir else DEFAULT_RUNS_DIR
    app = FastAPI(
        title="natlab API",
        description="Training runs, ablation tables and mask-predict translation",
        version=__version__,
    )
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=False,
        allow_methods=["*"],
        allow_headers=["*"],
    )
    cache = _MtimeCache()

    def run_dir(run: str) -> Path:
        path = runs_root / run
        if not path.is_dir() or path.resolve().parent != runs_root.resolve():
            raise FileNotFoundError(f"Run not found: {run}")
        return path

    def run_file(run: str, name: str, hint: str) -> Path:
        path = run_dir(run) / name
        if not path.exists():
            raise FileNotFoundError(f"{name} not found for run '{run}'.\nPlease run '{hint}' first.")
        return path

    def load_params_for(weights: str):
        if not checkpoint:
            raise FileNotFoundError("No checkpoint configured. Set NATLAB_CHECKPOINT or pass --ckpt.")
        ckpt = Path(checkpoint)
        if not ckpt.exists():
            raise FileNotFoundError(f"Checkpoint not found: {ckpt}")
        if weights == "checkpoint-average":
            paths = list_checkpoints(str(ckpt.parent)) or [ckpt]
            return cache.get(("params", weights), ckpt, lambda: average_checkpoints([str(p) for p in paths]))
        return cache.get(("params", weights), ckpt, lambda: load_params(str(ckpt), weights))

    @app.get("/")
    async def root():
        """Root endpoint."""
        return {
            "message": "natlab API",
            "version": __version__,
            "endpoints": {
                "runs": "/api/runs",
                "metrics": "/api/runs/{run}/metrics?limit={limit}&offset={offset}",
                "eval": "/api/runs/{run}/eval",
                "ablation": "/api/runs/{run}/ablation",
                "translate": "POST /api/translate",
                "docs": "/docs",
            },
        }

    @app.get("/api/runs")
    async def get_runs() -> Dict[str, Any]:
        """List run directories with their latest step."""
        if not runs_root.exists():
            return {"runs": [], "total": 0}
        runs = []
        for path in sorted(p for p in runs_root.iterdir() if p.is_dir()):
            checkpoints = list_checkpoints(str(path))
            runs.append({
                "run": path.name,
                "checkpoints": len(checkpoints),
                "latest_checkpoint": checkpoints[-1].name if checkpoints else None,
                "has_metrics": (path / METRICS_FILE).exists(),
                "has_ablation": (path / RESULTS_FILE).exists(),
            })
        return {"runs": runs, "total": len(runs)}

    @app.get("/api/runs/{run}/metrics")
    async def get_metrics(run: str, limit: int = 100, offset: int = 0) -> Dict[str, Any]:
        """
        Page through a run's metrics log.

        Args:
            run: Run directory name
            limit: Maximum number of records to return (default: 100)
            offset: Number of records to skip (default: 0)
        """
        try:
            path = run_file(run, METRICS_FILE, "python scripts/train.py")
            records = cache.get(("metrics", run), path, lambda: read_jsonl(str(path), MetricsRecord))
            page = records[offset:offset + limit]
            return {
                "records": [r.model_dump() for r in page],
                "total": len(records),
                "limit": limit,
                "offset": offset,
                "has_more": (offset + limit) < len(records),
            }
        except FileNotFoundError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except Exception as e:
            raise HTTPException(status_code=500, detail=f"Error loading metrics: {str(e)}")

    @app.get("/api/runs/{run}/eval")
    async def get_eval(run: str) -> Dict[str, Any]:
        """Held-out evaluation curve of a run."""
        try:
            path = run_file(run, EVAL_FILE, "python scripts/train.py with eval_interval > 0")
            records = cache.get(("eval", run), path, lambda: read_jsonl(str(path), EvalRecord))
            return {"records": [r.model_dump() for r in records], "total": len(records)}
        except FileNotFoundError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except Exception as e:
            raise HTTPException(status_code=500, detail=f"Error loading eval log: {str(e)}")

    @app.get("/api/runs/{run}/ablation")
    async def get_ablation(run: str) -> Dict[str, Any]:
        """Ablation results table of a sweep directory."""
        try:
            path = run_file(run, RESULTS_FILE, "python scripts/ablate.py")
            df = cache.get(("ablation", run), path, lambda: load_ablation(str(path)))
            rows = df.astype(object).where(pd.notna(df), None).to_dict(orient="records")
            return {"rows": rows, "total": len(rows), "columns": list(df.columns)}
        except FileNotFoundError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except Exception as e:
            raise HTTPException(status_code=500, detail=f"Error loading ablation table: {str(e)}")

    @app.post("/api/translate")
    async def translate(request: TranslateRequest) -> Dict[str, Any]:
        """
        Translate sentences with mask-predict.

        Body:
            sentences: Source sentences
            iterations: Decoding iterations T
            length_candidates: Length beams
            weights: online | average | checkpoint-average
        """
        try:
            tokenizer = get_tokenizer(request.tokenizer)
            params, vocab = load_params_for(request.weights)
            config = DecodeConfig(iterations=request.iterations, length_candidates=request.length_candidates)
            results = []
            for sentence in request.sentences:
                tokens = tokenizer.tokenize(sentence)
                if not tokens:
                    raise ValueError("Empty source sentence")
                hyp = mask_predict(params, [LEN_ID] + vocab.encode(tokens), config)
                results.append({
                    "source": sentence,
                    "translation": tokenizer.detokenize(vocab.decode(hyp.tokens)),
                    "score": hyp.score,
                    "length": hyp.length,
                })
            return {"translations": results, "iterations": request.iterations, "weights": request.weights}
        except FileNotFoundError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        except Exception as e:
            raise HTTPException(status_code=500, detail=f"Translation error: {str(e)}")

    @app.get("/health")
    async def health():
        """Health check endpoint."""
        return {
            "status": "healthy",
            "runs_dir": str(runs_root),
            "runs_dir_exists": runs_root.exists(),
            "checkpoint": checkpoint,
        }

    return app


app = create_app(os.environ.get("NATLAB_RUNS_DIR"), os.environ.get("NATLAB_CHECKPOINT"))


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
