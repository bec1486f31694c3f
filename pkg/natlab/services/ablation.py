"""
Ablation sweeps over the KL weight, the average-model dropout, the decoding
iterations and the regularizer variant.

Grid file format (one axis per line, comments with '#'):
    lambda = 0.1, 0.3, 0.5, 1, 3
    dropout_average = 0.1, 0.2, 0.3
    iterations = 1, 4, 10
    variant = cmlm, mvsr

Every grid point shares the master seed. Points that differ only in
`iterations` reuse one trained model.
"""
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from natlab.errors import ConfigError
from natlab.models.config import DecodeConfig, ExperimentConfig
from natlab.models.corpus import SentencePair, Vocab
from natlab.models.metrics import AblationRow
from natlab.services.bleu import corpus_bleu
from natlab.services.decoder import length_accuracy, translate_corpus
from natlab.services.trainer import Trainer, average_checkpoints, list_checkpoints

logger = logging.getLogger(__name__)

GRID_AXES = ("lambda", "dropout_average", "iterations", "variant")
VARIANTS: Dict[str, Dict[str, bool]] = {
    "cmlm": {"use_model_consistency": False, "use_shared_mask_consistency": False},
    "model-consistency": {"use_model_consistency": True, "use_shared_mask_consistency": False},
    "shared-mask": {"use_model_consistency": False, "use_shared_mask_consistency": True},
    "mvsr": {"use_model_consistency": True, "use_shared_mask_consistency": True},
}
RESULTS_FILE = "ablation.csv"
COLUMNS = [
    "variant", "lambda", "dropout_average", "iterations",
    "bleu", "length_accuracy", "sentences_per_second", "status", "error",
]


def _parse_value(axis: str, raw: str) -> Any:
    raw = raw.strip()
    try:
        if axis == "iterations":
            return int(raw)
        if axis == "variant":
            if raw not in VARIANTS:
                raise ConfigError(f"Unknown variant '{raw}'. Available: {', '.join(VARIANTS)}")
            return raw
        return float(raw)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid value '{raw}' for grid axis '{axis}'") from e


def read_grid_file(filepath: str) -> Dict[str, List[Any]]:
    """Parse a grid file into axis -> values."""
    path = Path(filepath)
    if not path.exists():
        raise FileNotFoundError(f"Grid file not found: {path}")
    grid: Dict[str, List[Any]] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'axis = v1, v2, ...'")
        axis, values = (part.strip() for part in line.split("=", 1))
        if axis not in GRID_AXES:
            raise ConfigError(f"{path}:{lineno}: unknown grid axis '{axis}'. Available: {', '.join(GRID_AXES)}")
        grid[axis] = [_parse_value(axis, v) for v in values.split(",") if v.strip()]
        if not grid[axis]:
            raise ConfigError(f"{path}:{lineno}: axis '{axis}' has no values")
    return grid


def expand_grid(grid: Dict[str, List[Any]], base: ExperimentConfig) -> List[Dict[str, Any]]:
    """All grid points in file order; axes not in the grid take the base value."""
    axes = {
        "variant": grid.get("variant", [_base_variant(base)]),
        "lambda": grid.get("lambda", [base.loss.lambda_]),
        "dropout_average": grid.get("dropout_average", [base.model.dropout_average]),
        "iterations": grid.get("iterations", [base.decode.iterations]),
    }
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*axes.values())]


def _base_variant(base: ExperimentConfig) -> str:
    flags = {
        "use_model_consistency": base.loss.use_model_consistency,
        "use_shared_mask_consistency": base.loss.use_shared_mask_consistency,
    }
    return next(name for name, v in VARIANTS.items() if v == flags)


def _group_key(point: Dict[str, Any]) -> Tuple:
    return point["variant"], point["lambda"], point["dropout_average"]


def run_group(
    base: ExperimentConfig,
    key: Tuple,
    iterations: List[int],
    train_pairs: Sequence[SentencePair],
    test_pairs: Sequence[SentencePair],
    vocab: Vocab,
    run_dir: str,
) -> List[Dict[str, Any]]:
    """
    Train one model and evaluate it at every iteration count.

    Failures are returned as rows with status "failed" instead of raised.
    """
    variant, lam, dropout_average = key
    point = {"variant": variant, "lambda": lam, "dropout_average": dropout_average}
    try:
        config = base.with_overrides(lambda_=lam, dropout_average=dropout_average, **VARIANTS[variant])
        trainer = Trainer(config, train_pairs, vocab, run_dir)
        trainer.run()
        params, _ = average_checkpoints([str(p) for p in list_checkpoints(run_dir)])
        accuracy = length_accuracy(params, test_pairs)

        rows = []
        for T in iterations:
            decode = DecodeConfig(iterations=T, length_candidates=config.decode.length_candidates)
            start = time.perf_counter()
            hypotheses = translate_corpus(params, [p.source_ids for p in test_pairs], decode)
            elapsed = time.perf_counter() - start
            report = corpus_bleu(
                [vocab.decode(h.tokens) for h in hypotheses],
                [vocab.decode(p.target_ids) for p in test_pairs],
            )
            rows.append(AblationRow(
                **point, iterations=T, bleu=report.bleu, length_accuracy=accuracy,
                sentences_per_second=len(test_pairs) / max(elapsed, 1e-9),
            ).model_dump(by_alias=True))
        return rows
    except Exception as e:
        logger.error("Ablation run %s failed: %s", point, e)
        return [
            AblationRow(**point, iterations=T, status="failed", error=f"{type(e).__name__}: {e}").model_dump(by_alias=True)
            for T in iterations
        ]


def _run_dir_name(key: Tuple) -> str:
    variant, lam, dropout_average = key
    return f"{variant}_lambda{lam:g}_dropavg{dropout_average:g}"


def run_ablation(
    grid: Dict[str, List[Any]],
    base: ExperimentConfig,
    train_pairs: Sequence[SentencePair],
    test_pairs: Sequence[SentencePair],
    vocab: Vocab,
    out_dir: str,
    workers: int = 1,
) -> pd.DataFrame:
    """
    Train and evaluate every grid point; write ablation.csv to out_dir.

    Args:
        grid: axis -> values (see read_grid_file)
        base: Config shared by all points
        train_pairs: Training data
        test_pairs: Held-out evaluation data
        vocab: Vocabulary of both
        out_dir: Directory for per-run subdirectories and the results table
        workers: Parallel training processes

    Returns:
        DataFrame with one row per grid point, in grid order
    """
    unknown = set(grid) - set(GRID_AXES)
    if unknown:
        raise ConfigError(f"Unknown grid axes: {sorted(unknown)}")
    points = expand_grid(grid, base)
    groups: Dict[Tuple, List[int]] = {}
    for point in points:
        its = groups.setdefault(_group_key(point), [])
        if point["iterations"] not in its:
            its.append(point["iterations"])

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logger.info("Ablation: %d grid points, %d training runs", len(points), len(groups))

    jobs = [
        (base, key, its, list(train_pairs), list(test_pairs), vocab, str(out / _run_dir_name(key)))
        for key, its in groups.items()
    ]
    results: Dict[Tuple, List[Dict[str, Any]]] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {job[1]: pool.submit(run_group, *job) for job in jobs}
            for key, future in futures.items():
                results[key] = future.result()
    else:
        for job in jobs:
            results[job[1]] = run_group(*job)

    by_point = {
        (row["variant"], row["lambda"], row["dropout_average"], row["iterations"]): row
        for rows in results.values() for row in rows
    }
    ordered = [
        by_point[(p["variant"], p["lambda"], p["dropout_average"], p["iterations"])]
        for p in points
    ]
    df = pd.DataFrame(ordered, columns=COLUMNS)
    df.to_csv(out / RESULTS_FILE, index=False)
    failed = int((df["status"] != "ok").sum())
    logger.info("Ablation finished: %d rows, %d failed -> %s", len(df), failed, out / RESULTS_FILE)
    return df


def load_ablation(filepath: str) -> pd.DataFrame:
    path = Path(filepath)
    if not path.exists():
        raise FileNotFoundError(f"Ablation table not found: {path}")
    return pd.read_csv(path)
