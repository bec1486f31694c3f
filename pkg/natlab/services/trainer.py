"""
Training: dual masking, four forward passes, one backward, Adam on the online
weights, moving-average update of the average weights, checkpoints.

All randomness of step s is drawn from generators seeded by (seed, s, stream),
so a run resumed from a checkpoint continues the uninterrupted stream exactly.
"""
import json
import logging
import queue
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from natlab.errors import CheckpointError, ConfigError, ConfigMismatchError, NonFiniteLossError
from natlab.models.checkpoint import (
    CHECKPOINT_VERSION,
    CheckpointHeader,
    load_checkpoint_file,
    save_checkpoint_file,
)
from natlab.models.config import DecodeConfig, ExperimentConfig, experiment_from_flat, write_config_file
from natlab.models.corpus import Batch, SentencePair, Vocab
from natlab.models.metrics import EvalRecord, MetricsRecord, append_jsonl
from natlab.models.views import DualViewBatch
from natlab.services import autodiff as ad
from natlab.services import losses, transformer
from natlab.services.bleu import corpus_bleu
from natlab.services.corpus import make_batches
from natlab.services.decoder import length_accuracy, translate_corpus
from natlab.services.ema import ema_step, init_average
from natlab.services.masking import make_dual_batch
from natlab.services.optimizer import AdamState, adam_step, clip_grad_norm, lr_at
from natlab.services.params import ParamStore

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
EVAL_FILE = "eval.jsonl"
CONFIG_FILE = "config.txt"
VOCAB_FILE = "vocab.txt"
LAST_CHECKPOINT = "checkpoint_last.parquet"

# rng streams within one step
MASK_STREAM, ONLINE_V1, ONLINE_V2, AVERAGE_V1, AVERAGE_V2 = range(5)


@dataclass
class TrainState:
    """Everything that changes from one step to the next."""

    step: int
    online: ParamStore
    average: ParamStore
    adam: AdamState
    epoch: int = 0
    batch_cursor: int = 0


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream])


def init_state(config: ExperimentConfig) -> TrainState:
    """Fresh online weights, an identical average copy and zero Adam moments."""
    online = transformer.init_params(config.model, seed=config.train.seed, dtype=config.train.precision)
    return TrainState(step=0, online=online, average=init_average(online), adam=AdamState.zeros_like(online))


def prepare_batch(batch: Batch, seed: int, step: int) -> DualViewBatch:
    """Mask every target twice with the masking stream of `step`."""
    return make_dual_batch(batch.targets(), step_rng(seed, step, MASK_STREAM), batch.sources())


def _dump_batch(batch: DualViewBatch, step: int, breakdown: dict, dump_dir: Optional[Path]) -> str:
    if dump_dir is None:
        dump_dir = Path(tempfile.gettempdir())
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nonfinite_step{step}.json"
    payload = {"step": step, "loss_terms": breakdown, "batch": batch.model_dump()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, default=str)
    return str(path)


def train_step(
    state: TrainState,
    batch: DualViewBatch,
    config: ExperimentConfig,
    dump_dir: Optional[Path] = None,
) -> Tuple[TrainState, MetricsRecord]:
    """
    One optimizer step on a DualViewBatch.

    Runs the online and the average model on both views (four forwards),
    backpropagates the weighted total into the online weights only, applies
    Adam, then moves the average weights toward the online weights.

    Raises:
        NonFiniteLossError: If the total is NaN/Inf; the batch is dumped as JSON first
    """
    step = state.step + 1
    seed = config.train.seed
    lr = lr_at(step, config.train.warmup_steps, config.train.peak_lr)
    src = batch.source_array()
    in1, in2 = batch.input_arrays()
    p_online, p_average = config.model.dropout_online, config.model.dropout_average

    state.online.zero_grad()
    average_digest = state.average.digest() if config.train.verify_average_untouched else None

    with ad.GradTape() as tape:
        on1 = transformer.forward(state.online, src, in1, p_online, step_rng(seed, step, ONLINE_V1))
        on2 = transformer.forward(state.online, src, in2, p_online, step_rng(seed, step, ONLINE_V2))
        av1 = transformer.forward(state.average, src, in1, p_average, step_rng(seed, step, AVERAGE_V1))
        av2 = transformer.forward(state.average, src, in2, p_average, step_rng(seed, step, AVERAGE_V2))
        terms = losses.compute_terms(on1, on2, av1, av2, batch, config.loss)
        total = losses.objective(terms, config.loss)

    values = terms.as_floats()
    if not np.isfinite(float(total.value)) or not all(np.isfinite(v) for v in values.values()):
        path = _dump_batch(batch, step, values, dump_dir)
        logger.error("Non-finite loss at step %d: %s", step, values)
        raise NonFiniteLossError(step, path)

    tape.backward(total)
    grads = state.online.grads()
    grad_norm = clip_grad_norm(grads, config.train.clip_norm)
    adam_step(
        state.online, grads, state.adam, lr,
        config.train.adam_beta1, config.train.adam_beta2, config.train.adam_eps,
    )

    if average_digest is not None and state.average.digest() != average_digest:
        raise RuntimeError(f"Average weights changed outside the moving-average update at step {step}")
    ema_step(state.average, state.online, config.ema.alpha)
    state.step = step

    breakdown = losses.total_loss(values, config.loss)
    violations = losses.kl_violations(breakdown)
    if violations:
        logger.warning("Negative KL terms at step %d: %s", step, violations)

    masked1, masked2 = batch.masked_token_count()
    record = MetricsRecord(
        **breakdown.model_dump(),
        step=step,
        lr=lr,
        grad_norm=grad_norm,
        masked_tokens1=masked1,
        masked_tokens2=masked2,
        shared_tokens=sum(len(s) for s in batch.shared_positions),
        sentences=len(batch),
        nll_per_token=terms.nll_per_token(),
    )
    return state, record


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_name(step: int) -> str:
    return f"checkpoint_step{step}.parquet"


def save_checkpoint(path: str, state: TrainState, config: ExperimentConfig, vocab: Optional[Vocab] = None) -> None:
    """Persist both stores, the Adam moments and the resume position."""
    header = CheckpointHeader(
        version=CHECKPOINT_VERSION,
        model=state.online.config,
        experiment=config.to_flat(),
        step=state.step,
        epoch=state.epoch,
        batch_cursor=state.batch_cursor,
        vocab_tokens=vocab.tokens if vocab is not None else [],
    )
    stores = {
        "online": state.online.to_arrays(),
        "average": state.average.to_arrays(),
        "adam_m": state.adam.m,
        "adam_v": state.adam.v,
    }
    save_checkpoint_file(path, header, stores)


def save_params(path: str, params: ParamStore, vocab: Vocab, step: int = 0, experiment: Optional[dict] = None) -> None:
    """Write frozen weights as a checkpoint with only an online store (translatable, not resumable)."""
    header = CheckpointHeader(
        version=CHECKPOINT_VERSION,
        model=params.config,
        experiment=experiment or {},
        step=step,
        vocab_tokens=vocab.tokens,
    )
    save_checkpoint_file(path, header, {"online": params.to_arrays()})


def load_checkpoint(path: str):
    """(header, stores) of a checkpoint file."""
    return load_checkpoint_file(path)


def restore_state(path: str) -> Tuple[TrainState, ExperimentConfig, Vocab]:
    """Rebuild the TrainState, its config and vocabulary from a checkpoint."""
    header, stores = load_checkpoint(path)
    for name in ("average", "adam_m", "adam_v"):
        if name not in stores:
            raise CheckpointError(f"{path} has no '{name}' store; it cannot be resumed")
    online = ParamStore.from_arrays(stores["online"], header.model, requires_grad=True)
    average = ParamStore.from_arrays(stores["average"], header.model, requires_grad=False)
    online.assert_compatible(average)
    adam = AdamState(
        m={k: v.copy() for k, v in stores["adam_m"].items()},
        v={k: v.copy() for k, v in stores["adam_v"].items()},
        step=header.step,
    )
    state = TrainState(
        step=header.step, online=online, average=average, adam=adam,
        epoch=header.epoch, batch_cursor=header.batch_cursor,
    )
    config = experiment_from_flat(header.experiment)
    return state, config, Vocab(tokens=header.vocab_tokens)


def load_params(path: str, which: str = "online") -> Tuple[ParamStore, Vocab]:
    """Frozen weights ('online' or 'average') and the vocabulary of a checkpoint."""
    header, stores = load_checkpoint(path)
    if which not in ("online", "average"):
        raise ValueError(f"which must be 'online' or 'average', got '{which}'")
    if which not in stores:
        raise CheckpointError(f"{path} has no '{which}' store")
    return ParamStore.from_arrays(stores[which], header.model, requires_grad=False), Vocab(tokens=header.vocab_tokens)


def list_checkpoints(run_dir: str) -> List[Path]:
    """Step checkpoints of a run, oldest first."""
    paths = Path(run_dir).glob("checkpoint_step*.parquet")
    return sorted(paths, key=lambda p: int(p.stem[len("checkpoint_step"):]))


def newest_checkpoints(run_dir: str, last: int) -> List[Path]:
    """The newest `last` step checkpoints of a run, oldest first."""
    if last < 1:
        raise ConfigError(f"Number of checkpoints to average must be at least 1, got {last}")
    return list_checkpoints(run_dir)[-last:]


def prune_checkpoints(run_dir: str, keep_last_k: int) -> List[Path]:
    """Delete all but the newest keep_last_k step checkpoints; returns the deleted paths."""
    paths = list_checkpoints(run_dir)
    stale = paths[:-keep_last_k] if keep_last_k > 0 else paths
    for path in stale:
        path.unlink()
        logger.debug("Removed old checkpoint %s", path)
    return stale


def average_checkpoints(paths: Sequence[str]) -> Tuple[ParamStore, Vocab]:
    """
    Element-wise mean of the online stores of several checkpoints.

    Raises:
        ValueError: If no paths are given
        ConfigMismatchError: If model configs or parameter sets differ
    """
    if not paths:
        raise ValueError("average_checkpoints needs at least one checkpoint")

    first_header = None
    sums: Dict[str, np.ndarray] = {}
    dtypes: Dict[str, np.dtype] = {}
    for path in paths:
        header, stores = load_checkpoint(str(path))
        online = stores["online"]
        if first_header is None:
            first_header = header
            sums = {name: value.astype(np.float64) for name, value in online.items()}
            dtypes = {name: value.dtype for name, value in online.items()}
            continue
        if header.model != first_header.model:
            raise ConfigMismatchError(f"{path} has a different model config than {paths[0]}")
        if set(online) != set(sums):
            raise ConfigMismatchError(f"{path} has a different parameter set than {paths[0]}")
        for name, value in online.items():
            sums[name] += value

    n = float(len(paths))
    averaged = {name: (total / n).astype(dtypes[name]) for name, total in sums.items()}
    logger.info("Averaged %d checkpoints", len(paths))
    return (
        ParamStore.from_arrays(averaged, first_header.model, requires_grad=False),
        Vocab(tokens=first_header.vocab_tokens),
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class BatchPrefetcher:
    """
    Prepares DualViewBatches on a worker thread, in step order.

    The worker is the only producer, so queue order equals step order
    regardless of timing.
    """

    def __init__(self, items: Iterator[Tuple[int, Tuple[int, int], Batch]], seed: int, depth: int):
        self._items = items
        self._seed = seed
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(depth, 1))
        self._running = False
        self._thread = threading.Thread(target=self._work, name="batch-prefetch", daemon=True)

    def _work(self) -> None:
        try:
            for step, position, batch in self._items:
                if not self._running:
                    break
                self._queue.put((step, position, prepare_batch(batch, self._seed, step)))
        except Exception as e:  # surfaced on the training thread
            self._queue.put(e)
        self._queue.put(None)

    def __enter__(self) -> "BatchPrefetcher":
        self._running = True
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._running = False
        # drain so a blocked producer can observe the stop flag
        while self._thread.is_alive():
            try:
                self._queue.get(timeout=0.05)
            except queue.Empty:
                pass
        self._thread.join()

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is None:
                return
            if isinstance(item, Exception):
                raise item
            yield item


class Trainer:
    """
    Runs training for an experiment and writes its run directory.

    Run directory layout:
        config.txt, vocab.txt, metrics.jsonl, eval.jsonl,
        checkpoint_step{N}.parquet (newest keep_last_k), checkpoint_last.parquet
    """

    def __init__(
        self,
        config: ExperimentConfig,
        pairs: Sequence[SentencePair],
        vocab: Vocab,
        out_dir: str,
        heldout: Optional[Sequence[SentencePair]] = None,
        state: Optional[TrainState] = None,
    ):
        if config.model.vocab_size != len(vocab):
            config = config.with_overrides(vocab_size=len(vocab))
        self.config = config
        self.pairs = list(pairs)
        self.vocab = vocab
        self.out_dir = Path(out_dir)
        self.heldout = list(heldout or [])
        ad.set_default_dtype(config.train.precision)
        self.state = state if state is not None else init_state(config)
        if self.state.online.config != config.model:
            raise ConfigMismatchError("Resumed weights were trained with a different model config")

    @classmethod
    def resume(
        cls,
        checkpoint: str,
        pairs: Sequence[SentencePair],
        out_dir: str,
        heldout: Optional[Sequence[SentencePair]] = None,
        max_steps: Optional[int] = None,
        overrides: Optional[Mapping[str, object]] = None,
    ) -> "Trainer":
        """
        Continue a run from a checkpoint.

        overrides are flat config keys applied on top of the stored config
        (max_steps is a shorthand for one of them). Keys that change the stored
        model config raise ConfigMismatchError.
        """
        state, config, vocab = restore_state(checkpoint)
        overrides = dict(overrides or {})
        if max_steps is not None:
            overrides["max_steps"] = max_steps
        if overrides:
            config = config.with_overrides(**overrides)
            logger.info("Resume overrides: %s", ", ".join(f"{k}={v}" for k, v in sorted(overrides.items())))
        logger.info("Resuming from %s at step %d", checkpoint, state.step)
        return cls(config, pairs, vocab, out_dir, heldout=heldout, state=state)

    def _schedule(self) -> Iterator[Tuple[int, Tuple[int, int], Batch]]:
        """(step, resume position after the step, batch) for every remaining step."""
        train = self.config.train
        step, epoch, cursor = self.state.step, self.state.epoch, self.state.batch_cursor
        while step < train.max_steps:
            batches = make_batches(self.pairs, train.tokens_per_batch, train.seed + epoch)
            if not batches:
                return
            for i in range(cursor, len(batches)):
                if step >= train.max_steps:
                    return
                step += 1
                after = (epoch + 1, 0) if i + 1 == len(batches) else (epoch, i + 1)
                yield step, after, batches[i]
            epoch, cursor = epoch + 1, 0

    def _prepared(self) -> Iterator[Tuple[int, Tuple[int, int], DualViewBatch]]:
        seed = self.config.train.seed
        for step, position, batch in self._schedule():
            yield step, position, prepare_batch(batch, seed, step)

    def evaluate(self, params: Optional[ParamStore] = None, iterations: int = 1) -> EvalRecord:
        """BLEU and length accuracy on the held-out pairs."""
        params = params or self.state.online
        decode = DecodeConfig(iterations=iterations, length_candidates=self.config.decode.length_candidates)
        hypotheses = translate_corpus(params, [p.source_ids for p in self.heldout], decode)
        report = corpus_bleu(
            [self.vocab.decode(h.tokens) for h in hypotheses],
            [self.vocab.decode(p.target_ids) for p in self.heldout],
        )
        return EvalRecord(
            step=self.state.step,
            bleu=report.bleu,
            length_accuracy=length_accuracy(params, self.heldout),
            iterations=iterations,
        )

    def save(self) -> Path:
        path = self.out_dir / checkpoint_name(self.state.step)
        save_checkpoint(str(path), self.state, self.config, self.vocab)
        save_checkpoint(str(self.out_dir / LAST_CHECKPOINT), self.state, self.config, self.vocab)
        prune_checkpoints(str(self.out_dir), self.config.train.keep_last_k)
        return path

    def run(self, on_step: Optional[Callable[[MetricsRecord], None]] = None) -> TrainState:
        """
        Train until max_steps, logging, evaluating and checkpointing on schedule.

        Args:
            on_step: Called with every step's MetricsRecord (e.g. a progress bar)
        """
        train = self.config.train
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_config_file(self.config, str(self.out_dir / CONFIG_FILE))
        self.vocab.save(str(self.out_dir / VOCAB_FILE))
        metrics_path = str(self.out_dir / METRICS_FILE)
        eval_path = str(self.out_dir / EVAL_FILE)

        logger.info(
            "Training from step %d to %d on %d pairs (%d parameters)",
            self.state.step, train.max_steps, len(self.pairs), self.state.online.num_parameters(),
        )

        if train.prefetch > 0:
            source = BatchPrefetcher(self._schedule(), train.seed, train.prefetch)
        else:
            source = None

        def steps():
            if source is None:
                yield from self._prepared()
            else:
                with source:
                    yield from source

        saved_at = None
        for step, (epoch, cursor), batch in steps():
            self.state, record = train_step(self.state, batch, self.config, dump_dir=self.out_dir)
            self.state.epoch, self.state.batch_cursor = epoch, cursor

            if step % train.log_interval == 0:
                append_jsonl(record, metrics_path)
            if on_step is not None:
                on_step(record)
            if train.eval_interval and self.heldout and step % train.eval_interval == 0:
                evaluation = self.evaluate()
                append_jsonl(evaluation, eval_path)
                logger.info("step %d: heldout BLEU %.2f, length acc %.3f", step, evaluation.bleu, evaluation.length_accuracy)
            if train.checkpoint_interval and step % train.checkpoint_interval == 0:
                self.save()
                saved_at = step

        if saved_at != self.state.step:
            self.save()
        logger.info("Finished at step %d", self.state.step)
        return self.state
