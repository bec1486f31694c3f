"""
Train a conditional masked language model with shared-mask and
average-model consistency.

Usage:
    python scripts/train.py --config configs/toy.txt \
        --data-src data/toy/train.src --data-tgt data/toy/train.tgt --out runs/toy

    # continue an interrupted run
    python scripts/train.py --config configs/toy.txt \
        --data-src data/toy/train.src --data-tgt data/toy/train.tgt --out runs/toy \
        --resume runs/toy/checkpoint_last.parquet

--set overrides also apply on --resume; model keys must match the checkpoint.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

# Add parent directory to path to import from natlab
sys.path.insert(0, str(Path(__file__).parent.parent))

BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _export_threads(config_path: str) -> None:
    """numpy reads BLAS thread settings at import, so this runs before natlab is imported."""
    try:
        lines = Path(config_path).read_text(encoding="utf-8").splitlines()
    except OSError:
        return
    for raw in lines:
        key, _, value = raw.split("#", 1)[0].partition("=")
        if key.strip() == "num_threads" and value.strip():
            for var in BLAS_THREAD_VARS:
                os.environ.setdefault(var, value.strip())


def main():
    """Train from a config file and a parallel corpus."""
    parser = argparse.ArgumentParser(description="Train a CMLM with consistency regularization")
    parser.add_argument("--config", required=True, help="Flat key = value config file")
    parser.add_argument("--data-src", required=True, help="Source side of the training corpus")
    parser.add_argument("--data-tgt", required=True, help="Target side of the training corpus")
    parser.add_argument("--out", required=True, help="Run directory")
    parser.add_argument("--resume", help="Checkpoint to continue from")
    parser.add_argument("--heldout-src", help="Held-out source file for eval_interval evaluations")
    parser.add_argument("--heldout-tgt", help="Held-out target file for eval_interval evaluations")
    parser.add_argument("--vocab", help="Vocabulary file (default: built from the training corpus)")
    parser.add_argument("--tokenizer", default="whitespace", help="whitespace or char")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override a config key (repeatable)",
    )
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    args = parser.parse_args()

    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    _export_threads(args.config)

    from tqdm import tqdm

    from natlab.errors import NatLabError
    from natlab.models.checkpoint import read_checkpoint_header
    from natlab.models.corpus import Vocab
    from natlab.models.config import read_config_file
    from natlab.services.corpus import build_vocab, get_tokenizer, load_parallel
    from natlab.services.trainer import METRICS_FILE, Trainer

    print("=" * 60)
    print("natlab: training")
    print("=" * 60)
    print()

    try:
        config = read_config_file(args.config)
        overrides = {k.strip(): v.strip() for k, v in (item.split("=", 1) for item in args.overrides)}
        if overrides:
            config = config.with_overrides(**overrides)
        tokenizer = get_tokenizer(args.tokenizer)

        if args.resume:
            header = read_checkpoint_header(args.resume)
            vocab = Vocab(tokens=header.vocab_tokens)
            print(f"[i] Resuming from {args.resume} (step {header.step})")
        elif args.vocab:
            vocab = Vocab.load(args.vocab)
        else:
            vocab = build_vocab([args.data_src, args.data_tgt], tokenizer)
        print(f"[i] Vocabulary: {len(vocab)} ids")

        pairs = load_parallel(args.data_src, args.data_tgt, vocab, config.model.n_max, tokenizer)
        heldout = []
        if args.heldout_src and args.heldout_tgt:
            heldout = load_parallel(args.heldout_src, args.heldout_tgt, vocab, config.model.n_max, tokenizer)
        print(f"[i] Training pairs: {len(pairs)}, held-out pairs: {len(heldout)}")
        print()

        if args.resume:
            trainer = Trainer.resume(
                args.resume, pairs, args.out, heldout=heldout,
                max_steps=config.train.max_steps, overrides=overrides,
            )
        else:
            trainer = Trainer(config, pairs, vocab, args.out, heldout=heldout)

        remaining = max(trainer.config.train.max_steps - trainer.state.step, 0)
        with tqdm(total=remaining, desc="train", unit="step") as bar:
            def on_step(record):
                bar.update(1)
                bar.set_postfix(loss=f"{record.total:.3f}", nll=f"{record.nll_per_token:.3f}", lr=f"{record.lr:.2e}")

            state = trainer.run(on_step=on_step)
    except (NatLabError, FileNotFoundError) as e:
        print()
        print(f"[!] {e}")
        sys.exit(1)

    print()
    print("=" * 60)
    print("Summary")
    print("=" * 60)
    print(f"Steps:           {state.step}")
    print(f"Parameters:      {state.online.num_parameters():,}")
    print(f"Run directory:   {args.out}")
    print(f"Metrics log:     {Path(args.out) / METRICS_FILE}")
    print()
    print("Next: python scripts/translate.py --ckpt " + str(Path(args.out) / "checkpoint_last.parquet") + " --input <src file>")
    print("=" * 60)


if __name__ == "__main__":
    main()
