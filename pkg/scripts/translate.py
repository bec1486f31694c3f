"""
Translate a source file with mask-predict decoding.

By default the weights are the mean of the newest 10 step checkpoints in the
checkpoint's run directory. --online and --use-average-model load a single
store of --ckpt instead.

Usage:
    python scripts/translate.py --ckpt runs/toy/checkpoint_last.parquet \
        --input data/toy/test.src --iterations 10 --length-candidates 5 > hyp.txt
"""
import argparse
import logging
import sys
import time
from pathlib import Path

# Add parent directory to path to import from natlab
sys.path.insert(0, str(Path(__file__).parent.parent))

from natlab.errors import NatLabError
from natlab.models.config import DecodeConfig
from natlab.models.corpus import LEN_ID
from natlab.services.corpus import get_tokenizer, read_lines
from natlab.services.decoder import translate_corpus
from natlab.services.trainer import average_checkpoints, load_params, newest_checkpoints


def status(message: str = "") -> None:
    """Progress goes to stderr so stdout carries only hypotheses."""
    print(message, file=sys.stderr)


def load_weights(args):
    if args.online:
        return load_params(args.ckpt, "online"), "online"
    if args.use_average_model:
        return load_params(args.ckpt, "average"), "average"
    paths = newest_checkpoints(str(Path(args.ckpt).parent), args.average_last) or [Path(args.ckpt)]
    return average_checkpoints([str(p) for p in paths]), f"mean of {len(paths)} checkpoints"


def main():
    """Decode every line of --input and write one hypothesis per line."""
    parser = argparse.ArgumentParser(description="Mask-predict translation")
    parser.add_argument("--ckpt", required=True, help="Checkpoint file")
    parser.add_argument("--input", required=True, help="Source file, one sentence per line")
    parser.add_argument("--output", help="Hypothesis file (default: stdout)")
    parser.add_argument("--iterations", type=int, default=10, help="Decoding iterations T")
    parser.add_argument("--length-candidates", type=int, default=5, help="Length beams per sentence")
    parser.add_argument("--remask-threshold", type=float, help="Re-mask tokens below this probability instead")
    parser.add_argument("--workers", type=int, default=1, help="Decoding threads")
    parser.add_argument("--tokenizer", default="whitespace", help="whitespace or char")
    weights = parser.add_mutually_exclusive_group()
    weights.add_argument("--use-average-model", action="store_true", help="Use the moving-average weights")
    weights.add_argument("--online", action="store_true", help="Use the online weights")
    parser.add_argument("--average-last", type=int, default=10, help="Checkpoints in the default average")
    parser.add_argument("--log-level", default="WARNING", help="Logging level")
    args = parser.parse_args()

    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr)

    try:
        config = DecodeConfig(
            iterations=args.iterations,
            length_candidates=args.length_candidates,
            remask_threshold=args.remask_threshold,
            workers=args.workers,
        )
        tokenizer = get_tokenizer(args.tokenizer)
        (params, vocab), label = load_weights(args)
        lines = read_lines(args.input)
    except (NatLabError, FileNotFoundError, ValueError) as e:
        status(f"[!] {e}")
        sys.exit(1)

    status("=" * 60)
    status("natlab: mask-predict translation")
    status("=" * 60)
    status(f"[i] Weights: {label}")
    status(f"[i] T={config.iterations}, length candidates={config.length_candidates}")

    sources = [[LEN_ID] + vocab.encode(tokenizer.tokenize(line) or ["[UNK]"]) for line in lines]
    start = time.perf_counter()
    hypotheses = translate_corpus(params, sources, config)
    elapsed = time.perf_counter() - start

    output = "".join(tokenizer.detokenize(vocab.decode(h.tokens)) + "\n" for h in hypotheses)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(output, encoding="utf-8")
    else:
        sys.stdout.write(output)

    status()
    status(f"[OK] {len(hypotheses)} sentences in {elapsed:.2f}s ({len(hypotheses) / max(elapsed, 1e-9):.1f} sent/s)")
    if args.output:
        status(f"Hypotheses saved to: {args.output}")
    status("=" * 60)


if __name__ == "__main__":
    main()
