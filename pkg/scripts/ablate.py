"""
Run an ablation sweep and write ablation.csv.

Usage:
    python scripts/ablate.py --grid configs/lambda_grid.txt --config configs/toy.txt \
        --data-src data/toy/train.src --data-tgt data/toy/train.tgt \
        --test-src data/toy/test.src --test-tgt data/toy/test.tgt --out runs/ablation_lambda
"""
import argparse
import logging
import sys
from pathlib import Path

# Add parent directory to path to import from natlab
sys.path.insert(0, str(Path(__file__).parent.parent))

from natlab.errors import NatLabError
from natlab.models.config import read_config_file
from natlab.services.ablation import RESULTS_FILE, read_grid_file, run_ablation
from natlab.services.corpus import build_vocab, get_tokenizer, load_parallel, split_heldout


def main():
    """Train and evaluate every grid point."""
    parser = argparse.ArgumentParser(description="Ablation sweeps")
    parser.add_argument("--grid", required=True, help="Grid file (axis = v1, v2, ...)")
    parser.add_argument("--config", required=True, help="Base config file")
    parser.add_argument("--out", required=True, help="Sweep directory")
    parser.add_argument("--data-src", required=True)
    parser.add_argument("--data-tgt", required=True)
    parser.add_argument("--test-src", help="Held-out source (default: last --heldout training pairs)")
    parser.add_argument("--test-tgt", help="Held-out target")
    parser.add_argument("--heldout", type=int, default=500, help="Pairs held out when no test files are given")
    parser.add_argument("--workers", type=int, default=1, help="Parallel training processes")
    parser.add_argument("--tokenizer", default="whitespace")
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    args = parser.parse_args()

    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    print("=" * 60)
    print("natlab: ablation sweep")
    print("=" * 60)

    try:
        grid = read_grid_file(args.grid)
        base = read_config_file(args.config)
        tokenizer = get_tokenizer(args.tokenizer)
        files = [args.data_src, args.data_tgt] + ([args.test_src, args.test_tgt] if args.test_src else [])
        vocab = build_vocab(files, tokenizer)
        pairs = load_parallel(args.data_src, args.data_tgt, vocab, base.model.n_max, tokenizer)
        if args.test_src and args.test_tgt:
            test_pairs = load_parallel(args.test_src, args.test_tgt, vocab, base.model.n_max, tokenizer)
        else:
            pairs, test_pairs = split_heldout(pairs, args.heldout)
        for axis, values in grid.items():
            print(f"[i] {axis}: {values}")
        print(f"[i] {len(pairs)} training pairs, {len(test_pairs)} test pairs")
        print()

        df = run_ablation(grid, base, pairs, test_pairs, vocab, args.out, workers=args.workers)
    except (NatLabError, FileNotFoundError) as e:
        print(f"[!] {e}")
        sys.exit(1)

    print()
    print("=" * 60)
    print("Results")
    print("=" * 60)
    print(df.to_string(index=False))
    failed = int((df["status"] != "ok").sum())
    if failed:
        print()
        print(f"[!] {failed} grid points failed; see the error column")
    print()
    print(f"Table saved to: {Path(args.out) / RESULTS_FILE}")
    print("=" * 60)


if __name__ == "__main__":
    main()
