"""
Average the online weights of a run's newest checkpoints into one file.

Usage:
    python scripts/average_checkpoints.py --run-dir runs/toy --last 10 \
        --out runs/toy/checkpoint_avg.parquet
"""
import argparse
import sys
from pathlib import Path

# Add parent directory to path to import from natlab
sys.path.insert(0, str(Path(__file__).parent.parent))

from natlab.errors import ConfigError, NatLabError
from natlab.services.trainer import average_checkpoints, newest_checkpoints, save_params


def main():
    """Average step checkpoints (explicit list or newest --last of --run-dir)."""
    parser = argparse.ArgumentParser(description="Checkpoint averaging")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--run-dir", help="Run directory holding checkpoint_step*.parquet")
    source.add_argument("--ckpts", nargs="+", help="Explicit checkpoint files")
    parser.add_argument("--last", type=int, default=10, help="Newest checkpoints to average (with --run-dir)")
    parser.add_argument("--out", required=True, help="Output checkpoint")
    args = parser.parse_args()

    try:
        paths = [str(p) for p in newest_checkpoints(args.run_dir, args.last)] if args.run_dir else args.ckpts
    except ConfigError as e:
        print(f"[!] {e}")
        sys.exit(1)
    if not paths:
        print(f"[!] No checkpoints found in {args.run_dir}")
        print("   Run 'python scripts/train.py' first.")
        sys.exit(1)

    print("=" * 60)
    print(f"Averaging {len(paths)} checkpoints")
    print("=" * 60)
    for path in paths:
        print(f"  - {path}")

    try:
        params, vocab = average_checkpoints(paths)
        save_params(args.out, params, vocab)
    except (NatLabError, FileNotFoundError) as e:
        print(f"[!] {e}")
        sys.exit(1)

    print()
    print(f"[OK] Averaged weights saved to: {args.out}")
    print("=" * 60)


if __name__ == "__main__":
    main()
