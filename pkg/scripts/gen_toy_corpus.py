"""
Generate a synthetic parallel corpus with train and test splits.

Both splits come from one generator call so they share the cipher of the
substitution-cipher task.

Usage:
    python scripts/gen_toy_corpus.py --task substitution-cipher --vocab-size 32 \
        --max-len 12 --train-pairs 5000 --test-pairs 500 --out data/toy
"""
import argparse
import sys
from pathlib import Path

# Add parent directory to path to import from natlab
sys.path.insert(0, str(Path(__file__).parent.parent))

from natlab.errors import ConfigError
from natlab.services.corpus import TOY_TASKS, gen_toy_corpus, read_lines


def main():
    """Write train.src/train.tgt and test.src/test.tgt under --out."""
    parser = argparse.ArgumentParser(description="Generate a toy parallel corpus")
    parser.add_argument("--task", choices=TOY_TASKS, default="substitution-cipher")
    parser.add_argument("--vocab-size", type=int, default=32)
    parser.add_argument("--max-len", type=int, default=12)
    parser.add_argument("--train-pairs", type=int, default=5000)
    parser.add_argument("--test-pairs", type=int, default=500)
    parser.add_argument("--noise", type=float, default=0.0, help="Probability of corrupting each target token")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--out", default=str(Path(__file__).parent.parent / "data" / "toy"))
    args = parser.parse_args()

    out = Path(args.out)
    all_src, all_tgt = out / "all.src", out / "all.tgt"

    print("=" * 60)
    print(f"Generating {args.task} corpus")
    print("=" * 60)

    try:
        gen_toy_corpus(
            args.task, args.vocab_size, args.train_pairs + args.test_pairs, args.max_len,
            args.seed, str(all_src), str(all_tgt), noise=args.noise,
        )
    except ConfigError as e:
        print(f"[!] {e}")
        sys.exit(1)

    sources, targets = read_lines(str(all_src)), read_lines(str(all_tgt))
    splits = {
        "train": slice(0, args.train_pairs),
        "test": slice(args.train_pairs, args.train_pairs + args.test_pairs),
    }
    for name, part in splits.items():
        (out / f"{name}.src").write_text("".join(s + "\n" for s in sources[part]), encoding="utf-8")
        (out / f"{name}.tgt").write_text("".join(t + "\n" for t in targets[part]), encoding="utf-8")
        print(f"[OK] {name}: {len(sources[part])} pairs -> {out / name}.src / .tgt")
    all_src.unlink()
    all_tgt.unlink()

    print()
    print("Sample pairs (first 3):")
    print("-" * 60)
    for src, tgt in list(zip(sources, targets))[:3]:
        print(f"  {src}")
        print(f"  -> {tgt}")
    print("=" * 60)


if __name__ == "__main__":
    main()
