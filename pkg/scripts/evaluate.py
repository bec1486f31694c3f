"""
Corpus BLEU of a hypothesis file against a reference file.

Both files hold one whitespace-tokenized sentence per line.

Usage:
    python scripts/evaluate.py --hyp hyp.txt --ref data/toy/test.tgt
"""
import argparse
import sys
from pathlib import Path

# Add parent directory to path to import from natlab
sys.path.insert(0, str(Path(__file__).parent.parent))

from natlab.services.bleu import corpus_bleu_lines
from natlab.services.corpus import read_lines


def main():
    """Print the BLEU report."""
    parser = argparse.ArgumentParser(description="Corpus BLEU")
    parser.add_argument("--hyp", required=True, help="Hypothesis file")
    parser.add_argument("--ref", required=True, help="Reference file")
    args = parser.parse_args()

    try:
        report = corpus_bleu_lines(read_lines(args.hyp), read_lines(args.ref))
    except (FileNotFoundError, ValueError) as e:
        print(f"[!] {e}")
        sys.exit(1)

    print(report)


if __name__ == "__main__":
    main()
