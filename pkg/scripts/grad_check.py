"""
Check analytic gradients of every objective term against central
differences on a tiny float64 model.

Exits with status 1 if any term exceeds the tolerance.

Usage:
    python scripts/grad_check.py --max-coords 6 --tolerance 1e-5
"""
import argparse
import logging
import sys
from pathlib import Path

# Add parent directory to path to import from natlab
sys.path.insert(0, str(Path(__file__).parent.parent))

from natlab.services.diagnostics import check_objective_gradients


def main():
    """Print one line per objective term."""
    parser = argparse.ArgumentParser(description="Gradient check of the training objective")
    parser.add_argument("--max-coords", type=int, default=6, help="Sampled coordinates per parameter")
    parser.add_argument("--tolerance", type=float, default=1e-5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--log-level", default="WARNING", help="Logging level")
    args = parser.parse_args()

    logging.basicConfig(level=args.log_level.upper())

    print("=" * 60)
    print("Gradient check (float64)")
    print("=" * 60)

    reports = check_objective_gradients(max_coords=args.max_coords, tolerance=args.tolerance, seed=args.seed)
    failed = False
    for name, report in reports.items():
        marker = "[OK]" if report.passed else "[!]"
        print(f"{marker:5s} {name:6s} max rel error {report.max_rel_error:.2e} ({report.coordinates} coords, {report.skipped} on relu kinks skipped)")
        for failure in report.failures[:3]:
            print(f"        {failure.name}[{failure.index}]: analytic {failure.analytic:.6e}, numeric {failure.numeric:.6e}")
        failed = failed or not report.passed

    print("=" * 60)
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
