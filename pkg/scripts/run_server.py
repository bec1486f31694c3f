"""
Start the natlab API server for browsing runs and translating.

Usage:
    python scripts/run_server.py --runs-dir runs --ckpt runs/toy/checkpoint_last.parquet
"""
import argparse
import os
import subprocess
import sys
from pathlib import Path


def main():
    parser = argparse.ArgumentParser(description="Run the natlab API server")
    parser.add_argument("--runs-dir", default="runs", help="Directory of run directories")
    parser.add_argument("--ckpt", help="Checkpoint served by /api/translate")
    parser.add_argument("--port", type=int, default=8001)
    parser.add_argument("--reload", action="store_true", help="Restart on code changes")
    args = parser.parse_args()

    project_root = Path(__file__).parent.parent
    runs_dir = Path(args.runs_dir).resolve()

    print("=" * 60)
    print("Starting natlab API")
    print("=" * 60)
    print()

    if not runs_dir.exists():
        print(f"[!] Warning: {runs_dir} not found!")
        print("   Run 'python scripts/train.py' first to create a run.")
        print()
    if args.ckpt and not Path(args.ckpt).exists():
        print(f"[!] Warning: checkpoint {args.ckpt} not found; /api/translate will return 404")
        print()

    env = dict(os.environ, NATLAB_RUNS_DIR=str(runs_dir))
    if args.ckpt:
        env["NATLAB_CHECKPOINT"] = str(Path(args.ckpt).resolve())

    print(f"   URL:  http://localhost:{args.port}")
    print(f"   Docs: http://localhost:{args.port}/docs")
    print()
    print("Press Ctrl+C to stop")
    print()

    command = [sys.executable, "-m", "uvicorn", "natlab.api.server:app", "--port", str(args.port)]
    if args.reload:
        command.append("--reload")
    server = subprocess.Popen(command, cwd=str(project_root), env=env)
    try:
        server.wait()
    except KeyboardInterrupt:
        print()
        print("=" * 60)
        print("Stopping server...")
        print("=" * 60)
        server.terminate()


if __name__ == "__main__":
    main()
