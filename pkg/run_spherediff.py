#!/usr/bin/env python3
"""
Main spherediff launcher
Runs one pipeline stage (precompute, train, sample, eval, diagnose) or the
whole chain for a run configuration.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from core.cli import EXIT_OK, main as cli_main  # noqa: E402

PIPELINE = ("precompute", "train", "eval", "sample")


def print_header():
    print("🌐" * 30)
    print("🌟 SPHEREDIFF: HYPERSPHERE DIFFUSION LANGUAGE MODELING 🌟")
    print("🌐" * 30)
    print()


def print_usage():
    print("📋 USAGE:")
    print("  python run_spherediff.py <command> --config FILE [--set key=value ...]")
    print("  python run_spherediff.py pipeline --config FILE   # precompute → train → eval → sample")
    print("  python run_spherediff.py --help                  # Show this help")
    print()
    print("🔧 COMMANDS:")
    print("   precompute  Riemannian-normal tables for the mode's initial points")
    print("   train       Predictor training (mse | ce | ce_importance)")
    print("   sample      Generation by geodesic random walk")
    print("   eval        NLL upper bound along simulated bridges")
    print("   diagnose    MMD / projected / radial / ablation CSV reports (split on request)")
    print()
    print("⚙️ CONFIGURATION:")
    print("   Run files live in configs/*.env; SPHEREDIFF_LOG_LEVEL, SPHEREDIFF_WORKERS")
    print("   and SPHEREDIFF_ARTIFACT_DIR come from the environment or .env")
    print()


def run_pipeline(argv):
    for stage in PIPELINE:
        print(f"🔄 {stage}")
        code = cli_main([stage] + argv)
        if code != EXIT_OK:
            print(f"❌ {stage} failed with exit code {code}")
            return code
    print("✅ Pipeline complete")
    return EXIT_OK


def main():
    args = sys.argv[1:]
    if not args or args[0] in ("--help", "-h"):
        print_header()
        print_usage()
        return EXIT_OK
    if args[0] == "pipeline":
        print_header()
        return run_pipeline(args[1:])
    return cli_main(args)


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n👋 Interrupted")
        sys.exit(130)
