"""Run the desk-scale G->N ablation (4 variants x 3 seeds + a determinism re-run).

Fills the same cache the acceptance suite reads, so running this first makes
``pytest tests/test_acceptance.py`` fast. Prints the summary as JSON.

Usage:
    python scripts/run_desk_ablation.py [--seeds 3] [--iterations 1500] [--cache-dir .acceptance_cache]
"""

import argparse
import json
import logging
from pathlib import Path

from dmcl.experiments import run_desk_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--cache-dir", type=Path, default=ROOT / ".acceptance_cache")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    res = run_desk_experiment(n_seeds=args.seeds, iterations=args.iterations, cache_dir=args.cache_dir)
    print(json.dumps({k: res[k] for k in ("summary", "feature_scores", "determinism", "runtime_seconds")},
                     indent=2))


if __name__ == "__main__":
    main()
