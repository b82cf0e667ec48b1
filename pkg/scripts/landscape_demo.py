"""Score landscape over two task vectors: builds a pairwise population, sweeps
theta_pre + a*tau1 + b*tau2 on a grid, and writes CSV plus an SVG contour.

Usage: python scripts/landscape_demo.py [--config configs/quick.json] [--out runs/landscape]
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from evomerge.evaluator import InProcessEvaluator
from evomerge.harness import ExperimentConfig, get_population
from evomerge.merging import TaskVector, landscape_slice


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/quick.json")
    parser.add_argument("--out", default="runs/landscape")
    parser.add_argument("--pair", type=int, nargs=2, default=(0, 1))
    parser.add_argument("--steps", type=int, default=13)
    args = parser.parse_args()

    cfg = ExperimentConfig.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = get_population(cfg, cfg.seeds[0])
    i, j = args.pair
    tau1 = TaskVector.from_pair(bundle.theta_pre, bundle.members[i])
    tau2 = TaskVector.from_pair(bundle.theta_pre, bundle.members[j])
    evaluator = InProcessEvaluator(
        cfg.model, [bundle.split.domains[i].dev, bundle.split.domains[j].dev]
    )
    grid = np.linspace(-0.5, 1.5, args.steps)
    result = landscape_slice(bundle.theta_pre, tau1, tau2, grid, grid, evaluator)
    result.to_csv(out / "landscape.csv")
    print(f"wrote {out / 'landscape.csv'}")
    if result.to_svg(out / "landscape.svg"):
        print(f"wrote {out / 'landscape.svg'}")
    peak = np.unravel_index(np.argmax(result.scores), result.scores.shape)
    print(
        f"best cell: a={result.grid_a[peak[0]]:.3f} b={result.grid_b[peak[1]]:.3f} "
        f"score={result.scores[peak]:.4f}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
