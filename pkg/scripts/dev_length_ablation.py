"""Dev-set length ablation: evolve with 1/4, 1/2, and the full dev split and
compare the evolved model's test score against the no-evolution baseline.

Usage: python scripts/dev_length_ablation.py [--config configs/toy.json]
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from evomerge.datasets import dev_fraction
from evomerge.evaluator import InProcessEvaluator
from evomerge.evolution import EvolveConfig, Population, evolve
from evomerge.harness import ExperimentConfig, get_population, run_method, score_on_tests


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/toy.json")
    parser.add_argument("--fractions", type=float, nargs="+", default=(0.25, 0.5, 1.0))
    args = parser.parse_args()

    cfg = ExperimentConfig.load(args.config)
    per_fraction = {f: [] for f in args.fractions}
    baselines = []
    for seed in cfg.seeds:
        bundle = get_population(cfg, seed)
        full_eval = InProcessEvaluator(
            cfg.model, bundle.split.dev_batches(), bundle.split.test_batches(), metric=cfg.metric
        )
        baseline, _ = run_method(cfg, bundle, "simple", full_eval)
        baselines.append(baseline.macro)
        for frac in args.fractions:
            split = dev_fraction(bundle.split, frac)
            evaluator = InProcessEvaluator(cfg.model, split.dev_batches(), metric=cfg.metric)
            pop = Population.from_members(bundle.members, seed=cfg.evolve.seed + seed)
            run_cfg = EvolveConfig(
                generations=cfg.evolve.generations,
                scale_factor=cfg.evolve.scale_factor,
                crossover_ratio=cfg.evolve.crossover_ratio,
                seed=cfg.evolve.seed + seed,
            )
            _, _, artifact = evolve(pop, run_cfg, evaluator)
            per_fraction[frac].append(score_on_tests(cfg, bundle, artifact).macro)

    print(f"simple-average baseline: {np.mean(baselines):.4f}")
    for frac in args.fractions:
        print(f"evolver @ dev fraction {frac:>4}: {np.mean(per_fraction[frac]):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
