"""Full toy experiment: every baseline, merge method, and evolver variant on
the 5-domain suite across 5 seeds. Reproduces the qualitative ordering
(evolver above simple averaging; each X_evolver at or above X).

Usage: python scripts/run_toy_experiment.py [--config configs/toy.json] [--out runs/toy]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from evomerge.harness import ExperimentConfig, run_experiment


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/toy.json")
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    cfg = ExperimentConfig.load(args.config)
    table = run_experiment(cfg, out_dir=args.out)

    width = max(len(m) for m in table.methods) + 2
    print(f"\n{'method'.ljust(width)}{'in-domain macro':>16}{'ood macro':>12}")
    for method in table.methods:
        macro = table.seed_mean(method, "macro")
        ood = table.seed_mean(method, "ood_macro")
        print(f"{method.ljust(width)}{macro:>16.4f}{ood:>12.4f}")

    for evolver, plain in [
        ("evolver", "simple"),
        ("fisher_evolver", "fisher"),
        ("regmean_evolver", "regmean"),
        ("ties_evolver", "ties"),
    ]:
        if evolver in table.methods and plain in table.methods:
            gain = table.seed_mean(evolver) - table.seed_mean(plain)
            print(f"{evolver} - {plain}: {gain:+.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
