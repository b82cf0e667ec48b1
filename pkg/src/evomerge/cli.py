"""Command-line entry points for population building, evolution, merging,
evaluation, landscape slices, coefficient searches, and full report runs.

All subcommands read one JSON experiment config (see ``ExperimentConfig``);
a handful of flags override the hot parameters in place.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shlex
import sys
from pathlib import Path

import numpy as np

from . import datasets
from .evaluator import EvalServeConfig, InProcessEvaluator, handshake, serve_stdio
from .evolution import Population, evolve, write_manifest
from .harness import (
    ExperimentConfig,
    get_population,
    load_weights,
    run_experiment,
    save_weights,
    score_on_tests,
)
from .merging import (
    PairwiseSearchContext,
    ScaleSearchContext,
    TaskVector,
    coefficient_search,
    landscape_slice,
    merge,
)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    overrides = {}
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "seed_override", None) is not None:
        overrides["seeds"] = (args.seed_override,)
    evolve_overrides = {}
    if getattr(args, "generations", None) is not None:
        evolve_overrides["generations"] = args.generations
    if getattr(args, "scale_factor", None) is not None:
        evolve_overrides["scale_factor"] = args.scale_factor
    if getattr(args, "crossover", None) is not None:
        evolve_overrides["crossover_ratio"] = args.crossover
    if evolve_overrides:
        overrides["evolve"] = dataclasses.replace(cfg.evolve, **evolve_overrides)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _make_evaluator(cfg: ExperimentConfig, bundle, args):
    """In-process evaluator by default; --evaluator CMD switches to an external session."""
    command = getattr(args, "evaluator", None)
    if command:
        return handshake(shlex.split(command))
    return InProcessEvaluator(
        cfg.model, bundle.split.dev_batches(), bundle.split.test_batches(), metric=cfg.metric
    )


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(getattr(args, "out", None) or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_build_population(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args)
    for seed in cfg.seeds:
        bundle = get_population(cfg, seed, out_dir=out / f"population_seed{seed}")
        print(f"seed {seed}: wrote {len(bundle.members) + 1} checkpoints to {out / f'population_seed{seed}'}")
        if args.export_csv:
            csv_path = out / f"data_seed{seed}.csv"
            datasets.export_csv(bundle.split, csv_path)
            print(f"seed {seed}: exported dataset to {csv_path}")
    return 0


def cmd_evolve(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args)
    seed = cfg.seeds[0]
    bundle = get_population(cfg, seed)
    evaluator = _make_evaluator(cfg, bundle, args)
    merge_with = None if args.merge_method in (None, "simple_mode") else dataclasses.replace(
        cfg.merge_params, method=args.merge_method
    )
    evolve_cfg = dataclasses.replace(cfg.evolve, seed=cfg.evolve.seed + seed, merge_with=merge_with)
    pop = Population.from_members(bundle.members, seed=evolve_cfg.seed)
    aux = bundle.merge_context(dev_evaluator=evaluator)
    final_pop, trace, artifact = evolve(pop, evolve_cfg, evaluator, aux=aux)
    trace.to_csv(out / "trace.csv")
    write_manifest(out / "manifest.json", evolve_cfg, final_pop, evaluator, extra={"data_seed": seed})
    save_weights(artifact, cfg.model, out / "evolved.st")
    result = score_on_tests(cfg, bundle, artifact)
    print(f"evolved artifact written to {out / 'evolved.st'}")
    print(f"in-domain macro {cfg.metric}: {result.macro:.4f}")
    if result.ood_macro is not None:
        print(f"OOD macro {cfg.metric}: {result.ood_macro:.4f}")
    if hasattr(evaluator, "shutdown"):
        evaluator.shutdown()
    return 0


def cmd_merge(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args)
    seed = cfg.seeds[0]
    bundle = get_population(cfg, seed)
    evaluator = InProcessEvaluator(
        cfg.model, bundle.split.dev_batches(), bundle.split.test_batches(), metric=cfg.metric
    )
    spec = dataclasses.replace(cfg.merge_params, method=args.method)
    merged = merge(list(bundle.members), spec, bundle.merge_context(dev_evaluator=evaluator))
    save_weights(merged, cfg.model, out / f"merged_{args.method}.st")
    result = score_on_tests(cfg, bundle, merged)
    print(f"merged checkpoint written to {out / f'merged_{args.method}.st'}")
    print(f"in-domain macro {cfg.metric}: {result.macro:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    weights, model = load_weights(args.checkpoint, cfg.model if args.use_config_model else None)
    split = datasets.make_domains(cfg.n_domains, cfg.template, cfg.seeds[0], cfg.n_ood)
    evaluator = InProcessEvaluator(model, split.dev_batches(), split.test_batches(), metric=cfg.metric)
    report = evaluator.evaluate(weights, split=args.split)
    print(json.dumps({"score": report.score, "metric": report.metric, "n_examples": report.n_examples}))
    return 0


def cmd_landscape(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args)
    seed = cfg.seeds[0]
    bundle = get_population(cfg, seed)
    i, j = args.pair
    tau1 = TaskVector.from_pair(bundle.theta_pre, bundle.members[i])
    tau2 = TaskVector.from_pair(bundle.theta_pre, bundle.members[j])
    dev_batches = [bundle.split.domains[i].dev, bundle.split.domains[j].dev]
    evaluator = InProcessEvaluator(cfg.model, dev_batches, metric=cfg.metric)
    grid = np.linspace(args.lo, args.hi, args.steps)
    result = landscape_slice(bundle.theta_pre, tau1, tau2, grid, grid, evaluator)
    csv_path = out / f"landscape_{i}_{j}.csv"
    result.to_csv(csv_path)
    print(f"landscape grid written to {csv_path}")
    svg_path = out / f"landscape_{i}_{j}.svg"
    if result.to_svg(svg_path):
        print(f"contour rendering written to {svg_path}")
    return 0


def cmd_coeff_search(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args)
    seed = cfg.seeds[0]
    bundle = get_population(cfg, seed)
    evaluator = InProcessEvaluator(
        cfg.model, bundle.split.dev_batches(), bundle.split.test_batches(), metric=cfg.metric
    )
    if args.objective == "pairwise_interp":
        i, j = args.pair
        context = PairwiseSearchContext(bundle.members[i], bundle.members[j], evaluator)
    else:
        pop = Population.from_members(bundle.members, seed=cfg.evolve.seed + seed)
        context = ScaleSearchContext(
            pop,
            dataclasses.replace(cfg.evolve, seed=cfg.evolve.seed + seed),
            evaluator,
            aux=bundle.merge_context(dev_evaluator=evaluator),
        )
    best, table = coefficient_search(args.objective, context)
    csv_path = out / f"coeff_{args.objective}.csv"
    with open(csv_path, "w") as fh:
        fh.write("value,score\n")
        for value, score in table:
            fh.write(f"{value},{score:.10g}\n")
    print(f"score table written to {csv_path}")
    print(f"best value: {best}")
    return 0


def cmd_report(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args)
    table = run_experiment(cfg, out_dir=out)
    print(f"report written to {out / 'report.csv'} and {out / 'report.json'}")
    width = max(len(m) for m in table.methods) + 2
    print(f"{'method'.ljust(width)}macro    ood_macro")
    for method in table.methods:
        macro = table.seed_mean(method, "macro")
        ood = table.seed_mean(method, "ood_macro")
        print(f"{method.ljust(width)}{macro:.4f}   {ood:.4f}")
    return 0


def cmd_serve(args) -> int:
    config = EvalServeConfig.from_json(Path(args.eval_config).read_text())
    serve_stdio(config.build())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evomerge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, evaluator_flag=False):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed-override", type=int, default=None, dest="seed_override")
        p.add_argument("--generations", type=int, default=None)
        p.add_argument("--scale-factor", type=float, default=None, dest="scale_factor")
        p.add_argument("--crossover", type=float, default=None)
        if evaluator_flag:
            p.add_argument(
                "--evaluator",
                default=None,
                help="external evaluator command (switches fitness to the wire protocol)",
            )

    p = sub.add_parser("build-population", help="train the pre-trained base and per-domain models")
    common(p)
    p.add_argument("--export-csv", action="store_true", help="also dump the datasets as CSV")
    p.set_defaults(fn=cmd_build_population)

    p = sub.add_parser("evolve", help="run differential evolution on one seed's population")
    common(p, evaluator_flag=True)
    p.add_argument("--merge-method", default=None, help="combined mode: merge method to compose with")
    p.set_defaults(fn=cmd_evolve)

    p = sub.add_parser("merge", help="run a single closed-form merge")
    common(p)
    p.add_argument("--method", required=True, choices=["simple", "fisher", "regmean", "ties", "greedy_soup"])
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("eval", help="score a checkpoint on the config's dev or test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="dev", choices=["dev", "test"])
    p.add_argument("--use-config-model", action="store_true", dest="use_config_model")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("landscape", help="2-D score slice over two task vectors")
    common(p)
    p.add_argument("--pair", type=int, nargs=2, default=(0, 1), help="indices of the two fine-tuned models")
    p.add_argument("--lo", type=float, default=-0.5)
    p.add_argument("--hi", type=float, default=1.5)
    p.add_argument("--steps", type=int, default=9)
    p.set_defaults(fn=cmd_landscape)

    p = sub.add_parser("coeff-search", help="grid search of interpolation or evolver scale")
    common(p)
    p.add_argument("--objective", default="pairwise_interp", choices=["pairwise_interp", "evolver_scale"])
    p.add_argument("--pair", type=int, nargs=2, default=(0, 1))
    p.set_defaults(fn=cmd_coeff_search)

    p = sub.add_parser("report", help="full experiment: every configured method across seeds")
    common(p)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("serve", help="answer the evaluator wire protocol on stdin/stdout")
    p.add_argument("--eval-config", required=True, dest="eval_config")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
