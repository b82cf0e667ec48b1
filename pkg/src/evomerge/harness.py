"""Experiment orchestration: build checkpoint populations, run merging and
evolution variants across seeds, and assemble in-domain/out-of-domain report
tables plus runtime accounting.

Fitness during evolution is always the macro-average dev metric over the
domains being merged; out-of-domain splits are never wired into fitness.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets, inference, merging
from .evaluator import EvalServeConfig, InProcessEvaluator
from .evolution import EvolveConfig, EvolveTrace, Population, evolve, write_manifest
from .inference import MlpSpec, TrainConfig
from .merging import MergeContext, MergeSpec
from .tensor_store import FlatVector, TensorMap, flatten, load_checkpoint, save_checkpoint, unflatten

logger = logging.getLogger(__name__)

EVOLVER_SUFFIX = "_evolver"

DEFAULT_METHODS = (
    "avg_individuals",
    "best_individual",
    "ensemble",
    "greedy_soup",
    "simple",
    "evolver",
    "fisher",
    "fisher_evolver",
    "regmean",
    "regmean_evolver",
    "ties",
    "ties_evolver",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a full report run needs, JSON-round-trippable."""

    n_domains: int = 5
    n_ood: int = 2
    template: datasets.DomainTemplate = field(default_factory=datasets.DomainTemplate)
    model: MlpSpec = field(default_factory=lambda: MlpSpec((2, 16, 16, 6)))
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.05, epochs=3, batch_size=32))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.05, epochs=30, batch_size=16))
    evolve: EvolveConfig = field(default_factory=EvolveConfig)
    methods: tuple[str, ...] = DEFAULT_METHODS
    merge_params: MergeSpec = field(default_factory=MergeSpec)
    metric: str = "accuracy"
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    population_source: str = "domains"
    checkpoint_paths: tuple[str, ...] = ()
    n_partitions: int = 2
    partition_size: int = 400
    partition_skew: float = 3.0
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        if not self.methods:
            raise ValueError("configure at least one method")
        if not self.seeds:
            raise ValueError("configure at least one seed")
        if self.population_source not in ("domains", "non_iid", "checkpoints"):
            raise ValueError(f"unknown population source {self.population_source!r}")

    def to_json(self) -> str:
        obj = {
            "dataset": {
                "n_domains": self.n_domains,
                "n_ood": self.n_ood,
                **dataclasses.asdict(self.template),
            },
            "model": {"layer_dims": list(self.model.layer_dims), "activation": self.model.activation},
            "pretrain": dataclasses.asdict(self.pretrain),
            "finetune": dataclasses.asdict(self.finetune),
            "evolve": {
                "generations": self.evolve.generations,
                "scale_factor": self.evolve.scale_factor,
                "crossover_ratio": self.evolve.crossover_ratio,
                "seed": self.evolve.seed,
                "update_semantics": self.evolve.update_semantics,
            },
            "methods": list(self.methods),
            "merge_params": {
                "alpha": self.merge_params.alpha,
                "trim_fraction": self.merge_params.trim_fraction,
                "rescale": self.merge_params.rescale,
                "interp": self.merge_params.interp,
            },
            "metric": self.metric,
            "seeds": list(self.seeds),
            "population": {
                "source": self.population_source,
                "checkpoint_paths": list(self.checkpoint_paths),
                "n_partitions": self.n_partitions,
                "partition_size": self.partition_size,
                "partition_skew": self.partition_skew,
            },
            "out_dir": self.out_dir,
        }
        return json.dumps(obj, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        obj = json.loads(text)
        ds = dict(obj.get("dataset", {}))
        n_domains = ds.pop("n_domains", 5)
        n_ood = ds.pop("n_ood", 2)
        template = datasets.DomainTemplate(**ds) if ds else datasets.DomainTemplate()
        model_obj = obj.get("model", {})
        model = MlpSpec(
            tuple(model_obj.get("layer_dims", (2, 16, 16, 6))),
            model_obj.get("activation", "tanh"),
        )
        ev = obj.get("evolve", {})
        pop = obj.get("population", {})
        mp = obj.get("merge_params", {})
        return cls(
            n_domains=n_domains,
            n_ood=n_ood,
            template=template,
            model=model,
            pretrain=TrainConfig(**obj.get("pretrain", {})),
            finetune=TrainConfig(**obj.get("finetune", {})),
            evolve=EvolveConfig(
                generations=ev.get("generations", 20),
                scale_factor=ev.get("scale_factor", 0.5),
                crossover_ratio=ev.get("crossover_ratio", 0.5),
                seed=ev.get("seed", 0),
                update_semantics=ev.get("update_semantics", "synchronous"),
            ),
            methods=tuple(obj.get("methods", DEFAULT_METHODS)),
            merge_params=MergeSpec(
                alpha=mp.get("alpha", 0.9),
                trim_fraction=mp.get("trim_fraction", 0.2),
                rescale=mp.get("rescale", 1.0),
                interp=mp.get("interp", 0.5),
            ),
            metric=obj.get("metric", "accuracy"),
            seeds=tuple(obj.get("seeds", (1, 2, 3, 4, 5))),
            population_source=pop.get("source", "domains"),
            checkpoint_paths=tuple(pop.get("checkpoint_paths", ())),
            n_partitions=pop.get("n_partitions", 2),
            partition_size=pop.get("partition_size", 400),
            partition_skew=pop.get("partition_skew", 3.0),
            out_dir=obj.get("out_dir", "runs/experiment"),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def serve_config(self, seed: int, split_metric: str | None = None) -> EvalServeConfig:
        return EvalServeConfig(
            model=self.model,
            n_domains=self.n_domains,
            template=self.template,
            data_seed=seed,
            n_ood=self.n_ood,
            metric=split_metric or self.metric,
        )


@dataclass
class PopulationBundle:
    """One seed's checkpoints, data, and merging aux state."""

    seed: int
    split: datasets.SplitSet
    theta_pre: FlatVector
    members: list[FlatVector]
    fishers: list[inference.FisherState]
    grams: list[inference.GramState]

    def merge_context(self, dev_evaluator=None) -> MergeContext:
        return MergeContext(
            fishers=self.fishers,
            grams=self.grams,
            base=self.theta_pre,
            dev_evaluator=dev_evaluator,
        )


def _metadata_for(model: MlpSpec) -> dict[str, str]:
    return {"mlp_spec": model.to_json()}


def save_weights(weights: FlatVector, model: MlpSpec, path) -> None:
    save_checkpoint(unflatten(weights, metadata=_metadata_for(model)), path)


def load_weights(path, model: MlpSpec | None = None) -> tuple[FlatVector, MlpSpec]:
    """Load a checkpoint; the model spec comes from its metadata unless given."""
    tmap = load_checkpoint(path)
    if model is None:
        spec_json = tmap.metadata.get("mlp_spec")
        if spec_json is None:
            raise ValueError(f"checkpoint {path} carries no model spec metadata")
        model = MlpSpec.from_json(spec_json)
    return flatten(TensorMap(dict(tmap.items())), model.param_schema()), model


def build_population(cfg: ExperimentConfig, seed: int, out_dir=None) -> PopulationBundle:
    """Pretrain shared weights on pooled data, then fine-tune one model per
    domain (or per non-i.i.d. partition) and capture merging statistics."""
    split = datasets.make_domains(cfg.n_domains, cfg.template, seed, cfg.n_ood)
    pooled = inference.concat_batches([d.train for d in split.domains])
    init = inference.init_weights(cfg.model, seed)
    theta_pre = inference.train(
        cfg.model, init, pooled, dataclasses.replace(cfg.pretrain, seed=seed)
    )

    if cfg.population_source == "non_iid":
        parts = datasets.non_iid_partition(
            pooled,
            n_parts=cfg.n_partitions,
            per_part=cfg.partition_size,
            skew=cfg.partition_skew,
            seed=seed,
        )
        train_sets = parts
        stat_batches = [split.domains[i % cfg.n_domains].dev for i in range(len(parts))]
    else:
        train_sets = [d.train for d in split.domains]
        stat_batches = [d.dev for d in split.domains]

    members = []
    for idx, train_batch in enumerate(train_sets):
        weights = inference.train(
            cfg.model,
            theta_pre,
            train_batch,
            dataclasses.replace(cfg.finetune, seed=seed * 1000 + idx),
        )
        members.append(weights)

    fishers = [
        inference.fisher_diagonal(cfg.model, w, b, label_mode="sampled", seed=seed * 100 + i)
        for i, (w, b) in enumerate(zip(members, stat_batches))
    ]
    grams = [inference.capture_grams(cfg.model, w, b) for w, b in zip(members, stat_batches)]

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_weights(theta_pre, cfg.model, out_dir / "pretrained.st")
        for i, w in enumerate(members):
            save_weights(w, cfg.model, out_dir / f"model_{i}.st")
        manifest = {
            "seed": seed,
            "model": json.loads(cfg.model.to_json()),
            "n_models": len(members),
            "source": cfg.population_source,
            "checkpoints": ["pretrained.st"] + [f"model_{i}.st" for i in range(len(members))],
        }
        (out_dir / "population.json").write_text(json.dumps(manifest, indent=2) + "\n")

    return PopulationBundle(
        seed=seed, split=split, theta_pre=theta_pre, members=members, fishers=fishers, grams=grams
    )


def load_population(cfg: ExperimentConfig, seed: int) -> PopulationBundle:
    """Population from existing checkpoint files: first path is the pre-trained base."""
    if len(cfg.checkpoint_paths) < 2:
        raise ValueError("checkpoint population needs the pre-trained path plus >= 1 model")
    split = datasets.make_domains(cfg.n_domains, cfg.template, seed, cfg.n_ood)
    theta_pre, _ = load_weights(cfg.checkpoint_paths[0], cfg.model)
    members = [load_weights(p, cfg.model)[0] for p in cfg.checkpoint_paths[1:]]
    stat_batches = [split.domains[i % cfg.n_domains].dev for i in range(len(members))]
    fishers = [
        inference.fisher_diagonal(cfg.model, w, b, label_mode="sampled", seed=seed * 100 + i)
        for i, (w, b) in enumerate(zip(members, stat_batches))
    ]
    grams = [inference.capture_grams(cfg.model, w, b) for w, b in zip(members, stat_batches)]
    return PopulationBundle(
        seed=seed, split=split, theta_pre=theta_pre, members=members, fishers=fishers, grams=grams
    )


def get_population(cfg: ExperimentConfig, seed: int, out_dir=None) -> PopulationBundle:
    if cfg.population_source == "checkpoints":
        return load_population(cfg, seed)
    return build_population(cfg, seed, out_dir=out_dir)


@dataclass
class MethodResult:
    per_domain: list[float]
    macro: float
    ood_macro: float | None
    error: str | None = None


@dataclass
class ReportTable:
    """methods x (per-domain, macro, OOD macro) cells, per seed plus seed means."""

    methods: list[str]
    domains: list[int]
    per_seed: dict[str, dict[int, MethodResult]]

    def seed_mean(self, method: str, column: str = "macro") -> float:
        values = [
            getattr(r, column)
            for r in self.per_seed[method].values()
            if r.error is None and getattr(r, column) is not None
        ]
        return float(np.mean(values)) if values else float("nan")

    def to_json(self) -> str:
        obj = {
            "methods": self.methods,
            "domains": self.domains,
            "per_seed": {
                method: {
                    str(seed): {
                        "per_domain": r.per_domain,
                        "macro": r.macro,
                        "ood_macro": r.ood_macro,
                        "error": r.error,
                    }
                    for seed, r in by_seed.items()
                }
                for method, by_seed in self.per_seed.items()
            },
            "seed_mean": {
                method: {
                    "macro": self.seed_mean(method, "macro"),
                    "ood_macro": self.seed_mean(method, "ood_macro"),
                }
                for method in self.methods
            },
        }
        return json.dumps(obj, indent=2)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            header = ["method", "seed"] + [f"domain_{d}" for d in self.domains] + ["macro", "ood_macro"]
            fh.write(",".join(header) + "\n")
            for method in self.methods:
                for seed, r in sorted(self.per_seed[method].items()):
                    if r.error is not None:
                        row = [method, str(seed)] + ["error"] * (len(self.domains) + 2)
                    else:
                        row = (
                            [method, str(seed)]
                            + [f"{v:.6f}" for v in r.per_domain]
                            + [f"{r.macro:.6f}", "" if r.ood_macro is None else f"{r.ood_macro:.6f}"]
                        )
                    fh.write(",".join(row) + "\n")
                mean_row = [method, "mean"] + [""] * len(self.domains) + [
                    f"{self.seed_mean(method, 'macro'):.6f}",
                    f"{self.seed_mean(method, 'ood_macro'):.6f}",
                ]
                fh.write(",".join(mean_row) + "\n")


def _metric_fn(metric: str):
    return inference.accuracy if metric == "accuracy" else inference.macro_f1


def score_on_tests(
    cfg: ExperimentConfig, bundle: PopulationBundle, weights: FlatVector
) -> MethodResult:
    fn = _metric_fn(cfg.metric)
    per_domain = [fn(cfg.model, weights, b) for b in bundle.split.test_batches()]
    ood = bundle.split.ood_test_batches()
    ood_macro = float(np.mean([fn(cfg.model, weights, b) for b in ood])) if ood else None
    return MethodResult(per_domain=per_domain, macro=float(np.mean(per_domain)), ood_macro=ood_macro)


def _ensemble_result(cfg: ExperimentConfig, bundle: PopulationBundle) -> MethodResult:
    def forward_fn(weights, batch):
        return inference.forward(cfg.model, weights, batch)

    per_domain = []
    for batch in bundle.split.test_batches():
        preds = merging.ensemble_predict(bundle.members, batch, forward_fn)
        per_domain.append(float(np.mean(preds == batch.labels)))
    ood_scores = []
    for batch in bundle.split.ood_test_batches():
        preds = merging.ensemble_predict(bundle.members, batch, forward_fn)
        ood_scores.append(float(np.mean(preds == batch.labels)))
    return MethodResult(
        per_domain=per_domain,
        macro=float(np.mean(per_domain)),
        ood_macro=float(np.mean(ood_scores)) if ood_scores else None,
    )


def _avg_individuals(cfg: ExperimentConfig, bundle: PopulationBundle) -> MethodResult:
    results = [score_on_tests(cfg, bundle, m) for m in bundle.members]
    per_domain = list(np.mean([r.per_domain for r in results], axis=0))
    ood_values = [r.ood_macro for r in results if r.ood_macro is not None]
    return MethodResult(
        per_domain=[float(v) for v in per_domain],
        macro=float(np.mean([r.macro for r in results])),
        ood_macro=float(np.mean(ood_values)) if ood_values else None,
    )


def _merge_spec_for(cfg: ExperimentConfig, method: str) -> MergeSpec:
    return dataclasses.replace(cfg.merge_params, method=method)


def run_method(
    cfg: ExperimentConfig,
    bundle: PopulationBundle,
    method: str,
    evaluator: InProcessEvaluator,
    trace_dir=None,
) -> tuple[MethodResult, EvolveTrace | None]:
    """One report cell: merged/evolved weights scored on all test splits."""
    aux = bundle.merge_context(dev_evaluator=evaluator)
    if method == "avg_individuals":
        return _avg_individuals(cfg, bundle), None
    if method == "best_individual":
        dev_scores = [evaluator.evaluate(m).score for m in bundle.members]
        best = int(np.argmax(dev_scores))
        return score_on_tests(cfg, bundle, bundle.members[best]), None
    if method == "ensemble":
        return _ensemble_result(cfg, bundle), None

    trace = None
    if method.endswith(EVOLVER_SUFFIX) or method == "evolver":
        base = method[: -len(EVOLVER_SUFFIX)] if method.endswith(EVOLVER_SUFFIX) else None
        if base in (None, "simple"):
            merge_with = None
        else:
            merge_with = _merge_spec_for(cfg, base)
        evolve_cfg = dataclasses.replace(
            cfg.evolve, seed=cfg.evolve.seed + bundle.seed, merge_with=merge_with
        )
        pop = Population.from_members(bundle.members, seed=evolve_cfg.seed)
        final_pop, trace, artifact = evolve(pop, evolve_cfg, evaluator, aux=aux)
        if trace_dir is not None:
            trace_dir = Path(trace_dir)
            trace_dir.mkdir(parents=True, exist_ok=True)
            trace.to_csv(trace_dir / f"trace_{method}_seed{bundle.seed}.csv")
            write_manifest(
                trace_dir / f"manifest_{method}_seed{bundle.seed}.json",
                evolve_cfg,
                final_pop,
                evaluator,
                extra={"method": method, "data_seed": bundle.seed},
            )
        weights = artifact
    else:
        spec = _merge_spec_for(cfg, method)
        weights = merging.merge(list(bundle.members), spec, aux)
    return score_on_tests(cfg, bundle, weights), trace


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ReportTable:
    """The full method x seed table; failures land in cells, not exceptions."""
    out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_seed: dict[str, dict[int, MethodResult]] = {m: {} for m in cfg.methods}
    domains = list(range(cfg.n_domains))
    for seed in cfg.seeds:
        bundle = get_population(cfg, seed, out_dir=out_dir / f"population_seed{seed}")
        evaluator = InProcessEvaluator(
            cfg.model,
            bundle.split.dev_batches(),
            bundle.split.test_batches(),
            metric=cfg.metric,
        )
        for method in cfg.methods:
            try:
                result, _ = run_method(cfg, bundle, method, evaluator, trace_dir=out_dir)
            except Exception as exc:
                logger.warning("method %s failed on seed %d: %s", method, seed, exc)
                result = MethodResult(per_domain=[], macro=float("nan"), ood_macro=None, error=str(exc))
            per_seed[method][seed] = result
    table = ReportTable(methods=list(cfg.methods), domains=domains, per_seed=per_seed)
    (out_dir / "report.json").write_text(table.to_json() + "\n")
    table.to_csv(out_dir / "report.csv")
    (out_dir / "config.json").write_text(cfg.to_json() + "\n")
    return table


@dataclass(frozen=True)
class TimeModel:
    """Fitted per-phase costs for T = G * N * (t1 + L * t2)."""

    t1_ms: float
    t2_ms: float
    generations: int
    population: int
    dev_examples: int
    measured_total_ms: float

    def predict_ms(self, generations: int | None = None, population: int | None = None, dev_examples: int | None = None) -> float:
        g = self.generations if generations is None else generations
        n = self.population if population is None else population
        length = self.dev_examples if dev_examples is None else dev_examples
        return g * n * (self.t1_ms + length * self.t2_ms)

    @property
    def predicted_total_ms(self) -> float:
        return self.predict_ms()

    @property
    def within_factor_two(self) -> bool:
        if self.measured_total_ms <= 0:
            return self.predicted_total_ms == 0
        ratio = self.predicted_total_ms / self.measured_total_ms
        return 0.5 <= ratio <= 2.0


def time_report(trace: EvolveTrace, dev_examples: int, population: int, generations: int) -> TimeModel:
    """Estimate t1 (mutate+crossover per member) and t2 (per-example eval) from a trace."""
    if generations == 0 or not trace.records:
        return TimeModel(0.0, 0.0, generations, population, dev_examples, 0.0)
    calls = generations * population
    t1 = trace.total_mutate_ms() / calls
    t2 = trace.total_eval_ms() / (calls * max(dev_examples, 1))
    measured = trace.total_mutate_ms() + trace.total_eval_ms()
    return TimeModel(
        t1_ms=t1,
        t2_ms=t2,
        generations=generations,
        population=population,
        dev_examples=dev_examples,
        measured_total_ms=measured,
    )
