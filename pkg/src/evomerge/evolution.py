"""Differential evolution over a population of flattened checkpoints.

Each generation mutates every member against two random distinct donors,
recombines mutant and parent coordinate-wise, scores the offspring on a dev
evaluator, and keeps the offspring only on a strict improvement. Fitness can
be the candidate's own score ("simple" mode) or the score of the whole
population merged with the candidate substituted in ("combined" mode).

Randomness is counter-based: every (seed, generation, member) triple owns an
independent keyed stream consumed as (donor index draws, then one uniform per
coordinate), so synchronous and sequential updates see identical draws and a
run is bit-reproducible from its seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .merging import MergeContext, MergeSpec, merge
from .tensor_store import FlatVector, axpy, require_same_schema

MIN_POPULATION = 3


class PopulationTooSmall(ValueError):
    """Mutation needs member i plus two distinct donors."""


class EvaluationFailed(RuntimeError):
    """Evaluator failure, tagged with the candidate index being scored."""

    def __init__(self, slot: int, cause: Exception):
        super().__init__(f"evaluation failed for candidate {slot}: {cause}")
        self.slot = slot
        self.cause = cause


@dataclass(frozen=True)
class EvolveConfig:
    """Evolution hyperparameters; ``merge_with`` switches on combined mode."""

    generations: int = 20
    scale_factor: float = 0.5
    crossover_ratio: float = 0.5
    seed: int = 0
    merge_with: MergeSpec | None = None
    update_semantics: str = "synchronous"

    def __post_init__(self):
        if not 0.0 <= self.scale_factor <= 2.0:
            raise ValueError("scale_factor must be in [0, 2]")
        if not 0.0 <= self.crossover_ratio <= 1.0:
            raise ValueError("crossover_ratio must be in [0, 1]")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.update_semantics not in ("synchronous", "sequential"):
            raise ValueError("update_semantics must be 'synchronous' or 'sequential'")

    @property
    def mode(self) -> str:
        return "simple" if self.merge_with is None else "combined"


@dataclass
class Population:
    """N flat vectors sharing one schema, with per-member fitness bookkeeping.

    ``fitness[i]`` is the evaluator score recorded when member i last entered
    the population (its initial scoring, or the offspring score that replaced
    it). ``rng_seed`` keys the per-(generation, member) draw streams.
    """

    members: list[FlatVector]
    fitness: list[float | None]
    generation: int = 0
    rng_seed: int = 0

    @classmethod
    def from_members(cls, members, seed: int = 0) -> "Population":
        members = list(members)
        if members:
            require_same_schema(*members)
        return cls(members=members, fitness=[None] * len(members), generation=0, rng_seed=seed)

    @property
    def size(self) -> int:
        return len(self.members)

    def best_index(self) -> int:
        scores = [f if f is not None else -np.inf for f in self.fitness]
        return int(np.argmax(scores))

    def clone(self) -> "Population":
        return Population(
            members=list(self.members),
            fitness=list(self.fitness),
            generation=self.generation,
            rng_seed=self.rng_seed,
        )


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best: float
    mean: float
    replacements: int
    t_mutate_ms: float
    t_eval_ms: float


@dataclass
class EvolveTrace:
    records: list[GenerationRecord] = field(default_factory=list)
    init_eval_ms: float = 0.0

    def best_curve(self) -> list[float]:
        return [r.best for r in self.records]

    def total_mutate_ms(self) -> float:
        return sum(r.t_mutate_ms for r in self.records)

    def total_eval_ms(self) -> float:
        return sum(r.t_eval_ms for r in self.records)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("generation,best,mean,replacements,t_mutate_ms,t_eval_ms\n")
            for r in self.records:
                fh.write(
                    f"{r.generation},{r.best:.10g},{r.mean:.10g},{r.replacements},"
                    f"{r.t_mutate_ms:.6g},{r.t_eval_ms:.6g}\n"
                )


def member_stream(seed: int, generation: int, member: int) -> np.random.Generator:
    """The keyed counter-based stream owned by one (generation, member) pair."""
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(((generation & 0xFFFFFFFF) << 32) | (member & 0xFFFFFFFF))],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def draw_donors(rng: np.random.Generator, n: int, exclude: int) -> tuple[int, int]:
    """Two distinct donor indices != ``exclude``, by rejection sampling."""
    r1 = int(rng.integers(n))
    while r1 == exclude:
        r1 = int(rng.integers(n))
    r2 = int(rng.integers(n))
    while r2 == exclude or r2 == r1:
        r2 = int(rng.integers(n))
    return r1, r2


def open_unit_draws(rng: np.random.Generator, size: int) -> np.ndarray:
    """I.i.d. uniforms on (0, 1], one per coordinate, in index order.

    Strictly positive draws make crossover_ratio 0 keep the parent everywhere
    and 1 take the mutant everywhere, exactly.
    """
    return (rng.integers(0, 1 << 53, size=size).astype(np.float64) + 1.0) * 2.0**-53


def mutate(pop: Population, i: int, scale_factor: float, rng: np.random.Generator) -> FlatVector:
    """member[i] + F * (member[r1] - member[r2]) with r1, r2 random distinct donors."""
    n = pop.size
    if n < MIN_POPULATION:
        raise PopulationTooSmall(f"population of {n} cannot mutate; need >= {MIN_POPULATION}")
    if not 0 <= i < n:
        raise IndexError(f"member index {i} out of range")
    r1, r2 = draw_donors(rng, n, i)
    diff = axpy(-1.0, pop.members[r2], pop.members[r1])
    return axpy(scale_factor, diff, pop.members[i])


def crossover(
    parent: FlatVector, mutant: FlatVector, crossover_ratio: float, rng: np.random.Generator
) -> FlatVector:
    """Take the mutant coordinate where the per-coordinate draw is <= the ratio."""
    schema = require_same_schema(parent, mutant)
    draws = open_unit_draws(rng, schema.total_dim)
    values = np.where(draws <= crossover_ratio, mutant.values, parent.values)
    return FlatVector(schema=schema, values=values)


def score_candidate(
    candidate: FlatVector,
    pop: Population,
    slot: int,
    evaluator,
    merge_spec: MergeSpec | None = None,
    aux: MergeContext | None = None,
) -> float:
    """Simple mode scores the candidate alone; combined mode scores the merge of
    the population with the candidate substituted at ``slot``."""
    try:
        if merge_spec is None:
            return float(evaluator.evaluate(candidate).score)
        hypothetical = list(pop.members)
        hypothetical[slot] = candidate
        merged = merge(hypothetical, merge_spec, aux)
        return float(evaluator.evaluate(merged).score)
    except Exception as exc:
        raise EvaluationFailed(slot, exc) from exc


def score_parents(
    pop: Population, evaluator, merge_spec: MergeSpec | None = None, aux: MergeContext | None = None
) -> Population:
    """Fill in missing fitness values; in combined mode every member gets the
    score of the population's merge (the candidate-at-its-own-slot case)."""
    scored = pop.clone()
    if merge_spec is None:
        for i, f in enumerate(scored.fitness):
            if f is None:
                scored.fitness[i] = score_candidate(scored.members[i], scored, i, evaluator)
    else:
        if any(f is None for f in scored.fitness):
            merged = merge(list(scored.members), merge_spec, aux)
            try:
                base_score = float(evaluator.evaluate(merged).score)
            except Exception as exc:
                raise EvaluationFailed(-1, exc) from exc
            scored.fitness = [base_score] * scored.size
    return scored


def step_generation(
    pop: Population,
    cfg: EvolveConfig,
    evaluator,
    aux: MergeContext | None = None,
) -> tuple[Population, GenerationRecord]:
    """One full mutation/crossover/score/replace round.

    Synchronous semantics forms and scores every offspring against the
    generation-start snapshot, then applies all replacements; sequential
    applies each replacement before the next offspring is formed. A scoring
    failure propagates and leaves the input population untouched.
    """
    n = pop.size
    if n < MIN_POPULATION:
        raise PopulationTooSmall(f"population of {n} cannot evolve; need >= {MIN_POPULATION}")
    if any(f is None for f in pop.fitness):
        raise ValueError("all parents need fitness before stepping; call score_parents first")

    t_mutate = 0.0
    t_eval = 0.0
    replacements = 0

    if cfg.update_semantics == "synchronous":
        snapshot = pop
        offspring: list[FlatVector] = []
        for i in range(n):
            rng = member_stream(pop.rng_seed, pop.generation, i)
            t0 = time.perf_counter()
            mutant = mutate(snapshot, i, cfg.scale_factor, rng)
            child = crossover(snapshot.members[i], mutant, cfg.crossover_ratio, rng)
            t_mutate += time.perf_counter() - t0
            offspring.append(child)
        scores = []
        for i, child in enumerate(offspring):
            t0 = time.perf_counter()
            scores.append(score_candidate(child, snapshot, i, evaluator, cfg.merge_with, aux))
            t_eval += time.perf_counter() - t0
        new_pop = pop.clone()
        for i, (child, score) in enumerate(zip(offspring, scores)):
            if score > new_pop.fitness[i]:
                new_pop.members[i] = child
                new_pop.fitness[i] = score
                replacements += 1
    else:
        new_pop = pop.clone()
        for i in range(n):
            rng = member_stream(pop.rng_seed, pop.generation, i)
            t0 = time.perf_counter()
            mutant = mutate(new_pop, i, cfg.scale_factor, rng)
            child = crossover(new_pop.members[i], mutant, cfg.crossover_ratio, rng)
            t_mutate += time.perf_counter() - t0
            t0 = time.perf_counter()
            score = score_candidate(child, new_pop, i, evaluator, cfg.merge_with, aux)
            t_eval += time.perf_counter() - t0
            if score > new_pop.fitness[i]:
                new_pop.members[i] = child
                new_pop.fitness[i] = score
                replacements += 1

    new_pop.generation = pop.generation + 1
    record = GenerationRecord(
        generation=new_pop.generation,
        best=float(max(new_pop.fitness)),
        mean=float(np.mean(new_pop.fitness)),
        replacements=replacements,
        t_mutate_ms=t_mutate * 1e3,
        t_eval_ms=t_eval * 1e3,
    )
    return new_pop, record


def evolve(
    pop: Population,
    cfg: EvolveConfig,
    evaluator,
    aux: MergeContext | None = None,
) -> tuple[Population, EvolveTrace, FlatVector]:
    """Run the configured number of generations and return the evolved artifact.

    Simple mode returns the best-fitness member (ties to the lowest index);
    combined mode returns the merge of the final population.
    """
    if pop.size < MIN_POPULATION:
        raise PopulationTooSmall(f"population of {pop.size} cannot evolve; need >= {MIN_POPULATION}")
    current = pop.clone()
    current.rng_seed = cfg.seed
    trace = EvolveTrace()
    t0 = time.perf_counter()
    current = score_parents(current, evaluator, cfg.merge_with, aux)
    trace.init_eval_ms = (time.perf_counter() - t0) * 1e3
    for _ in range(cfg.generations):
        current, record = step_generation(current, cfg, evaluator, aux)
        trace.records.append(record)
    if cfg.merge_with is None:
        artifact = current.members[current.best_index()]
    else:
        artifact = merge(list(current.members), cfg.merge_with, aux)
    return current, trace, artifact


def write_manifest(path, cfg: EvolveConfig, pop: Population, evaluator, extra: dict | None = None) -> None:
    """Record everything needed to reproduce a run next to its trace."""
    schema = pop.members[0].schema if pop.members else None
    manifest = {
        "config": {
            "generations": cfg.generations,
            "scale_factor": cfg.scale_factor,
            "crossover_ratio": cfg.crossover_ratio,
            "seed": cfg.seed,
            "mode": cfg.mode,
            "merge_with": None if cfg.merge_with is None else cfg.merge_with.method,
            "update_semantics": cfg.update_semantics,
        },
        "population_size": pop.size,
        "schema_hash": schema.digest() if schema else None,
        "evaluator": {
            "name": getattr(evaluator, "name", type(evaluator).__name__),
            "version": str(getattr(evaluator, "version", "unknown")),
        },
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
