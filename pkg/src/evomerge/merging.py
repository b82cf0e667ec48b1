"""Closed-form checkpoint merging: averaging, Fisher, regression-mean, sign-
consensus task arithmetic, greedy soup, pairwise interpolation, plus the
coefficient grid search and 2-D score landscape slices built on top of them.

All merges are pure functions from float32 flat vectors to a float32 flat
vector; internal accumulation happens in float64 and rounds once on the way
out.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .inference import FisherState, GramState
from .tensor_store import F32, FlatVector, require_same_schema

MERGE_METHODS = ("simple", "fisher", "regmean", "ties", "greedy_soup", "pairwise_interp")

FISHER_FLOOR = 1e-8


class MissingAux(ValueError):
    """The merge method needs auxiliary state that was not supplied."""


@dataclass(frozen=True)
class MergeSpec:
    """Method selector plus its parameters; only the fields a method reads matter.

    ``alpha`` scales regression-mean off-diagonal Gram entries, ``trim_fraction``
    is the top-magnitude keep rate of the sign-consensus merge, ``rescale`` its
    final task-vector multiplier, and ``interp`` the pairwise mixing weight.
    """

    method: str = "simple"
    weights: tuple[float, ...] | None = None
    alpha: float = 0.9
    trim_fraction: float = 0.2
    rescale: float = 1.0
    interp: float = 0.5
    trim_per_tensor: bool = False

    def __post_init__(self):
        if self.method not in MERGE_METHODS:
            raise ValueError(f"unknown merge method {self.method!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if not 0.0 < self.trim_fraction <= 1.0:
            raise ValueError("trim_fraction must be in (0, 1]")
        if not 0.0 <= self.interp <= 1.0:
            raise ValueError("interp must be in [0, 1]")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if any(x < 0 for x in w) or sum(w) <= 0:
                raise ValueError("weights must be non-negative with a positive sum")
            object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class TaskVector:
    """A fine-tuned checkpoint expressed as base weights plus a delta.

    Built from a (base, fine-tuned) pair, the difference is carried at float64
    precision internally so that applying the vector at scale 1 reconstructs
    the fine-tuned weights bit-for-bit; ``delta`` is its float32 projection.
    """

    base: FlatVector
    delta: FlatVector

    def __post_init__(self):
        require_same_schema(self.base, self.delta)
        object.__setattr__(self, "_delta64", self.delta.values.astype(np.float64))

    @classmethod
    def from_pair(cls, base: FlatVector, finetuned: FlatVector) -> "TaskVector":
        require_same_schema(base, finetuned)
        delta64 = finetuned.values.astype(np.float64) - base.values.astype(np.float64)
        tv = cls(base=base, delta=FlatVector(base.schema, delta64.astype(F32)))
        object.__setattr__(tv, "_delta64", delta64)
        return tv

    def delta64(self) -> np.ndarray:
        return self._delta64

    def apply(self, scale: float = 1.0) -> FlatVector:
        return combine_task_vectors(self.base, [(scale, self)])


def combine_task_vectors(base: FlatVector, scaled: list[tuple[float, "TaskVector"]]) -> FlatVector:
    """base + sum(scale * delta), accumulated in float64 and rounded once."""
    acc = base.values.astype(np.float64)
    for scale, tv in scaled:
        require_same_schema(base, tv.delta)
        acc = acc + float(scale) * tv.delta64()
    return FlatVector(schema=base.schema, values=acc.astype(F32))


@dataclass
class MergeContext:
    """Auxiliary state consumed by the aux-hungry methods."""

    fishers: list[FisherState] | None = None
    grams: list[GramState] | None = None
    base: FlatVector | None = None
    dev_evaluator: object | None = None


def _model_weights(n: int, weights: tuple[float, ...] | None) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n, dtype=np.float64)
    if len(weights) != n:
        raise ValueError(f"{len(weights)} weights for {n} models")
    w = np.asarray(weights, dtype=np.float64)
    return w / w.sum()


def simple_average(models: list[FlatVector], weights: tuple[float, ...] | None = None) -> FlatVector:
    schema = require_same_schema(*models)
    w = _model_weights(len(models), weights)
    acc = np.zeros(schema.total_dim, dtype=np.float64)
    for wi, m in zip(w, models):
        acc += wi * m.values.astype(np.float64)
    return FlatVector(schema=schema, values=acc.astype(F32))


def fisher_merge(
    models: list[FlatVector],
    fishers: list[FisherState],
    weights: tuple[float, ...] | None = None,
) -> FlatVector:
    """Per-coordinate Fisher-weighted mean with a small denominator floor."""
    schema = require_same_schema(*models)
    if len(fishers) != len(models):
        raise ValueError(f"{len(fishers)} Fisher states for {len(models)} models")
    w = _model_weights(len(models), weights)
    num = np.zeros(schema.total_dim, dtype=np.float64)
    den = np.zeros(schema.total_dim, dtype=np.float64)
    for wi, m, fs in zip(w, models, fishers):
        require_same_schema(m, fs.diagonal)
        f = fs.diagonal.values.astype(np.float64)
        if np.any(f < 0):
            raise ValueError("negative Fisher entry")
        num += wi * f * m.values.astype(np.float64)
        den += wi * f
    return FlatVector(schema=schema, values=(num / (den + FISHER_FLOOR)).astype(F32))


def _scaled_gram(g: np.ndarray, alpha: float) -> np.ndarray:
    scaled = alpha * g
    np.fill_diagonal(scaled, np.diag(g))
    return scaled


def regmean_merge(models: list[FlatVector], grams: list[GramState], alpha: float = 0.9) -> FlatVector:
    """Solve (sum G'_i) W = sum (G'_i W_i) per linear layer; average the rest.

    Off-diagonal Gram entries are scaled by ``alpha`` first. A ridge of
    1e-6 * trace(sum G') / dim is added only if the direct solve reports a
    singular system.
    """
    schema = require_same_schema(*models)
    if len(grams) != len(models):
        raise ValueError(f"{len(grams)} Gram states for {len(models)} models")
    layer_names = set(grams[0].grams)
    for gs in grams[1:]:
        if set(gs.grams) != layer_names:
            raise ValueError("models disagree on which layers carry Gram matrices")

    merged = simple_average(models).values.astype(np.float64)
    for name in sorted(layer_names):
        slot = schema.slot(name)
        out_dim, in_dim = slot.shape
        lhs = np.zeros((in_dim, in_dim), dtype=np.float64)
        rhs = np.zeros((in_dim, out_dim), dtype=np.float64)
        for m, gs in zip(models, grams):
            g = gs.grams[name]
            if g.shape != (in_dim, in_dim):
                raise ValueError(
                    f"Gram for {name!r} has shape {g.shape}, expected {(in_dim, in_dim)}"
                )
            g_scaled = _scaled_gram(g, alpha)
            w_i = m.values[slot.offset : slot.offset + slot.size].astype(np.float64).reshape(slot.shape)
            lhs += g_scaled
            rhs += g_scaled @ w_i.T
        try:
            solved = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            ridge = 1e-6 * np.trace(lhs) / in_dim
            if ridge <= 0.0:
                ridge = 1e-12
            solved = np.linalg.solve(lhs + ridge * np.eye(in_dim), rhs)
        merged[slot.offset : slot.offset + slot.size] = solved.T.reshape(-1)
    return FlatVector(schema=schema, values=merged.astype(F32))


def trim_task_vector(tau: np.ndarray, trim_fraction: float) -> np.ndarray:
    """Keep the top ceil(k*d) entries by |value| (ties kept at lower index), zero the rest."""
    if not 0.0 < trim_fraction <= 1.0:
        raise ValueError("trim_fraction must be in (0, 1]")
    d = tau.shape[0]
    keep = math.ceil(trim_fraction * d)
    order = np.argsort(-np.abs(tau), kind="stable")
    trimmed = np.zeros_like(tau)
    kept = order[:keep]
    trimmed[kept] = tau[kept]
    return trimmed


def ties_merge(
    models: list[FlatVector],
    theta_pre: FlatVector,
    trim_fraction: float = 0.2,
    rescale: float = 1.0,
    per_tensor: bool = False,
) -> FlatVector:
    """Trim each task vector, elect a per-coordinate sign, mean the agreeing entries.

    Trimming is global over the flat vector by default; ``per_tensor`` applies
    the keep rate within each schema slot instead.
    """
    schema = require_same_schema(*models, theta_pre)
    base = theta_pre.values.astype(np.float64)
    trimmed = []
    for m in models:
        tau = m.values.astype(np.float64) - base
        if per_tensor:
            t = np.zeros_like(tau)
            for slot in schema.slots:
                sl = slice(slot.offset, slot.offset + slot.size)
                t[sl] = trim_task_vector(tau[sl], trim_fraction)
            trimmed.append(t)
        else:
            trimmed.append(trim_task_vector(tau, trim_fraction))

    total = np.zeros(schema.total_dim, dtype=np.float64)
    for t in trimmed:
        total = total + t
    elected = np.sign(total)

    merged_tau = np.zeros(schema.total_dim, dtype=np.float64)
    count = np.zeros(schema.total_dim, dtype=np.float64)
    for t in trimmed:
        agree = (np.sign(t) == elected) & (t != 0.0)
        merged_tau = merged_tau + np.where(agree, t, 0.0)
        count = count + agree
    with np.errstate(invalid="ignore"):
        merged_tau = np.where(count > 0, merged_tau / np.where(count > 0, count, 1.0), 0.0)
    return FlatVector(schema=schema, values=(base + float(rescale) * merged_tau).astype(F32))


def greedy_soup(models: list[FlatVector], dev_evaluator) -> FlatVector:
    """Greedily grow a uniform average, keeping a model iff dev score does not drop."""
    require_same_schema(*models)
    scores = [dev_evaluator.evaluate(m).score for m in models]
    order = sorted(range(len(models)), key=lambda i: (-scores[i], i))
    soup = [models[order[0]]]
    soup_score = scores[order[0]]
    for idx in order[1:]:
        candidate = simple_average(soup + [models[idx]])
        candidate_score = dev_evaluator.evaluate(candidate).score
        if candidate_score >= soup_score:
            soup.append(models[idx])
            soup_score = candidate_score
    return simple_average(soup)


def pairwise_interpolate(a: FlatVector, b: FlatVector, interp: float) -> FlatVector:
    """interp * a + (1 - interp) * b in float64, rounded once."""
    schema = require_same_schema(a, b)
    mixed = float(interp) * a.values.astype(np.float64) + (1.0 - float(interp)) * b.values.astype(np.float64)
    return FlatVector(schema=schema, values=mixed.astype(F32))


def merge(models: list[FlatVector], spec: MergeSpec, aux: MergeContext | None = None) -> FlatVector:
    """Dispatch to the configured method; a single model is returned as-is."""
    if not models:
        raise ValueError("merge needs at least one model")
    require_same_schema(*models)
    if len(models) == 1:
        return models[0]
    aux = aux or MergeContext()
    if spec.method == "simple":
        return simple_average(models, spec.weights)
    if spec.method == "fisher":
        if aux.fishers is None:
            raise MissingAux("fisher merging needs per-model Fisher diagonals")
        return fisher_merge(models, aux.fishers, spec.weights)
    if spec.method == "regmean":
        if aux.grams is None:
            raise MissingAux("regmean merging needs per-model Gram matrices")
        return regmean_merge(models, aux.grams, spec.alpha)
    if spec.method == "ties":
        if aux.base is None:
            raise MissingAux("ties merging needs the shared pre-trained weights")
        return ties_merge(models, aux.base, spec.trim_fraction, spec.rescale, spec.trim_per_tensor)
    if spec.method == "greedy_soup":
        if aux.dev_evaluator is None:
            raise MissingAux("greedy soup needs a dev-set evaluator")
        return greedy_soup(models, aux.dev_evaluator)
    if spec.method == "pairwise_interp":
        if len(models) != 2:
            raise ValueError("pairwise interpolation takes exactly two models")
        return pairwise_interpolate(models[0], models[1], spec.interp)
    raise AssertionError(f"unhandled method {spec.method}")


def default_search_grid() -> tuple[float, ...]:
    """0.10 to 0.90 in steps of 0.05 (17 points)."""
    return tuple(round(0.10 + 0.05 * i, 2) for i in range(17))


@dataclass(frozen=True)
class PairwiseSearchContext:
    model_a: FlatVector
    model_b: FlatVector
    evaluator: object


@dataclass(frozen=True)
class ScaleSearchContext:
    """Re-runs a full evolve with each candidate scale factor."""

    population: object
    config: object
    evaluator: object
    aux: MergeContext | None = None


def coefficient_search(objective: str, context, grid=None):
    """Scan a grid of coefficients and return (best value, [(value, score), ...]).

    ``pairwise_interp`` scores value * a + (1 - value) * b on the context's
    evaluator; ``evolver_scale`` runs a fresh evolve per value and scores the
    evolved artifact. Ties break toward the smaller value.
    """
    grid = tuple(grid) if grid is not None else default_search_grid()
    if not grid:
        raise ValueError("grid must be non-empty")
    if objective == "pairwise_interp":
        def score_fn(value):
            mixed = pairwise_interpolate(context.model_a, context.model_b, value)
            return context.evaluator.evaluate(mixed).score
    elif objective == "evolver_scale":
        from dataclasses import replace as _replace

        from .evolution import evolve

        def score_fn(value):
            cfg = _replace(context.config, scale_factor=float(value))
            _, _, artifact = evolve(context.population, cfg, context.evaluator, aux=context.aux)
            return context.evaluator.evaluate(artifact).score
    else:
        raise ValueError(f"unknown objective {objective!r}")

    table = [(float(v), float(score_fn(v))) for v in grid]
    best_value, best_score = table[0]
    for value, score in table[1:]:
        if score > best_score:
            best_value, best_score = value, score
    return best_value, table


@dataclass(frozen=True)
class LandscapeGrid:
    grid_a: tuple[float, ...]
    grid_b: tuple[float, ...]
    scores: np.ndarray  # [len(grid_a), len(grid_b)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["a", "b", "score"])
            for i, a in enumerate(self.grid_a):
                for j, b in enumerate(self.grid_b):
                    writer.writerow([a, b, f"{self.scores[i, j]:.10g}"])

    def to_svg(self, path) -> bool:
        """Contour rendering; returns False when matplotlib is unavailable."""
        try:
            import matplotlib
            matplotlib.use("SVG")
            import matplotlib.pyplot as plt
        except ImportError:
            return False
        fig, ax = plt.subplots(figsize=(6, 5))
        bb, aa = np.meshgrid(self.grid_b, self.grid_a)
        contour = ax.contourf(aa, bb, self.scores, levels=16, cmap="viridis")
        fig.colorbar(contour, ax=ax, label="score")
        ax.set_xlabel("coefficient a")
        ax.set_ylabel("coefficient b")
        fig.savefig(path, format="svg")
        plt.close(fig)
        return True


def landscape_slice(
    theta_pre: FlatVector,
    tau1: TaskVector,
    tau2: TaskVector,
    grid_a,
    grid_b,
    evaluator,
) -> LandscapeGrid:
    """Score theta_pre + a*tau1 + b*tau2 over the coefficient grid."""
    require_same_schema(theta_pre, tau1.delta, tau2.delta)
    grid_a = tuple(float(a) for a in grid_a)
    grid_b = tuple(float(b) for b in grid_b)
    scores = np.zeros((len(grid_a), len(grid_b)), dtype=np.float64)
    for i, a in enumerate(grid_a):
        for j, b in enumerate(grid_b):
            point = combine_task_vectors(theta_pre, [(a, tau1), (b, tau2)])
            scores[i, j] = evaluator.evaluate(point).score
    return LandscapeGrid(grid_a=grid_a, grid_b=grid_b, scores=scores)


def ensemble_predict(models: list[FlatVector], batch, forward_fn) -> np.ndarray:
    """Average the models' logits per example, then argmax (ties to lowest class)."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    acc = None
    for m in models:
        logits = np.asarray(forward_fn(m, batch), dtype=np.float64)
        if acc is None:
            acc = np.zeros_like(logits)
        elif logits.shape != acc.shape:
            raise ValueError(f"output shape mismatch: {logits.shape} vs {acc.shape}")
        acc += logits
    acc /= len(models)
    return np.argmax(acc, axis=1)
