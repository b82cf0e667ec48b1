"""Deterministic synthetic classification tasks across rotated domains.

Each domain draws class-conditional Gaussians whose means sit on a circle;
domain d rotates the whole mean layout by d * (pi / n_domains), so later
domains disagree more and more with domain 0 about which region belongs to
which class. Out-of-domain entries continue the rotation sequence and carry a
test split only. Everything is a pure function of (spec, seed).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .inference import Batch


class InsufficientData(ValueError):
    """Source batch cannot supply the requested partition sizes."""


@dataclass(frozen=True)
class DomainSpec:
    """Generation recipe for one domain's Gaussian mixture."""

    domain_id: int
    n_classes: int
    rotation: float
    radius: float
    noise: float
    n_train: int
    n_dev: int
    n_test: int
    seed: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if min(self.n_train, self.n_dev, self.n_test) <= 0:
            raise ValueError("split sizes must be positive")
        if self.noise <= 0:
            raise ValueError("noise stddev must be positive (covariance must be positive definite)")

    def class_means(self) -> np.ndarray:
        """[n_classes, 2] means on a circle, rotated by this domain's angle."""
        angles = 2.0 * math.pi * np.arange(self.n_classes) / self.n_classes + self.rotation
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


@dataclass(frozen=True)
class DomainTemplate:
    """Shared shape of every domain in an experiment; dev defaults to 5% of train."""

    n_classes: int = 6
    radius: float = 2.0
    noise: float = 0.25
    n_train: int = 1000
    n_dev: int | None = None
    n_test: int = 500

    def dev_size(self) -> int:
        if self.n_dev is not None:
            return self.n_dev
        return max(1, round(0.05 * self.n_train))


@dataclass(frozen=True)
class DomainData:
    spec: DomainSpec
    train: Batch
    dev: Batch
    test: Batch


@dataclass(frozen=True)
class SplitSet:
    """Train/dev/test batches per in-domain task plus test-only OOD domains."""

    domains: tuple[DomainData, ...]
    ood: tuple[DomainData, ...] = ()

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    def dev_batches(self) -> list[Batch]:
        return [d.dev for d in self.domains]

    def test_batches(self) -> list[Batch]:
        return [d.test for d in self.domains]

    def ood_test_batches(self) -> list[Batch]:
        return [d.test for d in self.ood]


def _balanced_labels(n: int, n_classes: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64) % n_classes


def sample_domain(spec: DomainSpec) -> DomainData:
    """Draw one domain's splits from disjoint index ranges of a single draw."""
    rng = np.random.Generator(
        np.random.Philox(key=np.array([spec.seed, 1000 + spec.domain_id], dtype=np.uint64))
    )
    total = spec.n_train + spec.n_dev + spec.n_test
    labels = _balanced_labels(total, spec.n_classes)
    means = spec.class_means()
    feats = means[labels] + spec.noise * rng.standard_normal((total, 2))
    a, b = spec.n_train, spec.n_train + spec.n_dev
    return DomainData(
        spec=spec,
        train=Batch(feats[:a], labels[:a]),
        dev=Batch(feats[a:b], labels[a:b]),
        test=Batch(feats[b:], labels[b:]),
    )


def make_domains(
    n_domains: int,
    template: DomainTemplate,
    seed: int,
    n_ood: int = 0,
) -> SplitSet:
    """Generate ``n_domains`` in-domain tasks plus ``n_ood`` test-only domains.

    Domain d's class means are domain 0's rotated by d * (pi / n_domains); OOD
    domains continue the same rotation sequence past the in-domain ones.
    """
    if n_domains < 1:
        raise ValueError("n_domains must be >= 1")
    step = math.pi / n_domains
    domains = []
    for d in range(n_domains + n_ood):
        spec = DomainSpec(
            domain_id=d,
            n_classes=template.n_classes,
            rotation=d * step,
            radius=template.radius,
            noise=template.noise,
            n_train=template.n_train,
            n_dev=template.dev_size(),
            n_test=template.n_test,
            seed=seed,
        )
        domains.append(sample_domain(spec))
    return SplitSet(domains=tuple(domains[:n_domains]), ood=tuple(domains[n_domains:]))


def _skew_proportions(n_parts: int, n_classes: int, skew) -> np.ndarray:
    """Per-partition label proportion vectors, rows summing to 1.

    A scalar skew >= 1 over-weights classes c with c % n_parts == p in
    partition p by that factor; an array is taken as explicit proportions.
    """
    if np.ndim(skew) == 2:
        props = np.asarray(skew, dtype=np.float64)
        if props.shape != (n_parts, n_classes):
            raise ValueError(f"skew matrix must be [{n_parts}, {n_classes}], got {props.shape}")
        if np.any(props < 0) or np.any(props.sum(axis=1) <= 0):
            raise ValueError("skew proportions must be non-negative with positive row sums")
        return props / props.sum(axis=1, keepdims=True)
    factor = float(skew)
    if factor < 1.0:
        raise ValueError("scalar skew factor must be >= 1")
    weights = np.ones((n_parts, n_classes), dtype=np.float64)
    for p in range(n_parts):
        weights[p, np.arange(n_classes) % n_parts == p] = factor
    return weights / weights.sum(axis=1, keepdims=True)


def _apportion(proportions: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``proportions * total`` to integers summing to total."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - int(counts.sum())
    if remainder:
        frac = raw - counts
        for idx in sorted(range(len(frac)), key=lambda i: (-frac[i], i))[:remainder]:
            counts[idx] += 1
    return counts


def non_iid_partition(
    batch: Batch,
    n_parts: int = 2,
    per_part: int = 1000,
    skew=3.0,
    seed: int = 0,
) -> list[Batch]:
    """Split a batch into disjoint partitions with distinct label distributions.

    Each partition holds exactly ``per_part`` examples whose label histogram
    follows the skew proportion vector (exactly, for divisible counts).
    """
    if n_parts < 1:
        raise ValueError("n_parts must be >= 1")
    n_classes = int(batch.labels.max()) + 1 if len(batch) else 0
    if n_classes < 1:
        raise InsufficientData("source batch is empty")
    props = _skew_proportions(n_parts, n_classes, skew)
    counts = np.stack([_apportion(props[p], per_part) for p in range(n_parts)])

    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 2000], dtype=np.uint64)))
    pools = []
    for c in range(n_classes):
        pool = np.flatnonzero(batch.labels == c)
        pools.append(rng.permutation(pool))
    needed = counts.sum(axis=0)
    for c in range(n_classes):
        if needed[c] > len(pools[c]):
            raise InsufficientData(
                f"class {c} needs {int(needed[c])} examples but only {len(pools[c])} are available"
            )

    cursors = [0] * n_classes
    parts = []
    for p in range(n_parts):
        take = []
        for c in range(n_classes):
            k = int(counts[p, c])
            take.append(pools[c][cursors[c] : cursors[c] + k])
            cursors[c] += k
        idx = np.sort(np.concatenate(take))
        parts.append(batch.take(idx))
    return parts


def dev_fraction(split: SplitSet, fraction: float) -> SplitSet:
    """Copy of the split set whose dev batches are prefixes of the originals."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    domains = []
    for d in split.domains:
        keep = math.ceil(fraction * len(d.dev))
        dev = Batch(d.dev.features[:keep], d.dev.labels[:keep])
        domains.append(replace(d, dev=dev))
    return SplitSet(domains=tuple(domains), ood=split.ood)


def export_csv(split: SplitSet, path) -> None:
    """Dump every example as (feature columns, label, domain, split) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_feats = split.domains[0].train.features.shape[1] if split.domains else 2
        writer.writerow([f"x{i}" for i in range(n_feats)] + ["label", "domain", "split"])
        def emit(batch: Batch, domain_id: int, name: str):
            for row, label in zip(batch.features, batch.labels):
                writer.writerow([f"{v:.9g}" for v in row] + [int(label), domain_id, name])
        for d in split.domains:
            emit(d.train, d.spec.domain_id, "train")
            emit(d.dev, d.spec.domain_id, "dev")
            emit(d.test, d.spec.domain_id, "test")
        for d in split.ood:
            emit(d.test, d.spec.domain_id, "ood_test")
