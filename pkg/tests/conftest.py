"""Shared toy-suite fixtures: a 5-domain population per seed, built once."""

import pytest

from evomerge.datasets import DomainTemplate
from evomerge.evaluator import InProcessEvaluator
from evomerge.evolution import EvolveConfig
from evomerge.harness import ExperimentConfig, build_population
from evomerge.inference import MlpSpec, TrainConfig

SUITE_SEEDS = (1, 2, 3, 4, 5)


def suite_experiment_config() -> ExperimentConfig:
    """The 5-domain MLP suite: 5 rotated domains plus 2 OOD, 6 classes."""
    return ExperimentConfig(
        n_domains=5,
        n_ood=2,
        template=DomainTemplate(
            n_classes=6, radius=2.0, noise=0.25, n_train=1000, n_dev=100, n_test=500
        ),
        model=MlpSpec((2, 16, 16, 6)),
        pretrain=TrainConfig(lr=0.05, epochs=3, batch_size=32),
        finetune=TrainConfig(lr=0.05, epochs=30, batch_size=16),
        evolve=EvolveConfig(generations=30, seed=0),
        seeds=SUITE_SEEDS,
    )


@pytest.fixture(scope="session")
def suite_config():
    return suite_experiment_config()


@pytest.fixture(scope="session")
def suite_bundles(suite_config):
    return {seed: build_population(suite_config, seed) for seed in SUITE_SEEDS}


@pytest.fixture(scope="session")
def suite_evaluators(suite_config, suite_bundles):
    return {
        seed: InProcessEvaluator(
            suite_config.model,
            bundle.split.dev_batches(),
            bundle.split.test_batches(),
        )
        for seed, bundle in suite_bundles.items()
    }
