"""Evolve and merge fine-tuned neural-network checkpoints in flat weight space."""

from .datasets import DomainSpec, DomainTemplate, SplitSet, dev_fraction, make_domains, non_iid_partition
from .evaluator import (
    EvalRequest,
    EvalResponse,
    EvaluatorSession,
    FitnessReport,
    InProcessEvaluator,
    handshake,
    serve_stdio,
)
from .evolution import (
    EvolveConfig,
    EvolveTrace,
    Population,
    crossover,
    evolve,
    mutate,
    score_candidate,
    step_generation,
)
from .inference import Batch, FisherState, GramState, MlpSpec, TrainConfig, accuracy, capture_grams, fisher_diagonal, forward, train
from .merging import (
    MergeContext,
    MergeSpec,
    TaskVector,
    coefficient_search,
    default_search_grid,
    ensemble_predict,
    fisher_merge,
    greedy_soup,
    landscape_slice,
    merge,
    regmean_merge,
    simple_average,
    ties_merge,
)
from .tensor_store import (
    FlatVector,
    ParamSchema,
    TensorMap,
    axpy,
    flatten,
    load_checkpoint,
    save_checkpoint,
    unflatten,
)

__version__ = "0.1.0"
