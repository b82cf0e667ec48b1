"""Deterministic scoring of sequence-classification checkpoints.

The adapter holds one transformers model and one tokenized dev/test dataset.
Each evaluation loads a float32 checkpoint file (standard header+buffer
tensor layout) into the model's parameters by name, runs inference with no
dropout and no gradient state, and returns accuracy or macro-F1. Tensor
name, shape, or dtype mismatches abort the evaluation with a listing of the
offending tensors rather than being silently skipped; classification heads
fine-tuned with a different label count surface here as shape mismatches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file

METRICS = ("accuracy", "macro_f1")


class CheckpointMismatch(ValueError):
    """Checkpoint tensors do not line up with the model's parameters."""


@dataclass(frozen=True)
class AdapterConfig:
    """What to evaluate with: a base model, a tokenized dataset, and a metric.

    ``model`` is any identifier ``from_pretrained`` accepts (hub id or local
    directory). ``data`` is an .npz with int64 ``input_ids`` [n, seq],
    ``attention_mask`` [n, seq], and ``labels`` [n]; ``test_data`` optionally
    backs the "test" split. ``max_examples`` truncates both.
    """

    model: str
    data: str
    test_data: str | None = None
    metric: str = "accuracy"
    device: str = "cpu"
    max_examples: int | None = None
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.max_examples is not None and self.max_examples < 1:
            raise ValueError("max_examples must be >= 1")

    def to_json(self) -> str:
        return json.dumps(
            {
                "model": self.model,
                "data": self.data,
                "test_data": self.test_data,
                "metric": self.metric,
                "device": self.device,
                "max_examples": self.max_examples,
                "batch_size": self.batch_size,
                "seed": self.seed,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "AdapterConfig":
        return cls(**json.loads(text))


class TokenizedSplit:
    """One tokenized classification split loaded from .npz."""

    def __init__(self, path: str, max_examples: int | None = None):
        with np.load(path) as archive:
            input_ids = archive["input_ids"].astype(np.int64)
            attention_mask = archive["attention_mask"].astype(np.int64)
            labels = archive["labels"].astype(np.int64)
        if input_ids.shape != attention_mask.shape or input_ids.shape[0] != labels.shape[0]:
            raise ValueError(f"inconsistent array shapes in {path}")
        if max_examples is not None:
            input_ids = input_ids[:max_examples]
            attention_mask = attention_mask[:max_examples]
            labels = labels[:max_examples]
        if input_ids.shape[0] == 0:
            raise ValueError(f"dataset {path} is empty")
        self.input_ids = torch.from_numpy(input_ids)
        self.attention_mask = torch.from_numpy(attention_mask)
        self.labels = torch.from_numpy(labels)

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def _macro_f1(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    f1s = []
    for c in range(n_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


class SequenceClassifierEvaluator:
    """Loads the base model once, then scores checkpoint files on demand."""

    name = "hf-eval-adapter"
    version = "0.1.0"
    capacity = 1  # single in-flight evaluate; the engine serializes accordingly

    def __init__(self, config: AdapterConfig):
        from transformers import AutoModelForSequenceClassification

        self.config = config
        torch.manual_seed(config.seed)
        torch.use_deterministic_algorithms(True, warn_only=True)
        self.device = torch.device(config.device)
        self.model = AutoModelForSequenceClassification.from_pretrained(config.model)
        self.model.to(self.device)
        self.model.eval()
        self.splits = {"dev": TokenizedSplit(config.data, config.max_examples)}
        if config.test_data:
            self.splits["test"] = TokenizedSplit(config.test_data, config.max_examples)
        self._param_shapes = {
            name: tuple(p.shape) for name, p in self.model.named_parameters()
        }

    def load_weights(self, weights_path: str) -> None:
        """Copy checkpoint tensors into the model parameters, matching by name.

        Raises CheckpointMismatch listing every missing, unexpected, or
        shape/dtype-mismatched tensor; on mismatch no parameter is modified.
        """
        if not Path(weights_path).exists():
            raise FileNotFoundError(f"checkpoint not found: {weights_path}")
        tensors = load_file(weights_path)
        problems = []
        for name in sorted(set(self._param_shapes) - set(tensors)):
            problems.append(f"missing from checkpoint: {name}")
        for name in sorted(set(tensors) - set(self._param_shapes)):
            problems.append(f"not a model parameter: {name}")
        for name in sorted(set(tensors) & set(self._param_shapes)):
            if tensors[name].dtype != torch.float32:
                problems.append(f"dtype mismatch: {name} is {tensors[name].dtype}, expected float32")
            elif tuple(tensors[name].shape) != self._param_shapes[name]:
                problems.append(
                    f"shape mismatch: {name} is {tuple(tensors[name].shape)}, "
                    f"model has {self._param_shapes[name]}"
                )
        if problems:
            raise CheckpointMismatch("; ".join(problems))
        with torch.no_grad():
            params = dict(self.model.named_parameters())
            for name, tensor in tensors.items():
                params[name].copy_(tensor.to(device=self.device, dtype=params[name].dtype))

    @torch.no_grad()
    def _predict(self, split: TokenizedSplit) -> np.ndarray:
        preds = []
        for start in range(0, len(split), self.config.batch_size):
            stop = start + self.config.batch_size
            logits = self.model(
                input_ids=split.input_ids[start:stop].to(self.device),
                attention_mask=split.attention_mask[start:stop].to(self.device),
            ).logits
            preds.append(np.argmax(logits.float().cpu().numpy(), axis=1))
        return np.concatenate(preds)

    def score_split(self, split_name: str, metric: str | None = None) -> tuple[float, str, int]:
        split = self.splits.get(split_name)
        if split is None:
            raise ValueError(f"no data for split {split_name!r}")
        metric = metric or self.config.metric
        if metric not in METRICS:
            raise ValueError(f"unsupported metric {metric!r}")
        preds = self._predict(split)
        labels = split.labels.numpy()
        if metric == "accuracy":
            score = float(np.mean(preds == labels))
        else:
            score = _macro_f1(preds, labels, int(self.model.config.num_labels))
        return score, metric, len(split)

    def evaluate_checkpoint(self, weights_path: str, split: str, metric: str | None = None):
        self.load_weights(weights_path)
        return self.score_split(split, metric)
