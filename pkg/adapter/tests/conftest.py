"""Fixtures: a tiny randomly-initialized classification model saved locally,
a tokenized dev split, and a parameter checkpoint in the engine's container
format. Everything is seeded and CPU-only."""

import numpy as np
import pytest
import torch
from safetensors.torch import save_file
from transformers import BertConfig, BertForSequenceClassification

N_LABELS = 3
SEQ_LEN = 12
N_EXAMPLES = 90


def build_tiny_model(seed: int = 0) -> BertForSequenceClassification:
    torch.manual_seed(seed)
    config = BertConfig(
        vocab_size=64,
        hidden_size=16,
        num_hidden_layers=1,
        num_attention_heads=2,
        intermediate_size=24,
        max_position_embeddings=32,
        num_labels=N_LABELS,
    )
    return BertForSequenceClassification(config)


def make_dataset(path, n: int = N_EXAMPLES, seed: int = 1) -> None:
    rng = np.random.default_rng(seed)
    lengths = rng.integers(4, SEQ_LEN + 1, n)
    input_ids = np.zeros((n, SEQ_LEN), dtype=np.int64)
    attention_mask = np.zeros((n, SEQ_LEN), dtype=np.int64)
    for i, ln in enumerate(lengths):
        input_ids[i, :ln] = rng.integers(1, 64, ln)
        attention_mask[i, :ln] = 1
    labels = rng.integers(0, N_LABELS, n)
    np.savez(path, input_ids=input_ids, attention_mask=attention_mask, labels=labels)


def save_param_checkpoint(model, path, rename: dict | None = None, drop: set | None = None) -> None:
    tensors = {}
    for name, param in model.named_parameters():
        if drop and name in drop:
            continue
        tensors[(rename or {}).get(name, name)] = param.detach().clone().contiguous()
    save_file(tensors, str(path))


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("adapter")
    model = build_tiny_model()
    model_dir = root / "tiny-model"
    model.save_pretrained(model_dir)
    data_path = root / "dev.npz"
    make_dataset(data_path)
    ckpt_path = root / "weights.st"
    save_param_checkpoint(model, ckpt_path)

    finetuned = build_tiny_model(seed=7)  # same architecture, different weights
    finetuned_path = root / "finetuned.st"
    save_param_checkpoint(finetuned, finetuned_path)

    return {
        "root": root,
        "model_dir": str(model_dir),
        "data": str(data_path),
        "checkpoint": str(ckpt_path),
        "finetuned_checkpoint": str(finetuned_path),
        "finetuned_model": finetuned,
    }
