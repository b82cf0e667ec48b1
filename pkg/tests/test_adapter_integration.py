"""End-to-end: the engine evolves real transformer checkpoints with fitness
served by the external adapter process over the wire protocol.

Runs only when the optional adapter package (and torch/transformers) are
installed; the primary suite is complete without it.
"""

import sys

import numpy as np
import pytest

pytest.importorskip("hf_eval_adapter")
torch = pytest.importorskip("torch")

from evomerge.evaluator import handshake
from evomerge.evolution import EvolveConfig, Population, evolve
from evomerge.tensor_store import ParamSchema, TensorMap, flatten


@pytest.fixture(scope="module")
def adapter_workspace(tmp_path_factory):
    from transformers import BertConfig, BertForSequenceClassification

    root = tmp_path_factory.mktemp("adapter-integration")

    def tiny(seed):
        torch.manual_seed(seed)
        return BertForSequenceClassification(
            BertConfig(
                vocab_size=64,
                hidden_size=16,
                num_hidden_layers=1,
                num_attention_heads=2,
                intermediate_size=24,
                max_position_embeddings=32,
                num_labels=3,
            )
        )

    base = tiny(0)
    model_dir = root / "model"
    base.save_pretrained(model_dir)

    rng = np.random.default_rng(5)
    n, seq = 60, 10
    input_ids = rng.integers(1, 64, (n, seq)).astype(np.int64)
    attention_mask = np.ones((n, seq), dtype=np.int64)
    labels = rng.integers(0, 3, n).astype(np.int64)
    data_path = root / "dev.npz"
    np.savez(data_path, input_ids=input_ids, attention_mask=attention_mask, labels=labels)

    members = []
    schema = None
    for seed in (1, 2, 3):
        model = tiny(seed)
        tensors = {
            name: param.detach().numpy().astype(np.float32)
            for name, param in model.named_parameters()
        }
        tmap = TensorMap(tensors)
        if schema is None:
            schema = ParamSchema.from_tensor_map(tmap)
        members.append(flatten(tmap, schema))

    return {"model_dir": str(model_dir), "data": str(data_path), "members": members}


def test_evolve_transformer_population_via_adapter(adapter_workspace):
    command = [
        sys.executable,
        "-m",
        "hf_eval_adapter",
        "serve",
        "--model",
        adapter_workspace["model_dir"],
        "--data",
        adapter_workspace["data"],
    ]
    cfg = EvolveConfig(generations=2, seed=31)

    def run():
        with handshake(command, handshake_timeout=120) as session:
            assert session.name == "hf-eval-adapter"
            pop = Population.from_members(adapter_workspace["members"], seed=cfg.seed)
            final, trace, best = evolve(pop, cfg, session)
            session.shutdown()
        return final, trace, best

    final_a, trace_a, best_a = run()
    curve = trace_a.best_curve()
    assert all(later >= earlier for earlier, later in zip(curve, curve[1:]))
    assert all(0.0 <= record.best <= 1.0 for record in trace_a.records)

    final_b, trace_b, best_b = run()
    assert best_a.bitwise_equal(best_b)
    assert final_a.fitness == final_b.fitness
    assert [r.best for r in trace_a.records] == [r.best for r in trace_b.records]
