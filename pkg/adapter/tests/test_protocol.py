"""Wire conformance: drive the adapter as a real child process with raw
line-delimited JSON, asserting the exact behaviors the engine's session layer
depends on (id echo, score range, determinism, error reporting, shutdown)."""

import json
import subprocess
import sys

import pytest


class AdapterProcess:
    def __init__(self, model_dir: str, data: str):
        self.proc = subprocess.Popen(
            [
                sys.executable,
                "-m",
                "hf_eval_adapter",
                "serve",
                "--model",
                model_dir,
                "--data",
                data,
            ],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
        self.next_id = 1

    def send_raw(self, line: str) -> dict:
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()
        reply = self.proc.stdout.readline()
        assert reply, "adapter closed its output stream"
        return json.loads(reply)

    def request(self, cmd: str, **fields) -> dict:
        rid = self.next_id
        self.next_id += 1
        return self.send_raw(json.dumps({"id": rid, "cmd": cmd, **fields}))

    def close(self):
        if self.proc.poll() is None:
            self.proc.kill()
        self.proc.wait()


@pytest.fixture(scope="module")
def session(workspace):
    proc = AdapterProcess(workspace["model_dir"], workspace["data"])
    yield proc
    proc.close()


class TestProtocolConformance:
    def test_info_shape(self, session):
        reply = session.request("info")
        assert reply["ok"] is True
        assert reply["id"] == session.next_id - 1
        assert reply["name"] == "hf-eval-adapter"
        assert isinstance(reply["version"], str)
        assert reply["capacity"] == 1

    def test_evaluate_echoes_id_and_bounds_score(self, session, workspace):
        reply = session.request(
            "evaluate", weights_path=workspace["checkpoint"], split="dev", metric="accuracy"
        )
        assert reply["id"] == session.next_id - 1
        assert reply["ok"] is True
        assert 0.0 <= reply["score"] <= 1.0
        assert reply["metric"] == "accuracy"
        assert reply["n_examples"] == 90

    def test_consecutive_evaluates_identical(self, session, workspace):
        first = session.request(
            "evaluate", weights_path=workspace["finetuned_checkpoint"], split="dev", metric="accuracy"
        )
        second = session.request(
            "evaluate", weights_path=workspace["finetuned_checkpoint"], split="dev", metric="accuracy"
        )
        assert first["ok"] and second["ok"]
        assert abs(first["score"] - second["score"]) <= 1e-12

    def test_missing_checkpoint_is_clean_error(self, session):
        reply = session.request("evaluate", weights_path="/nonexistent.st", split="dev", metric="accuracy")
        assert reply["ok"] is False
        assert "error_message" in reply and reply["error_message"]

    def test_renamed_tensor_error_names_tensor(self, session, workspace, tmp_path):
        from conftest import build_tiny_model, save_param_checkpoint

        path = tmp_path / "renamed.st"
        save_param_checkpoint(
            build_tiny_model(seed=3), path, rename={"classifier.weight": "classifier.weight_x"}
        )
        reply = session.request("evaluate", weights_path=str(path), split="dev", metric="accuracy")
        assert reply["ok"] is False
        assert "classifier.weight" in reply["error_message"]

    def test_unknown_command_reported(self, session):
        reply = session.request("train")
        assert reply["ok"] is False
        assert "unknown cmd" in reply["error_message"]

    def test_unparseable_line_keeps_serving(self, session, workspace):
        reply = session.send_raw("this is not json")
        assert reply["ok"] is False
        follow_up = session.request(
            "evaluate", weights_path=workspace["checkpoint"], split="dev", metric="accuracy"
        )
        assert follow_up["ok"] is True

    def test_server_survives_bad_then_good_cycles(self, session, workspace):
        for _ in range(3):
            bad = session.request("evaluate", weights_path="/missing.st", split="dev", metric="accuracy")
            assert bad["ok"] is False
            good = session.request(
                "evaluate", weights_path=workspace["checkpoint"], split="dev", metric="accuracy"
            )
            assert good["ok"] is True


def test_shutdown_acknowledges_and_exits(workspace):
    proc = AdapterProcess(workspace["model_dir"], workspace["data"])
    try:
        info = proc.request("info")
        assert info["ok"]
        reply = proc.request("shutdown")
        assert reply == {"id": 2, "ok": True}
        assert proc.proc.wait(timeout=30) == 0
    finally:
        proc.close()
