"""Fitness evaluators: an in-process one over the MLP engine, and a
process-boundary protocol for external evaluators.

Wire format: one UTF-8 JSON object per line on the child's stdin/stdout.

    -> {"id":1,"cmd":"info"}
    <- {"id":1,"ok":true,"name":"...","version":"...","capacity":1}
    -> {"id":2,"cmd":"evaluate","weights_path":"/tmp/c.st","split":"dev","metric":"accuracy"}
    <- {"id":2,"ok":true,"score":0.83,"metric":"accuracy","n_examples":500}
    -> {"id":3,"cmd":"shutdown"}
    <- {"id":3,"ok":true}

Candidate weights travel by checkpoint file path, never inline. Scores must
be deterministic; sessions probe this by evaluating the first candidate twice
and demanding agreement to 1e-12.
"""

from __future__ import annotations

import json
import queue
import subprocess
import sys
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

from . import datasets
from .inference import Batch, MlpSpec, accuracy, macro_f1
from .tensor_store import FlatVector, flatten, load_checkpoint, save_checkpoint, unflatten

HANDSHAKE_TIMEOUT_S = 10.0
EVALUATE_TIMEOUT_S = 300.0
DETERMINISM_TOLERANCE = 1e-12

_METRICS = {"accuracy": accuracy, "macro_f1": macro_f1}


class ProtocolError(RuntimeError):
    """The evaluator broke the wire contract; the session is unusable."""


class EvaluatorFailure(RuntimeError):
    """The evaluator answered, but reported an error."""


class EvaluateTimeout(ProtocolError):
    """No response arrived within the deadline."""


@dataclass(frozen=True)
class FitnessReport:
    score: float
    metric: str = "accuracy"
    n_examples: int = 0


@dataclass(frozen=True)
class EvalRequest:
    id: int
    cmd: str
    weights_path: str | None = None
    split: str = "dev"
    metric: str = "accuracy"

    def to_line(self) -> str:
        obj: dict = {"id": self.id, "cmd": self.cmd}
        if self.cmd == "evaluate":
            obj.update(weights_path=self.weights_path, split=self.split, metric=self.metric)
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "EvalRequest":
        obj = json.loads(line)
        if not isinstance(obj, dict) or not isinstance(obj.get("id"), int) or "cmd" not in obj:
            raise ProtocolError(f"malformed request line: {line!r}")
        return cls(
            id=obj["id"],
            cmd=obj["cmd"],
            weights_path=obj.get("weights_path"),
            split=obj.get("split", "dev"),
            metric=obj.get("metric", "accuracy"),
        )


@dataclass(frozen=True)
class EvalResponse:
    id: int
    ok: bool
    score: float | None = None
    metric: str | None = None
    n_examples: int | None = None
    error_message: str | None = None
    name: str | None = None
    version: str | None = None
    capacity: int | None = None

    def to_line(self) -> str:
        obj: dict = {"id": self.id, "ok": self.ok}
        for key in ("score", "metric", "n_examples", "error_message", "name", "version", "capacity"):
            value = getattr(self, key)
            if value is not None:
                obj[key] = value
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def parse(cls, line: str) -> "EvalResponse":
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed response line: {line!r}") from exc
        if not isinstance(obj, dict) or not isinstance(obj.get("id"), int) or not isinstance(obj.get("ok"), bool):
            raise ProtocolError(f"malformed response object: {line!r}")
        return cls(
            id=obj["id"],
            ok=obj["ok"],
            score=obj.get("score"),
            metric=obj.get("metric"),
            n_examples=obj.get("n_examples"),
            error_message=obj.get("error_message"),
            name=obj.get("name"),
            version=obj.get("version"),
            capacity=obj.get("capacity"),
        )


class InProcessEvaluator:
    """Scores a flat weight vector as the macro-average metric over per-domain batches."""

    def __init__(
        self,
        spec: MlpSpec,
        dev_batches: list[Batch],
        test_batches: list[Batch] | None = None,
        metric: str = "accuracy",
        name: str = "in-process-mlp",
    ):
        if metric not in _METRICS:
            raise ValueError(f"metric must be one of {sorted(_METRICS)}")
        if not dev_batches:
            raise ValueError("need at least one dev batch")
        self.spec = spec
        self.splits = {"dev": list(dev_batches), "test": list(test_batches or [])}
        self.metric = metric
        self.name = name
        self.version = "1"
        self.capacity = 1

    def n_examples(self, split: str = "dev") -> int:
        return sum(len(b) for b in self.splits[split])

    def evaluate(self, weights: FlatVector, split: str = "dev") -> FitnessReport:
        batches = self.splits.get(split)
        if not batches:
            raise ValueError(f"no batches for split {split!r}")
        fn = _METRICS[self.metric]
        scores = [fn(self.spec, weights, b) for b in batches]
        return FitnessReport(
            score=float(sum(scores) / len(scores)),
            metric=self.metric,
            n_examples=self.n_examples(split),
        )


@dataclass(frozen=True)
class EvalServeConfig:
    """Everything an evaluator process needs to rebuild the in-process scorer."""

    model: MlpSpec
    n_domains: int
    template: datasets.DomainTemplate
    data_seed: int
    n_ood: int = 0
    metric: str = "accuracy"
    dev_fraction: float = 1.0

    def build(self) -> InProcessEvaluator:
        split = datasets.make_domains(self.n_domains, self.template, self.data_seed, self.n_ood)
        if self.dev_fraction < 1.0:
            split = datasets.dev_fraction(split, self.dev_fraction)
        return InProcessEvaluator(
            self.model, split.dev_batches(), split.test_batches(), metric=self.metric
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "model": json.loads(self.model.to_json()),
                "n_domains": self.n_domains,
                "template": {
                    "n_classes": self.template.n_classes,
                    "radius": self.template.radius,
                    "noise": self.template.noise,
                    "n_train": self.template.n_train,
                    "n_dev": self.template.n_dev,
                    "n_test": self.template.n_test,
                },
                "data_seed": self.data_seed,
                "n_ood": self.n_ood,
                "metric": self.metric,
                "dev_fraction": self.dev_fraction,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalServeConfig":
        obj = json.loads(text)
        return cls(
            model=MlpSpec(tuple(obj["model"]["layer_dims"]), obj["model"]["activation"]),
            n_domains=obj["n_domains"],
            template=datasets.DomainTemplate(**obj["template"]),
            data_seed=obj["data_seed"],
            n_ood=obj.get("n_ood", 0),
            metric=obj.get("metric", "accuracy"),
            dev_fraction=obj.get("dev_fraction", 1.0),
        )


def serve_stdio(evaluator, stdin=None, stdout=None) -> None:
    """Answer info/evaluate/shutdown requests over line-delimited JSON."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = EvalRequest.from_line(line)
        except (ProtocolError, json.JSONDecodeError):
            stdout.write(EvalResponse(id=-1, ok=False, error_message="unparseable request").to_line() + "\n")
            stdout.flush()
            continue
        if request.cmd == "info":
            response = EvalResponse(
                id=request.id,
                ok=True,
                name=getattr(evaluator, "name", "evaluator"),
                version=str(getattr(evaluator, "version", "1")),
                capacity=int(getattr(evaluator, "capacity", 1)),
            )
        elif request.cmd == "evaluate":
            try:
                tmap = load_checkpoint(request.weights_path)
                weights = flatten(tmap, evaluator.spec.param_schema())
                report = evaluator.evaluate(weights, split=request.split)
                response = EvalResponse(
                    id=request.id,
                    ok=True,
                    score=report.score,
                    metric=report.metric,
                    n_examples=report.n_examples,
                )
            except Exception as exc:
                response = EvalResponse(id=request.id, ok=False, error_message=str(exc))
        elif request.cmd == "shutdown":
            stdout.write(EvalResponse(id=request.id, ok=True).to_line() + "\n")
            stdout.flush()
            return
        else:
            response = EvalResponse(id=request.id, ok=False, error_message=f"unknown cmd {request.cmd!r}")
        stdout.write(response.to_line() + "\n")
        stdout.flush()


class _LineReader:
    """Background reader so response waits can time out without blocking."""

    def __init__(self, stream):
        self._queue: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._pump, args=(stream,), daemon=True)
        self._thread.start()

    def _pump(self, stream):
        for line in stream:
            self._queue.put(line)
        self._queue.put(None)

    def readline(self, timeout: float) -> str | None:
        try:
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            raise EvaluateTimeout(f"no response within {timeout} s") from None


class EvaluatorSession:
    """One child evaluator process speaking the line-delimited JSON protocol.

    Requests carry strictly increasing ids; any violation of the contract
    (mismatched id, malformed line, out-of-range score, timeout) marks the
    session broken and raises. The first evaluate runs twice as a determinism
    probe.
    """

    def __init__(
        self,
        command: list[str],
        handshake_timeout: float = HANDSHAKE_TIMEOUT_S,
        evaluate_timeout: float = EVALUATE_TIMEOUT_S,
        workdir: str | None = None,
    ):
        self.command = list(command)
        self.evaluate_timeout = evaluate_timeout
        self.name = "unknown"
        self.version = "unknown"
        self.capacity = 1
        self._next_id = 1
        self._broken = False
        self._probed = False
        self.call_intervals: list[tuple[float, float]] = []
        self._tmpdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="evomerge-eval-"))
        self._tmpdir.mkdir(parents=True, exist_ok=True)
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=None,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise ProtocolError(f"failed to spawn evaluator {self.command!r}: {exc}") from exc
        self._reader = _LineReader(self._proc.stdout)
        info = self._roundtrip(EvalRequest(id=self._take_id(), cmd="info"), handshake_timeout)
        if not info.ok or not info.name or info.capacity is None or info.capacity < 1:
            self._broken = True
            raise ProtocolError(f"bad info response: {info}")
        self.name = info.name
        self.version = info.version or "unknown"
        self.capacity = int(info.capacity)

    def _take_id(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    def _roundtrip(self, request: EvalRequest, timeout: float) -> EvalResponse:
        if self._broken:
            raise ProtocolError("session is broken; start a new one")
        if self._proc.poll() is not None and request.cmd != "shutdown":
            self._broken = True
            raise ProtocolError(f"evaluator exited with code {self._proc.returncode}")
        try:
            start = time.monotonic()
            self._proc.stdin.write(request.to_line() + "\n")
            self._proc.stdin.flush()
            line = self._reader.readline(timeout)
            self.call_intervals.append((start, time.monotonic()))
        except (BrokenPipeError, OSError) as exc:
            self._broken = True
            raise ProtocolError(f"evaluator pipe failed: {exc}") from exc
        except EvaluateTimeout:
            self._broken = True
            raise
        if line is None:
            self._broken = True
            raise ProtocolError("evaluator closed its output stream")
        try:
            response = EvalResponse.parse(line)
        except ProtocolError:
            self._broken = True
            raise
        if response.id != request.id:
            self._broken = True
            raise ProtocolError(f"response id {response.id} does not match request id {request.id}")
        return response

    def _evaluate_once(self, path: str, split: str, metric: str) -> EvalResponse:
        request = EvalRequest(
            id=self._take_id(), cmd="evaluate", weights_path=path, split=split, metric=metric
        )
        response = self._roundtrip(request, self.evaluate_timeout)
        if not response.ok:
            raise EvaluatorFailure(response.error_message or "evaluator reported an error")
        if response.score is None or not 0.0 <= response.score <= 1.0:
            self._broken = True
            raise ProtocolError(f"protocol violation: score out of range: {response.score!r}")
        return response

    def evaluate(self, weights: FlatVector, split: str = "dev", metric: str = "accuracy") -> FitnessReport:
        path = self._tmpdir / f"cand-{uuid.uuid4().hex}.st"
        save_checkpoint(unflatten(weights), path)
        try:
            response = self._evaluate_once(str(path), split, metric)
            if not self._probed:
                repeat = self._evaluate_once(str(path), split, metric)
                if abs(repeat.score - response.score) > DETERMINISM_TOLERANCE:
                    self._broken = True
                    raise ProtocolError(
                        f"evaluator is not deterministic: {response.score!r} vs {repeat.score!r}"
                    )
                self._probed = True
        finally:
            path.unlink(missing_ok=True)
        return FitnessReport(
            score=float(response.score),
            metric=response.metric or metric,
            n_examples=int(response.n_examples or 0),
        )

    def shutdown(self) -> None:
        if self._proc.poll() is None and not self._broken:
            try:
                self._roundtrip(EvalRequest(id=self._take_id(), cmd="shutdown"), 5.0)
            except (ProtocolError, EvaluatorFailure):
                pass
        self.close()

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def handshake(command: list[str], **kwargs) -> EvaluatorSession:
    """Spawn an external evaluator and complete the info exchange."""
    return EvaluatorSession(command, **kwargs)
