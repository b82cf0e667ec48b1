"""Line-delimited JSON evaluator protocol over stdin/stdout.

One request per line, one response per line, ids echoed verbatim:

    -> {"id":1,"cmd":"info"}
    <- {"id":1,"ok":true,"name":"hf-eval-adapter","version":"0.1.0","capacity":1}
    -> {"id":2,"cmd":"evaluate","weights_path":"/tmp/c.st","split":"dev","metric":"accuracy"}
    <- {"id":2,"ok":true,"score":0.83,"metric":"accuracy","n_examples":500}
    -> {"id":3,"cmd":"shutdown"}
    <- {"id":3,"ok":true}

Evaluation failures (missing file, tensor mismatches, bad split) answer
ok=false with an error_message and keep the server alive; only shutdown or
EOF ends the loop.
"""

from __future__ import annotations

import json
import sys

from .adapter import AdapterConfig, SequenceClassifierEvaluator


def _emit(stream, obj: dict) -> None:
    stream.write(json.dumps(obj, separators=(",", ":")) + "\n")
    stream.flush()


def serve(config: AdapterConfig, stdin=None, stdout=None) -> None:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    evaluator = SequenceClassifierEvaluator(config)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            rid = request["id"]
            cmd = request["cmd"]
        except (json.JSONDecodeError, KeyError, TypeError):
            _emit(stdout, {"id": -1, "ok": False, "error_message": "unparseable request"})
            continue
        if cmd == "info":
            _emit(
                stdout,
                {
                    "id": rid,
                    "ok": True,
                    "name": evaluator.name,
                    "version": evaluator.version,
                    "capacity": evaluator.capacity,
                },
            )
        elif cmd == "evaluate":
            try:
                score, metric, n_examples = evaluator.evaluate_checkpoint(
                    request["weights_path"],
                    request.get("split", "dev"),
                    request.get("metric"),
                )
                _emit(
                    stdout,
                    {
                        "id": rid,
                        "ok": True,
                        "score": score,
                        "metric": metric,
                        "n_examples": n_examples,
                    },
                )
            except Exception as exc:
                _emit(stdout, {"id": rid, "ok": False, "error_message": str(exc)})
        elif cmd == "shutdown":
            _emit(stdout, {"id": rid, "ok": True})
            return
        else:
            _emit(stdout, {"id": rid, "ok": False, "error_message": f"unknown cmd {cmd!r}"})
