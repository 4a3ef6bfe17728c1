"""Serial evaluator worker speaking newline-delimited JSON on stdin/stdout.

Emits {"type":"hello","protocol":1,"concurrent":false} first, then answers
evaluate requests with result/error lines correlated by id; a shutdown
message ends the process with exit code 0. Malformed requests produce an
error response and the worker keeps serving.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
import traceback

import torch

from .dataset import load_dataset
from .train import TrainSettings, TrainingDiverged, train_and_score

PROTOCOL_VERSION = 1

GENOME_KEYS = {"n_blocks", "base_filters", "k1", "k2", "k3",
               "activation", "merge", "dropout", "lr"}


def emit(obj: dict):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def check_request(msg: dict) -> str | None:
    if msg.get("type") != "evaluate":
        return f"unsupported request type {msg.get('type')!r}"
    if not isinstance(msg.get("id"), int):
        return "missing or non-integer id"
    if msg.get("dim") not in ("2d", "3d"):
        return f"bad dim {msg.get('dim')!r}"
    if not isinstance(msg.get("budget_epochs"), int) or msg["budget_epochs"] < 1:
        return "bad budget_epochs"
    genome = msg.get("genome")
    if not isinstance(genome, dict) or not GENOME_KEYS <= set(genome):
        return "genome missing required keys"
    return None


def serve(data_dir: str, settings: TrainSettings, epochs_cap: int | None = None,
          stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    data = load_dataset(data_dir)
    emit({"type": "hello", "protocol": PROTOCOL_VERSION, "concurrent": False})
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            emit({"type": "error", "id": -1, "message": f"malformed request: {line[:200]}"})
            continue
        if msg.get("type") == "shutdown":
            return 0
        problem = check_request(msg)
        if problem:
            emit({"type": "error", "id": msg.get("id", -1) if isinstance(msg.get("id"), int) else -1,
                  "message": problem})
            continue
        budget = msg["budget_epochs"]
        if epochs_cap is not None:
            budget = min(budget, epochs_cap)
        try:
            result = train_and_score(
                genome=msg["genome"], dim=msg["dim"], budget_epochs=budget,
                fold=int(msg.get("fold", 0)), seed=int(msg.get("seed", 0)),
                data=data, settings=settings)
        except TrainingDiverged as exc:
            emit({"type": "error", "id": msg["id"], "message": str(exc)})
            continue
        except Exception as exc:
            traceback.print_exc(file=sys.stderr)
            emit({"type": "error", "id": msg["id"], "message": f"{type(exc).__name__}: {exc}"})
            continue
        emit({"type": "result", "id": msg["id"], **result})
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="candidate-FCN trainer worker")
    ap.add_argument("--data", required=True, help="dataset directory")
    ap.add_argument("--epochs-cap", type=int, default=None)
    ap.add_argument("--device", default="cpu")
    ap.add_argument("--engine-cmd", default=None,
                    help="command for the architecture engine CLI")
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--steps-per-epoch", type=int, default=4)
    ap.add_argument("--val-slice-stride", type=int, default=1)
    ap.add_argument("--train-eval-volumes", type=int, default=2)
    ap.add_argument("--patch", default="32x32x16")
    ap.add_argument("--no-augment", action="store_true")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args(argv)

    if args.threads:
        torch.set_num_threads(args.threads)
    patch = tuple(int(p) for p in args.patch.replace("x", ",").split(","))
    settings = TrainSettings(
        batch_size=args.batch_size,
        steps_per_epoch=args.steps_per_epoch,
        val_slice_stride=args.val_slice_stride,
        train_eval_volumes=args.train_eval_volumes,
        patch_3d=patch,
        device=args.device,
        augment=not args.no_augment,
        engine_cmd=shlex.split(args.engine_cmd) if args.engine_cmd else None,
    )
    return serve(args.data, settings, epochs_cap=args.epochs_cap)


if __name__ == "__main__":
    raise SystemExit(main())
