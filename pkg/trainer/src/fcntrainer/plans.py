"""Fetch layer plans from the engine CLI (`params --genome ... --dim ...`).

The plan JSON is the engine's external description of one architecture; the
worker builds its network from it and never re-derives construction rules.
"""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import sys
import tempfile

DEFAULT_ENGINE_CMD = [sys.executable, "-m", "moenas"]


class PlanFetchError(RuntimeError):
    pass


_plan_cache: dict = {}


def fetch_plan(genome: dict, dim: str, input_shape, n_classes: int = 2,
               engine_cmd=None) -> dict:
    cmd = list(engine_cmd) if engine_cmd else list(DEFAULT_ENGINE_CMD)
    if isinstance(engine_cmd, str):
        cmd = shlex.split(engine_cmd)
    cache_key = (json.dumps(genome, sort_keys=True), dim, tuple(input_shape),
                 n_classes, tuple(cmd))
    if cache_key in _plan_cache:
        return _plan_cache[cache_key]
    shape_text = "x".join(str(int(s)) for s in input_shape)
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(genome, f)
        genome_path = f.name
    try:
        proc = subprocess.run(
            cmd + ["params", "--genome", genome_path, "--dim", dim,
                   "--input-shape", shape_text, "--classes", str(n_classes)],
            capture_output=True, text=True)
    finally:
        os.unlink(genome_path)
    if proc.returncode != 0:
        raise PlanFetchError(
            f"engine rejected genome (rc={proc.returncode}): {proc.stderr.strip()}")
    try:
        plan = json.loads(proc.stdout)
    except json.JSONDecodeError as exc:
        raise PlanFetchError(f"engine produced non-JSON output: {exc}") from exc
    _plan_cache[cache_key] = plan
    return plan
