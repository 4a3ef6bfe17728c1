"""Pluggable candidate evaluation.

Three evaluators share one duck-typed contract:
``evaluate(genome, dim, budget_epochs, fold, seed) -> EvalResult`` plus a
``concurrent`` flag saying whether parallel requests are allowed.

* SurrogateEvaluator: a deterministic closed form for desk-scale verification
  of search dynamics (it does not model any real imaging task).
* CachedEvaluator: memoization with single-flight semantics.
* WorkerClient / WorkerPool: newline-delimited JSON protocol to external
  trainer processes over stdin/stdout.
"""

from __future__ import annotations

import json
import logging
import math
import shlex
import subprocess
import threading

from .archmodel import build_plan, count_parameters
from .genome import Genome, canonical_key
from .objectives import EvalResult

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

# Surrogate constants, frozen so that brute-force enumeration over the
# discretized space is reproducible.
P_HALF = 3.0e5
LR_PEAK = 4.0e-4


class EvaluationError(Exception):
    """A candidate could not be evaluated (worker error, timeout, bad result)."""


class ProtocolError(Exception):
    """The worker violated the line protocol."""


class SurrogateEvaluator:
    """Deterministic stand-in for training: accuracy grows with model size,
    peaks at one learning rate and one dropout value.

    dsc_val = (0.55 + 0.4*p/(p+P_HALF)) * bell(lr) * drop_pen, clamped to [0,1]
    with bell(lr) = exp(-(log10(lr) - log10(LR_PEAK))^2 / 2) and
    drop_pen = 1 - 0.1*|dropout - 0.2|; dsc_train = min(1, dsc_val + 0.03);
    e_max = round(E * min(1, 0.4 + 0.6*bell(lr))).
    """

    concurrent = True

    def __init__(self, input_shape: tuple | None = None, in_channels: int = 1,
                 n_classes: int = 2):
        self.input_shape = input_shape
        self.in_channels = in_channels
        self.n_classes = n_classes

    def evaluate(self, genome: Genome, dim: str, budget_epochs: int,
                 fold: int = 0, seed: int = 0) -> EvalResult:
        p = count_parameters(build_plan(
            genome, dim, self.input_shape, self.in_channels, self.n_classes))
        bell = math.exp(-((math.log10(genome.lr) - math.log10(LR_PEAK)) ** 2) / 2.0)
        drop_pen = 1.0 - 0.1 * abs(genome.dropout - 0.2)
        dsc_val = (0.55 + 0.4 * p / (p + P_HALF)) * bell * drop_pen
        dsc_val = min(1.0, max(0.0, dsc_val))
        dsc_train = min(1.0, dsc_val + 0.03)
        e_max = int(round(budget_epochs * min(1.0, 0.4 + 0.6 * bell)))
        return EvalResult(dsc_train=dsc_train, dsc_val=dsc_val, e_max=e_max,
                          param_count=p)


class CachedEvaluator:
    """Memoizes by canonical genome key (+dim, budget, fold); errors are not
    cached, and concurrent identical requests trigger exactly one inner call."""

    def __init__(self, inner):
        self.inner = inner
        self._lock = threading.Lock()
        self._results: dict = {}
        self._inflight: dict = {}

    @property
    def concurrent(self) -> bool:
        return self.inner.concurrent

    def evaluate(self, genome: Genome, dim: str, budget_epochs: int,
                 fold: int = 0, seed: int = 0) -> EvalResult:
        key = (canonical_key(genome), dim, budget_epochs, fold)
        while True:
            with self._lock:
                if key in self._results:
                    return self._results[key]
                waiter = self._inflight.get(key)
                if waiter is None:
                    waiter = threading.Event()
                    self._inflight[key] = waiter
                    mine = True
                else:
                    mine = False
            if not mine:
                waiter.wait()
                continue  # re-check: leader may have failed without caching
            try:
                result = self.inner.evaluate(genome, dim, budget_epochs, fold, seed)
            except BaseException:
                with self._lock:
                    del self._inflight[key]
                waiter.set()
                raise
            with self._lock:
                self._results[key] = result
                del self._inflight[key]
            waiter.set()
            return result


def _encode_request(req_id: int, genome: Genome, dim: str, budget_epochs: int,
                    fold: int, seed: int) -> str:
    return json.dumps({
        "type": "evaluate",
        "id": req_id,
        "dim": dim,
        "budget_epochs": budget_epochs,
        "fold": fold,
        "seed": seed,
        "genome": genome.to_json(),
    })


class WorkerClient:
    """One external evaluator process speaking newline-delimited JSON.

    The worker must emit a hello line before any response:
    {"type":"hello","protocol":1,"concurrent":bool}. Requests are correlated
    to responses by id; responses may arrive out of order when the worker is
    concurrent. Serial workers get at most one in-flight request.
    """

    def __init__(self, command, timeout: float = 3600.0, hello_timeout: float = 60.0):
        if isinstance(command, str):
            command = shlex.split(command)
        self.command = list(command)
        self.timeout = timeout
        self._next_id = 0
        self._pending: dict[int, dict] = {}
        self._cond = threading.Condition()
        self._write_lock = threading.Lock()
        self._serial_lock = threading.Lock()
        self._fatal: Exception | None = None
        self._hello: dict | None = None

        try:
            self.proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
        except OSError as exc:
            raise EvaluationError(f"cannot launch worker {self.command}: {exc}") from exc

        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._hello is not None or self._fatal is not None,
                timeout=hello_timeout)
        if self._fatal is not None:
            raise ProtocolError(f"worker handshake failed: {self._fatal}")
        if not ok:
            self._kill()
            raise ProtocolError("worker did not send hello in time")
        if self._hello.get("protocol") != PROTOCOL_VERSION:
            self._kill()
            raise ProtocolError(f"unsupported protocol version: {self._hello.get('protocol')!r}")
        self.concurrent = bool(self._hello.get("concurrent", False))

    # -- reader side ---------------------------------------------------------

    def _read_loop(self):
        try:
            for line in self.proc.stdout:
                line = line.strip()
                if not line:
                    continue
                try:
                    msg = json.loads(line)
                except json.JSONDecodeError:
                    self._fail_all(ProtocolError(f"malformed worker line: {line!r}"))
                    return
                kind = msg.get("type")
                if kind == "hello":
                    with self._cond:
                        self._hello = msg
                        self._cond.notify_all()
                elif kind in ("result", "error"):
                    with self._cond:
                        slot = self._pending.get(msg.get("id"))
                        if slot is None:
                            self._fatal = ProtocolError(
                                f"response for unknown id {msg.get('id')!r}")
                            self._cond.notify_all()
                            return
                        slot["msg"] = msg
                        self._cond.notify_all()
                # unknown message types are ignored
        except (ValueError, OSError):
            pass
        finally:
            self._fail_all(EvaluationError("worker exited"))

    def _fail_all(self, exc: Exception):
        with self._cond:
            if self._fatal is None:
                self._fatal = exc
            self._cond.notify_all()

    # -- caller side ---------------------------------------------------------

    def evaluate(self, genome: Genome, dim: str, budget_epochs: int,
                 fold: int = 0, seed: int = 0, timeout: float | None = None) -> EvalResult:
        if self.concurrent:
            return self._evaluate(genome, dim, budget_epochs, fold, seed, timeout)
        with self._serial_lock:
            return self._evaluate(genome, dim, budget_epochs, fold, seed, timeout)

    def _evaluate(self, genome, dim, budget_epochs, fold, seed, timeout) -> EvalResult:
        timeout = self.timeout if timeout is None else timeout
        with self._cond:
            if self._fatal is not None:
                raise EvaluationError(f"worker unavailable: {self._fatal}")
            req_id = self._next_id
            self._next_id += 1
            slot: dict = {"msg": None}
            self._pending[req_id] = slot
        line = _encode_request(req_id, genome, dim, budget_epochs, fold, seed)
        try:
            with self._write_lock:
                self.proc.stdin.write(line + "\n")
                self.proc.stdin.flush()
        except (OSError, ValueError) as exc:
            with self._cond:
                self._pending.pop(req_id, None)
            raise EvaluationError(f"cannot write to worker: {exc}") from exc

        with self._cond:
            ok = self._cond.wait_for(
                lambda: slot["msg"] is not None or self._fatal is not None,
                timeout=timeout)
            self._pending.pop(req_id, None)
            if slot["msg"] is None:
                if self._fatal is not None:
                    if isinstance(self._fatal, ProtocolError):
                        raise ProtocolError(str(self._fatal))
                    raise EvaluationError(f"worker failed: {self._fatal}")
                if not ok:
                    raise EvaluationError(f"evaluation timed out after {timeout} s")
            msg = slot["msg"]

        if msg.get("type") == "error":
            raise EvaluationError(str(msg.get("message", "worker error")))
        try:
            return EvalResult(
                dsc_train=float(msg["dsc_train"]),
                dsc_val=float(msg["dsc_val"]),
                e_max=int(msg["e_max"]),
                param_count=int(msg["param_count"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed result line: {json.dumps(msg)}") from exc

    # -- lifecycle -----------------------------------------------------------

    def close(self):
        if self.proc.poll() is None:
            try:
                with self._write_lock:
                    self.proc.stdin.write(json.dumps({"type": "shutdown"}) + "\n")
                    self.proc.stdin.flush()
                    self.proc.stdin.close()
            except (OSError, ValueError):
                pass
            try:
                self.proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._kill()
        self._fail_all(EvaluationError("worker closed"))

    def _kill(self):
        try:
            self.proc.kill()
            self.proc.wait(timeout=10)
        except Exception:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


class WorkerPool:
    """Round-robin over K worker clients; concurrent when it can overlap work."""

    def __init__(self, clients: list):
        if not clients:
            raise ValueError("worker pool needs at least one client")
        self.clients = list(clients)
        self._idle: list = list(clients)
        self._cond = threading.Condition()

    @property
    def concurrent(self) -> bool:
        return len(self.clients) > 1 or self.clients[0].concurrent

    def evaluate(self, genome: Genome, dim: str, budget_epochs: int,
                 fold: int = 0, seed: int = 0) -> EvalResult:
        with self._cond:
            self._cond.wait_for(lambda: self._idle)
            client = self._idle.pop()
        try:
            return client.evaluate(genome, dim, budget_epochs, fold, seed)
        finally:
            with self._cond:
                self._idle.append(client)
                self._cond.notify()

    def close(self):
        for c in self.clients:
            c.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
