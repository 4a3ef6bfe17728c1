"""Decomposition-based multiobjective search over architecture genomes.

The bi-objective problem (segmentation error, parameter count) is decomposed
into N scalar subproblems along a uniform weight lattice. Each generation,
every subproblem breeds one child from its neighborhood, all children are
evaluated (possibly in parallel), and results are integrated in subproblem
index order: ideal/nadir update, penalty-based boundary intersection
replacement of up to n_r neighbors, and insertion into the external
nondominated archive. Deterministic under a fixed seed and a deterministic
evaluator regardless of evaluation parallelism.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .archmodel import build_plan, count_parameters, DEFAULT_INPUT_SHAPES
from .evaluator import EvaluationError
from .genome import (
    Genome, SearchSpace, canonical_key, crossover, mutate, mutation_rate,
    random_genome, sort_key, validate_genome,
)
from .objectives import EvalResult, ObjectiveVector, f1_objective

log = logging.getLogger(__name__)

INIT_RETRIES = 10
CHILD_REPAIR_TRIES = 20


@dataclass
class SearchConfig:
    dim: str = "2d"
    population_size: int = 50
    generations: int = 40
    neighborhood_size: int = 10
    pbi_penalty: float = 0.1
    alpha: float = 0.25
    beta: float = 0.25
    budget_epochs: int = 120
    p_start: float = 0.5
    p_end: float = 0.05
    replacement_limit: int = 2
    exploration_prob: float = 0.1
    seed: int = 0
    fold: int = 0
    n_folds: int = 5
    input_shape: tuple | None = None
    in_channels: int = 1
    n_classes: int = 2
    settings_sweep: bool = True

    def __post_init__(self):
        if self.dim not in ("2d", "3d"):
            raise ValueError(f"dim must be '2d' or '3d', got {self.dim!r}")
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if not (2 <= self.neighborhood_size <= self.population_size):
            raise ValueError("neighborhood_size must be in [2, population_size]")
        if self.pbi_penalty < 0:
            raise ValueError("pbi_penalty must be >= 0")
        if self.replacement_limit < 1:
            raise ValueError("replacement_limit must be >= 1")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.input_shape is not None:
            self.input_shape = tuple(int(s) for s in self.input_shape)
            n_axes = 2 if self.dim == "2d" else 3
            if len(self.input_shape) != n_axes:
                raise ValueError(
                    f"input_shape must have {n_axes} axes for dim {self.dim}: "
                    f"{self.input_shape}")

    def resolved_input_shape(self) -> tuple:
        return self.input_shape if self.input_shape is not None else DEFAULT_INPUT_SHAPES[self.dim]

    def to_json(self) -> dict:
        out = {
            "dim": self.dim,
            "population_size": self.population_size,
            "generations": self.generations,
            "neighborhood_size": self.neighborhood_size,
            "pbi_penalty": self.pbi_penalty,
            "alpha": self.alpha,
            "beta": self.beta,
            "budget_epochs": self.budget_epochs,
            "p_start": self.p_start,
            "p_end": self.p_end,
            "replacement_limit": self.replacement_limit,
            "exploration_prob": self.exploration_prob,
            "seed": self.seed,
            "fold": self.fold,
            "n_folds": self.n_folds,
            "input_shape": list(self.input_shape) if self.input_shape is not None else None,
            "in_channels": self.in_channels,
            "n_classes": self.n_classes,
            "settings_sweep": self.settings_sweep,
        }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SearchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(obj)
        if kw.get("input_shape") is not None:
            kw["input_shape"] = tuple(kw["input_shape"])
        return cls(**kw)


@dataclass
class Subproblem:
    index: int
    weight: tuple
    neighbors: tuple
    genome: Genome | None = None
    objectives: ObjectiveVector | None = None
    result: EvalResult | None = None


@dataclass(frozen=True)
class ArchiveEntry:
    genome: Genome
    objectives: ObjectiveVector
    result: EvalResult


def dominates(a: ObjectiveVector, b: ObjectiveVector) -> bool:
    """Minimization dominance: <= in both objectives, < in at least one."""
    return a.f1 <= b.f1 and a.f2 <= b.f2 and (a.f1 < b.f1 or a.f2 < b.f2)


class ParetoArchive:
    """External nondominated set; ties on the objective vector keep the incumbent."""

    def __init__(self, entries: list[ArchiveEntry] | None = None):
        self.entries: list[ArchiveEntry] = list(entries) if entries else []

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def update(self, candidate: ArchiveEntry) -> bool:
        """Insert unless dominated or exactly tied; prune members it dominates."""
        cobj = candidate.objectives
        doomed = []
        for i, e in enumerate(self.entries):
            if e.objectives == cobj or dominates(e.objectives, cobj):
                return False
            if dominates(cobj, e.objectives):
                doomed.append(i)
        for i in reversed(doomed):
            del self.entries[i]
        self.entries.append(candidate)
        return True

    def sorted_entries(self) -> list[ArchiveEntry]:
        return sorted(self.entries,
                      key=lambda e: (e.objectives.f1, e.objectives.f2, sort_key(e.genome)))


def update_archive(archive: ParetoArchive, candidate: ArchiveEntry) -> ParetoArchive:
    archive.update(candidate)
    return archive


def init_weight_vectors(n: int) -> list[tuple]:
    """Uniform lattice on the 2-objective simplex: (i/(N-1), 1-i/(N-1))."""
    if n < 2:
        raise ValueError("need at least 2 weight vectors")
    return [(i / (n - 1), 1.0 - i / (n - 1)) for i in range(n)]


def compute_neighborhoods(weights: list[tuple], t: int) -> list[tuple]:
    """Per subproblem, the T nearest weight vectors (Euclidean, ties to lower index)."""
    n = len(weights)
    if not (2 <= t <= n):
        raise ValueError(f"neighborhood size {t} outside [2, {n}]")
    w = np.asarray(weights, dtype=float)
    out = []
    for i in range(n):
        # quantize so mathematically tied distances compare equal and the
        # lower-index tie rule decides, not floating-point noise
        d = np.round(np.linalg.norm(w - w[i], axis=1), 12)
        order = np.lexsort((np.arange(n), d))
        out.append(tuple(int(j) for j in order[:t]))
    return out


def normalize_objectives(f: ObjectiveVector, z: tuple, znad: tuple) -> tuple:
    """Min-max rescale each coordinate by the running ideal/nadir, clamped to
    [0, 1.5]; degenerate coordinates (nadir == ideal) pass through unscaled."""
    out = []
    for fc, zc, nc in zip(f, z, znad):
        span = nc - zc
        t = (fc - zc) / span if span > 0 else (fc - zc)
        out.append(min(max(t, 0.0), 1.5))
    return tuple(out)


def pbi_aggregate(f, weight, z, penalty: float) -> float:
    """Penalty-based boundary intersection: d1 + penalty * d2, where d1 is the
    projection of f - z on the weight direction and d2 the perpendicular residual."""
    lam_norm = math.hypot(weight[0], weight[1])
    if lam_norm == 0:
        raise ValueError("weight vector must be nonzero")
    dx = f[0] - z[0]
    dy = f[1] - z[1]
    d1 = abs(dx * weight[0] + dy * weight[1]) / lam_norm
    rx = dx - d1 * weight[0] / lam_norm
    ry = dy - d1 * weight[1] / lam_norm
    d2 = math.hypot(rx, ry)
    return d1 + penalty * d2


class Search:
    """Owns all mutable search state; see run_search for the one-call form."""

    def __init__(self, cfg: SearchConfig, space: SearchSpace, evaluator,
                 max_parallel: int = 1):
        if space.dim != cfg.dim:
            raise ValueError(f"space dim {space.dim!r} != config dim {cfg.dim!r}")
        self.cfg = cfg
        self.space = space
        self.evaluator = evaluator
        self.max_parallel = max(1, int(max_parallel))
        self.rng = np.random.default_rng(cfg.seed)
        weights = init_weight_vectors(cfg.population_size)
        neighborhoods = compute_neighborhoods(weights, cfg.neighborhood_size)
        self.subproblems = [
            Subproblem(index=i, weight=weights[i], neighbors=neighborhoods[i])
            for i in range(cfg.population_size)
        ]
        self.z: tuple | None = None
        self.znad: tuple | None = None
        self.archive = ParetoArchive()
        self.cache: dict = {}          # canonical genome key -> EvalResult
        self.generation = 0            # completed generations
        self.eval_calls = 0            # inner evaluator calls (cache misses)
        self.history: list[dict] = []
        self.initialized = False

    # -- evaluation ----------------------------------------------------------

    def _expected_params(self, genome: Genome) -> int:
        return count_parameters(build_plan(
            genome, self.cfg.dim, self.cfg.resolved_input_shape(),
            self.cfg.in_channels, self.cfg.n_classes))

    def _call_evaluator(self, genome: Genome) -> EvalResult:
        result = self.evaluator.evaluate(
            genome, dim=self.cfg.dim, budget_epochs=self.cfg.budget_epochs,
            fold=self.cfg.fold, seed=self.cfg.seed)
        if result.e_max > self.cfg.budget_epochs:
            raise EvaluationError(
                f"e_max {result.e_max} exceeds budget {self.cfg.budget_epochs}")
        expected = self._expected_params(genome)
        if result.param_count != expected:
            log.warning("evaluator param_count %d != engine count %d; overriding",
                        result.param_count, expected)
            result = EvalResult(dsc_train=result.dsc_train, dsc_val=result.dsc_val,
                                e_max=result.e_max, param_count=expected)
        return result

    def _evaluate_batch(self, genomes: list[Genome]) -> list:
        """Evaluate in request order; each element is an EvalResult or the
        exception that evaluation raised. Results are deduplicated within the
        batch and against the run cache."""
        plan: list[tuple[Genome, tuple]] = [(g, canonical_key(g)) for g in genomes]
        fresh_keys: list[tuple] = []
        fresh_genomes: list[Genome] = []
        seen = set()
        for g, key in plan:
            if key in self.cache or key in seen:
                continue
            seen.add(key)
            fresh_keys.append(key)
            fresh_genomes.append(g)

        fresh_results: dict = {}
        if fresh_genomes:
            self.eval_calls += len(fresh_genomes)
            if self.max_parallel > 1 and getattr(self.evaluator, "concurrent", False):
                with ThreadPoolExecutor(max_workers=self.max_parallel) as ex:
                    futures = [ex.submit(self._call_evaluator, g) for g in fresh_genomes]
                    for key, fut in zip(fresh_keys, futures):
                        try:
                            fresh_results[key] = fut.result()
                        except Exception as exc:
                            fresh_results[key] = exc
            else:
                for key, g in zip(fresh_keys, fresh_genomes):
                    try:
                        fresh_results[key] = self._call_evaluator(g)
                    except Exception as exc:
                        fresh_results[key] = exc

        out = []
        for g, key in plan:
            if key in self.cache:
                out.append(self.cache[key])
                continue
            r = fresh_results[key]
            if isinstance(r, EvalResult):
                self.cache[key] = r
            out.append(r)
        return out

    def _objective(self, result: EvalResult) -> ObjectiveVector:
        return ObjectiveVector(
            f1=f1_objective(result, self.cfg.alpha, self.cfg.beta, self.cfg.budget_epochs),
            f2=float(result.param_count),
        )

    def _update_bounds(self, obj: ObjectiveVector):
        if self.z is None:
            self.z = (obj.f1, obj.f2)
            self.znad = (obj.f1, obj.f2)
        else:
            self.z = (min(self.z[0], obj.f1), min(self.z[1], obj.f2))
            self.znad = (max(self.znad[0], obj.f1), max(self.znad[1], obj.f2))

    # -- genome production ---------------------------------------------------

    def _random_valid_genome(self) -> Genome:
        shape = self.cfg.resolved_input_shape()
        for _ in range(1000):
            g = random_genome(self.space, self.rng)
            if not validate_genome(g, self.space, shape):
                return g
        raise ValueError(
            f"could not draw a genome feasible for input shape {shape}")

    def _make_child(self, i: int, rate: float, pending: set) -> Genome:
        """Breed one child for subproblem i. Invalid children are redrawn, and
        children already evaluated (cache) or already bred this generation
        (pending) are regenerated so each generation contributes new
        evaluations; after bounded retries a duplicate is allowed through."""
        sub = self.subproblems[i]
        neighbors = sub.neighbors
        p1 = neighbors[int(self.rng.integers(len(neighbors)))]
        explore = self.rng.random() < self.cfg.exploration_prob
        pool = tuple(range(self.cfg.population_size)) if explore else neighbors
        others = tuple(j for j in pool if j != p1)
        p2 = others[int(self.rng.integers(len(others)))]
        parent_a = self.subproblems[p1].genome
        parent_b = self.subproblems[p2].genome
        shape = self.cfg.resolved_input_shape()

        def breed():
            return mutate(crossover(parent_a, parent_b, self.rng),
                          self.space, rate, self.rng)

        child = breed()
        fallback = None
        for _ in range(CHILD_REPAIR_TRIES):
            if validate_genome(child, self.space, shape):
                child = breed()
                continue
            key = canonical_key(child)
            if key in self.cache or key in pending:
                fallback = fallback or child
                child = breed()
                continue
            return child
        if validate_genome(child, self.space, shape):
            child = fallback if fallback is not None else parent_a
        return child

    # -- lifecycle -----------------------------------------------------------

    def initialize(self):
        """Random initial population; evaluator failures retried with fresh
        genomes up to INIT_RETRIES times per slot."""
        n = self.cfg.population_size
        genomes = [self._random_valid_genome() for _ in range(n)]
        results = self._evaluate_batch(genomes)
        for i in range(n):
            retries = 0
            while not isinstance(results[i], EvalResult):
                retries += 1
                if retries > INIT_RETRIES:
                    raise EvaluationError(
                        f"initialization failed for subproblem {i}: {results[i]}")
                log.warning("initial evaluation failed (%s); retrying with a fresh genome",
                            results[i])
                genomes[i] = self._random_valid_genome()
                results[i] = self._evaluate_batch([genomes[i]])[0]
        for i in range(n):
            sub = self.subproblems[i]
            sub.genome = genomes[i]
            sub.result = results[i]
            sub.objectives = self._objective(results[i])
            self._update_bounds(sub.objectives)
        for i in range(n):
            sub = self.subproblems[i]
            self.archive.update(ArchiveEntry(sub.genome, sub.objectives, sub.result))
        self.initialized = True
        self._record_history(0)

    def step(self):
        """One generation: breed, evaluate, integrate in subproblem order."""
        if not self.initialized:
            raise RuntimeError("call initialize() first")
        cfg = self.cfg
        if cfg.generations >= 2:
            rate = mutation_rate(self.generation, cfg.generations, cfg.p_start, cfg.p_end)
        else:
            rate = cfg.p_start
        children = []
        pending: set = set()
        for i in range(cfg.population_size):
            child = self._make_child(i, rate, pending)
            pending.add(canonical_key(child))
            children.append(child)
        results = self._evaluate_batch(children)

        for i, (child, res) in enumerate(zip(children, results)):
            if not isinstance(res, EvalResult):
                log.warning("child of subproblem %d discarded: %s", i, res)
                continue
            obj = self._objective(res)
            self._update_bounds(obj)
            replaced = 0
            for j in self.subproblems[i].neighbors:
                if replaced >= cfg.replacement_limit:
                    break
                inc = self.subproblems[j]
                g_child = pbi_aggregate(
                    normalize_objectives(obj, self.z, self.znad),
                    inc.weight, (0.0, 0.0), cfg.pbi_penalty)
                g_inc = pbi_aggregate(
                    normalize_objectives(inc.objectives, self.z, self.znad),
                    inc.weight, (0.0, 0.0), cfg.pbi_penalty)
                if g_child < g_inc:
                    inc.genome, inc.objectives, inc.result = child, obj, res
                    replaced += 1
            self.archive.update(ArchiveEntry(child, obj, res))

        self.generation += 1
        self._record_history(self.generation)

    def _record_history(self, generation: int):
        best_f1 = min((e.objectives.f1 for e in self.archive), default=float("nan"))
        self.history.append({
            "generation": generation,
            "best_f1": best_f1,
            "archive_size": len(self.archive),
            "evaluations": self.eval_calls,
        })

    def sweep_setting_variants(self):
        """Finite-space archive polish: evaluate every size-neutral setting
        variant (lr, dropout, activation) of each distinct architecture in the
        archive, so every surviving member carries the best settings known for
        its exact size. Skipped for continuous lr/dropout domains, where the
        closure is infinite and evaluations are typically expensive.

        Deterministic (no random draws) and idempotent: repeat runs hit the
        evaluation cache."""
        space = self.space
        if not space.finite:
            return
        archs = sorted({
            (e.genome.n_blocks, e.genome.base_filters, e.genome.k1,
             e.genome.k2, e.genome.k3, e.genome.merge)
            for e in self.archive
        })
        variants = []
        for nb, bf, k1, k2, k3, mrg in archs:
            for act in space.activations:
                for dp in space.dropout_values:
                    for lr in space.lr_values:
                        g = Genome(nb, bf, k1, k2, k3, act, mrg, float(dp), float(lr))
                        if canonical_key(g) not in self.cache:
                            variants.append(g)
        results = self._evaluate_batch(variants)
        for g, res in zip(variants, results):
            if not isinstance(res, EvalResult):
                log.warning("setting variant discarded: %s", res)
                continue
            obj = self._objective(res)
            self._update_bounds(obj)
            self.archive.update(ArchiveEntry(g, obj, res))

    @property
    def finished(self) -> bool:
        return self.initialized and self.generation >= self.cfg.generations

    def run(self, on_generation=None):
        if not self.initialized:
            self.initialize()
            if on_generation is not None:
                on_generation(self)
        while not self.finished:
            self.step()
            if on_generation is not None:
                on_generation(self)
        if self.cfg.settings_sweep:
            self.sweep_setting_variants()
        return self.archive, self.history


def run_search(cfg: SearchConfig, space: SearchSpace, evaluator,
               on_generation=None, state: dict | None = None,
               max_parallel: int = 1):
    """Run (or resume) a full search; returns (archive, history)."""
    if state is not None:
        search = search_from_state(cfg, space, evaluator, state, max_parallel)
    else:
        search = Search(cfg, space, evaluator, max_parallel)
    return search.run(on_generation)


def select_final(archive: ParetoArchive, cfg: SearchConfig | None = None) -> ArchiveEntry:
    """The archive member minimizing the error objective; ties broken by
    smaller size, then lexicographic genome order."""
    if len(archive) == 0:
        raise ValueError("archive is empty")
    return min(archive,
               key=lambda e: (e.objectives.f1, e.objectives.f2, sort_key(e.genome)))


# -- checkpoint serialization -------------------------------------------------

def _rng_state_to_json(state) -> dict:
    if isinstance(state, dict):
        return {k: _rng_state_to_json(v) for k, v in state.items()}
    if isinstance(state, (np.integer,)):
        return int(state)
    return state


def search_state_to_json(search: Search) -> dict:
    return {
        "generation": search.generation,
        "initialized": search.initialized,
        "eval_calls": search.eval_calls,
        "rng_state": _rng_state_to_json(search.rng.bit_generator.state),
        "z": list(search.z) if search.z is not None else None,
        "znad": list(search.znad) if search.znad is not None else None,
        "subproblems": [
            {
                "genome": s.genome.to_json(),
                "objectives": [s.objectives.f1, s.objectives.f2],
                "result": s.result.to_json(),
            }
            for s in search.subproblems
        ],
        "archive": [
            {
                "genome": e.genome.to_json(),
                "objectives": [e.objectives.f1, e.objectives.f2],
                "result": e.result.to_json(),
            }
            for e in search.archive
        ],
        "cache": [
            {"genome": list(key), "result": r.to_json()}
            for key, r in search.cache.items()
        ],
        "history": search.history,
    }


def search_from_state(cfg: SearchConfig, space: SearchSpace, evaluator,
                      state: dict, max_parallel: int = 1) -> Search:
    search = Search(cfg, space, evaluator, max_parallel)
    if not state.get("initialized"):
        return search
    search.generation = int(state["generation"])
    search.eval_calls = int(state["eval_calls"])
    search.rng.bit_generator.state = state["rng_state"]
    search.z = tuple(state["z"])
    search.znad = tuple(state["znad"])
    subs = state["subproblems"]
    if len(subs) != cfg.population_size:
        raise ValueError("checkpoint population size does not match config")
    for sub, rec in zip(search.subproblems, subs):
        sub.genome = Genome.from_json(rec["genome"])
        sub.objectives = ObjectiveVector(*rec["objectives"])
        sub.result = EvalResult.from_json(rec["result"])
    search.archive = ParetoArchive([
        ArchiveEntry(
            genome=Genome.from_json(rec["genome"]),
            objectives=ObjectiveVector(*rec["objectives"]),
            result=EvalResult.from_json(rec["result"]),
        )
        for rec in state["archive"]
    ])
    search.cache = {
        tuple(rec["genome"]): EvalResult.from_json(rec["result"])
        for rec in state["cache"]
    }
    search.history = list(state["history"])
    search.initialized = True
    return search
