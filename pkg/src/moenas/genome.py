"""Hyperparameter genome: search spaces, validation, and variation operators.

A genome is the nine-component vector that fully determines one
encoder-decoder FCN: depth (residual blocks), width (filters in the first
block), the three per-block kernel edges, activation, encoder/decoder merge
operation, spatial dropout probability, and learning rate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

DIMS = ("2d", "3d")
ACTIVATIONS = ("relu", "elu")
MERGES = ("sum", "concat")

# Field order is the canonical component order used for crossover draws,
# mutation draws, cache keys and lexicographic tie-breaks.
GENOME_FIELDS = (
    "n_blocks", "base_filters", "k1", "k2", "k3",
    "activation", "merge", "dropout", "lr",
)


@dataclass(frozen=True)
class Genome:
    """One fully specified candidate architecture."""

    n_blocks: int
    base_filters: int
    k1: int
    k2: int
    k3: int
    activation: str
    merge: str
    dropout: float
    lr: float

    def to_json(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "base_filters": self.base_filters,
            "k1": self.k1,
            "k2": self.k2,
            "k3": self.k3,
            "activation": self.activation,
            "merge": self.merge,
            "dropout": self.dropout,
            "lr": self.lr,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Genome":
        try:
            return cls(
                n_blocks=int(obj["n_blocks"]),
                base_filters=int(obj["base_filters"]),
                k1=int(obj["k1"]),
                k2=int(obj["k2"]),
                k3=int(obj["k3"]),
                activation=str(obj["activation"]),
                merge=str(obj["merge"]),
                dropout=float(obj["dropout"]),
                lr=float(obj["lr"]),
            )
        except KeyError as exc:
            raise ValueError(f"genome JSON missing key {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class SearchSpace:
    """Per-component domains for one dimensionality.

    Dropout and learning rate are continuous intervals by default; setting
    ``dropout_values`` / ``lr_values`` restricts them to finite grids, which
    makes the space exhaustively enumerable.
    """

    dim: str
    n_blocks: tuple = (3, 5, 7, 9)
    base_filters: tuple = (4, 8, 16, 32)
    kernels: tuple = (1, 3, 5, 7)
    activations: tuple = ACTIVATIONS
    merges: tuple = MERGES
    dropout_range: tuple = (0.0, 0.7)
    lr_range: tuple = (1e-8, 9e-3)
    dropout_values: tuple | None = None
    lr_values: tuple | None = None

    @property
    def finite(self) -> bool:
        return self.dropout_values is not None and self.lr_values is not None


def default_search_space(dim: str) -> SearchSpace:
    """The standard domains; only the kernel set differs between 2d and 3d."""
    if dim == "2d":
        return SearchSpace(dim="2d", kernels=(1, 3, 5, 7))
    if dim == "3d":
        return SearchSpace(dim="3d", kernels=(1, 3, 5))
    raise ValueError(f"dim must be one of {DIMS}, got {dim!r}")


def discretized_search_space(
    dim: str,
    lr_values: tuple = (1e-5, 1e-4, 1e-3),
    dropout_values: tuple = (0.0, 0.2, 0.5),
) -> SearchSpace:
    """Finite variant of the default space, enumerable by brute force."""
    return replace(
        default_search_space(dim),
        dropout_values=tuple(float(v) for v in dropout_values),
        lr_values=tuple(float(v) for v in lr_values),
    )


def enumerate_genomes(space: SearchSpace):
    """Yield every genome of a finite search space (requires discrete lr/dropout)."""
    if not space.finite:
        raise ValueError("search space is not finite; discretize lr and dropout first")
    for nb, bf, k1, k2, k3, act, mrg, dp, lr in itertools.product(
        space.n_blocks, space.base_filters,
        space.kernels, space.kernels, space.kernels,
        space.activations, space.merges,
        space.dropout_values, space.lr_values,
    ):
        yield Genome(nb, bf, k1, k2, k3, act, mrg, dp, lr)


def pooling_depth(n_blocks: int) -> int:
    """Number of stride-2 poolings on the encoder side (= (n_blocks-1)/2)."""
    return (n_blocks - 1) // 2


def validate_genome(
    genome: Genome,
    space: SearchSpace,
    input_shape: tuple | None = None,
    check_pooling: bool = True,
) -> list[str]:
    """Return the list of domain/feasibility violations (empty means valid).

    Besides domain membership, every spatial input dimension must be divisible
    by 2**pooling_depth(n_blocks) so that each encoder pooling halves the
    feature maps exactly.
    """
    v: list[str] = []
    if genome.n_blocks not in space.n_blocks:
        v.append(f"n_blocks not in {set(space.n_blocks)}: {genome.n_blocks}")
    if genome.base_filters not in space.base_filters:
        v.append(f"base_filters not in {set(space.base_filters)}: {genome.base_filters}")
    for name in ("k1", "k2", "k3"):
        k = getattr(genome, name)
        if k not in space.kernels:
            v.append(f"{name} not in {set(space.kernels)}: {k}")
    if genome.activation not in space.activations:
        v.append(f"activation not in {set(space.activations)}: {genome.activation!r}")
    if genome.merge not in space.merges:
        v.append(f"merge not in {set(space.merges)}: {genome.merge!r}")
    lo, hi = space.dropout_range
    if not (lo <= genome.dropout <= hi):
        v.append(f"dropout outside [{lo}, {hi}]: {genome.dropout}")
    lo, hi = space.lr_range
    if not (lo <= genome.lr <= hi):
        v.append(f"lr outside [{lo}, {hi}]: {genome.lr}")

    if input_shape is not None:
        n_axes = 2 if space.dim == "2d" else 3
        if len(input_shape) != n_axes:
            v.append(f"input_shape must have {n_axes} axes for {space.dim}: {input_shape}")
        elif any(s < 1 for s in input_shape):
            v.append(f"input_shape components must be >= 1: {input_shape}")
        elif check_pooling and genome.n_blocks in space.n_blocks:
            factor = 2 ** pooling_depth(genome.n_blocks)
            for axis, s in enumerate(input_shape):
                if s % factor != 0:
                    v.append(
                        f"input axis {axis} ({s}) not divisible by {factor} "
                        f"(required by {genome.n_blocks} blocks)"
                    )
    return v


def _draw(rng: np.random.Generator, values: tuple):
    return values[int(rng.integers(len(values)))]


def _draw_dropout(space: SearchSpace, rng: np.random.Generator) -> float:
    if space.dropout_values is not None:
        return float(_draw(rng, space.dropout_values))
    lo, hi = space.dropout_range
    return float(rng.uniform(lo, hi))


def _draw_lr(space: SearchSpace, rng: np.random.Generator) -> float:
    # Log-uniform: the interval spans more than five decades and uniform
    # sampling would almost never yield small rates.
    if space.lr_values is not None:
        return float(_draw(rng, space.lr_values))
    lo, hi = space.lr_range
    return float(10.0 ** rng.uniform(math.log10(lo), math.log10(hi)))


def random_genome(space: SearchSpace, rng: np.random.Generator) -> Genome:
    """Draw a genome uniformly per component (lr log-uniformly)."""
    return Genome(
        n_blocks=int(_draw(rng, space.n_blocks)),
        base_filters=int(_draw(rng, space.base_filters)),
        k1=int(_draw(rng, space.kernels)),
        k2=int(_draw(rng, space.kernels)),
        k3=int(_draw(rng, space.kernels)),
        activation=str(_draw(rng, space.activations)),
        merge=str(_draw(rng, space.merges)),
        dropout=_draw_dropout(space, rng),
        lr=_draw_lr(space, rng),
    )


def crossover(a: Genome, b: Genome, rng: np.random.Generator) -> Genome:
    """Uniform crossover: each component is copied from either parent with p=1/2."""
    picks = {f: (getattr(a, f) if rng.random() < 0.5 else getattr(b, f)) for f in GENOME_FIELDS}
    return Genome(**picks)


def mutate(genome: Genome, space: SearchSpace, rate: float, rng: np.random.Generator) -> Genome:
    """Independently resample each component with probability ``rate``.

    Categorical components resample uniformly over the domain minus the
    current value; dropout/lr resample from their random_genome distributions.
    """
    if not (0.0 <= rate <= 1.0):
        raise ValueError(f"mutation rate must be in [0, 1], got {rate}")
    domains = {
        "n_blocks": space.n_blocks,
        "base_filters": space.base_filters,
        "k1": space.kernels,
        "k2": space.kernels,
        "k3": space.kernels,
        "activation": space.activations,
        "merge": space.merges,
    }
    out = {}
    for name in GENOME_FIELDS:
        cur = getattr(genome, name)
        if rng.random() >= rate:
            out[name] = cur
            continue
        if name == "dropout":
            out[name] = _draw_dropout(space, rng)
        elif name == "lr":
            out[name] = _draw_lr(space, rng)
        else:
            others = tuple(x for x in domains[name] if x != cur)
            out[name] = _draw(rng, others) if others else cur
    return Genome(**out)


def mutation_rate(generation: int, total_generations: int, p_start: float, p_end: float) -> float:
    """Linear schedule from p_start (generation 0) to p_end (last generation)."""
    if total_generations < 2:
        raise ValueError("total_generations must be >= 2")
    if not (0 <= generation < total_generations):
        raise ValueError(f"generation {generation} outside [0, {total_generations})")
    if p_start < p_end:
        raise ValueError("p_start must be >= p_end")
    # endpoint-exact form of p_start + (p_end - p_start) * t
    t = generation / (total_generations - 1)
    return p_start * (1.0 - t) + p_end * t


def _sig6(x: float) -> float:
    return float(f"{x:.6g}")


def canonical_key(genome: Genome) -> tuple:
    """Equality key for caching: exact categoricals, lr/dropout at 6 significant digits."""
    return (
        genome.n_blocks, genome.base_filters,
        genome.k1, genome.k2, genome.k3,
        genome.activation, genome.merge,
        _sig6(genome.dropout), _sig6(genome.lr),
    )


def sort_key(genome: Genome) -> tuple:
    """Deterministic total order over genomes for tie-breaking."""
    return tuple(getattr(genome, f) for f in GENOME_FIELDS)
