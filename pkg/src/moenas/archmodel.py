"""Deterministic expansion of a genome into an explicit layer graph.

The plan is the single source of truth for the trainable parameter count
(the size objective) and for network construction by external trainers:
every layer records its channels, kernel, stride and spatial shapes, plus
the index of its second input for residual adds and skip merges.

Counting conventions (documented because they matter for reproducibility):
convolutions and transpose convolutions carry a bias per output channel;
batch normalization contributes scale and shift (2 per channel); pooling,
activations, merges, dropout and softmax carry nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

from .genome import Genome, default_search_space, pooling_depth, validate_genome

DEFAULT_INPUT_SHAPES = {"2d": (128, 128), "3d": (96, 96, 16)}


class InvalidGenomeError(ValueError):
    """Raised when a genome fails domain or feasibility validation."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


@dataclass(frozen=True)
class LayerSpec:
    kind: str                 # conv | batch_norm | activation | residual_add |
                              # max_pool | transpose_conv | skip_merge |
                              # spatial_dropout | final_conv | softmax
    in_channels: int
    out_channels: int
    in_shape: tuple
    out_shape: tuple
    kernel: int = 0
    stride: int = 1
    fn: str | None = None     # activation function name
    rate: float | None = None # spatial dropout probability
    src: int | None = None    # layer index of the second input (add/merge)
    mode: str | None = None   # skip_merge: "sum" | "concat"

    def to_json(self) -> dict:
        rec = {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "in_shape": list(self.in_shape),
            "out_shape": list(self.out_shape),
            "kernel": self.kernel,
            "stride": self.stride,
        }
        if self.fn is not None:
            rec["fn"] = self.fn
        if self.rate is not None:
            rec["rate"] = self.rate
        if self.src is not None:
            rec["src"] = self.src
        if self.mode is not None:
            rec["mode"] = self.mode
        return rec


@dataclass(frozen=True)
class ArchitecturePlan:
    dim: str
    layers: tuple
    input_shape: tuple
    in_channels: int
    n_classes: int


def filters_per_block(base_filters: int, n_blocks: int) -> list[int]:
    """Palindromic filter ladder: doubled after each pooling, halved after each
    transpose convolution, peaking at the bottleneck block."""
    if n_blocks % 2 == 0:
        raise ValueError(f"n_blocks must be odd, got {n_blocks}")
    d = pooling_depth(n_blocks)
    encoder = [base_filters * 2 ** i for i in range(d)]
    return encoder + [base_filters * 2 ** d] + list(reversed(encoder))


class _PlanBuilder:
    def __init__(self):
        self.layers: list[LayerSpec] = []

    def add(self, **kw) -> int:
        self.layers.append(LayerSpec(**kw))
        return len(self.layers) - 1


def _residual_block(b: _PlanBuilder, genome: Genome, c_in: int, f: int, shape: tuple) -> int:
    """Three conv stages with an additive shortcut from the first stage's
    output to the third stage's pre-activation output. Returns the index of
    the block's final activation layer (the tensor used by skip merges)."""
    act = genome.activation
    b.add(kind="conv", in_channels=c_in, out_channels=f, in_shape=shape,
          out_shape=shape, kernel=genome.k1)
    b.add(kind="batch_norm", in_channels=f, out_channels=f, in_shape=shape, out_shape=shape)
    s1 = b.add(kind="activation", in_channels=f, out_channels=f, in_shape=shape,
               out_shape=shape, fn=act)
    b.add(kind="conv", in_channels=f, out_channels=f, in_shape=shape,
          out_shape=shape, kernel=genome.k2)
    b.add(kind="batch_norm", in_channels=f, out_channels=f, in_shape=shape, out_shape=shape)
    b.add(kind="activation", in_channels=f, out_channels=f, in_shape=shape,
          out_shape=shape, fn=act)
    b.add(kind="conv", in_channels=f, out_channels=f, in_shape=shape,
          out_shape=shape, kernel=genome.k3)
    b.add(kind="batch_norm", in_channels=f, out_channels=f, in_shape=shape, out_shape=shape)
    b.add(kind="residual_add", in_channels=f, out_channels=f, in_shape=shape,
          out_shape=shape, src=s1)
    return b.add(kind="activation", in_channels=f, out_channels=f, in_shape=shape,
                 out_shape=shape, fn=act)


def build_plan(
    genome: Genome,
    dim: str,
    input_shape: tuple | None = None,
    in_channels: int = 1,
    n_classes: int = 2,
) -> ArchitecturePlan:
    """Expand a genome into the full symmetric encoder-decoder layer list.

    Encoder blocks are each followed by a stride-2 max pooling; decoder blocks
    are each preceded by a kernel-2/stride-2 transpose convolution and a skip
    merge with the mirror encoder block's output. Spatial dropout precedes
    every residual block except the first. The head is a 1-kernel convolution
    to n_classes followed by softmax.
    """
    space = default_search_space(dim)
    shape = tuple(input_shape) if input_shape is not None else DEFAULT_INPUT_SHAPES[dim]
    violations = validate_genome(genome, space, shape, check_pooling=True)
    if violations:
        raise InvalidGenomeError(violations)

    filters = filters_per_block(genome.base_filters, genome.n_blocks)
    d = pooling_depth(genome.n_blocks)
    b = _PlanBuilder()
    skip_sources: list[int] = []   # final-activation index per encoder block

    c = in_channels
    for i in range(d):
        f = filters[i]
        if i > 0:
            b.add(kind="spatial_dropout", in_channels=c, out_channels=c,
                  in_shape=shape, out_shape=shape, rate=genome.dropout)
        skip_sources.append(_residual_block(b, genome, c, f, shape))
        pooled = tuple(s // 2 for s in shape)
        b.add(kind="max_pool", in_channels=f, out_channels=f, in_shape=shape,
              out_shape=pooled, kernel=2, stride=2)
        shape, c = pooled, f

    # bottleneck
    f = filters[d]
    if d > 0:
        b.add(kind="spatial_dropout", in_channels=c, out_channels=c,
              in_shape=shape, out_shape=shape, rate=genome.dropout)
        _residual_block(b, genome, c, f, shape)
    else:
        # 1-block degenerate case can't occur (n_blocks >= 3), but keep the
        # first-block-no-dropout rule uniform
        _residual_block(b, genome, c, f, shape)
    c = f

    for j in range(d + 1, genome.n_blocks):
        f = filters[j]
        upsampled = tuple(s * 2 for s in shape)
        b.add(kind="transpose_conv", in_channels=c, out_channels=f,
              in_shape=shape, out_shape=upsampled, kernel=2, stride=2)
        shape = upsampled
        mirror = skip_sources[genome.n_blocks - 1 - j]
        merged_c = f if genome.merge == "sum" else 2 * f
        b.add(kind="skip_merge", in_channels=f, out_channels=merged_c,
              in_shape=shape, out_shape=shape, src=mirror, mode=genome.merge)
        b.add(kind="spatial_dropout", in_channels=merged_c, out_channels=merged_c,
              in_shape=shape, out_shape=shape, rate=genome.dropout)
        _residual_block(b, genome, merged_c, f, shape)
        c = f

    b.add(kind="final_conv", in_channels=c, out_channels=n_classes,
          in_shape=shape, out_shape=shape, kernel=1)
    b.add(kind="softmax", in_channels=n_classes, out_channels=n_classes,
          in_shape=shape, out_shape=shape)

    return ArchitecturePlan(
        dim=dim,
        layers=tuple(b.layers),
        input_shape=tuple(input_shape) if input_shape is not None else DEFAULT_INPUT_SHAPES[dim],
        in_channels=in_channels,
        n_classes=n_classes,
    )


def layer_parameters(layer: LayerSpec, dim: str) -> int:
    """Trainable parameters of one layer under the documented conventions."""
    nd = 2 if dim == "2d" else 3
    if layer.kind in ("conv", "final_conv", "transpose_conv"):
        return layer.kernel ** nd * layer.in_channels * layer.out_channels + layer.out_channels
    if layer.kind == "batch_norm":
        return 2 * layer.out_channels
    return 0


def count_parameters(plan: ArchitecturePlan) -> int:
    """Total trainable parameter count of the plan (the size objective)."""
    return sum(layer_parameters(layer, plan.dim) for layer in plan.layers)


def describe(plan: ArchitecturePlan) -> dict:
    """JSON-ready plan description consumed by the CLI and external trainers."""
    layers = []
    for layer in plan.layers:
        rec = layer.to_json()
        rec["params"] = layer_parameters(layer, plan.dim)
        layers.append(rec)
    return {
        "dim": plan.dim,
        "input_shape": list(plan.input_shape),
        "in_channels": plan.in_channels,
        "n_classes": plan.n_classes,
        "layers": layers,
        "total_params": count_parameters(plan),
    }
