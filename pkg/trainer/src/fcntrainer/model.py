"""Build a trainable network from an engine layer plan.

The plan is executed as an interpreter: layers run in order, every output is
kept by index, and residual adds / skip merges pull their second operand from
the recorded source index.
"""

from __future__ import annotations

import torch
from torch import nn


def _conv(nd):
    return nn.Conv2d if nd == 2 else nn.Conv3d


def _build_module(rec: dict, nd: int):
    kind = rec["kind"]
    if kind in ("conv", "final_conv"):
        k = rec["kernel"]
        return _conv(nd)(rec["in_channels"], rec["out_channels"], k, padding=k // 2)
    if kind == "transpose_conv":
        cls = nn.ConvTranspose2d if nd == 2 else nn.ConvTranspose3d
        return cls(rec["in_channels"], rec["out_channels"], rec["kernel"],
                   stride=rec["stride"])
    if kind == "batch_norm":
        cls = nn.BatchNorm2d if nd == 2 else nn.BatchNorm3d
        return cls(rec["out_channels"])
    if kind == "activation":
        return nn.ReLU(inplace=True) if rec["fn"] == "relu" else nn.ELU(inplace=True)
    if kind == "max_pool":
        cls = nn.MaxPool2d if nd == 2 else nn.MaxPool3d
        return cls(rec["kernel"])
    if kind == "spatial_dropout":
        cls = nn.Dropout2d if nd == 2 else nn.Dropout3d
        return cls(p=rec["rate"])
    if kind in ("residual_add", "skip_merge", "softmax"):
        return None  # handled functionally in forward
    raise ValueError(f"unknown layer kind {kind!r}")


class PlanNet(nn.Module):
    """Network assembled from a plan's layer records."""

    def __init__(self, plan: dict):
        super().__init__()
        self.nd = 2 if plan["dim"] == "2d" else 3
        self.specs = list(plan["layers"])
        self.n_classes = plan["n_classes"]
        self.mods = nn.ModuleList([
            _build_module(rec, self.nd) or nn.Identity() for rec in self.specs
        ])

    def forward(self, x):
        outputs = []
        for rec, mod in zip(self.specs, self.mods):
            kind = rec["kind"]
            if kind == "residual_add":
                x = x + outputs[rec["src"]]
            elif kind == "skip_merge":
                other = outputs[rec["src"]]
                x = torch.cat([x, other], dim=1) if rec["mode"] == "concat" else x + other
            elif kind == "softmax":
                x = torch.softmax(x, dim=1)
            else:
                x = mod(x)
            outputs.append(x)
        return x


def trainable_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_network(plan: dict) -> PlanNet:
    """Build the network and assert its size matches the plan's declared total."""
    net = PlanNet(plan)
    got = trainable_parameter_count(net)
    declared = plan["total_params"]
    if got != declared:
        raise ValueError(
            f"framework parameter count {got} != plan total {declared}")
    return net
