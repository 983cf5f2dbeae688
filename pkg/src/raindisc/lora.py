"""Low-rank bypass adapters for the student's feature autoencoders.

Each wrapped conv keeps its pretrained weight frozen and adds
scaling * (up @ down) reshaped onto it.  `up` starts at zero, so a freshly
injected model is forward-identical to the pretrained one.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ContractError


class LoraConv2d(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int, scaling: float = 1.0):
        super().__init__()
        out_ch = base.out_channels
        fan_in = base.in_channels * base.kernel_size[0] * base.kernel_size[1]
        if rank < 1 or rank > min(out_ch, fan_in):
            raise ContractError(
                f"rank {rank} outside [1, {min(out_ch, fan_in)}] for weight "
                f"{out_ch}x{fan_in}"
            )
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.scaling = scaling
        self.lora_down = nn.Parameter(torch.empty(rank, fan_in))
        self.lora_up = nn.Parameter(torch.zeros(out_ch, rank))
        nn.init.kaiming_uniform_(self.lora_down, a=math.sqrt(5))

    def delta_weight(self) -> torch.Tensor:
        return (self.scaling * (self.lora_up @ self.lora_down)).view_as(self.base.weight)

    def forward(self, x):
        return F.conv2d(
            x,
            self.base.weight + self.delta_weight(),
            self.base.bias,
            stride=self.base.stride,
            padding=self.base.padding,
        )


def inject_lora(student: nn.Module, rank: int, scaling: float = 1.0) -> list[str]:
    """Wrap every autoencoder conv of every encoder block; returns target names."""
    targets = []
    for b, block in enumerate(student.blocks):
        for part_name in ("enc", "dec"):
            seq = getattr(block.ae, part_name)
            for i, layer in enumerate(seq):
                if isinstance(layer, nn.Conv2d):
                    seq[i] = LoraConv2d(layer, rank, scaling)
                    targets.append(f"blocks.{b}.ae.{part_name}.{i}")
    return targets


def lora_parameter_names(model: nn.Module) -> set[str]:
    return {
        name
        for name, _ in model.named_parameters()
        if name.endswith(("lora_down", "lora_up"))
    }


def set_adapt_trainability(student: nn.Module) -> None:
    """Freeze everything except the low-rank factors, the decoder and the head.

    The masked convs, wavelet prompts, stem and branch weights keep their
    pretrained multimodal mapping; autoencoders adapt only through the bypass.
    """
    for p in student.parameters():
        p.requires_grad_(False)
    for name, p in student.named_parameters():
        if name.endswith(("lora_down", "lora_up")):
            p.requires_grad_(True)
    for module in (student.ups, student.head):
        for p in module.parameters():
            p.requires_grad_(True)


def frozen_parameter_names(model: nn.Module) -> set[str]:
    return {name for name, p in model.named_parameters() if not p.requires_grad}
