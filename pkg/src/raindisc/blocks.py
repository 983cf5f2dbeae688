"""Encoder/decoder building blocks for the teacher and student networks.

The coordinated block runs one encoder level of the student: pooled 1x1
channel alignment, an optional conv mask, a double masked convolution, a
wavelet high-frequency prompt, and branch-masked autoencoder reconstruction
recombined with learnable softmax weights.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .masks import MaskSet
from .wavelets import dwt_haar


class ContractError(ValueError):
    pass


class DoubleConv(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Down(nn.Module):
    """2x2 max pooling followed by a double conv (teacher encoder step)."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.pool = nn.MaxPool2d(2)
        self.conv = DoubleConv(cin, cout)

    def forward(self, x):
        return self.conv(self.pool(x))


class Up(nn.Module):
    """Transposed-conv upsampling, skip concat, then a double conv.

    `extra_in` widens the conv input for channels injected only at this
    level (the teacher's geographic channels).
    """

    def __init__(self, cin: int, cout: int, extra_in: int = 0):
        super().__init__()
        self.upsample = nn.ConvTranspose2d(cin, cout, 2, stride=2)
        self.conv = DoubleConv(cout * 2 + extra_in, cout)

    def forward(self, x, skip, extra=None):
        x = self.upsample(x)
        parts = [x, skip] if extra is None else [x, skip, extra]
        return self.conv(torch.cat(parts, dim=1))


class PredictorHead(nn.Module):
    """1x1 projection to a single channel; sigmoid for classification."""

    def __init__(self, cin: int, task: str):
        super().__init__()
        self.proj = nn.Conv2d(cin, 1, 1)
        self.task = task

    def forward(self, x):
        z = self.proj(x)
        return torch.sigmoid(z) if self.task == "classification" else z


class MaskedDown(nn.Module):
    """Pooled 1x1 alignment, optional conv mask, then a double conv.

    Masked positions contribute exact zeros to the convolution input.
    """

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.pool = nn.MaxPool2d(2)
        self.align = nn.Conv2d(cin, cout, 1)
        self.conv = DoubleConv(cout, cout)

    def forward(self, x, conv_mask: torch.Tensor | None = None):
        h = self.align(self.pool(x))
        if conv_mask is not None:
            if conv_mask.shape[-2:] != h.shape[-2:]:
                raise ContractError(
                    f"conv mask {tuple(conv_mask.shape[-2:])} does not match "
                    f"feature {tuple(h.shape[-2:])}"
                )
            h = h * conv_mask.to(h.dtype)
        return self.conv(h)


class WaveletPrompt(nn.Module):
    """High-frequency detail prompt from repeated Haar decomposition.

    Recurses `depth` times on the low-low band, concatenates the final
    directional bands, aligns channels with a bias-free 1x1 conv (so a
    constant input yields an exactly zero prompt) and gates the result with
    a spatial-attention map.
    """

    def __init__(self, stem_channels: int, cout: int, depth: int):
        super().__init__()
        if depth < 1:
            raise ContractError(f"wavelet depth must be >= 1, got {depth}")
        self.depth = depth
        self.align = nn.Conv2d(3 * stem_channels, cout, 1, bias=False)
        self.attend = nn.Conv2d(2, 1, 7, padding=3)

    def forward(self, stem_feat):
        ll = stem_feat
        hl = lh = hh = None
        for _ in range(self.depth):
            if min(ll.shape[-2:]) < 2:
                raise ContractError(
                    f"wavelet depth {self.depth} exceeds resolution {tuple(stem_feat.shape[-2:])}"
                )
            ll, hl, lh, hh = dwt_haar(ll)
        aligned = self.align(torch.cat([hl, lh, hh], dim=1))
        stats = torch.cat(
            [aligned.mean(dim=1, keepdim=True), aligned.max(dim=1, keepdim=True).values], dim=1
        )
        return aligned * torch.sigmoid(self.attend(stats))


class FeatureAutoencoder(nn.Module):
    """2-conv encoder to half channels, 2-conv decoder back."""

    def __init__(self, channels: int):
        super().__init__()
        hidden = max(channels // 2, 1)
        self.enc = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(hidden, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x):
        return self.dec(self.enc(x))


class CoordBlock(nn.Module):
    """One masked-and-wavelet-enhanced student encoder level."""

    def __init__(
        self,
        cin: int,
        cout: int,
        depth: int,
        stem_channels: int,
        branches: int,
        use_prompt: bool = True,
    ):
        super().__init__()
        self.down = MaskedDown(cin, cout)
        self.prompt = WaveletPrompt(stem_channels, cout, depth)
        self.ae = FeatureAutoencoder(cout)
        self.branch_logits = nn.Parameter(torch.zeros(branches))
        self.use_prompt = use_prompt

    def reconstruct(self, base: torch.Tensor, maskset: MaskSet | None) -> torch.Tensor:
        if maskset is None:
            return self.ae(base)
        if maskset.branches != self.branch_logits.numel():
            raise ContractError(
                f"maskset has {maskset.branches} branches, block expects "
                f"{self.branch_logits.numel()}"
            )
        weights = torch.softmax(self.branch_logits, dim=0)
        out = None
        for j, remask in enumerate(maskset.remasks):
            piece = weights[j] * self.ae(base * remask.to(base.dtype))
            out = piece if out is None else out + piece
        return out

    def forward(
        self,
        x: torch.Tensor,
        stem_feat: torch.Tensor,
        maskset: MaskSet | None = None,
        feature_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (conv_chain, reconstruction).

        The conv features carry the encoder recursion; the branch-masked
        autoencoder reconstruction feeds the decoder skip and the
        reconstruction loss.
        """
        fc = self.down(x, maskset.conv_mask if maskset is not None else None)
        base = fc + self.prompt(stem_feat) if self.use_prompt else fc
        if feature_mask is not None:
            if feature_mask.shape[-2:] != base.shape[-2:]:
                raise ContractError(
                    f"feature mask {tuple(feature_mask.shape[-2:])} does not match "
                    f"feature {tuple(base.shape[-2:])}"
                )
            base = base * feature_mask.to(base.dtype)
        return fc, self.reconstruct(base, maskset)
