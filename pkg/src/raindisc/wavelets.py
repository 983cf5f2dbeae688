"""Orthonormal single-level Haar transforms on (..., H, W) tensors.

Convention per 2x2 tile [[a, b], [c, d]]:
    ll = (a + b + c + d) / 2      hl = (a - b + c - d) / 2
    lh = (a + b - c - d) / 2      hh = (a - b - c + d) / 2
which preserves energy exactly and inverts in closed form.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def _pad_even(x: torch.Tensor) -> torch.Tensor:
    ph = x.shape[-2] % 2
    pw = x.shape[-1] % 2
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if min(x.shape[-2], x.shape[-1]) >= 2 else "replicate"
    flat = x.reshape(-1, 1, x.shape[-2], x.shape[-1])
    flat = F.pad(flat, (0, pw, 0, ph), mode=mode)
    return flat.reshape(*x.shape[:-2], x.shape[-2] + ph, x.shape[-1] + pw)


def dwt_haar(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """One analysis step; odd trailing dims are reflect-padded first."""
    x = _pad_even(x)
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    hl = (a - b + c - d) / 2
    lh = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return ll, hl, lh, hh


def idwt_haar(
    ll: torch.Tensor,
    hl: torch.Tensor,
    lh: torch.Tensor,
    hh: torch.Tensor,
    out_hw: tuple[int, int] | None = None,
) -> torch.Tensor:
    """Exact inverse of :func:`dwt_haar`; crops to `out_hw` when given."""
    a = (ll + hl + lh + hh) / 2
    b = (ll - hl + lh - hh) / 2
    c = (ll + hl - lh - hh) / 2
    d = (ll - hl - lh + hh) / 2
    h2, w2 = ll.shape[-2], ll.shape[-1]
    out = ll.new_zeros(*ll.shape[:-2], 2 * h2, 2 * w2)
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    if out_hw is not None:
        out = out[..., : out_hw[0], : out_hw[1]]
    return out
