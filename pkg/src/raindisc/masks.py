"""Patch-granular coordinated masks for the masked encoder blocks.

A low-ratio conv mask hides `mask_ratio` of the patches; its visible patches
are shuffled and dealt round-robin into `branches` disjoint re-masks, so each
branch ends up with the high total mask ratio (branches + mask_ratio - 1) /
branches.  Masks use 1 = visible, 0 = hidden and carry no gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


class MaskError(ValueError):
    pass


@dataclass
class MaskSet:
    depth: int
    patch_size: int
    mask_ratio: float
    branches: int
    conv_mask: torch.Tensor          # (1, 1, H, W) float, 1 = visible
    remasks: list[torch.Tensor]
    visible_patches: np.ndarray = field(repr=False)      # flat patch indices
    branch_patches: list[np.ndarray] = field(repr=False)
    patch_grid: tuple[int, int] = (0, 0)

    @property
    def n_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    def branch_mask_fraction(self, j: int) -> float:
        """Total hidden fraction of branch j (hidden by conv mask or re-mask)."""
        return 1.0 - len(self.branch_patches[j]) / self.n_patches


def _expand(grid: np.ndarray, patch: int) -> torch.Tensor:
    full = np.kron(grid, np.ones((patch, patch), dtype=np.float32))
    return torch.from_numpy(full[None, None])


def build_maskset(
    depth: int,
    feature_shape: tuple[int, int],
    mask_ratio: float,
    branches: int,
    patch_size: int,
    rng: np.random.Generator | int,
) -> MaskSet:
    """Build the conv mask and its disjoint branch re-masks for one level."""
    if not 0.0 <= mask_ratio < 1.0:
        raise MaskError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    if branches < 1:
        raise MaskError(f"branches must be >= 1, got {branches}")
    h, w = feature_shape
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise MaskError(f"patch_size {patch_size} does not tile feature shape {(h, w)}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))

    ph, pw = h // patch_size, w // patch_size
    n_patches = ph * pw
    n_hidden = int(round(mask_ratio * n_patches))
    n_visible = n_patches - n_hidden
    if branches > n_visible:
        raise MaskError(f"{branches} branches exceed {n_visible} visible patches")

    order = rng.permutation(n_patches)
    hidden = order[:n_hidden]
    visible = order[n_hidden:]          # already shuffled

    conv_grid = np.ones(n_patches, dtype=np.float32)
    conv_grid[hidden] = 0.0

    remasks = []
    branch_patches = []
    for j in range(branches):
        keep = visible[j::branches]     # round-robin deal; remainder to low branches
        grid = np.zeros(n_patches, dtype=np.float32)
        grid[keep] = 1.0
        remasks.append(_expand(grid.reshape(ph, pw), patch_size))
        branch_patches.append(np.sort(keep))

    return MaskSet(
        depth=depth,
        patch_size=patch_size,
        mask_ratio=mask_ratio,
        branches=branches,
        conv_mask=_expand(conv_grid.reshape(ph, pw), patch_size),
        remasks=remasks,
        visible_patches=np.sort(visible),
        branch_patches=branch_patches,
        patch_grid=(ph, pw),
    )


def fitting_patch_size(preferred: int, feature_shape: tuple[int, int]) -> int:
    """Largest power-of-two <= preferred that tiles the feature shape."""
    p = max(1, preferred)
    while p > 1 and (feature_shape[0] % p or feature_shape[1] % p):
        p //= 2
    return p
