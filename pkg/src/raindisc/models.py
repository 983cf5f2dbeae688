"""Teacher and student networks.

Both are U-shaped with channels doubling per down-sampling level.  The
teacher consumes the three modality grids (geographic channels join right
before the final decoder block); the student is IR-only and replaces the
plain encoder with coordinated masked/wavelet blocks.  Inputs whose spatial
dims are not a multiple of 2**stages are reflect-padded internally and
predictions are cropped back.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ContractError, CoordBlock, DoubleConv, Down, PredictorHead, Up
from .masks import MaskSet

TEACHER_MODALITIES = ("ir", "pmw", "pr")
GEO_CHANNELS = 3

TASKS = ("classification", "regression")


@dataclass
class ModelConfig:
    stages: int = 4
    base_channels: int = 32
    task: str = "classification"
    remask_branches: int = 3
    mask_patch_size: int = 8
    use_wavelet_prompt: bool = True

    def validate(self) -> None:
        if self.stages < 2:
            raise ValueError(f"stages must be >= 2, got {self.stages}")
        if self.base_channels < 2:
            raise ValueError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.remask_branches < 1 or self.mask_patch_size < 1:
            raise ValueError("remask_branches and mask_patch_size must be >= 1")

    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.stages)]

    def pad_multiple(self) -> int:
        # multiple of 2**stages keeps every internal pooling/wavelet halving even
        return 2**self.stages

    def to_dict(self) -> dict:
        return asdict(self)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


class TeacherNet(nn.Module):
    """Plain multimodal U-Net: double conv + 2x2 max pooling per level."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels()
        self.inc = DoubleConv(len(TEACHER_MODALITIES), ch[0])
        self.downs = nn.ModuleList(Down(ch[i], ch[i + 1]) for i in range(cfg.stages - 1))
        ups = []
        for i in reversed(range(cfg.stages - 1)):
            extra = GEO_CHANNELS if i == 0 else 0
            ups.append(Up(ch[i + 1], ch[i], extra_in=extra))
        self.ups = nn.ModuleList(ups)
        self.head = PredictorHead(ch[0], cfg.task)

    def forward(self, ir, pmw, pr, geo):
        for name, t in (("pmw", pmw), ("pr", pr), ("geo", geo)):
            if t.shape[-2:] != ir.shape[-2:]:
                raise ContractError(f"{name} spatial shape differs from ir")
        x = torch.cat([ir, pmw, pr], dim=1)
        x, orig = pad_to_multiple(x, self.cfg.pad_multiple())
        geo, _ = pad_to_multiple(geo, self.cfg.pad_multiple())

        feats = [self.inc(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))

        h = feats[-1]
        last = len(self.ups) - 1
        for j, up in enumerate(self.ups):
            skip = feats[len(feats) - 2 - j]
            h = up(h, skip, geo if j == last else None)
        pred = self.head(h)[..., : orig[0], : orig[1]]
        return feats, pred


class StudentNet(nn.Module):
    """IR-only U-shape whose encoder levels are coordinated masked blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels()
        self.stem = DoubleConv(1, ch[0])
        self.blocks = nn.ModuleList(
            CoordBlock(
                ch[i],
                ch[i + 1],
                depth=i + 1,
                stem_channels=ch[0],
                branches=cfg.remask_branches,
                use_prompt=cfg.use_wavelet_prompt,
            )
            for i in range(cfg.stages - 1)
        )
        self.ups = nn.ModuleList(
            Up(ch[i + 1], ch[i]) for i in reversed(range(cfg.stages - 1))
        )
        self.head = PredictorHead(ch[0], cfg.task)

    def block_shapes(self, input_hw: tuple[int, int]) -> list[tuple[int, int]]:
        """Feature (H, W) per encoder block for the given input size."""
        m = self.cfg.pad_multiple()
        h = input_hw[0] + (-input_hw[0]) % m
        w = input_hw[1] + (-input_hw[1]) % m
        return [(h // 2**k, w // 2**k) for k in range(1, self.cfg.stages)]

    def forward(
        self,
        ir: torch.Tensor,
        mode: str = "inference",
        masksets: list[MaskSet] | None = None,
        feature_masks: list[torch.Tensor] | None = None,
    ):
        if mode not in ("inference", "train_masked"):
            raise ContractError(f"unknown mode: {mode!r}")
        if mode == "inference" and masksets is not None:
            raise ContractError("masksets are not allowed in inference mode")
        if mode == "train_masked":
            if masksets is None or len(masksets) != len(self.blocks):
                raise ContractError(
                    f"train_masked needs one maskset per encoder block "
                    f"({len(self.blocks)} expected)"
                )
        if feature_masks is not None and len(feature_masks) != len(self.blocks):
            raise ContractError("feature_masks must cover every encoder block")

        x, orig = pad_to_multiple(ir, self.cfg.pad_multiple())
        stem_feat = self.stem(x)
        feats = [stem_feat]          # stem, then reconstructed features per level
        chain = stem_feat            # Eq-style conv recursion runs on conv features
        for k, block in enumerate(self.blocks):
            chain, recon = block(
                chain,
                stem_feat,
                maskset=masksets[k] if masksets is not None else None,
                feature_mask=feature_masks[k] if feature_masks is not None else None,
            )
            feats.append(recon)

        h = feats[-1]
        for j, up in enumerate(self.ups):
            h = up(h, feats[len(feats) - 2 - j])
        pred = self.head(h)[..., : orig[0], : orig[1]]
        return feats, pred


def state_to_numpy(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}


def load_numpy_state(model: nn.Module, params: dict[str, np.ndarray]) -> None:
    """Load a name->array dict, enforcing an exact name/shape match."""
    from . import gridio

    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    gridio.match_param_spec(params, expected, context=type(model).__name__)
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})


# ---------------------------------------------------------------------------
# Prediction fusion and rate transforms

def rain_to_target(rain: np.ndarray) -> np.ndarray:
    """log(1 + y) transform; keeps heavy-tailed rates tame for MSE."""
    return np.log1p(rain)


def target_to_rain(t: np.ndarray) -> np.ndarray:
    return np.clip(np.expm1(t), 0.0, None)


def fuse_predictions(cls_prob: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Rain rate = regression rate where classification says rain, clamped at 0."""
    if cls_prob.shape != rates.shape:
        raise ContractError("classification/regression shapes differ")
    return np.clip(rates, 0.0, None) * (cls_prob >= 0.5)
