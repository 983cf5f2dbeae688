"""Stage II: full-disc adaptation with error-guided feature masking.

After `warmup_epochs` unmasked epochs, each sample's previous-epoch task-loss
map is average-pooled to every encoder level; regions whose pooled loss
reaches mask_threshold_frac * (per-sample spatial max) pass through the
autoencoders, the rest are zeroed.  Mode "rand" swaps in random masks of
matched density, mode "non" never masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import gridio, metrics
from .losses import LossReport, task_loss
from .lora import frozen_parameter_names, inject_lora, set_adapt_trainability
from .models import ModelConfig, StudentNet, load_numpy_state, state_to_numpy
from .training import ScenePack, TrainResult, _batches, _check_finite, _val_score

TUNE_MODES = ("self", "rand", "non")


@dataclass
class AdaptConfig:
    tune_mode: str = "self"
    warmup_epochs: int = 10
    mask_threshold_frac: float = 0.5
    lora_rank: int = 4
    lora_scaling: float = 1.0
    lr: float = 1e-3
    lr_decay_every: int = 30
    lr_decay_factor: float = 0.5
    grad_clip: float = 1.0
    batch_size: int = 2
    epochs: int = 20
    seed: int = 0
    task: str = "classification"

    def validate(self) -> None:
        if self.tune_mode not in TUNE_MODES:
            raise ValueError(f"tune_mode must be one of {TUNE_MODES}, got {self.tune_mode!r}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if not 0.0 <= self.mask_threshold_frac <= 1.0:
            raise ValueError("mask_threshold_frac must be in [0, 1]")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")


def compute_pmax(region_losses: np.ndarray, threshold_frac: float) -> float:
    """Per-sample mask threshold: threshold_frac * max region loss."""
    return float(threshold_frac * np.max(region_losses))


def build_self_mask(region_losses: np.ndarray, pmax: float) -> np.ndarray:
    """1 where the previous-epoch loss reaches pmax (inclusive), else 0."""
    return (np.asarray(region_losses) >= pmax).astype(np.float32)


def pool_loss_map(loss_map: torch.Tensor, shape: tuple[int, int]) -> torch.Tensor:
    """Average-pool a (H, W) pixel loss map down to a feature resolution."""
    return F.adaptive_avg_pool2d(loss_map[None, None], shape)[0, 0]


@dataclass
class AdaptResult(TrainResult):
    masked_epochs: list[int] = field(default_factory=list)
    mask_density_history: list[float] = field(default_factory=list)
    frozen_digest_before: str | None = None
    frozen_digest_after: str | None = None


def _frozen_subset(model: StudentNet) -> dict[str, np.ndarray]:
    frozen = frozen_parameter_names(model)
    return {
        name: p.detach().cpu().numpy().astype(np.float32)
        for name, p in model.named_parameters()
        if name in frozen
    }


def train_full_disc(
    train_pack: ScenePack,
    val_pack: ScenePack,
    student_params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    cfg: AdaptConfig,
    log: gridio.MetricsLog | None = None,
    run_id: str = "run",
    parent: str | None = None,
) -> AdaptResult:
    """Adapt a distilled student to full-disc IR scenes."""
    cfg.validate()
    model_cfg.validate()
    torch.manual_seed(cfg.seed)
    student = StudentNet(model_cfg)
    load_numpy_state(student, student_params)
    inject_lora(student, cfg.lora_rank, cfg.lora_scaling)
    set_adapt_trainability(student)
    frozen_before = gridio.params_digest(_frozen_subset(student))

    opt = torch.optim.RMSprop(
        [p for p in student.parameters() if p.requires_grad], lr=cfg.lr
    )
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_every, cfg.lr_decay_factor)
    data_rng = np.random.default_rng([cfg.seed, 17])
    mask_rng = np.random.default_rng([cfg.seed, 211])

    input_hw = tuple(train_pack.ir.shape[-2:])
    level_shapes = student.block_shapes(input_hw)
    target = train_pack.target(cfg.task)

    error_memory: dict[int, torch.Tensor] = {}
    best: tuple[float, int, dict | None] = (-np.inf, 0, None)
    val_history: list[float | None] = []
    loss_history: list[LossReport] = []
    masked_epochs: list[int] = []
    density_history: list[float] = []

    for epoch in range(1, cfg.epochs + 1):
        masking = epoch > cfg.warmup_epochs and cfg.tune_mode != "non"
        if masking:
            masked_epochs.append(epoch)
        student.train()
        staged_memory: dict[int, torch.Tensor] = {}
        epoch_loss, n_steps = 0.0, 0

        for step, idx in enumerate(_batches(len(train_pack), cfg.batch_size, data_rng)):
            feature_masks = None
            if masking:
                feature_masks = []
                for shape in level_shapes:
                    per_sample = []
                    for i in idx:
                        mem = error_memory.get(int(i))
                        if mem is None:
                            per_sample.append(torch.ones(shape))
                            continue
                        pooled = pool_loss_map(mem, shape).numpy()
                        mask = build_self_mask(
                            pooled, compute_pmax(pooled, cfg.mask_threshold_frac)
                        )
                        if cfg.tune_mode == "rand":
                            density = float(mask.mean())
                            mask = (mask_rng.random(shape) < density).astype(np.float32)
                        per_sample.append(torch.from_numpy(mask))
                        density_history.append(float(mask.mean()))
                    feature_masks.append(torch.stack(per_sample)[:, None])

            _, pred = student(train_pack.ir[idx], feature_masks=feature_masks)
            loss, loss_map = task_loss(pred, target[idx], cfg.task)
            _check_finite(loss, "adapt", epoch, step)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(
                    [p for p in student.parameters() if p.requires_grad], cfg.grad_clip
                )
            opt.step()

            maps = loss_map.detach()[:, 0]
            for row, i in enumerate(idx):
                staged_memory[int(i)] = maps[row]
            value = float(loss.detach())
            loss_history.append(LossReport(value, 0.0, 0.0, value))
            epoch_loss += value
            n_steps += 1

        error_memory = staged_memory       # refreshed exactly once per epoch
        sched.step()

        student.eval()
        score = _val_score(lambda idx: student(val_pack.ir[idx])[1], val_pack, cfg.task)
        val_history.append(score)
        if score is not None and score > best[0]:
            best = (score, epoch, state_to_numpy(student))
        if log is not None:
            log.append(run_id, "adapt", epoch, "train", "loss_task", epoch_loss / max(n_steps, 1))
            name = "csi" if cfg.task == "classification" else "neg_rmse"
            log.append(run_id, "adapt", epoch, "val", name, score)

    score, best_epoch, params = best
    if params is None:
        params, best_epoch, score = state_to_numpy(student), cfg.epochs, float("-inf")
    frozen_after = gridio.params_digest(_frozen_subset(student))
    header = {
        "kind": "student_adapted",
        "task": cfg.task,
        "model": model_cfg.to_dict(),
        "stage": "adapt",
        "epoch": best_epoch,
        "seed": cfg.seed,
        "parent": parent,
        "tune_mode": cfg.tune_mode,
        "lora_rank": cfg.lora_rank,
        "lora_scaling": cfg.lora_scaling,
    }
    return AdaptResult(
        params,
        header,
        best_epoch,
        score,
        val_history,
        loss_history,
        masked_epochs=masked_epochs,
        mask_density_history=density_history,
        frozen_digest_before=frozen_before,
        frozen_digest_after=frozen_after,
    )


def build_adapted_student(model_cfg: ModelConfig, params: dict[str, np.ndarray], header: dict) -> StudentNet:
    """Reconstruct an adapted student (with its bypass weights) for inference."""
    student = StudentNet(model_cfg)
    inject_lora(student, int(header["lora_rank"]), float(header["lora_scaling"]))
    load_numpy_state(student, params)
    student.eval()
    return student
