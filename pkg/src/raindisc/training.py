"""Stage I: teacher pre-training and swath distillation of the IR-only student.

Trainers are deterministic given (config, single-threaded compute): model
init comes from the torch seed, batch order and per-step masks from
dedicated numpy streams.  The teacher is frozen throughout distillation and
its parameter digest is recorded before and after for the freeze check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import gridio, metrics
from .losses import LossReport, NumericsError, feat_loss, rec_loss, task_loss
from .masks import build_maskset, fitting_patch_size
from .models import (
    ModelConfig,
    StudentNet,
    TeacherNet,
    load_numpy_state,
    rain_to_target,
    state_to_numpy,
    target_to_rain,
)
from .synthdata import IR_BASE_K, IR_SPAN_K, RAIN_THRESHOLD

KD_MODES = ("none", "vanilla_kd", "comwe")


def set_single_thread() -> None:
    """Single-threaded compute: required for bit-identical reruns."""
    torch.set_num_threads(1)


def normalize_ir(ir_k: np.ndarray) -> np.ndarray:
    """Kelvin -> rain-signed standardized cloud signal."""
    return (IR_BASE_K - ir_k) / IR_SPAN_K


@dataclass
class ScenePack:
    """Stacked tensors for one split, everything already normalized."""

    ir: torch.Tensor                     # (N, 1, H, W)
    cls_target: torch.Tensor             # (N, 1, H, W)
    reg_target: torch.Tensor             # (N, 1, H, W)
    precip: np.ndarray                   # (N, H, W) raw mm/hr
    pmw: torch.Tensor | None = None
    pr: torch.Tensor | None = None
    geo: torch.Tensor | None = None
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.ir.shape[0]

    def target(self, task: str) -> torch.Tensor:
        return self.cls_target if task == "classification" else self.reg_target


def pack_scenes(scenes: list[dict], threshold: float = RAIN_THRESHOLD) -> ScenePack:
    def stack(key):
        return torch.from_numpy(np.stack([s[key] for s in scenes])[:, None].astype(np.float32))

    precip = np.stack([s["precip"] for s in scenes])
    ir_k = np.stack([s["ir"] for s in scenes])
    pack = ScenePack(
        ir=torch.from_numpy(normalize_ir(ir_k)[:, None].astype(np.float32)),
        cls_target=torch.from_numpy((precip >= threshold)[:, None].astype(np.float32)),
        reg_target=torch.from_numpy(rain_to_target(precip)[:, None].astype(np.float32)),
        precip=precip,
        ids=[s["meta"]["scene_id"] for s in scenes],
    )
    if "pmw" in scenes[0]:
        pack.pmw = stack("pmw")
        pack.pr = stack("pr")
        pack.geo = torch.from_numpy(
            np.stack(
                [np.stack([s["elevation"], s["latitude"], s["longitude"]]) for s in scenes]
            ).astype(np.float32)
        )
    return pack


@dataclass
class DistillConfig:
    task: str = "classification"
    kd_mode: str = "comwe"
    feature_loss_weight: float = 0.2
    reconstruction_loss_weight: float = 50.0
    rec_levels: str = "all"              # "all" | "bottleneck"
    conv_mask_ratio: float = 0.25
    remask_branches: int = 3
    lr: float = 1e-3
    lr_decay_every: int = 30
    lr_decay_factor: float = 0.5
    grad_clip: float = 1.0               # 0 disables
    batch_size: int = 8
    epochs: int = 40
    seed: int = 0
    modalities: tuple[str, ...] = ("ir", "pmw", "pr")

    def validate(self) -> None:
        if self.kd_mode not in KD_MODES:
            raise ValueError(f"kd_mode must be one of {KD_MODES}, got {self.kd_mode!r}")
        if self.feature_loss_weight < 0 or self.reconstruction_loss_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.rec_levels not in ("all", "bottleneck"):
            raise ValueError(f"rec_levels must be 'all' or 'bottleneck', got {self.rec_levels!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        bad = set(self.modalities) - {"ir", "pmw", "pr"}
        if bad:
            raise ValueError(f"unknown modalities: {sorted(bad)}")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    header: dict
    best_epoch: int
    best_score: float
    val_history: list[float | None]
    loss_history: list[LossReport]
    teacher_digest_before: str | None = None
    teacher_digest_after: str | None = None

    def digest(self) -> str:
        return gridio.params_digest(self.params)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _teacher_inputs(pack: ScenePack, idx: np.ndarray, modalities: tuple[str, ...]):
    ir = pack.ir[idx]
    pmw = pack.pmw[idx]
    pr = pack.pr[idx]
    if "ir" not in modalities:
        ir = torch.zeros_like(ir)
    if "pmw" not in modalities:
        pmw = torch.zeros_like(pmw)
    if "pr" not in modalities:
        pr = torch.zeros_like(pr)
    return ir, pmw, pr, pack.geo[idx]


def _val_score(predict, pack: ScenePack, task: str, batch_size: int = 8) -> float | None:
    """Pooled CSI for classification, negative RMSE for regression."""
    counts = metrics.ConfusionCounts(0, 0, 0, 0)
    sq_err, n_px = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(pack), batch_size):
            idx = np.arange(i, min(i + batch_size, len(pack)))
            pred = predict(idx).cpu().numpy()[:, 0]
            truth = pack.precip[idx]
            if task == "classification":
                counts = counts + metrics.confusion(
                    (pred >= 0.5).astype(np.float64), truth, RAIN_THRESHOLD
                )
            else:
                rates = target_to_rain(pred)
                sq_err += float(((rates - truth) ** 2).sum())
                n_px += truth.size
    if task == "classification":
        return metrics.csi(counts)
    return -float(np.sqrt(sq_err / n_px))


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise NumericsError(f"non-finite loss in {stage} at epoch {epoch}, step {step}")


def train_teacher(
    train_pack: ScenePack,
    val_pack: ScenePack,
    model_cfg: ModelConfig,
    cfg: DistillConfig,
    log: gridio.MetricsLog | None = None,
    run_id: str = "run",
) -> TrainResult:
    """Train one multimodal teacher; best-on-validation checkpoint wins."""
    cfg.validate()
    model_cfg.validate()
    torch.manual_seed(cfg.seed)
    model = TeacherNet(model_cfg)
    opt = torch.optim.RMSprop(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_every, cfg.lr_decay_factor)
    data_rng = np.random.default_rng([cfg.seed, 17])

    target = train_pack.target(cfg.task)
    best: tuple[float, int, dict | None] = (-np.inf, 0, None)
    val_history: list[float | None] = []
    loss_history: list[LossReport] = []

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        epoch_loss, n_steps = 0.0, 0
        for step, idx in enumerate(_batches(len(train_pack), cfg.batch_size, data_rng)):
            ir, pmw, pr, geo = _teacher_inputs(train_pack, idx, cfg.modalities)
            _, pred = model(ir, pmw, pr, geo)
            loss, _ = task_loss(pred, target[idx], cfg.task)
            _check_finite(loss, "teacher", epoch, step)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            value = float(loss.detach())
            loss_history.append(LossReport(value, 0.0, 0.0, value))
            epoch_loss += value
            n_steps += 1
        sched.step()

        model.eval()

        def predict(idx):
            ir, pmw, pr, geo = _teacher_inputs(val_pack, idx, cfg.modalities)
            return model(ir, pmw, pr, geo)[1]

        score = _val_score(predict, val_pack, cfg.task)
        val_history.append(score)
        if score is not None and score > best[0]:
            best = (score, epoch, state_to_numpy(model))
        if log is not None:
            log.append(run_id, "teacher", epoch, "train", "loss_task", epoch_loss / max(n_steps, 1))
            name = "csi" if cfg.task == "classification" else "neg_rmse"
            log.append(run_id, "teacher", epoch, "val", name, score)

    score, best_epoch, params = best
    if params is None:
        params, best_epoch, score = state_to_numpy(model), cfg.epochs, float("-inf")
    header = {
        "kind": "teacher",
        "task": cfg.task,
        "model": model_cfg.to_dict(),
        "stage": "teacher",
        "epoch": best_epoch,
        "seed": cfg.seed,
        "parent": None,
        "modalities": list(cfg.modalities),
    }
    return TrainResult(params, header, best_epoch, score, val_history, loss_history)


class _Projections(nn.Module):
    """1x1 student->teacher channel projections, trained jointly, never saved."""

    def __init__(self, student_cfg: ModelConfig, teacher_cfg: ModelConfig, with_rec: bool):
        super().__init__()
        s_ch, t_ch = student_cfg.channels(), teacher_cfg.channels()
        self.bottleneck = nn.Conv2d(s_ch[-1], t_ch[-1], 1)
        self.rec = nn.ModuleList(
            nn.Conv2d(s, t, 1) for s, t in zip(s_ch[1:], t_ch[1:])
        ) if with_rec else nn.ModuleList()


def _student_masksets(model: StudentNet, input_hw, cfg: DistillConfig, rng) -> list:
    shapes = model.block_shapes(input_hw)
    sets = []
    for k, shape in enumerate(shapes):
        patch = fitting_patch_size(max(model.cfg.mask_patch_size >> (k + 1), 1), shape)
        sets.append(
            build_maskset(k + 1, shape, cfg.conv_mask_ratio, cfg.remask_branches, patch, rng)
        )
    return sets


def train_student_distill(
    train_pack: ScenePack,
    val_pack: ScenePack,
    teacher_params: dict[str, np.ndarray] | None,
    teacher_cfg: ModelConfig | None,
    student_cfg: ModelConfig,
    cfg: DistillConfig,
    log: gridio.MetricsLog | None = None,
    run_id: str = "run",
    parent: str | None = None,
) -> TrainResult:
    """Distill (or plainly train, kd_mode="none") the IR-only student."""
    cfg.validate()
    student_cfg.validate()
    if cfg.kd_mode != "none" and (teacher_params is None or teacher_cfg is None):
        raise ValueError(f"kd_mode={cfg.kd_mode!r} requires a teacher checkpoint")

    torch.manual_seed(cfg.seed)
    student = StudentNet(student_cfg)

    teacher = None
    projections = None
    teacher_digest_before = None
    if cfg.kd_mode != "none":
        teacher = TeacherNet(teacher_cfg)
        load_numpy_state(teacher, teacher_params)
        teacher.eval()
        teacher.requires_grad_(False)
        teacher_digest_before = gridio.params_digest(state_to_numpy(teacher))
        projections = _Projections(student_cfg, teacher_cfg, with_rec=cfg.kd_mode == "comwe")

    trainable = list(student.parameters())
    if projections is not None:
        trainable += list(projections.parameters())
    opt = torch.optim.RMSprop(trainable, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_every, cfg.lr_decay_factor)
    data_rng = np.random.default_rng([cfg.seed, 17])
    mask_rng = np.random.default_rng([cfg.seed, 101])

    # teacher features are mask-independent: compute once per scene
    teacher_feats: list[torch.Tensor] | None = None
    if teacher is not None:
        chunks = []
        with torch.no_grad():
            for i in range(0, len(train_pack), cfg.batch_size):
                idx = np.arange(i, min(i + cfg.batch_size, len(train_pack)))
                feats, _ = teacher(*_teacher_inputs(train_pack, idx, ("ir", "pmw", "pr")))
                chunks.append([f.detach() for f in feats])
        teacher_feats = [torch.cat([c[lvl] for c in chunks]) for lvl in range(len(chunks[0]))]

    target = train_pack.target(cfg.task)
    input_hw = tuple(train_pack.ir.shape[-2:])
    best: tuple[float, int, dict | None] = (-np.inf, 0, None)
    val_history: list[float | None] = []
    loss_history: list[LossReport] = []

    for epoch in range(1, cfg.epochs + 1):
        student.train()
        sums = np.zeros(4)
        n_steps = 0
        for step, idx in enumerate(_batches(len(train_pack), cfg.batch_size, data_rng)):
            # Dense forward carries the task: it matches the inference-time
            # graph, so the decoder never calibrates to masked statistics.
            # The branch-masked forward exists to learn reconstruction.
            masked_feats = None
            if cfg.kd_mode == "comwe":
                masksets = _student_masksets(student, input_hw, cfg, mask_rng)
                masked_feats, _ = student(train_pack.ir[idx], "train_masked", masksets=masksets)
            feats, pred = student(train_pack.ir[idx])

            l_task, _ = task_loss(pred, target[idx], cfg.task)
            l_feat = torch.zeros(())
            l_rec = torch.zeros(())
            if cfg.kd_mode != "none":
                s_bot = masked_feats[-1] if masked_feats is not None else feats[-1]
                l_feat = feat_loss(projections.bottleneck(s_bot), teacher_feats[-1][idx])
            if cfg.kd_mode == "comwe":
                s_levels = [proj(f) for proj, f in zip(projections.rec, masked_feats[1:])]
                t_levels = [teacher_feats[lvl][idx] for lvl in range(1, len(teacher_feats))]
                if cfg.rec_levels == "bottleneck":
                    s_levels, t_levels = s_levels[-1:], t_levels[-1:]
                l_rec = rec_loss(s_levels, t_levels)

            total = (
                l_task
                + cfg.feature_loss_weight * l_feat
                + cfg.reconstruction_loss_weight * l_rec
            )
            _check_finite(total, "distill", epoch, step)
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
            opt.step()

            report = LossReport(
                float(l_task.detach()), float(l_feat.detach()), float(l_rec.detach()),
                float(total.detach()),
            )
            loss_history.append(report)
            sums += (report.task, report.feat, report.rec, report.total)
            n_steps += 1
        sched.step()

        student.eval()
        score = _val_score(lambda idx: student(val_pack.ir[idx])[1], val_pack, cfg.task)
        val_history.append(score)
        if score is not None and score > best[0]:
            best = (score, epoch, state_to_numpy(student))
        if log is not None:
            means = sums / max(n_steps, 1)
            for name, value in zip(("loss_task", "loss_feat", "loss_rec", "loss_total"), means):
                log.append(run_id, "distill", epoch, "train", name, value)
            name = "csi" if cfg.task == "classification" else "neg_rmse"
            log.append(run_id, "distill", epoch, "val", name, score)

    score, best_epoch, params = best
    if params is None:
        params, best_epoch, score = state_to_numpy(student), cfg.epochs, float("-inf")
    header = {
        "kind": "student",
        "task": cfg.task,
        "model": student_cfg.to_dict(),
        "stage": "distill",
        "epoch": best_epoch,
        "seed": cfg.seed,
        "parent": parent,
        "kd_mode": cfg.kd_mode,
    }
    teacher_digest_after = (
        gridio.params_digest(state_to_numpy(teacher)) if teacher is not None else None
    )
    return TrainResult(
        params,
        header,
        best_epoch,
        score,
        val_history,
        loss_history,
        teacher_digest_before=teacher_digest_before,
        teacher_digest_after=teacher_digest_after,
    )
