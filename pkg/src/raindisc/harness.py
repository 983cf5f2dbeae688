"""Experiment orchestration: generate -> train-teacher -> distill -> adapt ->
evaluate -> report, plus the ablation protocols and map rendering.

Run directory layout:
    <out_dir>/<run_id>/{config.json, data/{swath,disc}/, checkpoints/,
                        metrics.csv, report/}
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import gridio, metrics, synthdata
from .config import RunConfig
from .finetune import AdaptConfig, build_adapted_student, train_full_disc
from .models import (
    ModelConfig,
    StudentNet,
    TeacherNet,
    fuse_predictions,
    load_numpy_state,
    target_to_rain,
)
from .training import (
    DistillConfig,
    normalize_ir,
    pack_scenes,
    set_single_thread,
    train_student_distill,
    train_teacher,
)


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Run directory plumbing

def run_dir_for(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / cfg.run_id


def prepare_run_dir(cfg: RunConfig) -> Path:
    if cfg.deterministic:
        set_single_thread()
    run_dir = run_dir_for(cfg)
    for sub in ("data", "checkpoints", "report"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return run_dir


def _metrics_log(run_dir: Path) -> gridio.MetricsLog:
    return gridio.MetricsLog(run_dir / "metrics.csv")


def _checkpoint_path(run_dir: Path, name: str) -> Path:
    return run_dir / "checkpoints" / name


def _load_required_checkpoint(run_dir: Path, name: str, needed_by: str, hint: str):
    path = _checkpoint_path(run_dir, name)
    if not (path / gridio.HEADER_NAME).is_file():
        raise PipelineError(
            f"{needed_by} needs checkpoint {name!r}; run `raindisc {hint}` first"
        )
    params, header = gridio.load_checkpoint(path)
    return params, header, gridio.checkpoint_digest(path)


# ---------------------------------------------------------------------------
# Pipeline commands

def cmd_gen_data(cfg: RunConfig) -> dict[str, str]:
    run_dir = prepare_run_dir(cfg)
    hashes = {}
    for stage, sizes in (("swath", cfg.data.swath_sizes()), ("disc", cfg.data.disc_sizes())):
        _, digest = synthdata.build_dataset(
            run_dir / "data" / stage,
            cfg.data.gen,
            stage,
            sizes,
            seed=cfg.seed,
            band_width=cfg.data.band_width,
            coverage_floor=cfg.data.coverage_floor,
            max_retries=cfg.data.max_retries,
        )
        hashes[stage] = digest
    (run_dir / "data" / "index.json").write_text(
        gridio.canonical_json({"manifest_hashes": hashes, "config_sha256": cfg.digest()})
    )
    return hashes


def _load_pack(run_dir: Path, stage: str, part: str):
    scenes = synthdata.load_split(run_dir / "data" / stage, part)
    if not scenes:
        raise PipelineError(f"no {stage}/{part} scenes found; run `raindisc gen-data` first")
    return pack_scenes(scenes)


def _stage_cfg(cfg: RunConfig, task: str) -> DistillConfig:
    return dataclasses.replace(cfg.distill, task=task, seed=cfg.seed)


def _model_cfg(cfg: RunConfig, task: str) -> ModelConfig:
    return dataclasses.replace(cfg.model, task=task)


def cmd_train_teacher(cfg: RunConfig) -> dict[str, str]:
    run_dir = prepare_run_dir(cfg)
    train_pack = _load_pack(run_dir, "swath", "train")
    val_pack = _load_pack(run_dir, "swath", "val")
    log = _metrics_log(run_dir)
    hashes = {}
    for task in cfg.tasks:
        result = train_teacher(
            train_pack, val_pack, _model_cfg(cfg, task), _stage_cfg(cfg, task), log, cfg.run_id
        )
        hashes[task] = gridio.save_checkpoint(
            result.params, result.header, _checkpoint_path(run_dir, f"teacher_{task}")
        )
    return hashes


def cmd_distill(cfg: RunConfig) -> dict[str, str]:
    run_dir = prepare_run_dir(cfg)
    train_pack = _load_pack(run_dir, "swath", "train")
    val_pack = _load_pack(run_dir, "swath", "val")
    log = _metrics_log(run_dir)
    hashes = {}
    for task in cfg.tasks:
        stage_cfg = _stage_cfg(cfg, task)
        teacher_params = teacher_cfg = parent = None
        if stage_cfg.kd_mode != "none":
            teacher_params, t_header, parent = _load_required_checkpoint(
                run_dir, f"teacher_{task}", "distill", "train-teacher"
            )
            teacher_cfg = ModelConfig(**t_header["model"])
        result = train_student_distill(
            train_pack,
            val_pack,
            teacher_params,
            teacher_cfg,
            _model_cfg(cfg, task),
            stage_cfg,
            log,
            cfg.run_id,
            parent=parent,
        )
        hashes[task] = gridio.save_checkpoint(
            result.params, result.header, _checkpoint_path(run_dir, f"student_{task}")
        )
    return hashes


def cmd_adapt(cfg: RunConfig) -> dict[str, str]:
    run_dir = prepare_run_dir(cfg)
    train_pack = _load_pack(run_dir, "disc", "train")
    val_pack = _load_pack(run_dir, "disc", "val")
    log = _metrics_log(run_dir)
    hashes = {}
    for task in cfg.tasks:
        student_params, s_header, parent = _load_required_checkpoint(
            run_dir, f"student_{task}", "adapt", "distill"
        )
        adapt_cfg = dataclasses.replace(cfg.adapt, task=task, seed=cfg.seed)
        result = train_full_disc(
            train_pack,
            val_pack,
            student_params,
            ModelConfig(**s_header["model"]),
            adapt_cfg,
            log,
            cfg.run_id,
            parent=parent,
        )
        hashes[task] = gridio.save_checkpoint(
            result.params, result.header, _checkpoint_path(run_dir, f"adapted_{task}")
        )
    return hashes


# ---------------------------------------------------------------------------
# Evaluation

def _build_model(params: dict, header: dict):
    model_cfg = ModelConfig(**header["model"])
    if header["kind"] == "teacher":
        model = TeacherNet(model_cfg)
        load_numpy_state(model, params)
    elif header["kind"] == "student":
        model = StudentNet(model_cfg)
        load_numpy_state(model, params)
    elif header["kind"] == "student_adapted":
        model = build_adapted_student(model_cfg, params, header)
    else:
        raise PipelineError(f"unknown checkpoint kind: {header['kind']!r}")
    model.eval()
    return model


class _PooledStats:
    """Pixel-pooled accumulators for the continuous metrics."""

    def __init__(self):
        self.n = 0
        self.sx = self.sy = self.sxx = self.syy = self.sxy = 0.0

    def update(self, pred: np.ndarray, truth: np.ndarray) -> None:
        x = pred.astype(np.float64).ravel()
        y = truth.astype(np.float64).ravel()
        self.n += x.size
        self.sx += x.sum()
        self.sy += y.sum()
        self.sxx += (x * x).sum()
        self.syy += (y * y).sum()
        self.sxy += (x * y).sum()

    def rmse(self) -> float | None:
        if self.n == 0:
            return None
        return float(np.sqrt(max(self.sxx - 2 * self.sxy + self.syy, 0.0) / self.n))

    def cc(self) -> float | None:
        if self.n == 0:
            return None
        vx = self.sxx / self.n - (self.sx / self.n) ** 2
        vy = self.syy / self.n - (self.sy / self.n) ** 2
        if vx < 1e-12 or vy < 1e-12:
            return None
        cov = self.sxy / self.n - (self.sx / self.n) * (self.sy / self.n)
        return float(min(1.0, max(-1.0, cov / np.sqrt(vx * vy))))


def _predict_scene(model, ir_k: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(normalize_ir(ir_k)[None, None].astype(np.float32))
    with torch.no_grad():
        if isinstance(model, TeacherNet):
            raise PipelineError("teacher evaluation needs the multimodal entry point")
        _, pred = model(x)
    return pred.numpy()[0, 0]


def evaluate_models(
    scenes: list[dict],
    cls_model=None,
    reg_model=None,
    threshold: float = metrics.DEFAULT_THRESHOLD,
    neighbor_kernels: tuple[int, ...] = (4, 8),
    noise: tuple[str, float] | None = None,
    noise_seed: int = 0,
) -> dict[str, float | None]:
    """Pooled metric report for IR-only models over a scene list.

    Categorical metrics come from the classification decision (prob >= 0.5);
    RMSE/CC from the fused rates when both models are present.  `noise`
    perturbs the raw IR input before normalization.
    """
    if cls_model is None and reg_model is None:
        raise PipelineError("evaluation needs at least one model")
    counts = metrics.ConfusionCounts(0, 0, 0, 0)
    ncounts = {k: metrics.ConfusionCounts(0, 0, 0, 0) for k in neighbor_kernels}
    pooled = _PooledStats()

    for i, scene in enumerate(scenes):
        ir_k = scene["ir"]
        if noise is not None:
            ir_k = metrics.inject_noise(ir_k, noise[0], noise[1], seed=noise_seed + i)
        truth = scene["precip"]

        prob = _predict_scene(cls_model, ir_k) if cls_model is not None else None
        rates = (
            target_to_rain(_predict_scene(reg_model, ir_k)) if reg_model is not None else None
        )

        rain = prob >= 0.5 if prob is not None else rates >= threshold
        counts = counts + metrics.confusion(rain.astype(np.float64), truth, threshold)
        for k in neighbor_kernels:
            ncounts[k] = ncounts[k] + metrics.neighbor_confusion(
                rain.astype(np.float64), truth, k, threshold
            )
        if rates is not None:
            fused = fuse_predictions(prob, rates) if prob is not None else rates
            pooled.update(fused, truth)

    report: dict[str, float | None] = {
        "pod": metrics.pod(counts),
        "far": metrics.far(counts),
        "csi": metrics.csi(counts),
    }
    for k in neighbor_kernels:
        report[f"csi{k}"] = metrics.csi(ncounts[k])
    report["rmse"] = pooled.rmse()
    report["cc"] = pooled.cc()
    return report


METRIC_ORDER = ("pod", "far", "csi", "csi4", "csi8", "rmse", "cc")


def cmd_evaluate(cfg: RunConfig, stage: str = "adapted", noise_kind: str | None = None) -> dict:
    run_dir = prepare_run_dir(cfg)
    scenes = synthdata.load_split(run_dir / "data" / "disc", "test")
    if not scenes:
        raise PipelineError("no disc/test scenes found; run `raindisc gen-data` first")

    models = {}
    digests = {}
    hint = {"adapted": "adapt", "student": "distill"}.get(stage, "adapt")
    for task in cfg.tasks:
        params, header, digest = _load_required_checkpoint(
            run_dir, f"{stage}_{task}", "evaluate", hint
        )
        models[task] = _build_model(params, header)
        digests[f"{stage}_{task}"] = digest

    noise = None
    if noise_kind == "additive":
        noise = ("additive", cfg.evaluation.noise_additive_sigma)
    elif noise_kind == "multiplicative":
        noise = ("multiplicative", cfg.evaluation.noise_multiplicative_sigma)
    elif noise_kind not in (None, "none"):
        raise PipelineError(f"unknown noise kind: {noise_kind!r}")

    report = evaluate_models(
        scenes,
        cls_model=models.get("classification"),
        reg_model=models.get("regression"),
        threshold=cfg.evaluation.rain_threshold,
        neighbor_kernels=tuple(cfg.evaluation.neighbor_kernels),
        noise=noise,
        noise_seed=cfg.seed,
    )

    log = _metrics_log(run_dir)
    label = "test" if noise is None else f"test+{noise_kind}"
    for name in METRIC_ORDER:
        if name in report:
            log.append(cfg.run_id, "evaluate", 0, label, name, report[name])

    payload = {
        "metrics": {k: report[k] for k in METRIC_ORDER if k in report},
        "split": label,
        "provenance": {
            "config_sha256": cfg.digest(),
            "checkpoints": digests,
            "dataset_index": json.loads((run_dir / "data" / "index.json").read_text())
            if (run_dir / "data" / "index.json").is_file()
            else None,
        },
    }
    out = run_dir / "report" / f"evaluation_{label.replace('+', '_')}.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True))

    if cfg.evaluation.render_maps and noise is None and models.get("classification") is not None:
        scene = scenes[0]
        preds = {}
        prob = _predict_scene(models["classification"], scene["ir"])
        if models.get("regression") is not None:
            rates = target_to_rain(_predict_scene(models["regression"], scene["ir"]))
            preds["retrieval"] = fuse_predictions(prob, rates)
        else:
            preds["rain_probability"] = prob
        render_maps(scene["precip"], preds, run_dir / "report", prefix="maps")
    return payload


def cmd_report(cfg: RunConfig) -> Path:
    run_dir = prepare_run_dir(cfg)
    rows = []
    mpath = run_dir / "metrics.csv"
    if mpath.is_file():
        rows = gridio.MetricsLog.read(mpath)
    eval_rows = [r for r in rows if r["stage"] == "evaluate"]

    lines = ["split".ljust(22) + "".join(m.ljust(10) for m in METRIC_ORDER)]
    by_split: dict[str, dict[str, float]] = {}
    for r in eval_rows:
        by_split.setdefault(r["split"], {})[r["metric"]] = r["value"]
    for split, vals in sorted(by_split.items()):
        cells = "".join(
            (f"{vals[m]:.4f}" if m in vals and np.isfinite(vals[m]) else "nan").ljust(10)
            for m in METRIC_ORDER
        )
        lines.append(split.ljust(22) + cells)

    provenance = {
        "config_sha256": cfg.digest(),
        "metric_rows": len(rows),
        "checkpoints": {
            p.name: gridio.checkpoint_digest(p)
            for p in sorted((run_dir / "checkpoints").glob("*"))
            if (p / gridio.HEADER_NAME).is_file()
        },
    }
    out = run_dir / "report" / "summary.txt"
    out.write_text("\n".join(lines) + "\n")
    (run_dir / "report" / "summary.json").write_text(
        json.dumps({"table": by_split, "provenance": provenance}, indent=2, sort_keys=True)
    )
    return out


# ---------------------------------------------------------------------------
# Map rendering

def render_maps(
    truth: np.ndarray,
    predictions: dict[str, np.ndarray],
    out_dir: str | Path,
    prefix: str = "maps",
    dpi: int = 100,
) -> list[Path]:
    """One raster panel per field (truth first), sharing one color scale."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panels = {"truth": truth, **predictions}
    for name, grid in panels.items():
        if grid.shape != truth.shape:
            raise ValueError(f"panel {name!r} shape differs from truth")
    vmax = max(float(np.max(g)) for g in panels.values())
    if vmax <= 0:
        vmax = 1.0

    paths = []
    for name, grid in panels.items():
        fig, ax = plt.subplots(figsize=(4, 4), dpi=dpi)
        im = ax.imshow(grid, vmin=0.0, vmax=vmax, cmap="turbo")
        ax.set_title(name)
        ax.set_axis_off()
        fig.colorbar(im, ax=ax, fraction=0.046)
        path = out_dir / f"{prefix}_{name}.png"
        fig.savefig(path, bbox_inches=None)
        plt.close(fig)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Ablation protocols

PROTOCOLS = ("block-components", "distill-modes", "adapt-modes", "modality", "noise")

MODALITY_CELLS = {
    "ir": ("ir",),
    "pmw": ("pmw",),
    "pr": ("pr",),
    "ir+pmw": ("ir", "pmw"),
    "ir+pr": ("ir", "pr"),
    "pmw+pr": ("pmw", "pr"),
    "ir+pmw+pr": ("ir", "pmw", "pr"),
}

BLOCK_COMPONENT_CELLS = {
    "neither": {"kd_mode": "none", "use_wavelet_prompt": False},
    "masked_recon": {"kd_mode": "comwe", "use_wavelet_prompt": False},
    "wavelet_prompt": {"kd_mode": "vanilla_kd", "use_wavelet_prompt": True},
    "both": {"kd_mode": "comwe", "use_wavelet_prompt": True},
}

ADAPT_CELLS = ("scratch", "kd+non", "comwe+non", "comwe+rand", "comwe+self")


def _median_report(per_seed: list[dict[str, float | None]]) -> dict[str, float | None]:
    merged: dict[str, float | None] = {}
    keys = {k for rep in per_seed for k in rep}
    for k in sorted(keys):
        vals = [rep[k] for rep in per_seed if rep.get(k) is not None]
        merged[k] = float(np.median(vals)) if vals else None
    return merged


def _train_teacher_for(cfg: RunConfig, swath_packs, seed: int, modalities) -> dict:
    stage_cfg = dataclasses.replace(
        cfg.distill, task="classification", seed=seed, modalities=tuple(modalities)
    )
    return train_teacher(
        swath_packs["train"], swath_packs["val"], _model_cfg(cfg, "classification"), stage_cfg
    )


def _eval_student(params, model_cfg: ModelConfig, scenes, cfg: RunConfig, adapted_header=None):
    if adapted_header is not None:
        model = build_adapted_student(model_cfg, params, adapted_header)
    else:
        model = StudentNet(model_cfg)
        load_numpy_state(model, params)
        model.eval()
    return evaluate_models(
        scenes,
        cls_model=model,
        threshold=cfg.evaluation.rain_threshold,
        neighbor_kernels=tuple(cfg.evaluation.neighbor_kernels),
    )


def _eval_teacher(result, cfg: RunConfig, scenes: list[dict], modalities) -> dict:
    model = TeacherNet(ModelConfig(**result.header["model"]))
    load_numpy_state(model, result.params)
    model.eval()
    counts = metrics.ConfusionCounts(0, 0, 0, 0)
    ncounts = {k: metrics.ConfusionCounts(0, 0, 0, 0) for k in cfg.evaluation.neighbor_kernels}
    pack = pack_scenes(scenes)
    from .training import _teacher_inputs

    with torch.no_grad():
        for i in range(0, len(pack), 8):
            idx = np.arange(i, min(i + 8, len(pack)))
            ir, pmw, pr, geo = _teacher_inputs(pack, idx, tuple(modalities))
            _, pred = model(ir, pmw, pr, geo)
            for row, j in enumerate(idx):
                rain = (pred.numpy()[row, 0] >= 0.5).astype(np.float64)
                truth = pack.precip[j]
                counts = counts + metrics.confusion(rain, truth, cfg.evaluation.rain_threshold)
                for k in ncounts:
                    ncounts[k] = ncounts[k] + metrics.neighbor_confusion(
                        rain, truth, k, cfg.evaluation.rain_threshold
                    )
    report = {
        "pod": metrics.pod(counts),
        "far": metrics.far(counts),
        "csi": metrics.csi(counts),
    }
    for k, c in ncounts.items():
        report[f"csi{k}"] = metrics.csi(c)
    return report


def run_ablation(protocol: str, cfg: RunConfig, seeds: tuple[int, ...] = (0, 1, 2)) -> dict:
    """Run one protocol over the given seeds; returns and writes a report."""
    if protocol not in PROTOCOLS:
        raise PipelineError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    run_dir = prepare_run_dir(cfg)
    if not (run_dir / "data" / "swath" / "manifest.json").is_file():
        raise PipelineError("ablation needs generated data; run `raindisc gen-data` first")

    swath_packs = {part: _load_pack(run_dir, "swath", part) for part in ("train", "val")}
    swath_test = synthdata.load_split(run_dir / "data" / "swath", "test")
    cells: dict[str, list[dict]] = {}

    if protocol == "modality":
        for name, modalities in MODALITY_CELLS.items():
            per_seed = []
            for seed in seeds:
                result = _train_teacher_for(cfg, swath_packs, seed, modalities)
                per_seed.append(_eval_teacher(result, cfg, swath_test, modalities))
            cells[name] = per_seed

    elif protocol in ("block-components", "distill-modes"):
        if protocol == "distill-modes":
            grid = {m: {"kd_mode": m, "use_wavelet_prompt": True} for m in ("none", "vanilla_kd", "comwe")}
        else:
            grid = BLOCK_COMPONENT_CELLS
        teachers = {seed: _train_teacher_for(cfg, swath_packs, seed, ("ir", "pmw", "pr")) for seed in seeds}
        for name, options in grid.items():
            per_seed = []
            for seed in seeds:
                model_cfg = dataclasses.replace(
                    _model_cfg(cfg, "classification"),
                    use_wavelet_prompt=options["use_wavelet_prompt"],
                )
                stage_cfg = dataclasses.replace(
                    cfg.distill, task="classification", seed=seed, kd_mode=options["kd_mode"]
                )
                teacher = teachers[seed]
                result = train_student_distill(
                    swath_packs["train"],
                    swath_packs["val"],
                    teacher.params if options["kd_mode"] != "none" else None,
                    ModelConfig(**teacher.header["model"]) if options["kd_mode"] != "none" else None,
                    model_cfg,
                    stage_cfg,
                )
                per_seed.append(_eval_student(result.params, model_cfg, swath_test, cfg))
            cells[name] = per_seed

    elif protocol == "adapt-modes":
        disc_packs = {part: _load_pack(run_dir, "disc", part) for part in ("train", "val")}
        disc_test = synthdata.load_split(run_dir / "data" / "disc", "test")
        teachers = {seed: _train_teacher_for(cfg, swath_packs, seed, ("ir", "pmw", "pr")) for seed in seeds}
        model_cfg = _model_cfg(cfg, "classification")
        students: dict[tuple[int, str], dict] = {}
        for seed in seeds:
            for kd_mode in ("vanilla_kd", "comwe"):
                teacher = teachers[seed]
                stage_cfg = dataclasses.replace(
                    cfg.distill, task="classification", seed=seed, kd_mode=kd_mode
                )
                students[(seed, kd_mode)] = train_student_distill(
                    swath_packs["train"],
                    swath_packs["val"],
                    teacher.params,
                    ModelConfig(**teacher.header["model"]),
                    model_cfg,
                    stage_cfg,
                )
        for name in ADAPT_CELLS:
            per_seed = []
            for seed in seeds:
                if name == "scratch":
                    stage_cfg = dataclasses.replace(
                        cfg.distill,
                        task="classification",
                        seed=seed,
                        kd_mode="none",
                        epochs=cfg.adapt.epochs,
                    )
                    result = train_student_distill(
                        disc_packs["train"], disc_packs["val"], None, None, model_cfg, stage_cfg
                    )
                    per_seed.append(_eval_student(result.params, model_cfg, disc_test, cfg))
                    continue
                kd_mode, tune_mode = name.split("+")
                kd_mode = "vanilla_kd" if kd_mode == "kd" else "comwe"
                student = students[(seed, kd_mode)]
                adapt_cfg = dataclasses.replace(
                    cfg.adapt, task="classification", seed=seed, tune_mode=tune_mode
                )
                result = train_full_disc(
                    disc_packs["train"],
                    disc_packs["val"],
                    student.params,
                    model_cfg,
                    adapt_cfg,
                )
                per_seed.append(
                    _eval_student(result.params, model_cfg, disc_test, cfg, result.header)
                )
            cells[name] = per_seed

    elif protocol == "noise":
        scenes = synthdata.load_split(run_dir / "data" / "disc", "test")
        params, header, _ = _load_required_checkpoint(
            run_dir, "adapted_classification", "noise ablation", "adapt"
        )
        model = _build_model(params, header)
        for name, noise in (
            ("clean", None),
            ("additive", ("additive", cfg.evaluation.noise_additive_sigma)),
            ("multiplicative", ("multiplicative", cfg.evaluation.noise_multiplicative_sigma)),
        ):
            cells[name] = [
                evaluate_models(
                    scenes,
                    cls_model=model,
                    threshold=cfg.evaluation.rain_threshold,
                    neighbor_kernels=tuple(cfg.evaluation.neighbor_kernels),
                    noise=noise,
                    noise_seed=cfg.seed,
                )
            ]

    report = {
        "protocol": protocol,
        "seeds": list(seeds),
        "cells": {
            name: {"per_seed": per_seed, "median": _median_report(per_seed)}
            for name, per_seed in cells.items()
        },
        "provenance": {"config_sha256": cfg.digest()},
    }
    out = run_dir / "report" / f"ablation_{protocol}.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True))

    lines = ["cell".ljust(16) + "".join(m.ljust(10) for m in METRIC_ORDER)]
    for name, data in report["cells"].items():
        med = data["median"]
        cells_txt = "".join(
            (f"{med[m]:.4f}" if med.get(m) is not None else "nan").ljust(10)
            for m in METRIC_ORDER
        )
        lines.append(name.ljust(16) + cells_txt)
    (run_dir / "report" / f"ablation_{protocol}.txt").write_text("\n".join(lines) + "\n")
    return report
