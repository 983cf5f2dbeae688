"""Seeded synthetic multimodal precipitation scenes.

Mimics the observing geometry the pipeline targets: a smooth right-skewed
rain-rate truth; an infrared brightness-temperature proxy that correlates
only weakly with surface rain (wide blur, cirrus-like contamination patches,
instrument noise); radar/microwave proxies that correlate strongly but are
only valid inside a narrow near-vertical swath band; and static geographic
channels.  Everything is a pure function of (seed, params).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import norm

from . import gridio

RAIN_THRESHOLD = 0.1        # mm/hr rain / no-rain convention
IR_BASE_K = 280.0           # clear-sky brightness temperature of the proxy
IR_SPAN_K = 25.0            # Kelvin per unit of (standardized) cloud signal

_INTENSITY_SCALE = 0.5      # mm/hr scale of the exponential intensity map
_INTENSITY_GAIN = 1.25
_PMW_FOOTPRINT_SIGMA = 1.5  # px; coarse microwave footprint
_IR_BLUR_SIGMA = 3.0        # px; cloud tops are smoother than surface rain
_CIRRUS_AMPLITUDE = 2.5     # sheet cores read as cold as strong rain cores
_CIRRUS_CORR_FACTOR = 3.0   # cirrus sheets are larger-scale than rain cells
_TEXTURE_SIGMA = 1.2        # px; convective cloud-top texture scale
_TEXTURE_AMPLITUDE = 1.0
_CLUTTER_SIGMA_FACTOR = 0.75  # clutter scale relative to the rain field
_MAX_SWATH_TILT = math.radians(30.0)   # from vertical

MIN_GRID_SIZE = 16


class SizingError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class GenParams:
    field_correlation_length: float = 8.0
    rain_coverage_target: float = 0.3
    ir_noise_sigma: float = 0.3
    cirrus_contamination_rate: float = 0.1
    ir_gain_drift: float = 0.15          # per-scene calibration gain jitter
    ir_offset_drift_k: float = 4.0       # per-scene calibration offset, Kelvin
    pmw_corr_target: float = 0.8
    pr_corr_target: float = 0.9
    ir_corr_target: float = 0.4
    grid_size: int = 256

    def validate(self) -> None:
        if not 0.0 < self.rain_coverage_target < 1.0:
            raise ValueError(f"rain_coverage_target must be in (0,1): {self.rain_coverage_target}")
        for name in ("pmw_corr_target", "pr_corr_target", "ir_corr_target"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0,1]: {v}")
        if not self.ir_corr_target < self.pmw_corr_target <= self.pr_corr_target:
            raise ValueError("correlation targets must order ir < pmw <= pr")
        if self.field_correlation_length <= 0:
            raise ValueError("field_correlation_length must be positive")
        if self.ir_noise_sigma < 0 or not 0.0 <= self.cirrus_contamination_rate < 1.0:
            raise ValueError("invalid noise/contamination settings")
        if not 0.0 <= self.ir_gain_drift < 1.0 or self.ir_offset_drift_k < 0:
            raise ValueError("invalid calibration drift settings")
        if self.grid_size < MIN_GRID_SIZE:
            raise SizingError(f"grid_size must be >= {MIN_GRID_SIZE}, got {self.grid_size}")


@dataclass
class PrecipGrid:
    values: np.ndarray          # (H, W) mm/hr

    def validate(self) -> None:
        v = self.values
        if v.ndim != 2 or not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("precip grid must be 2D, finite and non-negative")


@dataclass
class ModalityGrid:
    values: np.ndarray
    modality: str               # "IR" | "PMW" | "PR"
    validity: np.ndarray        # binary; all-ones until assembled into a Scene

    def validate(self) -> None:
        if self.values.shape != self.validity.shape:
            raise ValueError("values and validity shapes differ")
        if not np.all(np.isfinite(self.values[self.validity > 0])):
            raise ValueError(f"{self.modality}: non-finite values inside validity")


@dataclass
class SwathMask:
    values: np.ndarray          # (H, W) in {0, 1}
    band_width: int
    col_offsets: np.ndarray = field(default=None, repr=False)  # per-row left crop column

    def validate(self) -> None:
        if not np.all(np.isin(self.values, (0.0, 1.0))):
            raise ValueError("swath mask must be binary")


@dataclass
class Scene:
    precip: PrecipGrid
    ir: ModalityGrid
    pmw: ModalityGrid
    pr: ModalityGrid
    geo: np.ndarray             # (3, H, W): elevation proxy, latitude, longitude
    swath: SwathMask
    seed: int
    scene_id: str

    def validate(self) -> None:
        self.precip.validate()
        shape = self.precip.values.shape
        for m in (self.ir, self.pmw, self.pr):
            m.validate()
            if m.values.shape != shape:
                raise ValueError("modality grid shape mismatch")
        if self.geo.shape != (3, *shape) or self.swath.values.shape != shape:
            raise ValueError("geo/swath shape mismatch")
        if not np.array_equal(self.ir.validity, np.ones(shape, dtype=np.float32)):
            raise ValueError("IR validity must be all-ones")
        for m in (self.pmw, self.pr):
            if not np.array_equal(m.validity, self.swath.values):
                raise ValueError(f"{m.modality} validity must equal the swath mask")


def _standardize(x: np.ndarray) -> np.ndarray:
    s = x.std()
    if s < 1e-12:
        return np.zeros_like(x)
    return (x - x.mean()) / s


def _grf(rng: np.random.Generator, size: int, corr_len: float) -> np.ndarray:
    """Standardized Gaussian random field with ~corr_len spatial correlation."""
    white = rng.standard_normal((size, size))
    return _standardize(gaussian_filter(white, sigma=corr_len, mode="wrap"))


def _subseeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(count, dtype=np.uint64)]


def gen_precip_field(seed: int, params: GenParams) -> PrecipGrid:
    """Spatially correlated, right-skewed rain field; deterministic in seed.

    A standardized Gaussian field is thresholded at the normal quantile that
    leaves `rain_coverage_target` of pixels above RAIN_THRESHOLD, and the
    exceedances pass through a continuous exponential intensity map.
    """
    params.validate()
    rng = np.random.default_rng(int(seed))
    z = _grf(rng, params.grid_size, params.field_correlation_length)

    thr = norm.ppf(1.0 - params.rain_coverage_target)
    # zero-rain point placed so rain(thr) == RAIN_THRESHOLD exactly
    z0 = thr - math.log1p(RAIN_THRESHOLD / _INTENSITY_SCALE) / _INTENSITY_GAIN
    rain = np.where(z > z0, _INTENSITY_SCALE * np.expm1(_INTENSITY_GAIN * (z - z0)), 0.0)
    grid = PrecipGrid(rain.astype(np.float32))
    grid.validate()
    return grid


def _corr(x: np.ndarray, y: np.ndarray) -> float:
    sx, sy = x.std(), y.std()
    if sx < 1e-12 or sy < 1e-12:
        return 0.0
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def _topup_sigma(signal: np.ndarray, precip: np.ndarray, target: float) -> float:
    """Additive-noise sigma bringing |corr(signal, precip)| down to target."""
    r_now = abs(_corr(signal, precip))
    if r_now <= target or r_now == 0.0:
        return 0.0
    var = float(signal.var())
    return math.sqrt(var * ((r_now / target) ** 2 - 1.0))


def derive_modalities(
    precip: PrecipGrid, params: GenParams, seed: int
) -> tuple[ModalityGrid, ModalityGrid, ModalityGrid]:
    """Derive IR/PMW/PR proxies from a rain field; deterministic in seed.

    PR is an affine map of the (standardized) rain field plus noise sized by
    `pr_corr_target`; PMW adds a footprint blur; IR is a wide blur plus
    cirrus contamination and noise, expressed as brightness temperature in K
    (colder = rainier, so it anti-correlates by sign convention).  The
    correlation targets refer to |Pearson| against the rain field; noise is
    topped up per scene to land on them.
    """
    precip.validate()
    params.validate()
    p = precip.values.astype(np.float64)
    zp = _standardize(p)
    rng = np.random.default_rng(int(seed))
    ones = np.ones_like(p, dtype=np.float32)

    # PR: sharp, strongly correlated
    e_pr = rng.standard_normal(p.shape)
    sigma_pr = math.sqrt(max(1.0 / params.pr_corr_target**2 - 1.0, 0.0)) if zp.any() else 0.0
    pr = zp + sigma_pr * e_pr

    # PMW: footprint-blurred, then noise-topped to its target
    base_pmw = gaussian_filter(zp, sigma=_PMW_FOOTPRINT_SIGMA, mode="wrap")
    e_pmw = rng.standard_normal(p.shape)
    pmw = base_pmw + _topup_sigma(base_pmw, p, params.pmw_corr_target) * e_pmw

    # IR: cold tops over rain carry fine convective texture; non-precipitating
    # cirrus sheets are larger-scale and smooth and overlay via max (the
    # imager sees the highest cloud top).  The correlation target is reached
    # with mid-scale atmospheric clutter so it cannot be removed by local
    # averaging, plus white instrument noise.
    sig = gaussian_filter(zp, sigma=_IR_BLUR_SIGMA, mode="wrap")
    if sig.std() > 1e-12:
        sig = _standardize(sig)
    texture = _grf(rng, params.grid_size, _TEXTURE_SIGMA)
    rain_weight = np.clip(sig, 0.0, 2.0) / 2.0
    sig = sig + _TEXTURE_AMPLITUDE * texture * rain_weight
    cloud = _grf(rng, params.grid_size, params.field_correlation_length * _CIRRUS_CORR_FACTOR)
    if params.cirrus_contamination_rate > 0:
        cut = np.quantile(cloud, 1.0 - params.cirrus_contamination_rate)
        bumps = np.maximum(cloud - cut, 0.0)
        peak = bumps.max()
        if peak > 0:
            sig = np.maximum(sig, _CIRRUS_AMPLITUDE * bumps / peak)
    raw = sig + params.ir_noise_sigma * rng.standard_normal(p.shape)
    clutter = _grf(rng, params.grid_size, params.field_correlation_length * _CLUTTER_SIGMA_FACTOR)
    raw = raw + _topup_sigma(raw, p, params.ir_corr_target) * clutter
    ir_k = IR_BASE_K - IR_SPAN_K * raw
    # per-scene calibration drift; affine, so Pearson targets are untouched
    gain = 1.0 + rng.uniform(-params.ir_gain_drift, params.ir_gain_drift)
    offset = rng.uniform(-params.ir_offset_drift_k, params.ir_offset_drift_k)
    ir_k = gain * (ir_k - IR_BASE_K) + IR_BASE_K + offset

    ir = ModalityGrid(ir_k.astype(np.float32), "IR", ones.copy())
    pmw_g = ModalityGrid(pmw.astype(np.float32), "PMW", ones.copy())
    pr_g = ModalityGrid(pr.astype(np.float32), "PR", ones.copy())
    for g in (ir, pmw_g, pr_g):
        g.validate()
    return ir, pmw_g, pr_g


def gen_swath(seed: int, grid_size: int, band_width: int) -> SwathMask:
    """Near-vertical tilted band of the given perpendicular width.

    The center line is tilted up to 30 degrees from vertical and offset so a
    `grid_size x band_width` along-track crop always fits inside the grid.
    A band at least as wide as the grid covers it fully.
    """
    if band_width <= 0 or band_width > grid_size:
        raise SizingError(f"band_width must be in (0, {grid_size}], got {band_width}")
    rng = np.random.default_rng(int(seed))
    h = w = grid_size

    if band_width == grid_size:
        values = np.ones((h, w), dtype=np.float32)
        return SwathMask(values, band_width, np.zeros(h, dtype=np.int64))

    theta = rng.uniform(-_MAX_SWATH_TILT, _MAX_SWATH_TILT)
    half = band_width / 2.0
    # feasible center-column interval so every per-row crop window stays inside
    margin = half + 1.0 + math.tan(abs(theta)) * (h / 2.0)
    lo, hi = margin, w - 1.0 - margin
    if lo > hi:
        lo = hi = w / 2.0
    x0 = rng.uniform(lo, hi)

    rows = np.arange(h)
    center = x0 + math.tan(theta) * (rows - h / 2.0)
    cols = np.arange(w)
    dist = np.abs(cols[None, :] - center[:, None]) * math.cos(theta)
    values = (dist <= half).astype(np.float32)

    offsets = np.clip(np.round(center).astype(np.int64) - band_width // 2, 0, w - band_width)
    mask = SwathMask(values, band_width, offsets)
    mask.validate()
    return mask


def make_scene(seed: int, params: GenParams, band_width: int = 49, scene_id: str = "") -> Scene:
    """Assemble one full scene from independent sub-streams of `seed`."""
    s_precip, s_mod, s_swath, s_geo = _subseeds(seed, 4)
    precip = gen_precip_field(s_precip, params)
    ir, pmw, pr = derive_modalities(precip, params, s_mod)
    swath = gen_swath(s_swath, params.grid_size, band_width)
    pmw.validity = swath.values.copy()
    pr.validity = swath.values.copy()

    g = params.grid_size
    rng = np.random.default_rng(s_geo)
    elevation = _grf(rng, g, params.field_correlation_length * 2.0).astype(np.float32)
    lat = np.repeat(np.linspace(0.0, 1.0, g, dtype=np.float32)[:, None], g, axis=1)
    lon = np.repeat(np.linspace(0.0, 1.0, g, dtype=np.float32)[None, :], g, axis=0)
    geo = np.stack([elevation, lat, lon])

    scene = Scene(precip, ir, pmw, pr, geo, swath, int(seed), scene_id or f"scene_{seed}")
    scene.validate()
    return scene


def swath_crop(grid: np.ndarray, swath: SwathMask) -> np.ndarray:
    """Along-track view: per row, the band_width columns under the swath band."""
    w = swath.band_width
    rows = np.arange(grid.shape[-2])[:, None]
    cols = swath.col_offsets[:, None] + np.arange(w)[None, :]
    return grid[..., rows, cols]


def rain_coverage(values: np.ndarray, threshold: float = RAIN_THRESHOLD) -> float:
    return float(np.mean(values >= threshold))


# ---------------------------------------------------------------------------
# Dataset assembly

_STAGE_CODES = {"swath": 1, "disc": 2}
_PART_CODES = {"train": 1, "val": 2, "test": 3}

_UNITS = {
    "precip": "mm/hr",
    "ir": "K",
    "pmw": "1",
    "pr": "1",
    "elevation": "1",
    "latitude": "1",
    "longitude": "1",
    "swath": "1",
}


def _scene_variables(scene: Scene, stage: str) -> dict[str, np.ndarray]:
    if stage == "swath":
        crop = lambda a: swath_crop(a, scene.swath)
        return {
            "precip": crop(scene.precip.values),
            "ir": crop(scene.ir.values),
            "pmw": crop(scene.pmw.values),
            "pr": crop(scene.pr.values),
            "elevation": crop(scene.geo[0]),
            "latitude": crop(scene.geo[1]),
            "longitude": crop(scene.geo[2]),
        }
    return {"precip": scene.precip.values, "ir": scene.ir.values}


def build_dataset(
    out_dir: str | Path,
    params: GenParams,
    stage: str,
    sizes: dict[str, int],
    seed: int,
    band_width: int = 49,
    coverage_floor: float = 0.05,
    max_retries: int = 20,
) -> tuple[dict, str]:
    """Generate one split ("swath" or "disc"), write it, return (manifest, hash).

    Scenes whose relevant view holds less than `coverage_floor` rainy pixels
    are rejected and regenerated from the next attempt sub-seed.
    """
    if stage not in _STAGE_CODES:
        raise ValueError(f"unknown stage: {stage!r}")
    params.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for part in ("train", "val", "test"):
        for i in range(int(sizes.get(part, 0))):
            scene = None
            for attempt in range(max_retries):
                entropy = [int(seed), _STAGE_CODES[stage], _PART_CODES[part], i, attempt]
                scene_seed = int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])
                cand = make_scene(scene_seed, params, band_width, f"{stage}_{part}_{i:04d}")
                variables = _scene_variables(cand, stage)
                coverage = rain_coverage(variables["precip"])
                if coverage >= coverage_floor:
                    scene = cand
                    break
            if scene is None:
                raise GenerationError(
                    f"no scene with rain coverage >= {coverage_floor} in "
                    f"{max_retries} attempts ({stage}/{part}/{i})"
                )
            rel = f"{part}/{scene.scene_id}"
            meta = {
                "scene_id": scene.scene_id,
                "seed": scene.seed,
                "stage": stage,
                "part": part,
                "band_width": band_width,
                "rain_coverage": coverage,
            }
            if stage == "swath":
                meta["col_offsets"] = [int(c) for c in scene.swath.col_offsets]
            digest = gridio.write_gridpack(variables, meta, out_dir / rel, units=_UNITS)
            entries.append(
                {
                    "id": scene.scene_id,
                    "part": part,
                    "path": rel,
                    "sha256": digest,
                    "rain_coverage": coverage,
                }
            )

    manifest = {
        "schema_version": gridio.SCHEMA_VERSION,
        "stage": stage,
        "seed": int(seed),
        "band_width": band_width,
        "coverage_floor": coverage_floor,
        "gen_params": asdict(params),
        "scenes": entries,
    }
    blob = gridio.canonical_json(manifest).encode()
    (out_dir / "manifest.json").write_bytes(blob)
    return manifest, gridio.sha256_hex(blob)


def load_split(data_dir: str | Path, part: str) -> list[dict]:
    """Load every scene of one part; returns dicts of arrays plus 'meta'."""
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_bytes())
    scenes = []
    for entry in manifest["scenes"]:
        if entry["part"] != part:
            continue
        grids, meta = gridio.read_gridpack(data_dir / entry["path"])
        record = dict(grids)
        record["meta"] = meta
        scenes.append(record)
    return scenes
