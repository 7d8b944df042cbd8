"""Synthetic bimodal perfusion videos with exact ground truth.

Contrast frames are painted region by region from gamma-variate wash-in
curves; a bounded multiplicative speckle field decorrelates adjacent frames
in proportion to the relative intensity change, so structural-similarity
dips land at enhancement onsets the way they do in real contrast studies.
Gray-scale frames carry a static per-tissue texture. Every case ships with
its analytic ground truth (per-region onsets, start/peak of the mean curve,
class label), which downstream stages use as their oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (FrameCountError, GeometryError, ManifestError,
                     ParameterError)
from .ticselect import (DEFAULT_GRADIENT_THRESHOLD, DEFAULT_SG_ORDER,
                        DEFAULT_SG_WINDOW, TimeIntensityCurve, find_tts_ttp,
                        sg_smooth)
from .video import BimodalVideo

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
REQUIRED_TAGS = ("wall", "lesion", "parenchyma")

# Speckle model: multiplicative factor (1 + s * p) where p is a zero-mean
# bounded pattern refreshed pixel-wise between frames at a rate tied to the
# local relative intensity change. Re-centering the painted values per region
# keeps the frame-mean curve exactly on the analytic curve. The pattern is
# bounded (|p| < ~2.1), so region intensities must stay below 255 / (1 + 2.1 s)
# for the mean to survive clipping.
SPECKLE_STRENGTH = 0.35
SPECKLE_REFRESH_RATE = 10.0
MOTION_PERIOD = 24  # frames per respiratory cycle

# Static gray-scale texture statistics per tissue tag: (mean, std).
GSUS_TEXTURE = {
    "background": (36.0, 8.0),
    "wall": (190.0, 14.0),
    "lesion": (64.0, 30.0),
    "parenchyma": (128.0, 10.0),
}


@dataclass(frozen=True)
class GammaVariateParams:
    """Peak-normalized gamma-variate wash-in curve parameters.

    onset: first frame with any enhancement; amplitude: added intensity at the
    peak; alpha/beta: shape and rate (peak lag is alpha / beta frames);
    baseline: constant pre-onset intensity.
    """

    onset: float
    amplitude: float
    alpha: float
    beta: float
    baseline: float

    def __post_init__(self):
        if self.amplitude < 0:
            raise ParameterError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ParameterError(
                f"shape and rate must be positive, got alpha={self.alpha}, beta={self.beta}")
        if not 0 <= self.baseline <= 255:
            raise ParameterError(f"baseline must be in [0, 255], got {self.baseline}")


@dataclass(frozen=True)
class RegionSpec:
    """One tissue region: a rectangle or ellipse plus its wash-in curve.

    Rect geometry is (x, y, w, h); ellipse geometry is (cx, cy, rx, ry),
    all in pixels. ``onset_spread`` staggers per-pixel arrival times linearly
    with distance from the region center (0 = every pixel enhances at once);
    real perfusion reaches a feeding point first, and without a gradient the
    notion of an earliest-enhanced position inside a tissue is degenerate.
    """

    tissue_tag: str
    kind: str
    geometry: tuple
    tic: GammaVariateParams
    onset_spread: float = 0.0

    def __post_init__(self):
        if self.kind not in ("rect", "ellipse"):
            raise GeometryError(f"unknown region kind {self.kind!r}")
        if len(self.geometry) != 4:
            raise GeometryError(f"geometry needs 4 numbers, got {self.geometry}")
        if self.onset_spread < 0:
            raise ParameterError("onset_spread must be >= 0")

    def mask(self, height: int, width: int) -> np.ndarray:
        if self.kind == "rect":
            x, y, w, h = self.geometry
            if x < 0 or y < 0 or x + w > width or y + h > height or w <= 0 or h <= 0:
                raise GeometryError(f"rect {self.geometry} does not fit a {height}x{width} frame")
            m = np.zeros((height, width), dtype=bool)
            m[int(y):int(y + h), int(x):int(x + w)] = True
            return m
        cx, cy, rx, ry = self.geometry
        if rx <= 0 or ry <= 0 or cx - rx < 0 or cx + rx > width or cy - ry < 0 or cy + ry > height:
            raise GeometryError(f"ellipse {self.geometry} does not fit a {height}x{width} frame")
        yy, xx = np.ogrid[:height, :width]
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


@dataclass(frozen=True)
class SynthSpec:
    """Everything needed to render one case deterministically."""

    frame_count: int
    regions: tuple
    frame_height: int = 896
    frame_width: int = 704
    noise_sigma: float = 0.0
    motion_amplitude: float = 0.0
    class_label: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.frame_count < 1:
            raise ParameterError("frame_count must be >= 1")
        if self.noise_sigma < 0 or self.motion_amplitude < 0:
            raise ParameterError("noise_sigma and motion_amplitude must be >= 0")
        if self.class_label not in (0, 1):
            raise ParameterError(f"class_label must be 0 or 1, got {self.class_label}")
        object.__setattr__(self, "regions", tuple(self.regions))
        tags = {r.tissue_tag for r in self.regions}
        missing = set(REQUIRED_TAGS) - tags
        if missing:
            raise GeometryError(f"regions must cover tags {REQUIRED_TAGS}, missing {sorted(missing)}")
        for r in self.regions:
            if not 0 <= r.tic.onset < self.frame_count:
                raise ParameterError(
                    f"onset {r.tic.onset} outside [0, {self.frame_count}) for {r.tissue_tag}")


@dataclass(frozen=True)
class GroundTruth:
    """Analytic truth for one case: per-region onsets and mean-curve events."""

    onsets: tuple
    tts: int
    ttp: int
    class_label: int

    def __post_init__(self):
        object.__setattr__(self, "onsets", tuple(float(v) for v in self.onsets))
        if not self.tts <= self.ttp:
            raise ParameterError(f"need tts <= ttp, got {self.tts} > {self.ttp}")


def _gamma_rise(t: np.ndarray, alpha: float, tau: float) -> np.ndarray:
    """Peak-normalized wash-in profile: 0 for t <= 0, 1 at t == tau."""
    rise = np.zeros_like(t, dtype=np.float64)
    pos = t > 0
    ratio = t[pos] / tau
    rise[pos] = ratio ** alpha * np.exp(alpha * (1.0 - ratio))
    return rise


def gamma_variate_tic(params: GammaVariateParams, length: int) -> TimeIntensityCurve:
    """Evaluate the wash-in curve on frames 0..length-1, clipped to [0, 255].

    Pre-onset frames sit at the baseline; from the onset the added intensity
    follows ((t / tau)^alpha) * exp(alpha * (1 - t / tau)) with tau =
    alpha / beta, which equals 1 exactly at t = tau, so the curve tops out at
    baseline + amplitude.
    """
    if length < 1:
        raise ParameterError(f"length must be >= 1, got {length}")
    t = np.arange(length, dtype=np.float64) - params.onset
    tau = params.alpha / params.beta
    rise = _gamma_rise(t, params.alpha, tau)
    values = np.clip(params.baseline + params.amplitude * rise, 0.0, 255.0)
    return TimeIntensityCurve(values)


def _onset_delays(region: RegionSpec, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Per-pixel arrival delay, quadratic in distance from the region center.

    Quadratic growth keeps pixels near the feeding point nearly synchronous
    (their cells produce crisp similarity dips) while distant cells still lag
    by several frames, which is what makes an earliest-enhanced position
    detectable at all.
    """
    if region.onset_spread == 0.0 or ys.size == 0:
        return np.zeros(ys.size, dtype=np.float64)
    if region.kind == "ellipse":
        cx, cy = region.geometry[0], region.geometry[1]
    else:
        x, y, w, h = region.geometry
        cx, cy = x + w / 2.0, y + h / 2.0
    dist = np.hypot(ys - cy, xs - cx)
    dmax = dist.max()
    if dmax <= 0:
        return np.zeros(ys.size, dtype=np.float64)
    return region.onset_spread * (dist / dmax) ** 2


def _region_pixel_values(region: RegionSpec, ys: np.ndarray, xs: np.ndarray,
                         length: int) -> np.ndarray:
    """Noise-free (F, n_pixels) intensity of one region's pixels."""
    p = region.tic
    tau = p.alpha / p.beta
    delays = _onset_delays(region, ys, xs)
    t = np.arange(length, dtype=np.float64)[:, None] - p.onset - delays[None, :]
    rise = _gamma_rise(t, p.alpha, tau)
    return np.clip(p.baseline + p.amplitude * rise, 0.0, 255.0)


def region_mean_tic(region: RegionSpec, height: int, width: int,
                    length: int) -> TimeIntensityCurve:
    """Spatial-mean analytic curve of one region (accounts for arrival spread)."""
    ys, xs = np.nonzero(region.mask(height, width))
    return TimeIntensityCurve(
        _region_pixel_values(region, ys.astype(np.float64), xs.astype(np.float64),
                             length).mean(axis=1))


def analytic_mean_tic(spec: SynthSpec) -> TimeIntensityCurve:
    """Area-weighted sum of the region mean curves over a zero background."""
    total = np.zeros(spec.frame_count, dtype=np.float64)
    npx = spec.frame_height * spec.frame_width
    for region in spec.regions:
        area = region.mask(spec.frame_height, spec.frame_width).sum() / npx
        total += area * region_mean_tic(region, spec.frame_height,
                                        spec.frame_width, spec.frame_count).values
    return TimeIntensityCurve(total)


def analytic_tts_ttp(spec: SynthSpec,
                     gradient_threshold: float = DEFAULT_GRADIENT_THRESHOLD):
    """Start/peak events of the analytic mean curve.

    The events are operationally defined on the smoothed curve (that is what
    any detector sees), so the analytic oracle applies the same
    Savitzky-Golay smoothing and threshold rule to the noise-free curve. The
    window shrinks for very short videos.
    """
    curve = analytic_mean_tic(spec)
    window = min(DEFAULT_SG_WINDOW, len(curve) if len(curve) % 2 else len(curve) - 1)
    order = min(DEFAULT_SG_ORDER, window - 1)
    if window > order:
        curve = sg_smooth(curve, window=window, order=order)
    try:
        return find_tts_ttp(curve, threshold=gradient_threshold)
    except Exception as exc:
        raise ParameterError(
            "spec produces no detectable enhancement in the mean curve") from exc


def _zero_mean_uniform(rng: np.random.Generator, n: int) -> np.ndarray:
    u = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), n)
    return u - u.mean()


def _region_masks(spec: SynthSpec):
    masks = [r.mask(spec.frame_height, spec.frame_width) for r in spec.regions]
    cover = np.zeros((spec.frame_height, spec.frame_width), dtype=np.int32)
    for m in masks:
        cover += m
    if (cover > 1).any():
        raise GeometryError("regions overlap")
    return masks


def generate_case(spec: SynthSpec,
                  gradient_threshold: float = DEFAULT_GRADIENT_THRESHOLD):
    """Render one case and its ground truth. Deterministic for a fixed spec."""
    masks = _region_masks(spec)
    rng = np.random.default_rng(spec.seed)
    H, W, F = spec.frame_height, spec.frame_width, spec.frame_count

    # Gray-scale: static texture per tissue over a background field.
    tex = rng.normal(*GSUS_TEXTURE["background"], size=(H, W))
    for region, mask in zip(spec.regions, masks):
        mu, sd = GSUS_TEXTURE[region.tissue_tag]
        tex[mask] = rng.normal(mu, sd, int(mask.sum()))
    tex = np.clip(tex, 0.0, 255.0)

    # Contrast: per-pixel noise-free intensities, modulated by a speckle
    # pattern refreshed pixel-wise at a rate tied to the local relative
    # intensity change, then re-centered to exact zero mean per region so the
    # frame-mean curve stays on the analytic one.
    region_px = [np.nonzero(m) for m in masks]
    region_vals = [
        _region_pixel_values(r, ys.astype(np.float64), xs.astype(np.float64), F)
        for r, (ys, xs) in zip(spec.regions, region_px)]
    patterns = [_zero_mean_uniform(rng, len(ys)) for ys, _ in region_px]

    gsus = np.empty((F, H, W), dtype=np.uint8)
    ceus = np.empty((F, H, W), dtype=np.uint8)
    for f in range(F):
        frame = np.zeros((H, W), dtype=np.float64)
        dy = int(round(spec.motion_amplitude * np.sin(2.0 * np.pi * f / MOTION_PERIOD)))
        for r, (ys, xs) in enumerate(region_px):
            vals_now = region_vals[r][f]
            if f > 0 and len(ys):
                rel = np.abs(vals_now - region_vals[r][f - 1]) \
                    / np.maximum(region_vals[r][f - 1], 1.0)
                rho = np.exp(-SPECKLE_REFRESH_RATE * rel)
                fresh = _zero_mean_uniform(rng, len(ys))
                mixed = rho * patterns[r] + np.sqrt(1.0 - rho * rho) * fresh
                patterns[r] = mixed - mixed.mean()
            values = vals_now * (1.0 + SPECKLE_STRENGTH * patterns[r])
            if len(ys):
                values += vals_now.mean() - values.mean()
            ys_f = ys + dy
            ok = (ys_f >= 0) & (ys_f < H)
            frame[ys_f[ok], xs[ok]] = values[ok]
        if spec.noise_sigma > 0:
            frame = frame + rng.normal(0.0, spec.noise_sigma, (H, W))
            g = tex + rng.normal(0.0, spec.noise_sigma, (H, W))
        else:
            g = tex
        ceus[f] = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
        gsus[f] = np.clip(np.rint(g), 0, 255).astype(np.uint8)

    tts, ttp = analytic_tts_ttp(spec, gradient_threshold=gradient_threshold)
    truth = GroundTruth(onsets=tuple(r.tic.onset for r in spec.regions),
                        tts=tts, ttp=ttp, class_label=spec.class_label)
    return BimodalVideo(gsus=gsus, ceus=ceus), truth


# ---------------------------------------------------------------------------
# On-disk case format: gsus/%06d.png + ceus/%06d.png + manifest.json
# ---------------------------------------------------------------------------

def _spec_to_manifest(spec: SynthSpec, truth: GroundTruth, clinical=None) -> dict:
    regions = []
    for region, onset in zip(spec.regions, truth.onsets):
        regions.append({
            "tissue_tag": region.tissue_tag,
            "kind": region.kind,
            "geometry": list(region.geometry),
            "tic": asdict(region.tic),
            "onset_spread": region.onset_spread,
            "onset": onset,
        })
    return {
        "format_version": MANIFEST_VERSION,
        "frame_count": spec.frame_count,
        "height": spec.frame_height,
        "width": spec.frame_width,
        "class_label": spec.class_label,
        "seed": spec.seed,
        "noise_sigma": spec.noise_sigma,
        "motion_amplitude": spec.motion_amplitude,
        "regions": regions,
        "ground_truth": {"tts": truth.tts, "ttp": truth.ttp,
                         "onsets": list(truth.onsets)},
        "clinical": list(clinical) if clinical is not None else None,
    }


def write_case(path, video: BimodalVideo, truth: GroundTruth,
               manifest: dict | None = None, spec: SynthSpec | None = None,
               clinical=None) -> Path:
    """Write frames and manifest; pass either a prebuilt manifest or a spec."""
    path = Path(path)
    if manifest is None:
        if spec is None:
            raise ParameterError("write_case needs a manifest or a spec")
        manifest = _spec_to_manifest(spec, truth, clinical=clinical)
    manifest = dict(manifest)
    manifest["frame_count"] = video.frame_count
    manifest["height"], manifest["width"] = video.frame_shape
    for sub in ("gsus", "ceus"):
        (path / sub).mkdir(parents=True, exist_ok=True)
    for f in range(video.frame_count):
        Image.fromarray(video.gsus[f], mode="L").save(path / "gsus" / f"{f:06d}.png")
        Image.fromarray(video.ceus[f], mode="L").save(path / "ceus" / f"{f:06d}.png")
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


@dataclass
class Case:
    """A case read back from disk: frames, ground truth, raw manifest."""

    video: BimodalVideo
    truth: GroundTruth
    manifest: dict
    path: Path | None = None

    @property
    def class_label(self) -> int:
        return int(self.manifest["class_label"])

    @property
    def clinical(self):
        vec = self.manifest.get("clinical")
        return None if vec is None else np.asarray(vec, dtype=np.float64)


def _read_frames(dirpath: Path, expected: int, height: int, width: int) -> np.ndarray:
    files = sorted(dirpath.glob("*.png"))
    if len(files) != expected:
        raise FrameCountError(
            f"{dirpath}: manifest declares {expected} frames, found {len(files)} files")
    stack = np.empty((expected, height, width), dtype=np.uint8)
    for i, fp in enumerate(files):
        with Image.open(fp) as im:
            arr = np.asarray(im.convert("L"))
        if arr.shape != (height, width):
            raise FrameCountError(
                f"{fp}: frame is {arr.shape}, manifest says {(height, width)}")
        stack[i] = arr
    return stack


def read_case(path) -> Case:
    """Load a case directory; raises on missing manifest or frame mismatch."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ManifestError(f"{path}: no {MANIFEST_NAME}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("frame_count", "height", "width", "class_label", "ground_truth"):
        if key not in manifest:
            raise ManifestError(f"{manifest_path}: missing key {key!r}")
    F = int(manifest["frame_count"])
    H, W = int(manifest["height"]), int(manifest["width"])
    gsus = _read_frames(path / "gsus", F, H, W)
    ceus = _read_frames(path / "ceus", F, H, W)
    gt = manifest["ground_truth"]
    truth = GroundTruth(onsets=tuple(gt.get("onsets", ())), tts=int(gt["tts"]),
                        ttp=int(gt["ttp"]), class_label=int(manifest["class_label"]))
    return Case(video=BimodalVideo(gsus=gsus, ceus=ceus), truth=truth,
                manifest=manifest, path=path)


def validate_case(path) -> list:
    """Collect violations for one case directory (empty list means clean)."""
    path = Path(path)
    violations = []
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        return [f"missing-manifest: {path}"]
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        return [f"manifest-parse-error: {exc}"]
    for key in ("frame_count", "height", "width", "class_label", "ground_truth"):
        if key not in manifest:
            violations.append(f"manifest-missing-key: {key}")
    if violations:
        return violations
    F = int(manifest["frame_count"])
    H, W = int(manifest["height"]), int(manifest["width"])
    for sub in ("gsus", "ceus"):
        files = sorted((path / sub).glob("*.png")) if (path / sub).is_dir() else []
        if len(files) != F:
            violations.append(f"frame-count-mismatch: {sub} has {len(files)}, manifest says {F}")
        for fp in files:
            try:
                with Image.open(fp) as im:
                    arr = np.asarray(im.convert("L"))
                if arr.shape != (H, W):
                    violations.append(f"frame-shape-mismatch: {fp.name} is {arr.shape}")
            except Exception as exc:
                violations.append(f"frame-decode-error: {fp.name} ({exc})")
    gt = manifest["ground_truth"]
    if not (0 <= gt["tts"] <= gt["ttp"] < F):
        violations.append(f"ground-truth-order: tts={gt['tts']} ttp={gt['ttp']} frames={F}")
    for onset in gt.get("onsets", ()):
        if not 0 <= onset < F:
            violations.append(f"onset-out-of-range: {onset}")
    tags = {r["tissue_tag"] for r in manifest.get("regions", [])}
    if manifest.get("regions") and not set(REQUIRED_TAGS) <= tags:
        violations.append(f"missing-tissue-tags: have {sorted(tags)}")
    if manifest["class_label"] not in (0, 1):
        violations.append(f"bad-class-label: {manifest['class_label']}")
    return violations


# ---------------------------------------------------------------------------
# Dataset generation with a class-dependent perfusion signal
# ---------------------------------------------------------------------------

def default_case_spec(label: int, seed: int, frame_count: int = 96,
                      height: int = 256, width: int = 384,
                      noise_sigma: float = 0.0,
                      motion_amplitude: float = 0.0) -> SynthSpec:
    """Randomized three-region layout with a class-dependent lesion wash-in.

    Fast-perfusion cases (label 1) get an earlier lesion onset and a steeper
    rise than slow-perfusion cases (label 0); the lesion always enhances
    before the parenchyma. Onsets sit beyond the default smoothing window so
    edge fits stay flat, and the near-quadratic onset (alpha ~ 2) keeps the
    smoothed threshold crossing within a frame or two of the analytic one.
    At the default 384x256 geometry each region fully covers at least two
    64x64 grid cells, so similarity dips are not washed out by static region
    edges inside a cell.
    """
    if frame_count < 96:
        raise ParameterError("default cases need at least 96 frames")
    rng = np.random.default_rng(np.random.SeedSequence([seed, label, 0xB05]))
    F = frame_count
    sx, sy = width / 384.0, height / 256.0

    def jit(lo, hi):
        return float(rng.uniform(lo, hi))

    if label == 1:
        lesion_onset = jit(34, 40)
        lesion_amp = jit(118, 132)
        lesion_tau = jit(8, 12)
    else:
        lesion_onset = jit(46, 54)
        lesion_amp = jit(90, 110)
        lesion_tau = jit(16, 22)
    lesion_alpha = jit(1.8, 2.3)

    # ellipse sized to contain grid cells (2,1) and (2,2) entirely
    lesion = RegionSpec(
        tissue_tag="lesion", kind="ellipse",
        geometry=(sx * jit(124, 132), sy * jit(156, 164),
                  sx * jit(92, 100), sy * jit(54, 60)),
        tic=GammaVariateParams(onset=lesion_onset, amplitude=lesion_amp,
                               alpha=lesion_alpha, beta=lesion_alpha / lesion_tau,
                               baseline=jit(8, 14)),
        onset_spread=jit(8, 14))

    # Wall and parenchyma onsets trail the lesion onset by fixed margins so
    # every tissue enhances inside the selected clip for both classes.
    par_alpha = jit(1.8, 2.6)
    par_y = jit(104, 116)
    parenchyma = RegionSpec(
        tissue_tag="parenchyma", kind="rect",
        geometry=(sx * 240, sy * par_y, sx * 144, sy * (jit(240, 250) - par_y)),
        tic=GammaVariateParams(onset=lesion_onset + jit(12, 18),
                               amplitude=jit(60, 80),
                               alpha=par_alpha, beta=par_alpha / jit(14, 20),
                               baseline=jit(8, 14)),
        onset_spread=jit(6, 12))

    # full-height top band covering the whole first grid row of cells 1..4
    wall_alpha = jit(1.8, 2.6)
    wall = RegionSpec(
        tissue_tag="wall", kind="rect",
        geometry=(sx * jit(4, 16), 0.0, sx * jit(352, 364), sy * 64),
        tic=GammaVariateParams(onset=lesion_onset + jit(3, 8),
                               amplitude=jit(38, 52),
                               alpha=wall_alpha, beta=wall_alpha / jit(10, 16),
                               baseline=jit(12, 20)),
        onset_spread=jit(4, 8))

    return SynthSpec(frame_count=F, frame_height=height, frame_width=width,
                     regions=(wall, lesion, parenchyma), noise_sigma=noise_sigma,
                     motion_amplitude=motion_amplitude, class_label=label, seed=seed)


def dataset_labels(n_cases: int, balance: float = 0.5, seed: int = 0) -> list:
    """Deterministic label sequence with an exact class split."""
    if n_cases < 1:
        raise ParameterError("need at least one case")
    if not 0.0 <= balance <= 1.0:
        raise ParameterError(f"balance must be in [0, 1], got {balance}")
    n_pos = int(round(n_cases * balance))
    labels = [1] * n_pos + [0] * (n_cases - n_pos)
    np.random.default_rng(seed).shuffle(labels)
    return labels


def make_case(index: int, label: int, seed: int, **spec_kwargs):
    """Generate case ``index`` of a dataset (seeded independently per case)."""
    case_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
    spec = default_case_spec(label, case_seed, **spec_kwargs)
    video, truth = generate_case(spec)
    rng = np.random.default_rng(np.random.SeedSequence([seed, index, 0xC11]))
    clinical = [float(label + rng.normal(0.0, 0.6)),
                float(rng.normal(0.0, 1.0)),
                float(rng.normal(0.0, 1.0)),
                float(rng.normal(0.0, 1.0))]
    return spec, video, truth, clinical


def make_dataset(out_dir, n_cases: int, seed: int = 0, balance: float = 0.5,
                 jobs: int = 1, **spec_kwargs) -> list:
    """Write ``n_cases`` synthetic cases under out_dir/case_<i>."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = dataset_labels(n_cases, balance=balance, seed=seed)
    tasks = [(i, labels[i], seed, out_dir, spec_kwargs) for i in range(n_cases)]
    if jobs > 1:
        import multiprocessing
        with multiprocessing.Pool(jobs) as pool:
            paths = pool.map(_make_dataset_case, tasks)
    else:
        paths = [_make_dataset_case(t) for t in tasks]
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump({"n_cases": n_cases, "seed": seed, "balance": balance,
                   "cases": [p.name for p in map(Path, paths)]}, fh, indent=2)
    return [Path(p) for p in paths]


def _make_dataset_case(task):
    index, label, seed, out_dir, spec_kwargs = task
    spec, video, truth, clinical = make_case(index, label, seed, **spec_kwargs)
    return write_case(out_dir / f"case_{index:06d}", video, truth,
                      spec=spec, clinical=clinical)
