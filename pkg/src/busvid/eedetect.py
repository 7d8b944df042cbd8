"""Earliest-enhanced position detection on the sampled contrast video.

The frame is cut into a 64x64 patch grid and the structural similarity of
every patch with its next-frame neighbour is computed. Cells whose minimum
similarity falls below a threshold are enhancement candidates (two lowest for
the wall band, all below a stricter threshold elsewhere); candidates whose
patch intensity is not rising around the similarity minimum are discarded as
respiratory motion. Remaining non-wall candidates are clustered into two
tissue groups from their gray-scale texture, and the two earliest-enhancing
positions per group (wall, lesion, parenchyma) are kept, each with the
time-intensity curve of its half-sized centered sub-patch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoEnhancementError, ParameterError, ShapeError
from .ticselect import (DEFAULT_GRADIENT_THRESHOLD, DEFAULT_SG_ORDER,
                        DEFAULT_SG_WINDOW, TimeIntensityCurve, find_tts_ttp,
                        sg_smooth)
from .video import BimodalVideo

PATCH_SIZE = 64
PIXEL_RANGE = 255.0
SSIM_EPS1 = (0.01 * PIXEL_RANGE) ** 2
SSIM_EPS2 = (0.03 * PIXEL_RANGE) ** 2
TAU_WALL = 0.8
TAU_NONWALL = 0.6
GROUP_NAMES = ("wall", "lesion", "parenchyma")
POSITIONS_PER_GROUP = 2
RISING_HALF_WINDOW = 4
# Sub-patch curves are only as long as the sampled clip; a near-full-length
# smoothing window would collapse into one global polynomial fit and erase
# the onsets, so they get a short window instead.
SUBPATCH_SG_WINDOW = 7


def ssim_patch(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity of two equally shaped patches.

    Uses population variance/covariance and the 8-bit stabilizing constants.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"patch shapes differ: {a.shape} vs {b.shape}")
    mu_a = a.mean()
    mu_b = b.mean()
    var_a = (a * a).mean() - mu_a * mu_a
    var_b = (b * b).mean() - mu_b * mu_b
    cov = (a * b).mean() - mu_a * mu_b
    return float(((2.0 * mu_a * mu_b + SSIM_EPS1) * (2.0 * cov + SSIM_EPS2))
                 / ((mu_a * mu_a + mu_b * mu_b + SSIM_EPS1)
                    * (var_a + var_b + SSIM_EPS2)))


def pad_to_grid(frames: np.ndarray, patch_size: int = PATCH_SIZE) -> np.ndarray:
    """Reflection-pad (F, H, W) frames so H and W divide by the patch size."""
    frames = np.asarray(frames)
    _, h, w = frames.shape
    pad_h = (-h) % patch_size
    pad_w = (-w) % patch_size
    if pad_h == 0 and pad_w == 0:
        return frames
    return np.pad(frames, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")


def adjacent_ssim_map(ceus: np.ndarray, patch_size: int = PATCH_SIZE) -> np.ndarray:
    """Per-cell SSIM between every pair of temporally adjacent frames.

    Returns an (rows, cols, F - 1) array over the padded patch grid.
    """
    frames = np.asarray(ceus, dtype=np.float64)
    if frames.ndim != 3:
        raise ShapeError(f"expected (F, H, W) video, got shape {frames.shape}")
    if frames.shape[0] < 2:
        raise ParameterError("need at least two frames for adjacent-frame SSIM")
    frames = pad_to_grid(frames, patch_size)
    F, H, W = frames.shape
    r, c = H // patch_size, W // patch_size
    blk = frames.reshape(F, r, patch_size, c, patch_size)
    mu = blk.mean(axis=(2, 4))                      # (F, r, c)
    sq = (blk * blk).mean(axis=(2, 4))
    var = sq - mu * mu
    cross = (blk[:-1] * blk[1:]).mean(axis=(2, 4))  # adjacent-frame products
    cov = cross - mu[:-1] * mu[1:]
    num = (2.0 * mu[:-1] * mu[1:] + SSIM_EPS1) * (2.0 * cov + SSIM_EPS2)
    den = ((mu[:-1] ** 2 + mu[1:] ** 2 + SSIM_EPS1)
           * (var[:-1] + var[1:] + SSIM_EPS2))
    return np.transpose(num / den, (1, 2, 0))


def write_ssim_map(path, ssim_map: np.ndarray) -> None:
    """Raw dump: three little-endian int32 dims, then row-major float64."""
    arr = np.ascontiguousarray(ssim_map, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", *arr.shape))
        fh.write(arr.tobytes())


def read_ssim_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        dims = struct.unpack("<3i", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(dims)


def default_wall_mask(rows: int, cols: int) -> np.ndarray:
    """Wall band default: the top quarter of grid rows (nearest the probe)."""
    mask = np.zeros((rows, cols), dtype=bool)
    mask[:max(1, rows // 4)] = True
    return mask


@dataclass
class Candidate:
    """A grid cell flagged as enhancing: its worst SSIM and when it occurs."""

    cell: tuple
    score: float
    frame: int
    wall: bool


def candidate_positions(ssim_map: np.ndarray, wall_mask: np.ndarray,
                        tau_wall: float = TAU_WALL,
                        tau_nwall: float = TAU_NONWALL) -> list:
    """Low-SSIM-pass gating.

    Each cell is scored by its minimum SSIM over all adjacent pairs. Wall
    cells: the two lowest-scoring with score <= tau_wall. Non-wall cells: all
    with score < tau_nwall.
    """
    ssim_map = np.asarray(ssim_map)
    wall_mask = np.asarray(wall_mask, dtype=bool)
    if wall_mask.shape != ssim_map.shape[:2]:
        raise ShapeError(
            f"wall mask {wall_mask.shape} does not match grid {ssim_map.shape[:2]}")
    scores = ssim_map.min(axis=2)
    frames = ssim_map.argmin(axis=2)
    out = []
    wall_cells = [(scores[i, j], i, j) for i, j in zip(*np.nonzero(wall_mask))
                  if scores[i, j] <= tau_wall]
    for s, i, j in sorted(wall_cells)[:POSITIONS_PER_GROUP]:
        out.append(Candidate(cell=(i, j), score=float(s),
                             frame=int(frames[i, j]), wall=True))
    for i, j in zip(*np.nonzero(~wall_mask)):
        if scores[i, j] < tau_nwall:
            out.append(Candidate(cell=(int(i), int(j)), score=float(scores[i, j]),
                                 frame=int(frames[i, j]), wall=False))
    return out


def patch_mean_tic(ceus: np.ndarray, cell, patch_size: int = PATCH_SIZE) -> np.ndarray:
    i, j = cell
    block = ceus[:, i * patch_size:(i + 1) * patch_size,
                 j * patch_size:(j + 1) * patch_size]
    return block.astype(np.float64).mean(axis=(1, 2))


def rising_tic_check(ceus: np.ndarray, cell, min_frame: int,
                     patch_size: int = PATCH_SIZE,
                     half_window: int = RISING_HALF_WINDOW) -> bool:
    """True when the cell's intensity is rising around its SSIM minimum.

    Least-squares slope of the patch-mean curve over min_frame +- 4 frames
    (clipped to the video); non-positive slopes are treated as motion.
    """
    tic = patch_mean_tic(ceus, cell, patch_size)
    lo = max(0, min_frame - half_window)
    hi = min(len(tic), min_frame + half_window + 1)
    window = tic[lo:hi]
    if window.size < 2:
        return False
    t = np.arange(window.size, dtype=np.float64)
    slope = np.polyfit(t, window, 1)[0]
    return bool(slope > 0.0)


class PatchEmbedder:
    """Interface for gray-scale patch feature encoders (pluggable)."""

    feature_dim: int

    def embed(self, patch: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class TextureStatsEmbedder(PatchEmbedder):
    """Handcrafted texture statistics: mean, variance, mean gradient
    magnitude, and an 8-bin intensity histogram (11 features)."""

    feature_dim = 11

    def __init__(self, patch_size: int = PATCH_SIZE, bins: int = 8):
        self.patch_size = patch_size
        self.bins = bins

    def embed(self, patch: np.ndarray) -> np.ndarray:
        patch = np.asarray(patch, dtype=np.float64)
        if patch.shape != (self.patch_size, self.patch_size):
            raise ShapeError(
                f"expected a {self.patch_size}x{self.patch_size} patch, got {patch.shape}")
        gy, gx = np.gradient(patch)
        grad_mean = np.hypot(gx, gy).mean()
        hist, _ = np.histogram(patch, bins=self.bins, range=(0.0, 256.0))
        hist = hist / patch.size
        return np.concatenate(([patch.mean(), patch.var(), grad_mean], hist))


def embed_patch(patch: np.ndarray, embedder: PatchEmbedder | None = None) -> np.ndarray:
    return (embedder or TextureStatsEmbedder()).embed(patch)


def cluster_positions(features: np.ndarray, k: int = 2, seed: int = 0,
                      max_iter: int = 100, tol: float = 1e-6,
                      order_key=None):
    """Lloyd's k-means with k-means++ seeding over standardized features.

    Returns (labels, degenerate). With fewer than k vectors everything lands
    in one group and the result is flagged degenerate. When ``order_key`` is
    given (one value per vector), labels are relabeled so group 0 contains
    the vector with the smallest key.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"features must be (n, d), got {X.shape}")
    n = X.shape[0]
    if n < k:
        return np.zeros(n, dtype=np.int64), True

    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    Xs = (X - X.mean(axis=0)) / std

    rng = np.random.default_rng(seed)
    centers = np.empty((k, Xs.shape[1]))
    centers[0] = Xs[rng.integers(n)]
    for c in range(1, k):
        d2 = np.min(((Xs[:, None, :] - centers[None, :c, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centers[c] = Xs[rng.integers(n)]
        else:
            centers[c] = Xs[rng.choice(n, p=d2 / total)]

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((Xs[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        moved = 0.0
        for c in range(k):
            members = Xs[labels == c]
            if members.size == 0:
                # reseed an empty cluster at the farthest point
                far = d2.min(axis=1).argmax()
                new_center = Xs[far]
            else:
                new_center = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new_center - centers[c])))
            centers[c] = new_center
        if moved <= tol:
            break

    degenerate = len(np.unique(labels)) < k
    if order_key is not None and not degenerate:
        key = np.asarray(order_key, dtype=np.float64)
        if key.shape[0] != n:
            raise ShapeError("order_key length must match feature count")
        lead = labels[key.argmin()]
        if lead != 0:
            remap = np.arange(k)
            remap[lead], remap[0] = 0, lead
            labels = remap[labels]
    return labels, degenerate


def sub_patch_tic(ceus: np.ndarray, cell, patch_size: int = PATCH_SIZE) -> np.ndarray:
    """Mean curve of the half-sized sub-patch centered in the cell."""
    i, j = cell
    q = patch_size // 4
    half = patch_size // 2
    y0 = i * patch_size + q
    x0 = j * patch_size + q
    block = ceus[:, y0:y0 + half, x0:x0 + half]
    return block.astype(np.float64).mean(axis=(1, 2))


def sub_patch_tts(tic_values: np.ndarray,
                  threshold: float = DEFAULT_GRADIENT_THRESHOLD,
                  window: int = SUBPATCH_SG_WINDOW,
                  order: int = DEFAULT_SG_ORDER):
    """Onset of a sub-patch curve, or None when it never crosses.

    Same forward-difference rule as the clip selector, on the smoothed curve
    with the window clipped to the largest odd length that fits.
    """
    tic = TimeIntensityCurve(tic_values)
    w = min(window, len(tic) if len(tic) % 2 else len(tic) - 1)
    o = min(order, w - 1)
    if w > o >= 0 and len(tic) >= w >= 3:
        tic = sg_smooth(tic, window=w, order=o)
    try:
        tts, _ = find_tts_ttp(tic, threshold=threshold)
    except NoEnhancementError:
        return None
    return tts


@dataclass
class EnhancedPosition:
    group: str
    cell: tuple
    tts: int | None
    tic: np.ndarray


@dataclass
class EarliestEnhancedSet:
    """Exactly two positions per tissue group, each with its sub-patch curve."""

    entries: list
    degenerate: bool = False
    notes: list = field(default_factory=list)

    def group(self, name: str) -> list:
        return [e for e in self.entries if e.group == name]

    def tics(self) -> np.ndarray:
        return np.stack([e.tic for e in self.entries])


def earliest_enhanced_tics(video: BimodalVideo, wall_mask: np.ndarray | None = None,
                           tau_wall: float = TAU_WALL, tau_nwall: float = TAU_NONWALL,
                           threshold: float = DEFAULT_GRADIENT_THRESHOLD,
                           embedder: PatchEmbedder | None = None,
                           seed: int = 0) -> EarliestEnhancedSet:
    """Full detection pass over a sampled bimodal video."""
    ceus = pad_to_grid(video.ceus)
    gsus = pad_to_grid(video.gsus)
    F = ceus.shape[0]
    rows, cols = ceus.shape[1] // PATCH_SIZE, ceus.shape[2] // PATCH_SIZE
    if wall_mask is None:
        wall_mask = default_wall_mask(rows, cols)

    ssim_map = adjacent_ssim_map(ceus)
    candidates = candidate_positions(ssim_map, wall_mask, tau_wall, tau_nwall)
    wall_cands = [c for c in candidates if c.wall]
    tissue_cands = [c for c in candidates if not c.wall
                    and rising_tic_check(ceus, c.cell, c.frame)]

    def annotate(cands):
        out = []
        for c in cands:
            tic = sub_patch_tic(ceus, c.cell)
            out.append((c, sub_patch_tts(tic, threshold=threshold), tic))
        return out

    wall_ann = annotate(wall_cands)
    tissue_ann = annotate(tissue_cands)

    notes = []
    groups = {"wall": wall_ann, "lesion": [], "parenchyma": []}
    if tissue_ann:
        emb = embedder or TextureStatsEmbedder()
        mid = gsus[F // 2]
        feats = np.stack([
            emb.embed(mid[c.cell[0] * PATCH_SIZE:(c.cell[0] + 1) * PATCH_SIZE,
                          c.cell[1] * PATCH_SIZE:(c.cell[1] + 1) * PATCH_SIZE])
            for c, _, _ in tissue_ann])
        order_key = [F if tts is None else tts for _, tts, _ in tissue_ann]
        labels, degenerate_cluster = cluster_positions(feats, k=2, seed=seed,
                                                       order_key=order_key)
        if degenerate_cluster:
            notes.append("cluster-degenerate")
        groups["lesion"] = [a for a, lab in zip(tissue_ann, labels) if lab == 0]
        groups["parenchyma"] = [a for a, lab in zip(tissue_ann, labels) if lab == 1]

    def sort_key(item):
        cand, tts, _ = item
        return (F if tts is None else tts, cand.score, cand.cell)

    all_sorted = sorted(wall_ann + tissue_ann, key=sort_key)

    entries = []
    for name in GROUP_NAMES:
        chosen = sorted(groups[name], key=sort_key)[:POSITIONS_PER_GROUP]
        if len(chosen) < POSITIONS_PER_GROUP:
            notes.append(f"{name}-underfilled")
            if chosen:
                chosen = chosen + [chosen[0]] * (POSITIONS_PER_GROUP - len(chosen))
            elif all_sorted:
                chosen = [all_sorted[0]] * POSITIONS_PER_GROUP
            else:
                # nothing enhances anywhere: fall back to the lowest-SSIM cells
                scores = ssim_map.min(axis=2)
                flat = np.argsort(scores, axis=None)[:POSITIONS_PER_GROUP]
                chosen = []
                for idx in flat:
                    cell = np.unravel_index(idx, scores.shape)
                    tic = sub_patch_tic(ceus, cell)
                    chosen.append((Candidate(cell=tuple(int(v) for v in cell),
                                             score=float(scores[cell]),
                                             frame=int(ssim_map[cell].argmin()),
                                             wall=bool(wall_mask[cell])),
                                   sub_patch_tts(tic, threshold=threshold), tic))
                chosen = (chosen * POSITIONS_PER_GROUP)[:POSITIONS_PER_GROUP]
        for cand, tts, tic in chosen:
            entries.append(EnhancedPosition(group=name, cell=tuple(cand.cell),
                                            tts=tts, tic=tic))

    degenerate = bool(notes)
    return EarliestEnhancedSet(entries=entries, degenerate=degenerate, notes=notes)
