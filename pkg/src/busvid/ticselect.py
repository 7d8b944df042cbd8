"""Adaptive clip selection from time-intensity curves.

The contrast-enhanced video is reduced to a whole-frame mean-intensity curve,
smoothed with a Savitzky-Golay filter, and scanned for the start-of-enhancement
frame (first forward difference above a gradient threshold) and the peak frame.
A fixed number of frames is then sampled at a constant step from the rising
clip between those two events.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import savgol_filter

from .errors import NoEnhancementError, ParameterError, ShapeError
from .video import BimodalVideo

DEFAULT_SG_WINDOW = 31
DEFAULT_SG_ORDER = 2
DEFAULT_GRADIENT_THRESHOLD = 0.2
DEFAULT_FRAME_BUDGET = 32


@dataclass
class TimeIntensityCurve:
    """Mean intensity per frame for a region (whole frame or sub-patch)."""

    values: np.ndarray
    origin: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ShapeError("a time-intensity curve must be a non-empty 1-D sequence")

    def __len__(self):
        return int(self.values.size)


@dataclass
class ClipSelection:
    """Sampling decision for one video.

    ``indices`` holds the arithmetic sampling positions (strictly increasing,
    constant step, starting at ``tts``); positions past the end of the raw
    video are clamped to the last frame only when frames are gathered.
    """

    tts: int
    ttp: int
    step: int
    indices: np.ndarray
    fallback: bool = False

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)


def compute_mean_tic(ceus: np.ndarray) -> TimeIntensityCurve:
    """Whole-frame mean intensity per frame of a (F, H, W) CEUS stack."""
    frames = np.asarray(ceus)
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ShapeError(f"expected a non-empty (F, H, W) video, got shape {frames.shape}")
    return TimeIntensityCurve(frames.astype(np.float64).mean(axis=(1, 2)))


def sg_smooth(tic: TimeIntensityCurve, window: int = DEFAULT_SG_WINDOW,
              order: int = DEFAULT_SG_ORDER) -> TimeIntensityCurve:
    """Savitzky-Golay smoothing.

    Each point is replaced by the value of a least-squares polynomial of the
    given order fitted over a sliding window; the first/last window's
    polynomial is evaluated at the edge positions so the curve keeps its
    length.
    """
    if window % 2 == 0:
        raise ParameterError(f"window must be odd, got {window}")
    if order >= window:
        raise ParameterError(f"order must be smaller than window ({order} >= {window})")
    if len(tic) < window:
        raise ParameterError(f"curve of length {len(tic)} is shorter than window {window}")
    smoothed = savgol_filter(tic.values, window_length=window, polyorder=order, mode="interp")
    return TimeIntensityCurve(smoothed, origin=tic.origin)


def find_tts_ttp(tic: TimeIntensityCurve, threshold: float = DEFAULT_GRADIENT_THRESHOLD):
    """Start-of-enhancement and peak frame of a smoothed curve.

    The start frame is the first f with values[f + 1] - values[f] > threshold;
    the peak is the first maximal frame at or after the start. Frame indices
    are relative to the curve's origin.
    """
    if threshold <= 0:
        raise ParameterError(f"gradient threshold must be positive, got {threshold}")
    v = tic.values
    rising = np.nonzero(np.diff(v) > threshold)[0]
    if rising.size == 0:
        raise NoEnhancementError(
            f"no forward difference exceeds {threshold}; curve never enhances")
    tts = int(rising[0])
    ttp = tts + int(np.argmax(v[tts:]))
    return tts + tic.origin, ttp + tic.origin


def select_frames(video: BimodalVideo, tts: int, ttp: int,
                  frames: int = DEFAULT_FRAME_BUDGET):
    """Sample ``frames`` frames at a constant step from the rising clip.

    step = quo + 1 with quo, rem = divmod(ttp - tts, frames); the endpoint is
    extended by frames - rem so exactly ``frames`` indices exist. Indices past
    the raw video are clamped to the last frame (the raw video is not
    guaranteed to be long enough).
    """
    if frames < 1:
        raise ParameterError(f"frame budget must be >= 1, got {frames}")
    raw_len = video.frame_count
    if not (0 <= tts <= ttp < raw_len):
        raise ParameterError(
            f"need 0 <= tts <= ttp < {raw_len}, got tts={tts}, ttp={ttp}")
    quo, rem = divmod(ttp - tts, frames)
    step = quo + 1
    end = ttp + (frames - rem)
    indices = np.arange(tts, end, step, dtype=np.int64)
    assert indices.size == frames
    selection = ClipSelection(tts=tts, ttp=ttp, step=step, indices=indices)
    return video.gather(np.minimum(indices, raw_len - 1)), selection


def _uniform_fallback(video: BimodalVideo, frames: int):
    raw_len = video.frame_count
    step = max(1, raw_len // frames)
    indices = np.arange(0, frames * step, step, dtype=np.int64)
    selection = ClipSelection(tts=0, ttp=raw_len - 1, step=step,
                              indices=indices, fallback=True)
    return video.gather(np.minimum(indices, raw_len - 1)), selection


def select_clip(video: BimodalVideo,
                window: int = DEFAULT_SG_WINDOW, order: int = DEFAULT_SG_ORDER,
                threshold: float = DEFAULT_GRADIENT_THRESHOLD,
                frames: int = DEFAULT_FRAME_BUDGET):
    """Full selection pass over one raw bimodal video.

    Computes the mean curve of the contrast modality, smooths it, locates the
    rising clip and samples it. When the curve never crosses the threshold the
    whole video is sampled uniformly instead and the selection is flagged as a
    fallback.
    """
    tic = compute_mean_tic(video.ceus)
    smoothed = sg_smooth(tic, window=window, order=order)
    try:
        tts, ttp = find_tts_ttp(smoothed, threshold=threshold)
    except NoEnhancementError:
        return _uniform_fallback(video, frames)
    return select_frames(video, tts, ttp, frames=frames)
