"""Paired gray-scale / contrast-enhanced frame stacks from one acquisition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class BimodalVideo:
    """Spatially co-registered gray-scale and contrast-enhanced sequences.

    Both stacks are (F, H, W) 8-bit arrays with identical shapes.
    """

    gsus: np.ndarray
    ceus: np.ndarray

    def __post_init__(self):
        self.gsus = np.asarray(self.gsus)
        self.ceus = np.asarray(self.ceus)
        if self.gsus.ndim != 3 or self.ceus.ndim != 3:
            raise ShapeError("videos must be (F, H, W) arrays")
        if self.gsus.shape != self.ceus.shape:
            raise ShapeError(
                f"modality shapes differ: {self.gsus.shape} vs {self.ceus.shape}")
        if self.frame_count < 1:
            raise ShapeError("video must contain at least one frame")

    @property
    def frame_count(self) -> int:
        return int(self.gsus.shape[0])

    @property
    def frame_shape(self):
        return self.gsus.shape[1], self.gsus.shape[2]

    def gather(self, indices) -> "BimodalVideo":
        idx = np.asarray(indices, dtype=np.int64)
        return BimodalVideo(gsus=self.gsus[idx], ceus=self.ceus[idx])

    def __eq__(self, other):
        if not isinstance(other, BimodalVideo):
            return NotImplemented
        return (self.gsus.shape == other.gsus.shape
                and np.array_equal(self.gsus, other.gsus)
                and np.array_equal(self.ceus, other.ceus))
