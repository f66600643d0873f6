"""Per-frame observation containers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import Camera, distance_transform


@dataclass(eq=False)
class ViewObservation:
    """What one calibrated camera saw: mask, distance map, linear RGB image, keypoints."""

    camera: Camera
    mask: np.ndarray | None = None
    distance: np.ndarray | None = None
    image: np.ndarray | None = None
    keypoints: np.ndarray | None = None
    confidences: np.ndarray | None = None

    def __post_init__(self):
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.distance is None:
                self.distance = distance_transform(self.mask)
        if self.distance is not None and np.any(np.asarray(self.distance) < 0):
            raise ValueError("distance transform must be nonnegative")
        if self.keypoints is not None:
            self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
            if self.confidences is None:
                self.confidences = np.ones(len(self.keypoints))
            self.confidences = np.asarray(self.confidences, dtype=float)


@dataclass(eq=False)
class FrameObservation:
    views: list
    point_cloud: np.ndarray | None = None

    @property
    def cameras(self):
        return [v.camera for v in self.views]

    def has(self, what: str) -> bool:
        if what == "point_cloud":
            return self.point_cloud is not None and len(self.point_cloud) > 0
        return len(self.views) > 0 and all(getattr(v, what) is not None for v in self.views)
