"""Small value types shared by the tracking and refinement stages."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class FrameId(NamedTuple):
    camera: int
    time: int

    def __str__(self):
        return f"c{self.camera}t{self.time}"


@dataclass
class FlowObservation:
    """Dense correspondence from frame i to frame j.

    ``flow`` is (H, W, 2) in pixels, ``weight`` the per-pixel confidence used
    as the diagonal information in bundle adjustment, ``mask`` the validity.
    """

    flow: np.ndarray
    weight: np.ndarray
    mask: np.ndarray

    @property
    def shape(self):
        return self.mask.shape


@dataclass
class FrameState:
    """Per-frame tracking variables.

    ``disparity`` holds a placeholder of 1.0 outside ``valid`` so that
    downstream arithmetic stays finite; those pixels never enter a residual.
    ``prior_depth`` is the aligned monocular depth (inf where unknown).
    """

    id: FrameId
    pose: object
    disparity: np.ndarray
    prior_depth: np.ndarray
    valid: np.ndarray
    intrinsics: object
    frozen: bool = False

    @property
    def depth(self):
        return np.where(self.valid, 1.0 / self.disparity, np.inf)
