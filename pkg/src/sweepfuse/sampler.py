"""Keyframe bundle sampling.

Groups an incoming posed image stream into fixed-size bundles for multi-view
depth estimation. Consecutive frames join the current window only when their
relative motion stays inside SamplingCriteria; a violating frame restarts the
window at itself, so bundles never straddle a jump. Bundles do not overlap:
emission clears the window.

Backpressure is explicit: the caller reports whether the depth stage is busy
before pushing a frame, and busy frames are dropped without entering any
window while stream bookkeeping (id monotonicity) still advances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import StreamError
from .geometry import CameraIntrinsics, RigidPose, rotation_angle_deg, translation_distance

DEFAULT_BUNDLE_SIZE = 5
MAX_TRANSLATION_FACTOR = 50.0


@dataclass(frozen=True)
class SamplingCriteria:
    """Pairwise motion gates between consecutive bundle members.

    max_translation defaults to 50x min_translation; unbounded drift would
    otherwise let a teleporting pose stream form geometrically useless
    bundles.
    """

    max_rotation_deg: float = 5.0
    min_translation: float = 0.02
    max_translation: Optional[float] = None

    def __post_init__(self) -> None:
        if self.max_rotation_deg <= 0.0:
            raise ValueError("max_rotation_deg must be positive")
        if self.min_translation < 0.0:
            raise ValueError("min_translation must be non-negative")
        if self.max_translation is None:
            default = (MAX_TRANSLATION_FACTOR * self.min_translation
                       if self.min_translation > 0.0 else float("inf"))
            object.__setattr__(self, "max_translation", default)
        if self.max_translation < self.min_translation:
            raise ValueError("max_translation must be >= min_translation")


@dataclass
class Keyframe:
    frame_id: int
    timestamp: float
    image: Optional[np.ndarray]
    pose: RigidPose


@dataclass
class ImageBundle:
    """An odd-sized group of keyframes; the middle one is the reference."""

    frames: list[Keyframe]
    intrinsics: CameraIntrinsics

    def __post_init__(self) -> None:
        if len(self.frames) < 3 or len(self.frames) % 2 == 0:
            raise ValueError("bundle needs an odd frame count >= 3")

    @property
    def reference_index(self) -> int:
        return len(self.frames) // 2

    @property
    def reference(self) -> Keyframe:
        return self.frames[self.reference_index]

    @property
    def matching(self) -> list[Keyframe]:
        r = self.reference_index
        return [f for i, f in enumerate(self.frames) if i != r]


def check_pair(criteria: SamplingCriteria, a: RigidPose, b: RigidPose) -> bool:
    """True when the relative motion a->b satisfies the criteria."""
    if rotation_angle_deg(a, b) > criteria.max_rotation_deg:
        return False
    dist = translation_distance(a, b)
    return criteria.min_translation <= dist <= criteria.max_translation


class BundleSampler:
    """Run-based bundle assembly over a strictly id-ordered keyframe stream.

    Memory stays bounded by bundle_size regardless of stream length.
    """

    def __init__(self, intrinsics: CameraIntrinsics,
                 criteria: Optional[SamplingCriteria] = None,
                 bundle_size: int = DEFAULT_BUNDLE_SIZE) -> None:
        if bundle_size < 3 or bundle_size % 2 == 0:
            raise ValueError("bundle_size must be odd and >= 3")
        self.intrinsics = intrinsics
        self.criteria = criteria if criteria is not None else SamplingCriteria()
        self.bundle_size = bundle_size
        self._window: list[Keyframe] = []
        self._last_id: Optional[int] = None
        self._last_pose: Optional[RigidPose] = None
        self._last_timestamp: Optional[float] = None

    def _advance_stream(self, kf: Keyframe) -> None:
        if self._last_id is not None and kf.frame_id <= self._last_id:
            raise StreamError(
                f"frame id {kf.frame_id} not increasing (last {self._last_id})")
        self._last_id = kf.frame_id
        self._last_pose = kf.pose
        self._last_timestamp = kf.timestamp

    def apply_backpressure(self, depth_busy: bool, kf: Keyframe) -> bool:
        """Gate a frame on downstream load.

        Returns True when the frame may be pushed. When the depth stage is
        busy the frame is discarded here: the stream watermark still moves so
        later id checks stay meaningful, but the frame never joins a window.
        """
        if not depth_busy:
            return True
        self._advance_stream(kf)
        return False

    def push_keyframe(self, kf: Keyframe) -> Optional[ImageBundle]:
        """Add a frame; returns a finished bundle when the window fills."""
        self._advance_stream(kf)
        if self._window and not check_pair(self.criteria, self._window[-1].pose, kf.pose):
            self._window = [kf]
        else:
            self._window.append(kf)
        if len(self._window) == self.bundle_size:
            bundle = ImageBundle(self._window, self.intrinsics)
            self._window = []
            return bundle
        return None

    @property
    def window_size(self) -> int:
        return len(self._window)

    @property
    def last_frame_id(self) -> Optional[int]:
        return self._last_id
