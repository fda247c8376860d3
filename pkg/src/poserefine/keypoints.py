"""COCO 17-keypoint conventions: names, left/right pairs, KeypointSet."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

NUM_KEYPOINTS = 17

KEYPOINT_NAMES = (
    "nose",
    "left_eye", "right_eye",
    "left_ear", "right_ear",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip",
    "left_knee", "right_knee",
    "left_ankle", "right_ankle",
)

# (left index, right index) channel pairs swapped under horizontal flip
FLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))

# skeleton edges used by the synthetic renderer (0-indexed)
SKELETON = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12),
    (5, 11), (6, 12), (5, 6), (5, 7), (6, 8), (7, 9), (8, 10),
    (1, 2), (0, 1), (0, 2), (1, 3), (2, 4),
)

# extremity keypoints the paper's failure analysis singles out
EDGE_PRONE = (7, 8, 9, 10, 15, 16)  # elbows, wrists, ankles


@dataclass(frozen=True)
class KeypointSet:
    """One person's 17 keypoints: image-pixel xy, score in [0,1], COCO v flag."""

    xy: np.ndarray
    score: np.ndarray
    vis: np.ndarray

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64)
        score = np.asarray(self.score, dtype=np.float64)
        vis = np.asarray(self.vis, dtype=np.int64)
        if xy.shape != (NUM_KEYPOINTS, 2):
            raise ShapeError(f"KeypointSet.xy must be (17, 2), got {xy.shape}")
        if score.shape != (NUM_KEYPOINTS,) or vis.shape != (NUM_KEYPOINTS,):
            raise ShapeError("KeypointSet.score/vis must have 17 entries")
        if not np.isin(vis, (0, 1, 2)).all():
            raise ShapeError("KeypointSet.vis values must be in {0, 1, 2}")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "vis", vis)

    @classmethod
    def from_flat(cls, flat):
        """Build from the COCO [x1, y1, v1, ..., x17, y17, v17] layout."""
        arr = np.asarray(flat, dtype=np.float64)
        if arr.shape != (NUM_KEYPOINTS * 3,):
            raise ShapeError(f"expected {NUM_KEYPOINTS * 3} numbers, got {arr.shape}")
        trip = arr.reshape(NUM_KEYPOINTS, 3)
        vis = trip[:, 2].astype(np.int64)
        return cls(xy=trip[:, :2], score=(vis > 0).astype(np.float64), vis=vis)

    def to_flat(self):
        trip = np.concatenate(
            [self.xy, self.vis[:, None].astype(np.float64)], axis=1)
        return trip.reshape(-1)

    def labeled(self):
        return self.vis > 0
