"""Matching features: 15 pose values plus 12 trajectory values per frame.

Flattened layout of one 27-vector::

    [0:3]   left foot position      (forward, up, lateral)
    [3:6]   right foot position
    [6:9]   left foot velocity
    [9:12]  right foot velocity
    [12:15] root velocity
    [15:27] tau_10, dir_10, tau_20, dir_20, tau_30, dir_30   (forward, lateral)

Everything is expressed in the character frame of the frame being described.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clips import FPS, STEP_FRAMES, TRAJ_OFFSETS, MotionClip

POSE_DIM = 15
TRAJ_DIM = 12
FEATURE_DIM = POSE_DIM + TRAJ_DIM

# positions and directions inside the 12-dim trajectory block
TRAJ_POS_IDX = np.array([0, 1, 4, 5, 8, 9])
TRAJ_DIR_IDX = np.array([2, 3, 6, 7, 10, 11])


@dataclass(frozen=True)
class PoseFeature:
    lfoot_pos: np.ndarray
    rfoot_pos: np.ndarray
    lfoot_vel: np.ndarray
    rfoot_vel: np.ndarray
    root_vel: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.lfoot_pos, self.rfoot_pos, self.lfoot_vel,
                               self.rfoot_vel, self.root_vel]).astype(float)

    @classmethod
    def from_array(cls, a) -> "PoseFeature":
        a = np.asarray(a, dtype=float)
        if a.shape != (POSE_DIM,):
            raise ValueError(f"pose feature needs {POSE_DIM} values, got {a.shape}")
        return cls(a[0:3], a[3:6], a[6:9], a[9:12], a[12:15])


@dataclass(frozen=True)
class TrajectoryFeature:
    tau: np.ndarray  # (3, 2)
    dir: np.ndarray  # (3, 2)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.tau, self.dir], axis=1).reshape(TRAJ_DIM).astype(float)

    @classmethod
    def from_array(cls, a) -> "TrajectoryFeature":
        a = np.asarray(a, dtype=float)
        if a.shape != (TRAJ_DIM,):
            raise ValueError(f"trajectory feature needs {TRAJ_DIM} values, got {a.shape}")
        blocks = a.reshape(3, 4)
        return cls(blocks[:, :2].copy(), blocks[:, 2:].copy())


@dataclass(frozen=True)
class FeatureVector:
    pose: PoseFeature
    traj: TrajectoryFeature

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.pose.to_array(), self.traj.to_array()])


def _local3(origins, forwards, v, translate):
    f = forwards
    l = np.stack([f[:, 1], -f[:, 0]], axis=1)
    h = v[:, [0, 2]] - origins if translate else v[:, [0, 2]]
    return np.stack([np.einsum("ij,ij->i", h, f), v[:, 1], np.einsum("ij,ij->i", h, l)], axis=1)


def _local2(origins, forwards, v, translate):
    f = forwards
    l = np.stack([f[:, 1], -f[:, 0]], axis=1)
    h = v - origins if translate else v
    return np.stack([np.einsum("ij,ij->i", h, f), np.einsum("ij,ij->i", h, l)], axis=1)


def valid_mask(n_frames: int) -> np.ndarray:
    i = np.arange(n_frames)
    return (i >= 1) & (i + TRAJ_OFFSETS[-1] < n_frames) & (i + STEP_FRAMES < n_frames)


def clip_features(clip: MotionClip) -> tuple[np.ndarray, np.ndarray]:
    """Raw (unnormalized) features for every frame plus the validity mask.

    Rows outside the mask are filled with clamped lookups and are never
    matched against.
    """
    n = len(clip)
    origins, forwards = clip.frames()
    prev = np.maximum(np.arange(n) - 1, 0)

    out = np.empty((n, FEATURE_DIM))
    out[:, 0:3] = _local3(origins, forwards, clip.lfoot, True)
    out[:, 3:6] = _local3(origins, forwards, clip.rfoot, True)
    for col, arr in ((6, clip.lfoot), (9, clip.rfoot), (12, clip.root_pos)):
        vel = (arr - arr[prev]) * FPS
        out[:, col:col + 3] = _local3(origins, forwards, vel, False)

    for k, off in enumerate(TRAJ_OFFSETS):
        j = np.minimum(np.arange(n) + off, n - 1)
        base = POSE_DIM + 4 * k
        out[:, base:base + 2] = _local2(origins, forwards, origins[j], True)
        out[:, base + 2:base + 4] = _local2(origins, forwards, forwards[j], False)
    return out, valid_mask(n)


def extract_pose_feature(clip: MotionClip, i: int) -> PoseFeature:
    n = len(clip)
    if not 1 <= i < n:
        raise IndexError(f"pose feature needs 1 <= i < {n}, got {i}")
    origins, forwards = clip.frames()
    o, f = origins[i:i + 1], forwards[i:i + 1]
    vals = [
        _local3(o, f, clip.lfoot[i:i + 1], True),
        _local3(o, f, clip.rfoot[i:i + 1], True),
    ]
    for arr in (clip.lfoot, clip.rfoot, clip.root_pos):
        vals.append(_local3(o, f, (arr[i:i + 1] - arr[i - 1:i]) * FPS, False))
    return PoseFeature(*(v[0] for v in vals))


def extract_trajectory_feature(clip: MotionClip, i: int) -> TrajectoryFeature:
    n = len(clip)
    if i < 1 or i + TRAJ_OFFSETS[-1] >= n:
        raise IndexError(f"trajectory feature needs 1 <= i and i + {TRAJ_OFFSETS[-1]} < {n}, got {i}")
    origins, forwards = clip.frames()
    o, f = origins[i:i + 1], forwards[i:i + 1]
    j = [i + off for off in TRAJ_OFFSETS]
    tau = _local2(np.repeat(o, 3, 0), np.repeat(f, 3, 0), origins[j], True)
    dirs = _local2(np.repeat(o, 3, 0), np.repeat(f, 3, 0), forwards[j], False)
    return TrajectoryFeature(tau, dirs)
