"""Open-ground target reaching driven by motion-matching queries.

One environment step is one query: the policy's 12 trajectory values are
joined with the character's current pose feature, the closest database frame
is found, and the 6 frames after it are played back (0.2 s at 30 Hz).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CharacterFrame, quat_from_yaw, quat_mul, quat_rotate
from .matching import MatchIndex, MatchResult, PoseSeq, RigidMap, build_accelerator, play_segment, stitch
from .motion_db import DT, POSE_DIM, STEP_FRAMES, TRAJ_DIM, FeatureDatabase, TrajectoryFeature
from .motion_db.features import TRAJ_DIR_IDX, TRAJ_POS_IDX

STEP_SECONDS = STEP_FRAMES * DT
ACTION_DIM = TRAJ_DIM
PLANE_OBS_DIM = POSE_DIM + 2
POSITION_LIMIT = 4.0

RUNNING = "running"
SUCCESS = "success"
TIMEOUT = "timeout"
COLLISION = "collision"


class EpisodeOver(RuntimeError):
    """Raised when stepping an episode that has already finished."""


def decode_action(raw) -> np.ndarray:
    """Network output -> valid 12-dim trajectory feature (flat)."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (ACTION_DIM,):
        raise ValueError(f"action needs {ACTION_DIM} values, got {raw.shape}")
    out = raw.copy()
    out[TRAJ_POS_IDX] = np.clip(raw[TRAJ_POS_IDX], -POSITION_LIMIT, POSITION_LIMIT)
    dirs = raw[TRAJ_DIR_IDX].reshape(3, 2)
    n = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.where(n < 1e-6, np.array([1.0, 0.0]), dirs / np.maximum(n, 1e-300))
    out[TRAJ_DIR_IDX] = dirs.reshape(6)
    return out


def decode_trajectory(raw) -> TrajectoryFeature:
    return TrajectoryFeature.from_array(decode_action(raw))


def world_transform_frame(frame: CharacterFrame, yaw: float, translation) -> CharacterFrame:
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, s], [-s, c]])
    return CharacterFrame(rot @ frame.origin + np.asarray(translation, dtype=float), rot @ frame.forward)


def world_transform_points(points, yaw: float, translation) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, s], [-s, c]])
    return np.asarray(points, dtype=float) @ rot.T + np.asarray(translation, dtype=float)


class Character:
    """Kinematic character advanced by motion matching.

    The live world frame is tracked exactly; stitched world poses are only
    produced when ``stitch_poses`` is set (rollout dumps, checks), since the
    frame update does not depend on them.
    """

    def __init__(self, db: FeatureDatabase, index: MatchIndex | None = None, stitch_poses: bool = False):
        self.db = db
        self.index = index if index is not None else build_accelerator(db)
        self.stitch_poses = stitch_poses
        self.row = -1
        self.frame: CharacterFrame | None = None
        self.pose: PoseSeq | None = None
        self.segment: PoseSeq | None = None
        self.last_match: MatchResult | None = None

    def db_frame(self, row: int) -> CharacterFrame:
        return CharacterFrame(self.db.frame_origin[row], self.db.frame_forward[row])

    def db_pose(self, row: int) -> PoseSeq:
        clip = self.db.clips[self.db.clip_index[row]]
        i = int(self.db.frame_index[row])
        p = clip.poses(i, i + 1)
        return PoseSeq(p["root_pos"], p["root_quat"], p["lfoot"], p["rfoot"])

    def reset(self, row: int) -> None:
        self.row = int(row)
        self.frame = self.db_frame(row)
        self.pose = self.db_pose(row) if self.stitch_poses else None
        self.segment = None
        self.last_match = None

    def pose_feature(self) -> np.ndarray:
        return self.db.raw[self.row, :POSE_DIM]

    def query(self, traj: np.ndarray) -> np.ndarray:
        return self.db.normalize(np.concatenate([self.pose_feature(), traj]))

    def advance(self, traj: np.ndarray) -> MatchResult:
        return self.apply(self.index.query(self.query(traj)))

    def apply(self, match: MatchResult) -> MatchResult:
        """Play back the segment after ``match`` and move the live frame."""
        anchor = self.db_frame(match.row)
        nxt = match.row + STEP_FRAMES
        if self.stitch_poses:
            seg, _ = play_segment(self.db, match)
            self.segment = stitch(self.pose, self.frame, self.db_pose(match.row), anchor, seg)
            self.pose = self.segment[len(self.segment) - 1]
        self.frame = RigidMap(anchor, self.frame).frame(self.db_frame(nxt))
        self.row = nxt
        self.last_match = match
        return match

    def transform(self, yaw: float, translation) -> None:
        """Rigidly move the character in the world."""
        self.frame = world_transform_frame(self.frame, yaw, translation)
        if self.pose is not None:
            q = quat_from_yaw(yaw)
            t = np.array([translation[0], 0.0, translation[1]], dtype=float)

            def pts(p):
                return quat_rotate(q, p) + t

            self.pose = PoseSeq(pts(self.pose.root_pos), quat_mul(np.broadcast_to(q, self.pose.root_quat.shape),
                                                                  self.pose.root_quat),
                                pts(self.pose.lfoot), pts(self.pose.rfoot))

    @property
    def root_position(self) -> np.ndarray:
        """World root position: stitched if available, else frame origin at clip height."""
        if self.pose is not None:
            return self.pose.root_pos[0].copy()
        y = self.db.clips[self.db.clip_index[self.row]].root_pos[self.db.frame_index[self.row], 1]
        return np.array([self.frame.origin[0], y, self.frame.origin[1]])


@dataclass
class PlaneConfig:
    max_steps: int = 300
    goal_half_extent: float = 5.0
    success_radius: float = 0.5
    success_bonus: float = 1000.0


class PlaneEnv:
    """Reach a goal sampled in a square around the start position."""

    obs_dim = PLANE_OBS_DIM
    action_dim = ACTION_DIM

    def __init__(self, db: FeatureDatabase, index: MatchIndex | None = None, config: PlaneConfig | None = None,
                 seed: int | None = None, stitch_poses: bool = False):
        self.db = db
        self.config = config or PlaneConfig()
        self.character = Character(db, index, stitch_poses)
        self.rng = np.random.default_rng(seed)
        self.goal = np.zeros(2)
        self.steps = 0
        self.status = RUNNING
        self.episode_return = 0.0

    # -- state helpers ----------------------------------------------------
    @property
    def frame(self) -> CharacterFrame:
        return self.character.frame

    def goal_local(self) -> np.ndarray:
        return self.frame.to_local(self.goal)

    def distance(self) -> float:
        return float(np.hypot(*(self.goal - self.frame.origin)))

    def observation(self) -> np.ndarray:
        return np.concatenate([self.character.pose_feature(), self.goal_local()])

    def apply_world_transform(self, yaw: float, translation) -> None:
        """Yaw + translate the whole world (character and goal together)."""
        self.character.transform(yaw, translation)
        self.goal = world_transform_points(self.goal, yaw, translation)

    # -- episode ----------------------------------------------------------
    def _sample_start(self) -> None:
        row = self.db.valid_rows[self.rng.integers(self.db.n_valid)]
        self.character.reset(row)
        h = self.config.goal_half_extent
        self.goal = self.frame.origin + self.rng.uniform(-h, h, size=2)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._sample_start()
        self.steps = 0
        self.status = RUNNING
        self.episode_return = 0.0
        return self.observation()

    def begin_step(self, action) -> np.ndarray:
        """Decode ``action`` and return the normalized query for it.

        ``step`` is ``end_step(index.query(begin_step(action)))``; the split
        lets several environments share one batched search.
        """
        if self.status != RUNNING:
            raise EpisodeOver(f"episode already ended ({self.status})")
        self._traj = decode_action(action)
        return self.character.query(self._traj)

    def step(self, action):
        return self.end_step(self.character.index.query(self.begin_step(action)))

    def end_step(self, match: MatchResult):
        traj = self._traj
        self.character.apply(match)
        self.steps += 1
        dist = self.distance()
        reward = float(np.exp(-dist))
        if dist <= self.config.success_radius:
            self.status = SUCCESS
            reward += self.config.success_bonus
        elif self.steps >= self.config.max_steps:
            self.status = TIMEOUT
        self.episode_return += reward
        info = {"status": self.status, "match": match, "traj": traj, "distance": dist}
        return self.observation(), reward, self.status != RUNNING, info
