"""Target reaching among moving axis-aligned rectangles.

Obstacles live in an arena frame fixed at the episode start (20 m square
centred on the start position, axes along world X/Z at spawn). Rectangles are
axis-aligned in that frame, so rigidly moving the world moves the arena frame
and nothing else changes.

Event order inside a step: hit count against the obstacles as they are when
the action is chosen, character playback, obstacle motion, then collision
test and sensing.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from .env_plane import (
    ACTION_DIM,
    COLLISION,
    RUNNING,
    STEP_SECONDS,
    SUCCESS,
    TIMEOUT,
    Character,
    EpisodeOver,
    decode_action,
    world_transform_frame,
    world_transform_points,
)
from .geometry import CharacterFrame
from .matching import MatchIndex, MatchResult
from .motion_db import POSE_DIM, FeatureDatabase
from .motion_db.features import TRAJ_POS_IDX

N_STAGES = 10
MAX_OBSTACLE_SPEED = 0.5
MAP_CELLS = 16
MAP_EXTENT = 6.0
CELL_SIZE = MAP_EXTENT / MAP_CELLS
MAP_SHAPE = (MAP_CELLS, MAP_CELLS, 2)
MAP_SIZE = MAP_CELLS * MAP_CELLS * 2
OBSTACLE_OBS_DIM = POSE_DIM + 2 + MAP_SIZE


@dataclass(frozen=True)
class CurriculumStage:
    stage: int

    def __post_init__(self):
        if not 0 <= self.stage < N_STAGES:
            raise ValueError(f"stage must lie in [0, {N_STAGES - 1}]")

    @property
    def obstacle_max_speed(self) -> float:
        return MAX_OBSTACLE_SPEED * self.stage / (N_STAGES - 1)

    @property
    def target_area_side(self) -> float:
        return 5.0 + 5.0 * self.stage / (N_STAGES - 1)


def curriculum_advance(history: Sequence[bool], stage: int, window: int = 100,
                       threshold: float = 0.4) -> int:
    """Next stage given the outcomes of episodes finished at ``stage``.

    Advances by one when more than ``threshold`` of the last ``window``
    outcomes are successes; never moves backwards, never passes the last
    stage, and waits until ``window`` outcomes exist.
    """
    if len(history) < window:
        return stage
    recent = list(history)[-window:]
    if sum(bool(h) for h in recent) / window > threshold:
        return min(stage + 1, N_STAGES - 1)
    return stage


@dataclass
class ObstacleField:
    """Rectangles in arena coordinates (``(forward, lateral)`` of ``frame``)."""

    frame: CharacterFrame
    centers: np.ndarray
    half_extents: np.ndarray
    velocities: np.ndarray
    arena_half: float = 10.0

    def __len__(self) -> int:
        return len(self.centers)

    def copy(self) -> "ObstacleField":
        return ObstacleField(self.frame, self.centers.copy(), self.half_extents.copy(),
                             self.velocities.copy(), self.arena_half)

    def to_arena(self, world_points) -> np.ndarray:
        return self.frame.to_local(world_points)

    def contains(self, world_points) -> np.ndarray:
        """(n_points, n_obstacles) strict point-in-rectangle table."""
        p = self.to_arena(np.atleast_2d(world_points))
        d = np.abs(p[:, None, :] - self.centers[None, :, :])
        return np.all(d < self.half_extents[None, :, :], axis=2)

    def inside_any(self, world_points) -> np.ndarray:
        return self.contains(world_points).any(axis=1)

    def disc_overlaps(self, world_point, radius: float) -> np.ndarray:
        """Per-obstacle flag: disc of ``radius`` at the point overlaps the rectangle."""
        p = self.to_arena(np.asarray(world_point, dtype=float))
        excess = np.maximum(np.abs(p - self.centers) - self.half_extents, 0.0)
        return (excess * excess).sum(axis=1) < radius * radius

    def world_corners(self) -> np.ndarray:
        signs = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=float)
        local = self.centers[:, None, :] + signs[None] * self.half_extents[:, None, :]
        return self.frame.to_world(local)


def _disc_overlap(centers, halves, point, radius) -> np.ndarray:
    excess = np.maximum(np.abs(point - centers) - halves, 0.0)
    return (excess * excess).sum(axis=-1) < radius * radius


def sample_field(stage: CurriculumStage, seed=None, *, frame: CharacterFrame | None = None,
                 count: int = 100, arena_side: float = 20.0, spawn=(0.0, 0.0),
                 spawn_radius: float = 1.0, max_half_extent: float = 1.5,
                 min_half_extent: float = 0.1, max_attempts: int = 1000) -> ObstacleField:
    """Random obstacles for one episode.

    ``spawn`` is given in arena coordinates. Rectangles start fully inside the
    arena; any rectangle touching the spawn disc is redrawn, and after
    ``max_attempts`` draws it is shrunk to the minimum size and, if still
    touching, pushed clear.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    frame = frame or CharacterFrame((0.0, 0.0), (0.0, 1.0))
    half_arena = arena_side / 2.0
    spawn = np.asarray(spawn, dtype=float)

    def draw(n):
        h = rng.uniform(min_half_extent, max_half_extent, size=(n, 2))
        return rng.uniform(-half_arena + h, half_arena - h), h

    centers, halves = draw(count)
    bad = np.flatnonzero(_disc_overlap(centers, halves, spawn, spawn_radius))
    attempts = 1
    while len(bad) and attempts < max_attempts:
        centers[bad], halves[bad] = draw(len(bad))
        bad = bad[_disc_overlap(centers[bad], halves[bad], spawn, spawn_radius)]
        attempts += 1
    for i in bad:
        halves[i] = min_half_extent
        if _disc_overlap(centers[i], halves[i], spawn, spawn_radius):
            away = centers[i] - spawn
            norm = np.hypot(*away)
            away = away / norm if norm > 1e-9 else np.array([1.0, 0.0])
            centers[i] = spawn + away * (spawn_radius + 2.0 * min_half_extent * np.sqrt(2.0))
            centers[i] = np.clip(centers[i], -half_arena + halves[i], half_arena - halves[i])

    vmax = stage.obstacle_max_speed
    angle = rng.uniform(0.0, 2.0 * np.pi, size=count)
    speed = rng.uniform(0.0, vmax, size=count) if vmax > 0 else np.zeros(count)
    vels = speed[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return ObstacleField(frame, centers, halves, vels, half_arena)


def advance_obstacles(field: ObstacleField, dt: float = STEP_SECONDS) -> ObstacleField:
    """Constant-velocity motion with elastic reflection off the arena walls."""
    out = field.copy()
    pos = out.centers + out.velocities * dt
    upper = field.arena_half - out.half_extents
    lower = -upper
    over = pos > upper
    under = pos < lower
    pos = np.where(over, 2.0 * upper - pos, pos)
    pos = np.where(under, 2.0 * lower - pos, pos)
    out.velocities = np.where(over | under, -out.velocities, out.velocities)
    out.centers = pos
    return out


def cell_centers() -> np.ndarray:
    """(16, 16, 2) egocentric cell centres; row 0 is furthest ahead, column 0 at -lateral."""
    idx = (np.arange(MAP_CELLS) + 0.5) * CELL_SIZE
    fwd = MAP_EXTENT / 2.0 - idx
    lat = -MAP_EXTENT / 2.0 + idx
    return np.stack(np.meshgrid(fwd, lat, indexing="ij"), axis=-1)


_CELLS = cell_centers().reshape(-1, 2)
_WINDOW_REACH = MAP_EXTENT / 2.0 * np.sqrt(2.0)


def sense_channel(field: ObstacleField, frame: CharacterFrame) -> np.ndarray:
    """One 16x16 binary occupancy channel around the character."""
    # arena coordinates are (forward, lateral) pairs, which flip handedness
    # against world (x, z); map cell centres through the world instead of
    # treating the relative frame as a character frame
    here = field.to_arena(frame.origin)
    near = np.all(np.abs(field.centers - here) <= field.half_extents + _WINDOW_REACH, axis=1)
    if not near.any():
        return np.zeros((MAP_CELLS, MAP_CELLS))
    pts = field.to_arena(frame.to_world(_CELLS))
    c = field.centers[near]
    h = field.half_extents[near]
    inside = ((np.abs(pts[:, :1] - c[:, 0]) < h[:, 0]) & (np.abs(pts[:, 1:] - c[:, 1]) < h[:, 1])).any(axis=1)
    return inside.reshape(MAP_CELLS, MAP_CELLS).astype(float)


def sense(field: ObstacleField, frame: CharacterFrame, previous: np.ndarray | None = None) -> np.ndarray:
    """Current channel plus the previous map's current channel (duplicated on the first step)."""
    cur = sense_channel(field, frame)
    prev = cur if previous is None else previous[..., 0]
    return np.stack([cur, prev], axis=-1)


def hits(traj, field: ObstacleField, frame: CharacterFrame) -> int:
    """How many of the three future root positions lie strictly inside an obstacle."""
    tau = np.asarray(traj, dtype=float)[TRAJ_POS_IDX].reshape(3, 2)
    return int(field.inside_any(frame.to_world(tau)).sum())


@dataclass
class ObstacleConfig:
    stage: int = 0
    hit_reward: bool = True
    n_obstacles: int = 100
    arena_side: float = 20.0
    spawn_radius: float = 1.0
    collision_radius: float = 0.3
    success_radius: float = 0.5
    success_bonus: float = 10.0
    safety_cap: int = 1000
    goal_attempts: int = 100


class ObstacleEnv:
    obs_dim = OBSTACLE_OBS_DIM
    action_dim = ACTION_DIM

    def __init__(self, db: FeatureDatabase, index: MatchIndex | None = None, config: ObstacleConfig | None = None,
                 seed: int | None = None, stitch_poses: bool = False):
        self.db = db
        self.config = config or ObstacleConfig()
        self.character = Character(db, index, stitch_poses)
        self.rng = np.random.default_rng(seed)
        self.goal = np.zeros(2)
        self.field: ObstacleField | None = None
        self.map = np.zeros(MAP_SHAPE)
        self.steps = 0
        self.status = RUNNING
        self.episode_return = 0.0
        self.episode_stage = self.config.stage
        self.collided_with: int | None = None

    @property
    def frame(self) -> CharacterFrame:
        return self.character.frame

    def set_stage(self, stage: int) -> None:
        """Takes effect at the next reset."""
        self.config = replace(self.config, stage=int(stage))

    def goal_local(self) -> np.ndarray:
        return self.frame.to_local(self.goal)

    def distance(self) -> float:
        return float(np.hypot(*(self.goal - self.frame.origin)))

    def observation(self) -> np.ndarray:
        return np.concatenate([self.character.pose_feature(), self.goal_local(), self.map.reshape(-1)])

    def apply_world_transform(self, yaw: float, translation) -> None:
        self.character.transform(yaw, translation)
        self.goal = world_transform_points(self.goal, yaw, translation)
        self.field.frame = world_transform_frame(self.field.frame, yaw, translation)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cfg = self.config
        stage = CurriculumStage(cfg.stage)
        row = self.db.valid_rows[self.rng.integers(self.db.n_valid)]
        self.character.reset(row)
        arena = CharacterFrame(self.frame.origin, (0.0, 1.0))
        self.field = sample_field(stage, self.rng, frame=arena, count=cfg.n_obstacles,
                                  arena_side=cfg.arena_side, spawn_radius=cfg.spawn_radius)
        half = stage.target_area_side / 2.0
        for _ in range(cfg.goal_attempts):
            goal = self.frame.origin + self.rng.uniform(-half, half, size=2)
            if not self.field.disc_overlaps(goal, cfg.collision_radius).any():
                break
        self.goal = goal
        self.map = sense(self.field, self.frame)
        self.steps = 0
        self.status = RUNNING
        self.episode_return = 0.0
        self.episode_stage = cfg.stage
        self.collided_with = None
        return self.observation()

    def begin_step(self, action) -> np.ndarray:
        """Decode ``action``, count hits, and return the normalized query."""
        if self.status != RUNNING:
            raise EpisodeOver(f"episode already ended ({self.status})")
        self._traj = decode_action(action)
        self._hits = hits(self._traj, self.field, self.frame)
        return self.character.query(self._traj)

    def step(self, action):
        return self.end_step(self.character.index.query(self.begin_step(action)))

    def end_step(self, match: MatchResult):
        cfg = self.config
        traj, n_hits = self._traj, self._hits
        self.character.apply(match)
        self.field = advance_obstacles(self.field)
        self.steps += 1
        dist = self.distance()
        reward = float(np.exp(-dist))
        if cfg.hit_reward:
            reward += float(np.exp(-n_hits))
        overlap = np.flatnonzero(self.field.disc_overlaps(self.frame.origin, cfg.collision_radius))
        self.map = sense(self.field, self.frame, self.map)
        if len(overlap):
            self.status = COLLISION
            self.collided_with = int(overlap[0])
        elif dist <= cfg.success_radius:
            self.status = SUCCESS
            reward += cfg.success_bonus
        elif self.steps >= cfg.safety_cap:
            self.status = TIMEOUT
        self.episode_return += reward
        info = {"status": self.status, "match": match, "traj": traj, "distance": dist,
                "hits": n_hits, "collided_with": self.collided_with, "capped": self.status == TIMEOUT}
        return self.observation(), reward, self.status != RUNNING, info
