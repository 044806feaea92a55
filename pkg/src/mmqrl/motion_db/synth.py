"""Procedural locomotion clips.

Each clip is driven by a per-frame (speed, turn rate) profile. The profile is
built from random segments (stand / walk / run, with or without turning) that
the actual kinematics approach with a first-order lag, so the data contains
starts, stops, accelerations and turns of every sharpness the config allows.
Feet follow an alternating sinusoidal gait whose cadence and stride scale
with speed, so foot features carry gait phase information.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..geometry import quat_from_axis_angle, quat_from_yaw, quat_mul
from .clips import DT, FPS, MIN_CLIP_FRAMES, MotionClip

MAX_SPEED = 4.0
MAX_TURN_RATE = 120.0  # deg/s

ROOT_HEIGHT = 0.92
FOOT_LATERAL = 0.1
ANKLE_HEIGHT = 0.06


class GaitConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GaitConfig:
    minutes: float = 10.0
    clip_seconds: tuple[float, float] = (8.0, 20.0)
    segment_seconds: tuple[float, float] = (0.8, 3.0)
    walk_speed: tuple[float, float] = (0.5, 1.8)
    run_speed: tuple[float, float] = (2.0, 3.5)
    turn_rate: tuple[float, float] = (20.0, 120.0)
    # probabilities of standing / walking / running segments
    gait_mix: tuple[float, float, float] = (0.15, 0.5, 0.35)
    turn_probability: float = 0.5
    speed_lag: float = 0.3
    turn_lag: float = 0.15

    def validate(self) -> None:
        if not self.minutes > 0:
            raise GaitConfigError("minutes must be positive")
        for name in ("walk_speed", "run_speed"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= MAX_SPEED:
                raise GaitConfigError(f"{name} must satisfy 0 <= lo <= hi <= {MAX_SPEED}")
        lo, hi = self.turn_rate
        if not 0.0 <= lo <= hi <= MAX_TURN_RATE:
            raise GaitConfigError(f"turn_rate must lie within [0, {MAX_TURN_RATE}] deg/s")
        for name in ("clip_seconds", "segment_seconds"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise GaitConfigError(f"{name} must satisfy 0 < lo <= hi")
        if self.clip_seconds[0] * FPS < MIN_CLIP_FRAMES:
            raise GaitConfigError(f"clips must be at least {MIN_CLIP_FRAMES} frames")
        mix = np.asarray(self.gait_mix, dtype=float)
        if mix.shape != (3,) or np.any(mix < 0) or mix.sum() <= 0:
            raise GaitConfigError("gait_mix needs three non-negative weights")
        if not 0.0 <= self.turn_probability <= 1.0:
            raise GaitConfigError("turn_probability must lie in [0, 1]")
        if self.speed_lag < 0 or self.turn_lag < 0:
            raise GaitConfigError("lags must be non-negative")
        if int(round(self.minutes * 60 * FPS)) < MIN_CLIP_FRAMES:
            raise GaitConfigError("total duration is shorter than one clip")

    def to_dict(self) -> dict:
        return asdict(self)


def clip_from_profile(clip_id: str, speed, turn_rate, *, heading0: float = 0.0,
                      origin=(0.0, 0.0), phase0: float = 0.0, source_tag: str = "synthetic") -> MotionClip:
    """Integrate per-frame speed (m/s) and turn rate (deg/s) into a clip.

    Frame ``k+1`` moves ``speed[k] / 30`` metres along the heading halfway
    through the frame interval, so a constant speed ``v`` covers exactly
    ``v`` metres every 30 frames.
    """
    speed = np.asarray(speed, dtype=float)
    omega = np.radians(np.asarray(turn_rate, dtype=float))
    n = len(speed)
    if omega.shape != speed.shape:
        raise ValueError("speed and turn_rate profiles differ in length")

    heading = heading0 + np.concatenate([[0.0], np.cumsum(omega[:-1] * DT)])
    mid = heading + 0.5 * omega * DT
    step = speed[:, None] * DT * np.stack([np.sin(mid), np.cos(mid)], axis=1)
    xz = np.asarray(origin, dtype=float) + np.concatenate([[[0.0, 0.0]], np.cumsum(step[:-1], axis=0)])

    # gait: activity also rises when turning on the spot so feet step around
    activity = np.clip(speed / 0.5 + np.abs(omega) / np.radians(60.0), 0.0, 1.0)
    cadence = (0.8 + 0.25 * speed) * activity  # gait cycles per second
    phase = phase0 + 2.0 * np.pi * np.concatenate([[0.0], np.cumsum(cadence[:-1] * DT)])
    stride_amp = np.divide(speed, 2.0 * np.pi * cadence, out=np.zeros(n), where=cadence > 1e-9)
    lift = activity * (0.08 + 0.06 * np.minimum(speed, 3.5) / 3.5)

    root_y = ROOT_HEIGHT - 0.03 * activity * 0.5 * (1.0 + np.cos(2.0 * phase)) - 0.04 * np.minimum(speed, 3.5) / 3.5
    root_pos = np.stack([xz[:, 0], root_y, xz[:, 1]], axis=1)

    lean = 0.03 * speed
    root_quat = quat_mul(quat_from_yaw(heading), quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), lean))

    fwd = np.stack([np.sin(heading), np.cos(heading)], axis=1)
    lat = np.stack([fwd[:, 1], -fwd[:, 0]], axis=1)

    def foot(side: float, ph: np.ndarray) -> np.ndarray:
        along = stride_amp * np.sin(ph)
        height = ANKLE_HEIGHT + lift * np.maximum(0.0, np.cos(ph))
        h = xz + along[:, None] * fwd + side * FOOT_LATERAL * lat
        return np.stack([h[:, 0], height, h[:, 1]], axis=1)

    return MotionClip(clip_id, root_pos, root_quat, foot(1.0, phase), foot(-1.0, phase + np.pi),
                      source_tag=source_tag)


def _segment_targets(cfg: GaitConfig, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray, list[str]]:
    mix = np.asarray(cfg.gait_mix, dtype=float)
    mix = mix / mix.sum()
    speed = np.empty(n)
    turn = np.empty(n)
    kinds = []
    k = 0
    while k < n:
        length = int(round(rng.uniform(*cfg.segment_seconds) * FPS))
        length = max(1, min(length, n - k))
        gait = rng.choice(3, p=mix)
        if gait == 0:
            v = 0.0
        elif gait == 1:
            v = rng.uniform(*cfg.walk_speed)
        else:
            v = rng.uniform(*cfg.run_speed)
        w = 0.0
        if rng.uniform() < cfg.turn_probability:
            w = rng.uniform(*cfg.turn_rate) * rng.choice([-1.0, 1.0])
        speed[k:k + length] = v
        turn[k:k + length] = w
        kinds.append(("stand", "walk", "run")[gait] + ("-turn" if w else ""))
        k += length
    return speed, turn, kinds


def _lagged(target: np.ndarray, start: float, lag: float) -> np.ndarray:
    out = np.empty_like(target)
    alpha = 1.0 if lag <= 0 else min(1.0, DT / lag)
    x = start
    for k, t in enumerate(target):
        x += alpha * (t - x)
        out[k] = x
    return out


def _clip_lengths(cfg: GaitConfig, rng: np.random.Generator, total: int) -> list[int]:
    lengths = []
    remaining = total
    while remaining > 0:
        n = int(round(rng.uniform(*cfg.clip_seconds) * FPS))
        if remaining - n < MIN_CLIP_FRAMES:
            n = remaining
        lengths.append(n)
        remaining -= n
    if lengths[-1] < MIN_CLIP_FRAMES and len(lengths) > 1:
        tail = lengths.pop()
        lengths[-1] += tail
    return lengths


def generate_synthetic_locomotion(config: GaitConfig | None = None, seed: int = 0) -> list[MotionClip]:
    """Deterministic synthetic locomotion dataset.

    The total frame count is ``round(minutes * 60 * 30)``.
    """
    cfg = config or GaitConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    total = int(round(cfg.minutes * 60 * FPS))
    clips = []
    for c, n in enumerate(_clip_lengths(cfg, rng, total)):
        speed_t, turn_t, kinds = _segment_targets(cfg, rng, n)
        v0 = speed_t[0] if rng.uniform() < 0.5 else 0.0
        speed = np.clip(_lagged(speed_t, v0, cfg.speed_lag), 0.0, MAX_SPEED)
        turn = _lagged(turn_t, turn_t[0], cfg.turn_lag)
        clips.append(clip_from_profile(
            f"synth{c:04d}", speed, turn,
            heading0=rng.uniform(-np.pi, np.pi),
            origin=rng.uniform(-50.0, 50.0, size=2),
            phase0=rng.uniform(0.0, 2.0 * np.pi),
            source_tag="synthetic:" + ",".join(kinds),
        ))
    return clips
