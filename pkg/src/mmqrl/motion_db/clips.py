"""Motion clips and the ``MMC1`` clip file format.

A clip file is a sequence of records. Each record is::

    magic        4 bytes   b"MMC1"
    n_frames     uint32
    fps          uint32    always 30
    forward      3 x float32  reference forward axis in the clip's root space
    tag_len      uint16
    tag          tag_len bytes, UTF-8 ("<id>|<source_tag>")
    rows         n_frames x 13 float32
                 (root_pos xyz, root_quat wxyz, lfoot xyz, rfoot xyz)

All integers and floats are little-endian. World is Y-up, horizontal plane
X/Z. Imported data whose characters face another axis declares it in
``forward``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..geometry import (
    CharacterFrame,
    DegenerateFacing,
    REFERENCE_FORWARD,
    horizontal_forward,
    quat_from_yaw,
    quat_mul,
    quat_rotate,
)

FPS = 30
DT = 1.0 / FPS
STEP_FRAMES = 6
TRAJ_OFFSETS = (10, 20, 30)
MIN_CLIP_FRAMES = 1 + TRAJ_OFFSETS[-1] + STEP_FRAMES

MAGIC = b"MMC1"
_HEADER = struct.Struct("<4sII3fH")
_ROW_DTYPE = np.dtype("<f4")


class ClipFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    root_pos: np.ndarray
    root_orient: np.ndarray
    lfoot_pos: np.ndarray
    rfoot_pos: np.ndarray

    def __post_init__(self):
        for name in ("root_pos", "root_orient", "lfoot_pos", "rfoot_pos"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        values = np.concatenate([self.root_pos, self.root_orient, self.lfoot_pos, self.rfoot_pos])
        if values.shape != (13,) or not np.all(np.isfinite(values)):
            raise ValueError("pose must hold 13 finite values")
        if abs(np.linalg.norm(self.root_orient) - 1.0) > 1e-9:
            raise ValueError("root orientation is not a unit quaternion")


@dataclass
class MotionClip:
    """A 30 Hz clip stored as per-frame arrays."""

    id: str
    root_pos: np.ndarray
    root_quat: np.ndarray
    lfoot: np.ndarray
    rfoot: np.ndarray
    source_tag: str = ""
    forward_axis: np.ndarray = field(default_factory=lambda: REFERENCE_FORWARD.copy())

    def __post_init__(self):
        self.root_pos = np.asarray(self.root_pos, dtype=float)
        self.root_quat = np.asarray(self.root_quat, dtype=float)
        self.root_quat = self.root_quat / np.linalg.norm(self.root_quat, axis=1, keepdims=True)
        self.lfoot = np.asarray(self.lfoot, dtype=float)
        self.rfoot = np.asarray(self.rfoot, dtype=float)
        self.forward_axis = np.asarray(self.forward_axis, dtype=float)
        n = len(self.root_pos)
        if n < MIN_CLIP_FRAMES:
            raise ValueError(f"clip {self.id!r} has {n} frames, needs at least {MIN_CLIP_FRAMES}")
        for arr, width in ((self.root_quat, 4), (self.lfoot, 3), (self.rfoot, 3), (self.root_pos, 3)):
            if arr.shape != (n, width):
                raise ValueError(f"clip {self.id!r}: inconsistent array shapes")
        if not all(np.all(np.isfinite(a)) for a in (self.root_pos, self.root_quat, self.lfoot, self.rfoot)):
            raise ValueError(f"clip {self.id!r} contains non-finite values")

    def __len__(self) -> int:
        return len(self.root_pos)

    def pose(self, i: int) -> Pose:
        return Pose(self.root_pos[i], self.root_quat[i], self.lfoot[i], self.rfoot[i])

    def poses(self, start: int, stop: int) -> dict[str, np.ndarray]:
        return {
            "root_pos": self.root_pos[start:stop].copy(),
            "root_quat": self.root_quat[start:stop].copy(),
            "lfoot": self.lfoot[start:stop].copy(),
            "rfoot": self.rfoot[start:stop].copy(),
        }

    def frames(self) -> tuple[np.ndarray, np.ndarray]:
        """Character-frame origins and forwards for every frame."""
        origins = self.root_pos[:, [0, 2]].copy()
        f3 = quat_rotate(self.root_quat, np.broadcast_to(self.forward_axis, (len(self), 3)))
        f2 = f3[:, [0, 2]]
        norms = np.linalg.norm(f2, axis=1)
        ok = norms >= 1e-6
        if not ok.any():
            raise DegenerateFacing(f"clip {self.id!r} never faces horizontally")
        forwards = np.zeros_like(f2)
        forwards[ok] = f2[ok] / norms[ok, None]
        # degenerate frames inherit the previous usable forward
        first = int(np.argmax(ok))
        for i in np.flatnonzero(~ok):
            forwards[i] = forwards[first] if i < first else forwards[i - 1]
        return origins, forwards

    def as_rows(self) -> np.ndarray:
        return np.concatenate([self.root_pos, self.root_quat, self.lfoot, self.rfoot], axis=1)

    @classmethod
    def from_rows(cls, id: str, rows: np.ndarray, source_tag: str = "",
                  forward_axis=REFERENCE_FORWARD) -> "MotionClip":
        rows = np.asarray(rows, dtype=float)
        return cls(id, rows[:, 0:3], rows[:, 3:7], rows[:, 7:10], rows[:, 10:13],
                   source_tag=source_tag, forward_axis=forward_axis)

    def transformed(self, yaw: float, translation) -> "MotionClip":
        """Copy of the clip rigidly moved by a world yaw then a translation."""
        q = quat_from_yaw(yaw)
        t = np.asarray(translation, dtype=float)
        return MotionClip(
            self.id,
            quat_rotate(q, self.root_pos) + t,
            quat_mul(np.broadcast_to(q, self.root_quat.shape), self.root_quat),
            quat_rotate(q, self.lfoot) + t,
            quat_rotate(q, self.rfoot) + t,
            source_tag=self.source_tag,
            forward_axis=self.forward_axis,
        )


def compute_character_frame(pose: Pose, forward_axis=REFERENCE_FORWARD) -> CharacterFrame:
    """Character frame of a single pose.

    Raises ``DegenerateFacing`` when the character faces straight up or down;
    callers keep the previous frame's forward in that case.
    """
    forward = horizontal_forward(pose.root_orient, forward_axis)
    return CharacterFrame(pose.root_pos[[0, 2]], forward)


# -- file IO --------------------------------------------------------------

def write_clips(path, clips: Iterable[MotionClip]) -> None:
    with open(path, "wb") as fh:
        for clip in clips:
            tag = f"{clip.id}|{clip.source_tag}".encode("utf-8")
            fh.write(_HEADER.pack(MAGIC, len(clip), FPS, *map(float, clip.forward_axis), len(tag)))
            fh.write(tag)
            fh.write(clip.as_rows().astype(_ROW_DTYPE).tobytes())


def read_clips(path) -> list[MotionClip]:
    data = Path(path).read_bytes()
    clips = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < _HEADER.size:
            raise ClipFormatError(f"{path}: truncated header at byte {pos}")
        magic, n, fps, fx, fy, fz, tag_len = _HEADER.unpack_from(data, pos)
        if magic != MAGIC:
            raise ClipFormatError(f"{path}: bad magic {magic!r} at byte {pos}")
        if fps != FPS:
            raise ClipFormatError(f"{path}: clip declares {fps} Hz, only {FPS} Hz is supported")
        pos += _HEADER.size
        tag = data[pos:pos + tag_len].decode("utf-8")
        pos += tag_len
        nbytes = n * 13 * _ROW_DTYPE.itemsize
        if len(data) - pos < nbytes:
            raise ClipFormatError(f"{path}: truncated frame data")
        rows = np.frombuffer(data, dtype=_ROW_DTYPE, count=n * 13, offset=pos).reshape(n, 13)
        pos += nbytes
        clip_id, _, source = tag.partition("|")
        clips.append(MotionClip.from_rows(clip_id, rows, source, (fx, fy, fz)))
    return clips
