"""Quaternion and horizontal-frame helpers.

Conventions used throughout the package:

* World is Y-up. The horizontal plane is spanned by world X and Z, and a
  horizontal world point is stored as the 2-vector ``(x, z)``.
* Quaternions are ``(w, x, y, z)``.
* The reference forward axis of a character is world +Z.
* A character frame has axes ``forward``, ``up`` and ``lateral = up x forward``.
  Character-frame 3-vectors are ordered ``(forward, up, lateral)`` and
  character-frame 2-vectors ``(forward, lateral)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REFERENCE_FORWARD = np.array([0.0, 0.0, 1.0])
UP = np.array([0.0, 1.0, 0.0])


class DegenerateFacing(ValueError):
    """Root forward axis has (almost) no horizontal component."""


# -- quaternions ----------------------------------------------------------

def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, v):
    """Rotate vectors ``v`` by unit quaternions ``q`` (broadcasting)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_from_yaw(yaw):
    """Rotation of ``yaw`` radians about world up."""
    yaw = np.asarray(yaw, dtype=float)
    half = 0.5 * yaw
    zero = np.zeros_like(half)
    return np.stack([np.cos(half), zero, np.sin(half), zero], axis=-1)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(0.5 * angle), np.sin(0.5 * angle) * axis], axis=-1)


def quat_to_matrix(q):
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def quat_angle(q):
    """Rotation angle (radians, in [0, pi]) of unit quaternions."""
    q = np.asarray(q, dtype=float)
    vec = np.linalg.norm(q[..., 1:], axis=-1)
    return 2.0 * np.arctan2(vec, np.abs(q[..., 0]))


def quat_scale(q, s):
    """Slerp from identity towards ``q`` by fraction ``s``."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    angle = quat_angle(q)
    vec = q[..., 1:]
    n = np.linalg.norm(vec, axis=-1, keepdims=True)
    axis = np.divide(vec, n, out=np.zeros_like(vec), where=n > 1e-300)
    half = 0.5 * np.asarray(s, dtype=float) * angle
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


# -- horizontal frames ----------------------------------------------------

def heading_of(forward2):
    """Yaw angle of a horizontal direction ``(x, z)``; 0 means +Z."""
    forward2 = np.asarray(forward2, dtype=float)
    return np.arctan2(forward2[..., 0], forward2[..., 1])


def lateral_of(forward2):
    forward2 = np.asarray(forward2, dtype=float)
    return np.stack([forward2[..., 1], -forward2[..., 0]], axis=-1)


def rotate2(v, cos_a, sin_a):
    """Rotate horizontal ``(x, z)`` vectors by a yaw given as (cos, sin)."""
    v = np.asarray(v, dtype=float)
    x, z = v[..., 0], v[..., 1]
    return np.stack([cos_a * x + sin_a * z, -sin_a * x + cos_a * z], axis=-1)


@dataclass(frozen=True)
class CharacterFrame:
    """Egocentric frame at the horizontal root position."""

    origin: np.ndarray
    forward: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(2)
        forward = np.asarray(self.forward, dtype=float).reshape(2)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "forward", forward)
        # rows: forward, lateral
        object.__setattr__(self, "_basis", np.array([[forward[0], forward[1]], [forward[1], -forward[0]]]))

    @classmethod
    def from_heading(cls, origin, heading: float) -> "CharacterFrame":
        return cls(origin, (np.sin(heading), np.cos(heading)))

    @property
    def lateral(self) -> np.ndarray:
        return self._basis[1].copy()

    @property
    def heading(self) -> float:
        return float(heading_of(self.forward))

    def to_local(self, points):
        """World ``(x, z)`` points -> character ``(forward, lateral)``."""
        return (np.asarray(points, dtype=float) - self.origin) @ self._basis.T

    def to_world(self, local):
        return self.origin + np.asarray(local, dtype=float) @ self._basis

    def dir_to_local(self, dirs):
        return np.asarray(dirs, dtype=float) @ self._basis.T

    def dir_to_world(self, local):
        return np.asarray(local, dtype=float) @ self._basis

    def vec3_to_local(self, v):
        """World 3-vectors -> ``(forward, up, lateral)`` components."""
        v = np.asarray(v, dtype=float)
        h = self.dir_to_local(v[..., [0, 2]])
        return np.stack([h[..., 0], v[..., 1], h[..., 1]], axis=-1)

    def point3_to_local(self, p):
        p = np.asarray(p, dtype=float)
        h = self.to_local(p[..., [0, 2]])
        return np.stack([h[..., 0], p[..., 1], h[..., 1]], axis=-1)

    def compose(self, other: "CharacterFrame") -> "CharacterFrame":
        """Frame ``other`` (given relative to self) expressed in world."""
        return CharacterFrame(self.to_world(other.origin), self.dir_to_world(other.forward))

    def relative(self, other: "CharacterFrame") -> "CharacterFrame":
        """Frame ``other`` (given in world) expressed relative to self."""
        return CharacterFrame(self.to_local(other.origin), self.dir_to_local(other.forward))


def horizontal_forward(quats, forward_axis=REFERENCE_FORWARD):
    """Normalized horizontal projection of the rotated forward axis.

    Works on single quaternions or stacks; raises ``DegenerateFacing`` if any
    projection is shorter than 1e-6.
    """
    f3 = quat_rotate(quats, np.broadcast_to(forward_axis, np.shape(quats)[:-1] + (3,)))
    f2 = f3[..., [0, 2]]
    n = np.linalg.norm(f2, axis=-1, keepdims=True)
    if np.any(n < 1e-6):
        raise DegenerateFacing("root forward axis is (nearly) vertical")
    return f2 / n
