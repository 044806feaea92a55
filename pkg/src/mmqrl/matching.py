"""Exact nearest-frame search, segment playback and seam stitching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CharacterFrame, quat_conj, quat_from_yaw, quat_mul, quat_scale
from .motion_db import STEP_FRAMES, FeatureDatabase


@dataclass(frozen=True)
class MatchResult:
    row: int
    clip: int
    frame: int
    distance: float


def squared_distances(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared distances summed column by column, left to right.

    Each row's value depends only on that row and ``q``, never on which
    other rows are in the call, so subsets re-scored later agree bit for bit
    with a full scan.
    """
    if len(rows) <= 16:
        # same operations in the same order, without per-column array overhead
        qs = [float(v) for v in q]
        out = []
        for row in rows.tolist():
            s = 0.0
            for x, qk in zip(row, qs):
                d = x - qk
                s += d * d
            out.append(s)
        return np.array(out, dtype=float)
    acc = np.zeros(len(rows))
    for k in range(rows.shape[1]):
        d = rows[:, k] - q[k]
        acc += d * d
    return acc


def _result(db: FeatureDatabase, row: int, dist: float) -> MatchResult:
    return MatchResult(int(row), int(db.clip_index[row]), int(db.frame_index[row]), float(dist))


def _scan_columns(db: FeatureDatabase) -> np.ndarray:
    """Valid rows stored column by column (cached on the database)."""
    cols = getattr(db, "_scan_cols", None)
    if cols is None or cols.shape[1] != db.n_valid:
        cols = np.ascontiguousarray(db.rows[db.valid_rows].T)
        db._scan_cols = cols
    return cols


def nearest_frame(db: FeatureDatabase, q) -> MatchResult:
    """Linear scan over valid rows; ties go to the lowest row index.

    Same arithmetic, in the same order, as ``squared_distances``.
    """
    q = np.asarray(q, dtype=float)
    cols = _scan_columns(db)
    acc = np.zeros(cols.shape[1])
    buf = np.empty_like(acc)
    for k in range(cols.shape[0]):
        np.subtract(cols[k], q[k], out=buf)
        np.multiply(buf, buf, out=buf)
        acc += buf
    k = int(np.argmin(acc))
    return _result(db, db.valid_rows[k], acc[k])


class MatchIndex:
    """Exact nearest-frame search for single queries or batches.

    Scores ``|x|^2 - 2 x.q`` for every valid row with one float32 matrix
    product, keeps the rows whose score is within twice a worst-case float32
    error bound of the best score (this set provably contains the exact
    minimizer), and re-scores only those with ``squared_distances``.

    Single queries first filter with a cheaper lower bound: distance over the
    leading principal coordinates plus the gap between residual norms. Rows
    whose bound exceeds the exact distance of the bound's best row cannot win.
    """

    # float32 relative error allowance for a 28-term dot product plus input rounding
    _REL_ERR = 8e-6
    # leading principal coordinates kept in the single-query bound
    _HEAD = 16

    def __init__(self, db: FeatureDatabase):
        self.db = db
        self._rows = db.valid_rows
        self._data = np.ascontiguousarray(db.rows[self._rows])
        sq = (self._data * self._data).sum(axis=1)
        self._full = np.concatenate([self._data, sq[:, None]], axis=1).astype(np.float32)
        self._aug = np.ascontiguousarray(self._full.T)
        self._max_sq = float(sq.max())
        self._max_norm = float(np.sqrt(self._max_sq))

        self._mean = self._data.mean(axis=0)
        centred = self._data - self._mean
        _, vecs = np.linalg.eigh(centred.T @ centred)
        self._basis = vecs[:, ::-1]
        k = self._k = min(self._HEAD, self._data.shape[1])
        z = centred @ self._basis
        head, tail = z[:, :k], np.sqrt((z[:, k:] ** 2).sum(axis=1))
        zsq = (head * head).sum(axis=1) + tail * tail
        self._bound = np.ascontiguousarray(np.concatenate([head, tail[:, None], zsq[:, None]], axis=1)
                                           .astype(np.float32).T)
        self._max_zsq = float(zsq.max())

    def __len__(self) -> int:
        return len(self._rows)

    def _err(self, max_sq: float, q_sq: float) -> float:
        return self._REL_ERR * (max_sq + 2.0 * np.sqrt(max_sq * q_sq) + q_sq + 1.0)

    def _finish(self, scores: np.ndarray, q: np.ndarray, cand=None) -> MatchResult:
        err = self._err(self._max_sq, float(q @ q))
        keep = np.flatnonzero(scores <= scores.min() + 2.0 * err)
        if cand is not None:
            keep = cand[keep]
        d = squared_distances(self._data[keep], q)
        j = int(np.argmin(d))
        return _result(self.db, self._rows[keep[j]], d[j])

    def query(self, q) -> MatchResult:
        q = np.asarray(q, dtype=float)
        qa = np.append(-2.0 * q, 1.0).astype(np.float32)
        k = self._k
        zq = (q - self._mean) @ self._basis
        rq = float(np.sqrt(zq[k:] @ zq[k:]))
        cq = float(zq[:k] @ zq[:k]) + rq * rq
        qb = np.append(-2.0 * zq[:k], (-2.0 * rq, 1.0)).astype(np.float32)
        bound = qb @ self._bound  # lower bound on distance, minus cq
        i = int(np.argmin(bound))
        upper = float(squared_distances(self._data[i:i + 1], q)[0])
        cand = np.flatnonzero(bound <= upper - cq + 2.0 * self._err(self._max_zsq, cq))
        if 4 * len(cand) > len(self):
            return self._finish(qa @ self._aug, q)
        return self._finish(self._full[cand] @ qa, q, cand)

    def query_batch(self, queries) -> list[MatchResult]:
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        qa = np.concatenate([-2.0 * queries, np.ones((len(queries), 1))], axis=1).astype(np.float32)
        scores = qa @ self._aug
        return [self._finish(scores[i], queries[i]) for i in range(len(queries))]


def build_accelerator(db: FeatureDatabase) -> MatchIndex:
    return MatchIndex(db)


# -- playback -------------------------------------------------------------

@dataclass
class PoseSeq:
    """A short run of poses stored as arrays (``n`` frames)."""

    root_pos: np.ndarray
    root_quat: np.ndarray
    lfoot: np.ndarray
    rfoot: np.ndarray

    def __len__(self) -> int:
        return len(self.root_pos)

    def __getitem__(self, k) -> "PoseSeq":
        sl = slice(k, k + 1) if isinstance(k, (int, np.integer)) else k
        return PoseSeq(self.root_pos[sl], self.root_quat[sl], self.lfoot[sl], self.rfoot[sl])


def play_segment(db: FeatureDatabase, match: MatchResult, steps: int = STEP_FRAMES) -> tuple[PoseSeq, int]:
    """Frames ``match.frame + 1 .. match.frame + steps`` and the new cursor."""
    clip = db.clips[match.clip]
    start = match.frame + 1
    stop = match.frame + steps + 1
    if stop > len(clip):
        raise IndexError("segment runs past the end of the clip")
    p = clip.poses(start, stop)
    return PoseSeq(p["root_pos"], p["root_quat"], p["lfoot"], p["rfoot"]), match.frame + steps


@dataclass(frozen=True)
class RigidMap:
    """Maps a clip's world onto the live character's world (yaw + shift)."""

    source: CharacterFrame
    target: CharacterFrame

    @property
    def yaw(self) -> float:
        return self.target.heading - self.source.heading

    def points(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        h = self.target.to_world(self.source.to_local(p[..., [0, 2]]))
        return np.stack([h[..., 0], p[..., 1], h[..., 1]], axis=-1)

    def quats(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return quat_mul(np.broadcast_to(quat_from_yaw(self.yaw), q.shape), q)

    def frame(self, f: CharacterFrame) -> CharacterFrame:
        return self.target.compose(self.source.relative(f))

    def poses(self, seq: PoseSeq) -> PoseSeq:
        return PoseSeq(self.points(seq.root_pos), self.quats(seq.root_quat),
                       self.points(seq.lfoot), self.points(seq.rfoot))


def decay_weights(n: int = STEP_FRAMES) -> np.ndarray:
    """Cubic ease-out of the seam offset: 1 at the seam, 0 at frame ``n``."""
    k = np.arange(1, n + 1)
    return (1.0 - k / n) ** 3


def stitch(prev_pose: PoseSeq, live: CharacterFrame, anchor_pose: PoseSeq, anchor_frame: CharacterFrame,
           segment: PoseSeq) -> PoseSeq:
    """Place a played-back segment in the live world.

    ``anchor_pose``/``anchor_frame`` describe the matched frame the segment
    follows. Its character frame is mapped rigidly onto ``live``; whatever
    mismatch remains between ``prev_pose`` (the last displayed pose) and the
    mapped anchor is added back and eased out over the segment.
    """
    m = RigidMap(anchor_frame, live)
    anchor = m.poses(anchor_pose)
    out = m.poses(segment)
    w = decay_weights(len(segment))[:, None]

    root_off = prev_pose.root_pos[0] - anchor.root_pos[0]
    lfoot_off = prev_pose.lfoot[0] - anchor.lfoot[0]
    rfoot_off = prev_pose.rfoot[0] - anchor.rfoot[0]
    rot_off = quat_mul(prev_pose.root_quat[0], quat_conj(anchor.root_quat[0]))

    out.root_pos = out.root_pos + w * root_off
    out.lfoot = out.lfoot + w * lfoot_off
    out.rfoot = out.rfoot + w * rfoot_off
    out.root_quat = quat_mul(quat_scale(np.broadcast_to(rot_off, (len(segment), 4)), w[:, 0]), out.root_quat)
    return out
