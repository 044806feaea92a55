"""Searchable feature database built from motion clips."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clips import MotionClip
from .features import FEATURE_DIM, POSE_DIM, clip_features

DB_MAGIC = "MMDB"
DB_VERSION = 1
STD_FLOOR = 1e-9


class DatabaseFormatError(ValueError):
    pass


@dataclass
class FeatureDatabase:
    """Normalized features of every frame of every clip.

    ``rows`` holds ``(raw - norm_mean) / norm_std``; ``raw`` keeps the
    unnormalized values so observations can be read off in metres.
    """

    rows: np.ndarray
    raw: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    valid: np.ndarray
    clip_index: np.ndarray  # row -> position of the clip in ``clips``
    frame_index: np.ndarray  # row -> frame inside the clip
    clips: list[MotionClip]
    # per-row character frames in the clip's own world
    frame_origin: np.ndarray
    frame_forward: np.ndarray

    def __post_init__(self):
        self.clip_offsets = np.concatenate([[0], np.cumsum([len(c) for c in self.clips])]).astype(np.int64)
        self.valid_rows = np.flatnonzero(self.valid)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_valid(self) -> int:
        return len(self.valid_rows)

    def row_of(self, clip: int, frame: int) -> int:
        return int(self.clip_offsets[clip] + frame)

    def index_map(self, row: int) -> tuple[str, int]:
        return self.clips[self.clip_index[row]].id, int(self.frame_index[row])

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.norm_mean) / self.norm_std

    def pose_feature(self, row: int) -> np.ndarray:
        return self.raw[row, :POSE_DIM]

    def save(self, path) -> None:
        clip_rows = np.concatenate([c.as_rows() for c in self.clips])
        meta = np.array([f"{c.id}|{c.source_tag}" for c in self.clips])
        np.savez(
            path,
            magic=np.array(DB_MAGIC),
            version=np.array(DB_VERSION),
            rows=self.rows,
            raw=self.raw,
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
            valid=self.valid,
            clip_index=self.clip_index,
            frame_index=self.frame_index,
            clip_lengths=np.array([len(c) for c in self.clips]),
            clip_rows=clip_rows,
            clip_meta=meta,
            clip_forward=np.array([c.forward_axis for c in self.clips]),
        )

    @classmethod
    def load(cls, path) -> "FeatureDatabase":
        with np.load(Path(path), allow_pickle=False) as z:
            if str(z["magic"]) != DB_MAGIC:
                raise DatabaseFormatError(f"{path}: not a feature database")
            if int(z["version"]) != DB_VERSION:
                raise DatabaseFormatError(f"{path}: unsupported version {int(z['version'])}")
            clips = []
            start = 0
            for n, meta, fwd in zip(z["clip_lengths"], z["clip_meta"], z["clip_forward"]):
                cid, _, tag = str(meta).partition("|")
                clips.append(MotionClip.from_rows(cid, z["clip_rows"][start:start + n], tag, fwd))
                start += n
            origins, forwards = _frames_of(clips)
            return cls(z["rows"], z["raw"], z["norm_mean"], z["norm_std"], z["valid"].astype(bool),
                       z["clip_index"], z["frame_index"], clips, origins, forwards)


def _frames_of(clips):
    frames = [c.frames() for c in clips]
    return np.concatenate([f[0] for f in frames]), np.concatenate([f[1] for f in frames])


def normalization_stats(raw: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and sample std over valid rows; flat columns get std 1."""
    sel = raw[valid]
    mean = sel.mean(axis=0)
    std = sel.std(axis=0, ddof=1) if len(sel) > 1 else np.zeros(raw.shape[1])
    std = np.where(std < STD_FLOOR, 1.0, std)
    return mean, std


def build_feature_database(clips) -> FeatureDatabase:
    clips = list(clips)
    if not clips:
        raise ValueError("cannot build a database from zero clips")
    raws, masks, cidx, fidx = [], [], [], []
    for k, clip in enumerate(clips):
        raw, mask = clip_features(clip)
        raws.append(raw)
        masks.append(mask)
        cidx.append(np.full(len(clip), k, dtype=np.int64))
        fidx.append(np.arange(len(clip), dtype=np.int64))
    raw = np.concatenate(raws)
    valid = np.concatenate(masks)
    if not valid.any():
        raise ValueError("no frame satisfies the validity constraints")
    mean, std = normalization_stats(raw, valid)
    rows = (raw - mean) / std
    origins, forwards = _frames_of(clips)
    assert rows.shape[1] == FEATURE_DIM
    return FeatureDatabase(rows, raw, mean, std, valid, np.concatenate(cidx), np.concatenate(fidx),
                           clips, origins, forwards)
