import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmqrl.geometry import CharacterFrame, quat_angle, quat_conj, quat_from_yaw, quat_mul
from mmqrl.matching import (
    MatchIndex,
    MatchResult,
    PoseSeq,
    RigidMap,
    decay_weights,
    nearest_frame,
    play_segment,
    squared_distances,
    stitch,
)
from mmqrl.motion_db import GaitConfig, MotionClip, build_feature_database, generate_synthetic_locomotion


def brute_force(db, q):
    """Independent oracle: full float64 scan with numpy's own reductions."""
    d = ((db.rows[db.valid_rows] - q) ** 2).sum(axis=1)
    best = d.min()
    # exact ties resolved by lowest row; near-ties within rounding are reported for inspection
    return db.valid_rows[np.flatnonzero(d == best)[0]], best


def test_exact_match_returns_row(db, index):
    for row in db.valid_rows[::997]:
        m = nearest_frame(db, db.rows[row])
        assert m.distance == 0.0
        # duplicate frames (standing still) may share a row's features; lowest wins
        assert m.row <= row and np.array_equal(db.rows[m.row], db.rows[row])
        assert index.query(db.rows[row]) == m


def test_random_queries_match_oracle(db, index, rng):
    queries = rng.normal(size=(1000, 27))
    for q in queries:
        m = nearest_frame(db, q)
        row, dist = brute_force(db, q)
        assert m.row == row
        assert m.distance == pytest.approx(dist, rel=1e-12)
        assert index.query(q) == m
        assert (db.clips[m.clip].id, m.frame) == db.index_map(m.row)


def test_batch_equals_single(db, index, rng):
    queries = rng.normal(size=(300, 27)) * 2.0
    assert index.query_batch(queries) == [index.query(q) for q in queries]


def test_adversarial_near_duplicates(db, rng):
    # queries sitting exactly between two stored rows, and perturbed by ~1 ulp
    index = MatchIndex(db)
    rows = rng.choice(db.valid_rows, size=(200, 2))
    for a, b in rows:
        mid = 0.5 * (db.rows[a] + db.rows[b])
        for q in (mid, np.nextafter(mid, db.rows[a]), np.nextafter(mid, db.rows[b])):
            assert index.query(q) == nearest_frame(db, q)


def test_principal_bound_is_lower_bound(db, index, rng):
    # float64 recomputation of the single-query filter: it may only discard rows that cannot win
    x = db.rows[db.valid_rows]
    z = (x - index._mean) @ index._basis
    k = index._k
    for q in np.concatenate([rng.normal(size=(20, 27)),
                             x[rng.integers(0, len(x), 20)] + 0.01 * rng.normal(size=(20, 27))]):
        zq = (q - index._mean) @ index._basis
        gap = np.sqrt((zq[k:] ** 2).sum()) - np.sqrt((z[:, k:] ** 2).sum(axis=1))
        bound = ((z[:, :k] - zq[:k]) ** 2).sum(axis=1) + gap * gap
        exact = ((x - q) ** 2).sum(axis=1)
        assert np.all(bound <= exact * (1 + 1e-9) + 1e-9)
        assert index.query(q) == nearest_frame(db, q)


def _db_from_rows(rows):
    """Database whose normalized rows are exactly ``rows`` (frames of one static clip)."""
    n = max(len(rows) + 31, 40)
    clip = MotionClip("flat", np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros((n, 3)), np.zeros((n, 3)))
    db = build_feature_database([clip])
    db.rows = np.zeros((n, 27))
    db.rows[1:1 + len(rows)] = rows
    db.valid = np.zeros(n, dtype=bool)
    db.valid[1:1 + len(rows)] = True
    db.__post_init__()
    return db


def test_tie_goes_to_lowest_row():
    rows = np.zeros((12, 27))
    rows[:, 0] = 10.0
    rows[4, 0] = 1.0  # row 5 of the database
    rows[8, 0] = -1.0  # row 9: equidistant from q = 0
    db = _db_from_rows(rows)
    q = np.zeros(27)
    for m in (nearest_frame(db, q), MatchIndex(db).query(q), MatchIndex(db).query_batch(q[None])[0]):
        assert (m.row, m.distance) == (5, 1.0)


def test_singleton_database(rng):
    db = _db_from_rows(rng.normal(size=(1, 27)))
    index = MatchIndex(db)
    assert len(index) == 1
    for q in rng.normal(size=(50, 27)) * 100:
        assert index.query(q).row == 1


def test_squared_distances_subset_independent(rng):
    rows = rng.normal(size=(40, 27))
    q = rng.normal(size=27)
    full = squared_distances(rows, q)
    for sel in ([3], [0, 7, 39], list(range(20))):
        np.testing.assert_array_equal(squared_distances(rows[sel], q), full[sel])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_index_exact_at_any_scale(db, index, seed, scale):
    q = np.random.default_rng(seed).normal(size=27) * scale
    assert index.query(q) == nearest_frame(db, q)


def test_accelerator_speedup():
    db = build_feature_database(generate_synthetic_locomotion(GaitConfig(minutes=56.0), 7))
    assert len(db) >= 100_000
    index = MatchIndex(db)
    queries = np.random.default_rng(0).normal(size=(40, 27))
    index.query(queries[0])

    def best_of(fn, reps=5):
        times = []
        for _ in range(reps):
            t = time.perf_counter()
            for q in queries:
                fn(q)
            times.append(time.perf_counter() - t)
        return min(times)

    ratio = best_of(lambda q: nearest_frame(db, q)) / best_of(index.query)
    print(f"accelerator speedup on {len(db)} rows: {ratio:.1f}x")
    assert ratio >= 5.0


# -- playback and stitching -------------------------------------------------------------

def test_play_segment_frames(db):
    clip_k = next(k for k, c in enumerate(db.clips) if len(c) >= 60)
    clip = db.clips[clip_k]
    m = MatchResult(db.row_of(clip_k, 10), clip_k, 10, 0.0)
    seg, nxt = play_segment(db, m)
    assert nxt == 16
    np.testing.assert_array_equal(seg.root_pos, clip.root_pos[11:17])
    np.testing.assert_array_equal(seg.lfoot, clip.lfoot[11:17])
    seg2, _ = play_segment(db, m)
    np.testing.assert_array_equal(seg2.root_quat, seg.root_quat)


def test_play_segment_last_valid_rows_in_bounds(db):
    for k, clip in enumerate(db.clips):
        rows = db.valid_rows[db.clip_index[db.valid_rows] == k]
        last = int(rows[-1])
        seg, nxt = play_segment(db, MatchResult(last, k, int(db.frame_index[last]), 0.0))
        assert len(seg) == 6 and nxt < len(clip)


def test_decay_weights_closed_form():
    np.testing.assert_allclose(decay_weights(), [(1 - k / 6) ** 3 for k in range(1, 7)], rtol=1e-15)
    assert decay_weights()[-1] == 0.0


def _segment(db, row):
    k, f = int(db.clip_index[row]), int(db.frame_index[row])
    clip = db.clips[k]
    anchor = PoseSeq(*(a[f:f + 1] for a in (clip.root_pos, clip.root_quat, clip.lfoot, clip.rfoot)))
    frame = CharacterFrame(db.frame_origin[row], db.frame_forward[row])
    seg, _ = play_segment(db, MatchResult(row, k, f, 0.0))
    return anchor, frame, seg


def test_stitch_without_seam_is_rigid_replay(db, rng):
    row = int(db.valid_rows[500])
    anchor, frame, seg = _segment(db, row)
    live = CharacterFrame.from_heading((4.0, -7.0), 0.8)
    m = RigidMap(frame, live)
    out = stitch(m.poses(anchor), live, anchor, frame, seg)
    ref = m.poses(seg)
    np.testing.assert_allclose(out.root_pos, ref.root_pos, atol=1e-12)
    np.testing.assert_allclose(out.lfoot, ref.lfoot, atol=1e-12)
    np.testing.assert_allclose(out.root_quat, ref.root_quat, atol=1e-12)
    # the mapped anchor frame lands on the live frame
    mapped = m.frame(frame)
    np.testing.assert_allclose(mapped.origin, live.origin, atol=1e-12)
    np.testing.assert_allclose(mapped.forward, live.forward, atol=1e-12)


def test_stitch_position_seam_decays(db):
    row = int(db.valid_rows[1234])
    anchor, frame, seg = _segment(db, row)
    live = CharacterFrame.from_heading((0.0, 0.0), -1.1)
    m = RigidMap(frame, live)
    prev = m.poses(anchor)
    prev.root_pos = prev.root_pos + [0.1, 0.0, 0.0]
    out = stitch(prev, live, anchor, frame, seg)
    off = np.linalg.norm(out.root_pos - m.poses(seg).root_pos, axis=1)
    np.testing.assert_allclose(off, 0.1 * decay_weights(), atol=1e-12)
    assert off[0] <= 0.1 and off[5] < 1e-3


def test_stitch_yaw_seam_decays(db):
    row = int(db.valid_rows[2222])
    anchor, frame, seg = _segment(db, row)
    live = CharacterFrame.from_heading((1.0, 2.0), 0.4)
    m = RigidMap(frame, live)
    prev = m.poses(anchor)
    prev.root_quat = quat_mul(quat_from_yaw(np.radians(10.0)), prev.root_quat)
    out = stitch(prev, live, anchor, frame, seg)
    ref = m.poses(seg).root_quat
    ang = np.degrees([quat_angle(quat_mul(out.root_quat[k], quat_conj(ref[k]))) for k in range(6)])
    np.testing.assert_allclose(ang, 10.0 * decay_weights(), atol=1e-9)
    assert np.all(np.diff(ang) < 0) and ang[-1] < 0.1
