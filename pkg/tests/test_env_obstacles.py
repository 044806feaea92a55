import numpy as np
import pytest
from envtools import static_database, walking_clip
from hypothesis import given, settings
from hypothesis import strategies as st
from sensor_oracle import oracle_map, random_field

from mmqrl.env_obstacles import (
    MAP_SHAPE,
    OBSTACLE_OBS_DIM,
    CurriculumStage,
    ObstacleConfig,
    ObstacleEnv,
    ObstacleField,
    advance_obstacles,
    curriculum_advance,
    hits,
    sample_field,
    sense,
    sense_channel,
)
from mmqrl.env_plane import COLLISION, SUCCESS, decode_action
from mmqrl.geometry import CharacterFrame
from mmqrl.motion_db import build_feature_database


def field_of(frame, centers, halves, vels=None):
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    halves = np.asarray(halves, dtype=float).reshape(-1, 2)
    vels = np.zeros_like(centers) if vels is None else np.asarray(vels, dtype=float).reshape(-1, 2)
    return ObstacleField(frame, centers, halves, vels)


@pytest.fixture(scope="module")
def still_db():
    return static_database(heading=-0.4, origin=(1.0, 2.0))


def still_env(still_db, centers=np.zeros((0, 2)), halves=np.zeros((0, 2)), **cfg):
    env = ObstacleEnv(still_db, config=ObstacleConfig(**cfg), seed=0)
    env.reset()
    env.field = field_of(CharacterFrame(env.frame.origin, (0.0, 1.0)), centers, halves)
    env.map = sense(env.field, env.frame)
    return env


def traj(*positions):
    a = np.zeros(12)
    a[[0, 1, 4, 5, 8, 9]] = np.ravel(positions)
    a[[2, 6, 10]] = 1.0
    return a


def test_dimensions():
    assert MAP_SHAPE == (16, 16, 2)
    assert OBSTACLE_OBS_DIM == 17 + 512


# -- curriculum --------------------------------------------------------------------------

def test_stage_schedule():
    assert CurriculumStage(0).obstacle_max_speed == 0.0
    assert CurriculumStage(9).obstacle_max_speed == 0.5
    assert CurriculumStage(0).target_area_side == 5.0
    assert CurriculumStage(9).target_area_side == 10.0
    with pytest.raises(ValueError):
        CurriculumStage(10)


def test_curriculum_advance_threshold():
    hist = [True] * 41 + [False] * 59
    assert curriculum_advance(hist, 3) == 4
    assert curriculum_advance([True] * 40 + [False] * 60, 3) == 3
    assert curriculum_advance([True] * 100, 9) == 9
    assert curriculum_advance([True] * 99, 2) == 2  # window not yet full
    # only the trailing window counts
    assert curriculum_advance([True] * 50 + [False] * 100, 0) == 0


def test_sampled_speeds_by_stage():
    for stage in range(10):
        field = sample_field(CurriculumStage(stage), stage)
        speed = np.linalg.norm(field.velocities, axis=1)
        assert np.all(speed <= CurriculumStage(stage).obstacle_max_speed + 1e-15)
        if stage == 0:
            np.testing.assert_array_equal(field.velocities, 0.0)


def test_sample_field_deterministic_and_clear_of_spawn():
    a = sample_field(CurriculumStage(4), 11)
    b = sample_field(CurriculumStage(4), 11)
    np.testing.assert_array_equal(a.centers, b.centers)
    np.testing.assert_array_equal(a.velocities, b.velocities)
    assert not a.disc_overlaps([0.0, 0.0], 1.0).any()
    assert np.all(np.abs(a.centers) + a.half_extents <= 10.0)


# -- obstacle motion -------------------------------------------------------------------------

def test_static_field_unchanged():
    f = sample_field(CurriculumStage(0), 3)
    g = advance_obstacles(f)
    np.testing.assert_array_equal(g.centers, f.centers)


def test_reflection_at_wall():
    f = field_of(CharacterFrame((0, 0), (0, 1)), [[9.45, 0.0]], [[0.5, 0.5]], [[0.5, 0.2]])
    g = advance_obstacles(f, 0.2)
    # would reach 9.55, i.e. 0.05 past the limit 9.5: mirrored to 9.45
    np.testing.assert_allclose(g.centers, [[9.45, 0.04]], atol=1e-12)
    np.testing.assert_array_equal(g.velocities, [[-0.5, 0.2]])


def test_obstacles_stay_in_arena():
    f = sample_field(CurriculumStage(9), 8)
    for _ in range(1000):
        f = advance_obstacles(f)
        assert np.all(np.abs(f.centers) + f.half_extents <= f.arena_half + 1e-9)


# -- sensing ----------------------------------------------------------------------------------

def test_empty_field_senses_nothing():
    frame = CharacterFrame.from_heading((2.0, 3.0), 0.3)
    f = field_of(frame, np.zeros((0, 2)), np.zeros((0, 2)))
    np.testing.assert_array_equal(sense(f, frame), 0.0)


def test_covering_obstacle_senses_everything():
    frame = CharacterFrame.from_heading((2.0, 3.0), 0.3)
    arena = CharacterFrame((0.0, 0.0), (0.0, 1.0))
    f = field_of(arena, arena.to_local(frame.origin), [4.3, 4.3])
    m = sense(f, frame)
    np.testing.assert_array_equal(m[..., 0], 1.0)


def test_sensor_matches_oracle(rng):
    for _ in range(100):
        field, frame = random_field(rng)
        np.testing.assert_array_equal(sense_channel(field, frame), oracle_map(field, frame.origin, frame.forward))


def test_sensor_orientation():
    # obstacle straight ahead lands in the top rows; to the lateral side in the last columns
    frame = CharacterFrame((0.0, 0.0), (0.0, 1.0))
    arena = CharacterFrame((0.0, 0.0), (0.0, 1.0))
    ahead = sense_channel(field_of(arena, [2.5, 0.0], [0.3, 0.3]), frame)
    assert ahead[:4].sum() > 0 and ahead[8:].sum() == 0
    side = sense_channel(field_of(arena, [0.0, 2.5], [0.3, 0.3]), frame)
    assert side[:, 12:].sum() > 0 and side[:, :8].sum() == 0


def test_previous_channel_carries_over():
    frame = CharacterFrame((0.0, 0.0), (0.0, 1.0))
    f = field_of(CharacterFrame((0, 0), (0, 1)), [2.0, 0.0], [0.5, 0.5])
    first = sense(f, frame)
    np.testing.assert_array_equal(first[..., 0], first[..., 1])
    moved = field_of(f.frame, [-2.0, 0.0], [0.5, 0.5])
    second = sense(moved, frame, first)
    np.testing.assert_array_equal(second[..., 1], first[..., 0])
    assert not np.array_equal(second[..., 0], second[..., 1])


# -- hits and rewards ----------------------------------------------------------------------------

def test_hit_counts():
    frame = CharacterFrame.from_heading((5.0, -3.0), 2.0)
    arena = CharacterFrame((0, 0), (0, 1))
    positions = [[1.0, 0.0], [2.0, 0.5], [3.0, -0.5]]
    centers = arena.to_local(frame.to_world(np.array(positions)))
    a = traj(positions)
    assert hits(a, field_of(arena, np.zeros((0, 2)), np.zeros((0, 2))), frame) == 0
    assert hits(a, field_of(arena, centers[1], [0.2, 0.2]), frame) == 1
    assert hits(a, field_of(arena, centers, np.full((3, 2), 0.2)), frame) == 3
    # strict: a point exactly on an edge is outside
    assert hits(traj([[0.0, 0.0]] * 3), field_of(CharacterFrame((0, 0), (0, 1)), [[5.0, -2.0]], [[0.0, 1.0]]),
                CharacterFrame.from_heading((5.0, -3.0), 0.0)) == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hits_bounded(seed):
    rng = np.random.default_rng(seed)
    field, frame = random_field(rng)
    assert 0 <= hits(decode_action(rng.normal(size=12) * 3), field, frame) <= 3


@pytest.mark.parametrize("n_hit, expected", [(0, 1.0), (1, np.exp(-1.0)), (3, np.exp(-3.0))])
def test_hit_reward_term(still_db, n_hit, expected):
    positions = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    env = still_env(still_db)
    centers = env.field.to_arena(env.frame.to_world(positions[:n_hit]))
    env = still_env(still_db, centers, np.full((n_hit, 2), 0.2))
    env.goal = env.frame.origin.copy()  # distance term exactly exp(0)
    _, reward, _, info = env.step(traj(positions))
    assert info["hits"] == n_hit
    assert reward == 1.0 + expected + 10.0


def test_reward_dist_two_hits_two(still_db):
    positions = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    env = still_env(still_db)
    centers = env.field.to_arena(env.frame.to_world(positions[1:]))
    env = still_env(still_db, centers, np.full((2, 2), 0.2))
    env.goal = env.frame.origin + [2.0, 0.0]
    _, reward, done, info = env.step(traj(positions))
    assert (info["hits"], info["distance"], done) == (2, 2.0, False)
    assert reward == np.exp(-2.0) + np.exp(-2.0)
    assert reward == pytest.approx(0.2707, abs=1e-4)


def test_no_hit_reward_ablation(still_db):
    env = still_env(still_db, hit_reward=False)
    env.goal = env.frame.origin + [2.0, 0.0]
    _, reward, _, _ = env.step(traj([[1.0, 0.0]] * 3))
    assert reward == np.exp(-2.0)


def test_collision_terminates(still_db):
    env = still_env(still_db, [[0.35, 0.0], [5.0, 5.0]], [[0.1, 0.1], [0.3, 0.3]])
    env.goal = env.frame.origin.copy()
    _, reward, done, info = env.step(traj([[1.0, 0.0]] * 3))
    # collision wins over reaching the goal in the same step
    assert done and info["status"] == COLLISION and info["collided_with"] == 0
    assert reward == 2.0


def test_success_and_safety_cap(still_db):
    env = still_env(still_db)
    env.goal = env.frame.origin + [0.4, 0.2]
    _, _, done, info = env.step(traj([[1.0, 0.0]] * 3))
    assert done and info["status"] == SUCCESS
    env = still_env(still_db, safety_cap=5)
    env.goal = env.frame.origin + [3.0, 0.0]
    for k in range(5):
        _, _, done, info = env.step(np.zeros(12))
    assert done and info["capped"]


def test_goal_clear_of_obstacles(db):
    env = ObstacleEnv(db, config=ObstacleConfig(stage=9), seed=1)
    for _ in range(50):
        env.reset()
        assert not env.field.disc_overlaps(env.goal, env.config.collision_radius).any()
        assert np.all(np.abs(env.goal - env.frame.origin) <= 5.0)


def test_moving_character_meets_obstacle():
    db = build_feature_database([walking_clip()])
    env = ObstacleEnv(db, seed=0)
    env.reset()
    env.field = field_of(CharacterFrame(env.frame.origin, (0.0, 1.0)),
                         env.field.to_arena(env.frame.to_world([1.5, 0.0])), [0.3, 3.0])
    env.goal = env.frame.to_world([10.0, 0.0])
    for _ in range(30):
        _, _, done, info = env.step(traj([[0.4, 0.0], [0.8, 0.0], [1.2, 0.0]]))
        if done:
            break
    assert info["status"] == COLLISION and info["collided_with"] == 0


def test_rigid_world_transform_equivariance(db, rng):
    for trial in range(10):
        a = ObstacleEnv(db, config=ObstacleConfig(stage=9), seed=trial)
        b = ObstacleEnv(db, config=ObstacleConfig(stage=9), seed=trial)
        a.reset()
        b.reset()
        b.apply_world_transform(rng.uniform(-np.pi, np.pi), rng.uniform(-50, 50, size=2))
        for _ in range(15):
            action = rng.normal(size=12)
            oa, ra, da, ia = a.step(action)
            ob, rb, db_, ib = b.step(action)
            np.testing.assert_array_equal(oa[17:], ob[17:])
            np.testing.assert_allclose(oa[:17], ob[:17], atol=1e-9)
            assert ia["match"].row == ib["match"].row and ia["hits"] == ib["hits"]
            assert abs(ra - rb) <= 1e-9 and da == db_
            if da:
                break
