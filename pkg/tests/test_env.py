import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sup_kit import env
from sup_kit.chunking import ActionChunk, ControlMode, downsample
from sup_kit.env import Observation, Predicate, World
from sup_kit.geometry import IDENTITY, Pose, yaw_quat

UNSATURATED = World(max_lead=np.inf)


def _obs(pos=(0.0, 0.0, 0.0), aperture=1.0, objects=None, held=None):
    return Observation(Pose(pos, IDENTITY), aperture, held, objects or {})


def _abs(target, grip=0.0):
    return np.concatenate([target, IDENTITY, [grip]])


def test_lag_update_examples():
    o = env.step(_obs(), _abs([1.0, 0, 0]), world=UNSATURATED)
    assert np.allclose(o.eef.position, [0.6, 0, 0], atol=1e-15)
    o = env.step(o, _abs([1.0, 0, 0]), world=UNSATURATED)
    assert np.allclose(o.eef.position, [0.84, 0, 0], atol=1e-15)


def test_default_world_saturates_lead():
    o = env.step(_obs(), _abs([1.0, 0, 0]))
    assert np.allclose(o.eef.position, [env.DEFAULT_WORLD.trackable_step, 0, 0])


def test_zero_delta_is_fixed_point():
    o = _obs((0.1, 0.2, 0.3), 0.4, {"block": Pose([0.5, 0, 0.02], IDENTITY)})
    nxt = env.step(o, np.concatenate([np.zeros(3), IDENTITY, [0.0]]), ControlMode.DELTA)
    assert np.array_equal(nxt.eef.position, o.eef.position)
    assert np.allclose(nxt.eef.orientation, o.eef.orientation, atol=1e-15)
    assert nxt.gripper_aperture == o.gripper_aperture
    assert np.array_equal(nxt.object_poses["block"].position, o.object_poses["block"].position)


def test_step_is_deterministic():
    inst = env.instantiate(env.DEFAULT_TASKS[0], 3)
    chunk = env.base_policy_chunk(inst.init, inst)
    a = env.rollout(inst.init, chunk)[1]
    b = env.rollout(inst.init, chunk)[1]
    assert np.array_equal(a.vector(), b.vector())


def test_gripper_clamped():
    o = env.step(_obs(aperture=0.9), _abs([0, 0, 0], 5.0))
    assert o.gripper_aperture == 1.0
    o = env.step(_obs(aperture=0.1), _abs([0, 0, 0], -5.0))
    assert o.gripper_aperture == 0.0


def test_grasp_and_release():
    block = Pose([0.0, 0.0, 0.02], IDENTITY)
    o = _obs((0.0, 0.0, 0.02), 0.6, {"block": block})
    o = env.step(o, _abs([0, 0, 0.02], -0.5))
    assert o.held_object == "block"
    assert o.gripper_aperture <= env.DEFAULT_WORLD.grasp_threshold
    o = env.step(o, _abs([0.05, 0, 0.05], 0.0))
    assert np.allclose(o.object_poses["block"].position[:2], o.eef.position[:2])
    o = env.step(o, _abs([0.05, 0, 0.05], 1.0))
    assert o.held_object is None
    assert o.object_poses["block"].position[2] == env.DEFAULT_WORLD.rest_z


def test_misaligned_grasp_knocks_object_over():
    block = Pose([0.0, 0.0, 0.02], yaw_quat(0.5))
    o = env.step(_obs((0.0, 0.0, 0.02), 0.6, {"block": block}), _abs([0, 0, 0.02], -0.5))
    assert o.held_object is None
    assert env.is_failed(o)


def test_empty_motion_rollout_is_constant():
    o = _obs((0.1, 0.0, 0.1))
    chunk = ActionChunk(np.tile([0.1, 0.0, 0.1], (6, 1)), np.tile(IDENTITY, (6, 1)), np.zeros(6))
    traj, final = env.rollout(o, chunk)
    assert len(traj) == 6
    assert np.all(traj.positions == o.eef.position)
    assert np.array_equal(final.eef.position, o.eef.position)


@settings(max_examples=100)
@given(st.floats(0.01, 0.3), st.floats(-np.pi, np.pi), st.integers(2, 30))
def test_straight_line_rollout_approaches_final_waypoint(length, heading, n):
    end = length * np.array([np.cos(heading), np.sin(heading), 0.0])
    pos = np.linspace(0, 1, n + 1)[1:, None] * end
    chunk = ActionChunk(pos, np.tile(IDENTITY, (n, 1)), np.zeros(n))
    traj, _ = env.rollout(_obs(), chunk)
    d = np.linalg.norm(traj.positions - end, axis=1)
    assert np.all(np.diff(np.concatenate([[length], d])) < 0)


def test_collinear_downsample_final_within_lag_bound():
    n = 24
    pos = np.outer(np.arange(1, n + 1) * 0.008, [1.0, 0.0, 0.0])
    chunk = ActionChunk(pos, np.tile(IDENTITY, (n, 1)), np.zeros(n))
    _, a = env.rollout(_obs(), chunk)
    _, b = env.rollout(_obs(), downsample(chunk, 2))
    # the slower rollout lags the last waypoint by at most one step of the waypoint speed over the gain
    bound = 0.008 * 2 / env.DEFAULT_WORLD.gain
    assert np.linalg.norm(a.eef.position - b.eef.position) <= bound


def _arc_chunk(rng, n=24):
    r = rng.uniform(0.05, 0.15)
    th = rng.uniform(0.005, 0.012) / r * np.arange(1, n + 1)
    pos = np.column_stack([r * np.cos(th) - r, r * np.sin(th), np.full(n, 0.15)])
    quats = np.array([yaw_quat(rng.uniform(-0.04, 0.04) * i) for i in range(1, n + 1)])
    return ActionChunk(pos, quats, np.zeros(n))


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 3, 4]))
def test_lag_gap_on_curved_paths(seed, k):
    chunk = _arc_chunk(np.random.default_rng(seed))
    o = Observation(Pose([0.0, 0.0, 0.15], IDENTITY), 1.0, None, {})
    full, _ = env.rollout(o, chunk)
    fast = downsample(chunk, k)
    ds, _ = env.rollout(o, fast)
    idx = (np.arange(len(fast)) + 1) * k - 1
    err_full = np.linalg.norm(full.positions[idx] - chunk.positions[idx], axis=1)
    err_ds = np.linalg.norm(ds.positions - chunk.positions[idx], axis=1)
    assert np.all(err_ds >= err_full)


def test_curved_corpus_shape():
    ep = env.gen_curved(0)
    assert len(ep.observations) == ep.length + 1
    assert len(ep.chunks) == len(ep.rates) == 6
    assert all(1 <= k <= 4 for k in ep.rates)
    assert ep.observations[0].vector().shape == (env.STATE_DIM,)


@pytest.mark.parametrize("spec", env.DEFAULT_TASKS, ids=lambda s: s.task_id)
def test_demo_deterministic_and_successful(spec, tmp_path):
    a, b = env.gen_demo(spec, 5), env.gen_demo(spec, 5)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    env.save_episodes(pa, [a])
    env.save_episodes(pb, [b])
    assert pa.read_bytes() == pb.read_bytes()
    assert a.success
    assert len(a.observations) == a.length + 1
    assert a.length <= spec.horizon
    assert all(len(c) == spec.chunk_len for c, _ in a.chunks)


@pytest.mark.parametrize("spec", env.DEFAULT_TASKS, ids=lambda s: s.task_id)
def test_base_chunk_replays_demo(spec):
    ep = env.gen_demo(spec, 11)
    inst = env.instantiate(spec, 11)
    tol = 6 * spec.jitter_pos
    for chunk, start in ep.chunks:
        replay = env.base_policy_chunk(ep.observations[start], inst)
        assert len(replay) == spec.chunk_len
        assert np.max(np.abs(replay.positions[0] - chunk.positions[0])) < tol


def test_demos_leave_speed_headroom():
    demos = [env.gen_demo(spec, s) for spec in env.DEFAULT_TASKS for s in range(34)]
    assert len(demos) >= 100
    assert env.demo_displacement_ratio(demos) < 0.4


def _success_rate(spec, k, seeds):
    wins = [env.run_episode(env.instantiate(spec, 50_000 + s), lambda o, c: k).success for s in seeds]
    return float(np.mean(wins))


@pytest.mark.parametrize("spec", env.DEFAULT_TASKS, ids=lambda s: s.task_id)
def test_base_policy_success(spec):
    assert _success_rate(spec, 1, range(100)) >= 0.95


def test_fixed_max_rate_degrades_contact_task():
    spec = env.task_by_id("pick_place")
    seeds = range(40)
    assert _success_rate(spec, 4, seeds) < _success_rate(spec, 1, seeds)


def _episode(positions, aperture=1.0, held=None, objects=None):
    obs = [Observation(Pose(p, IDENTITY), aperture, held, objects or {}) for p in positions]
    return env.Episode(obs, [np.zeros(8)] * (len(obs) - 1), [], False)


def _instance(preds, horizon=400):
    spec = env.TaskSpec("unit", "pick_place", horizon=horizon)
    return env.TaskInstance(spec, tuple(preds), {}, _obs())


def test_success_reach_only():
    inst = _instance([Predicate("reach", (0.1, 0.0, 0.0), None, 0.02)])
    assert env.is_success(_episode([(0, 0, 0), (0.05, 0, 0), (0.095, 0, 0)]), inst)
    assert not env.is_success(_episode([(0, 0, 0), (0.05, 0, 0)]), inst)


def test_success_grasp_without_reach_first():
    inst = _instance([Predicate("reach", (0.3, 0.0, 0.0), None, 0.02), Predicate("grasp", obj="block")])
    block = {"block": Pose([0.0, 0.0, 0.02], IDENTITY)}
    ep = _episode([(0, 0, 0.02)] * 2, objects=block)
    ep.observations[1] = Observation(ep.observations[1].eef, 0.3, "block", block)
    assert not env.is_success(ep, inst)
    assert env.is_success(ep, _instance([Predicate("grasp", obj="block")]))


def test_success_place_outside_tolerance():
    tol = 0.02
    inst = _instance([Predicate("place", (0.1, 0.0, 0.02), "block", tol)])
    far = {"block": Pose([0.1 + 2 * tol, 0.0, 0.02], IDENTITY)}
    near = {"block": Pose([0.1 + 0.5 * tol, 0.0, 0.02], IDENTITY)}
    assert not env.is_success(_episode([(0, 0, 0.1)] * 3, objects=far), inst)
    assert env.is_success(_episode([(0, 0, 0.1)] * 3, objects=near), inst)


def test_success_respects_horizon():
    inst = _instance([Predicate("reach", (0.1, 0.0, 0.0), None, 0.02)], horizon=1)
    assert not env.is_success(_episode([(0, 0, 0), (0, 0, 0), (0.1, 0, 0)]), inst)


def test_episode_file_round_trip(tmp_path):
    eps = [env.gen_demo(env.DEFAULT_TASKS[1], 2), env.gen_play(env.DEFAULT_TASKS[2], 3)]
    path = tmp_path / "eps.jsonl"
    env.save_episodes(path, eps, ["demo", "play"])
    back, kinds = env.load_episodes(path)
    assert kinds == ["demo", "play"]
    for a, b in zip(eps, back):
        assert (a.task_id, a.seed, a.success, a.rates) == (b.task_id, b.seed, b.success, b.rates)
        assert np.array_equal(np.array(a.actions), np.array(b.actions))
        assert [s for _, s in a.chunks] == [s for _, s in b.chunks]
        for (ca, _), (cb, _) in zip(a.chunks, b.chunks):
            assert np.array_equal(ca.as_array(), cb.as_array())
        assert all(np.array_equal(x.vector(), y.vector()) for x, y in zip(a.observations, b.observations))


def test_unknown_task_raises():
    with pytest.raises(ValueError):
        env.task_by_id("nope")
