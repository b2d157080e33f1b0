import json

import numpy as np
import pytest

from sup_kit import env, harness
from sup_kit import wm as wm_mod
from sup_kit.chunking import ActionChunk
from sup_kit.geometry import yaw_quat
from sup_kit.synth import (RECORD_FIELDS, SynthConfig, SynthDataset, batched_deviations, demo_transitions,
                           min_penalty_bound, penalty_reward, synthesize, violation)


@pytest.fixture(scope="module")
def tiny():
    demos = [env.gen_demo(spec, 1) for spec in env.DEFAULT_TASKS]
    p = wm_mod.init_params(env.STATE_DIM, hidden=8, layers=1, seed=0)
    wm_mod.fit_norm(p, [wm_mod.episode_arrays(d) for d in demos], 24)
    return demos, p


def test_penalty_reward_examples():
    assert penalty_reward(3, False, 5.0) == 3.0
    assert penalty_reward(2, False, 5.0) == 2.0
    for k in (1, 2, 4):
        assert penalty_reward(k, True, 5.0) == -5.0


def test_min_penalty_bound_examples():
    assert min_penalty_bound(4, 0.9) == pytest.approx(36.0)
    assert min_penalty_bound(7, 0.0) == 0.0
    assert min_penalty_bound(2, 0.1) == pytest.approx(0.2222222222222222)
    with pytest.raises(ValueError):
        min_penalty_bound(4, 1.0)


def test_penalty_profiles():
    assert SynthConfig(omega_profile="theory").penalty == pytest.approx(1.1 * 36.0)
    assert SynthConfig(omega_profile="paper").penalty == 5.0
    assert SynthConfig(omega_profile="fixed", omega=2.5).penalty == 2.5


@pytest.mark.parametrize("kw", [dict(k_min=0), dict(k_min=3, k_max=2), dict(epsilon=0.0), dict(gamma=1.0),
                                dict(omega_profile="nope"), dict(omega_profile="fixed"),
                                dict(omega_profile="fixed", omega=-1.0),
                                dict(omega_profile="paper", paper_penalty=1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


def test_record_count(tiny):
    demos, p = tiny
    trans = demo_transitions(demos, 24, 1)[:100]
    ds = synthesize(None, p, SynthConfig(k_min=2, k_max=4), transitions=trans)
    assert len(ds) == 300
    assert list(ds.k[:6]) == [2, 3, 4, 2, 3, 4]


def test_records_follow_reward_rule(tiny):
    demos, p = tiny
    cfg = SynthConfig(epsilon=0.005, omega_profile="paper", stride=8)
    ds = synthesize(demos, p, cfg)
    assert len(ds) == 4 * len(demo_transitions(demos, 24, 8))
    assert not ds.violated[ds.k == 1].any()
    assert np.all(ds.deviation[ds.k == 1] == 0.0)
    assert np.all(ds.deviation >= 0.0)
    assert np.array_equal(ds.violated, ds.deviation > cfg.epsilon)
    expect = np.where(ds.violated, -cfg.penalty, ds.k.astype(float))
    assert np.array_equal(ds.r_prime, expect)
    assert all(len(a) == 24 // k for a, k in zip(ds.a_seq, ds.k))


def test_next_state_is_terminal_prediction(tiny):
    demos, p = tiny
    cfg = SynthConfig(stride=12)
    trans = demo_transitions(demos[:1], 24, 12)
    ds = synthesize(None, p, cfg, transitions=trans)
    obs = np.array([o for o, _ in trans])
    for k in (1, 2, 3, 4):
        _, o_next, seqs = batched_deviations(p, obs, [c for _, c in trans], k)
        assert np.array_equal(ds.o_next[ds.k == k], o_next)
        for i in range(0, len(obs), 4):
            assert np.allclose(wm_mod.predict(p, obs[i], seqs[i])[-1], o_next[i], atol=1e-13)


def test_single_and_batched_deviation_agree(tiny):
    demos, p = tiny
    trans = demo_transitions(demos, 24, 24)[:6]
    obs = np.array([o for o, _ in trans])
    for k in (2, 3, 4):
        devs, _, _ = batched_deviations(p, obs, [c for _, c in trans], k)
        for (o, c), d in zip(trans, devs):
            assert violation(o, c, k, p, 0.015)[1] == pytest.approx(d, abs=1e-12)


def test_rate_one_is_never_violated(tiny):
    demos, p = tiny
    o, c = demo_transitions(demos, 24, 24)[0]
    assert violation(o, c, 1, p, 1e-12) == (False, 0.0)


def test_synthesize_is_deterministic(tiny, tmp_path):
    demos, p = tiny
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    synthesize(demos, p, SynthConfig(stride=8)).write_jsonl(a)
    synthesize(demos, p, SynthConfig(stride=8)).write_jsonl(b)
    assert a.read_bytes() == b.read_bytes()


def test_errors(tiny):
    demos, p = tiny
    with pytest.raises(ValueError):
        synthesize([], p)
    o, c = demo_transitions(demos, 24, 24)[0]
    with pytest.raises(ValueError):
        violation(o, c.head(3), 4, p, 0.015)
    with pytest.raises(ValueError):
        synthesize(None, p, SynthConfig(k_min=5, k_max=6), transitions=[(o, c.head(4))])


def test_tail_padding_holds_pose():
    ep = env.gen_demo(env.DEFAULT_TASKS[0], 0)
    trans = demo_transitions([ep], 24, 4)
    o, c = trans[-1]
    tail = ep.length - 4 * (len(trans) - 1)
    arr = c.as_array()
    assert np.array_equal(arr[tail:, :7], np.repeat(arr[tail - 1:tail, :7], 24 - tail, axis=0))
    assert np.all(arr[tail:, 7] == 0.0)


def test_jsonl_round_trip(tiny, tmp_path):
    demos, p = tiny
    ds = synthesize(demos[:1], p, SynthConfig(stride=12))
    path = tmp_path / "d.jsonl"
    ds.write_jsonl(path)
    back = SynthDataset.read_jsonl(path)
    for f in ("o", "k", "r_prime", "o_next", "deviation", "violated"):
        assert np.array_equal(getattr(ds, f), getattr(back, f))
    assert all(np.array_equal(x, y) for x, y in zip(ds.a_seq, back.a_seq))
    rec = json.loads(path.read_text().splitlines()[0])
    assert tuple(rec) == RECORD_FIELDS
    rec["extra"] = 1
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ValueError):
        SynthDataset.read_jsonl(path)


# trained world model from the shared default pipeline

def test_violation_fraction_grows_with_rate(pipeline_dir):
    ds = harness.load_synth(pipeline_dir)
    frac = [float(np.mean(ds.violated[ds.k == k])) for k in sorted(set(ds.k))]
    assert frac[0] == 0.0
    assert all(a < b for a, b in zip(frac, frac[1:]))


def _free_straight_chunks(pipeline_dir, n_demos=30):
    demos = harness.load_demos(pipeline_dir, ["heldout"])[:n_demos]
    out = []
    for ep in demos:
        inst = env.instantiate(env.task_by_id(ep.task_id), ep.seed)
        for _, start in ep.chunks:
            o = ep.observations[start]
            c, labels = env.base_policy_chunk(o, inst, with_labels=True)
            d = np.diff(c.positions, axis=0)
            straight = (np.all(np.linalg.norm(np.cross(d[:-1], d[1:]), axis=1) < 1e-9)
                        and np.linalg.norm(d, axis=1).min() > 1e-4)
            if straight and not any(l in env.CONTACT_PHASES for l in labels):
                out.append((o, c))
    return out


def test_straight_free_space_chunks_are_safe_at_rate_two(pipeline_dir):
    wm = harness.load_wm(pipeline_dir)
    cases = _free_straight_chunks(pipeline_dir)
    assert len(cases) >= 5
    for o, c in cases:
        bad, dev = violation(o, c, 2, wm, 0.015)
        assert not bad, dev


def test_sharp_turn_violates_at_max_rate(pipeline_dir):
    wm = harness.load_wm(pipeline_dir)
    demos = harness.load_demos(pipeline_dir, ["heldout"])[:5]
    u, v = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    for ep in demos:
        o = ep.observations[0]
        s = 0.02 * np.arange(1, 25)
        pts = o.eef.position + np.minimum(s, 0.24)[:, None] * u + np.maximum(s - 0.24, 0)[:, None] * v
        c = ActionChunk(pts, np.tile(yaw_quat(0.0), (24, 1)), np.zeros(24))
        assert violation(o, c, 4, wm, 0.015)[0]
        assert harness.oracle_violation(o, c, 4, 0.015)
