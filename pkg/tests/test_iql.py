import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sup_kit import harness, iql, oracle
from sup_kit.acceptance import tabular_dataset
from sup_kit.chunking import ActionChunk
from sup_kit.geometry import IDENTITY
from sup_kit.synth import SynthDataset


def test_expectile_examples():
    assert iql.expectile_loss(2.0, 0.5) == 2.0
    assert iql.expectile_loss(-1.0, 0.95) == pytest.approx(0.05, abs=1e-12)
    assert iql.expectile_loss(1.0, 0.95) == pytest.approx(0.95, abs=1e-12)


@settings(max_examples=100)
@given(st.floats(0.01, 0.99), st.floats(0.0, 10.0), st.floats(0.0, 10.0))
def test_expectile_loss_monotone_in_magnitude(alpha, a, b):
    lo, hi = sorted((a, b))
    assert iql.expectile_loss(lo, alpha) <= iql.expectile_loss(hi, alpha)
    assert iql.expectile_loss(-lo, alpha) <= iql.expectile_loss(-hi, alpha)


@settings(max_examples=100)
@given(st.floats(0.01, 0.99), st.floats(-5.0, 5.0).filter(lambda x: abs(x) > 1e-3))
def test_expectile_grad_matches_difference(alpha, x):
    h = 1e-6
    num = (iql.expectile_loss(x + h, alpha) - iql.expectile_loss(x - h, alpha)) / (2 * h)
    assert iql.expectile_grad(x, alpha) == pytest.approx(num, rel=1e-5)


def test_config_validation():
    with pytest.raises(ValueError):
        iql.IqlConfig(alpha=1.0)
    with pytest.raises(ValueError):
        iql.IqlConfig(residual="other")


def _toy(n=24, seed=0):
    rng = np.random.default_rng(seed)
    o = rng.normal(size=(n, 11))
    o[:, 3:7] = IDENTITY
    k = rng.integers(1, 5, n)
    a = []
    for kk in k:
        s = rng.normal(size=(24 // kk, 8))
        s[:, 3:7] = IDENTITY
        a.append(s)
    r = np.where(rng.random(n) < 0.3, -5.0, k.astype(float))
    on = o + 0.1 * rng.normal(size=o.shape)
    return SynthDataset(o, k, a, r, on, np.zeros(n), r < 0)


def _nets(ds, seed=0, hidden=8, seq_hidden=6):
    nets = iql.SchedulerNets.init(11, 8, hidden, seq_hidden, seed)
    iql.fit_norm(nets, ds, 0.9)
    return nets


def test_zero_nets_give_zero():
    ds = _toy()
    nets = _nets(ds)
    for d in (nets.q, nets.v):
        for k in d:
            d[k][...] = 0.0
    assert np.all(iql.q_values(nets, ds.o, ds.a_seq) == 0.0)
    assert np.all(iql.v_values(nets, ds.o) == 0.0)


def test_batch_invariance():
    ds = _toy()
    nets = _nets(ds, seed=3)
    q = iql.q_values(nets, ds.o, ds.a_seq)
    for i in (0, 5, 17):
        assert iql.q_value(nets, ds.o[i], ds.a_seq[i]) == pytest.approx(q[i], abs=1e-12)
    v = iql.v_values(nets, ds.o)
    assert iql.v_value(nets, ds.o[4]) == pytest.approx(v[4], abs=1e-12)


def test_shape_checks():
    nets = _nets(_toy())
    with pytest.raises(ValueError):
        iql.v_value(nets, np.zeros(10))
    with pytest.raises(ValueError):
        iql.q_value(nets, np.zeros(11), np.zeros((3, 7)))


def test_loss_q_zero_when_q_matches_target():
    ds = _toy()
    nets = _nets(ds)
    cfg = iql.IqlConfig()
    batch = iql.IqlBatch.from_dataset(ds)
    q = iql.q_values(nets, ds.o, ds.a_seq)
    batch.r = q - cfg.gamma * iql.v_values(nets, ds.o_next)
    lq, _ = iql.iql_losses(nets, batch, cfg)
    assert lq == pytest.approx(0.0, abs=1e-24)


def test_half_alpha_is_half_mse():
    ds = _toy()
    nets = _nets(ds, seed=2)
    batch = iql.IqlBatch.from_dataset(ds)
    _, lv = iql.iql_losses(nets, batch, iql.IqlConfig(alpha=0.5))
    diff = iql.q_values(nets, ds.o, ds.a_seq) - iql.v_values(nets, ds.o)
    assert lv == pytest.approx(0.5 * np.mean(diff ** 2), abs=1e-12)


def _probe(params, loss, grads, rng, n=40, h=1e-5):
    keys = sorted(params)
    worst = 0.0
    for _ in range(n):
        key = keys[rng.integers(len(keys))]
        idx = tuple(int(rng.integers(s)) for s in params[key].shape)
        old = params[key][idx]
        params[key][idx] = old + h
        lp = loss()
        params[key][idx] = old - h
        lm = loss()
        params[key][idx] = old
        num = (lp - lm) / (2 * h)
        worst = max(worst, abs(num - grads[key][idx]) / max(abs(num), abs(grads[key][idx]), 1e-6))
    return worst


@pytest.mark.parametrize("residual", ["q_minus_v", "v_minus_q"])
def test_gradients_match_finite_differences(residual):
    ds = _toy()
    nets = _nets(ds, seed=4)
    cfg = iql.IqlConfig(residual=residual)
    batch = iql.IqlBatch.from_dataset(ds)
    _, _, gq, gv = iql.iql_losses(nets, batch, cfg, with_grads=True)
    v_next = iql.v_values(nets, batch.o_next)

    def loss_q():
        # the bootstrap target is a constant in the Q step
        q = iql.q_values(nets, ds.o, ds.a_seq)
        return float(np.mean((batch.r + cfg.gamma * v_next - q) ** 2))

    def loss_v():
        return iql.iql_losses(nets, batch, cfg)[1]

    rng = np.random.default_rng(0)
    assert _probe(nets.q, loss_q, gq, rng) < 1e-4
    assert _probe(nets.v, loss_v, gv, rng) < 1e-4


def test_update_rejects_empty_batch():
    ds = _toy()
    nets = _nets(ds)
    with pytest.raises(ValueError):
        iql.iql_update(nets, iql.IqlBatch.from_dataset(ds, []), iql.IqlConfig())


def _structured_toy(n_states=24, seed=0):
    # every state carries all four rates; rates above a state-dependent limit violate
    rng = np.random.default_rng(seed)
    o = rng.normal(size=(n_states, 11))
    o[:, 3:7] = IDENTITY
    o = np.repeat(o, 4, axis=0)
    k = np.tile(np.arange(1, 5), n_states)
    a = []
    for oi, kk in zip(o, k):
        s = np.zeros((24 // kk, 8))
        s[:, 0] = oi[0] + 0.01 * kk * np.arange(1, 24 // kk + 1)
        s[:, 3] = 1.0
        a.append(s)
    bad = k > np.where(o[:, 0] > 0, 3, 1)
    r = np.where(bad, -5.0, k.astype(float))
    return SynthDataset(o, k, a, r, o + 0.01 * k[:, None], np.zeros(len(k)), bad)


def test_training_deterministic_and_reduces_losses():
    ds = _structured_toy()
    cfg = iql.IqlConfig(steps=1000, batch=32, hidden=16, seq_hidden=8, lr=3e-3, lr_final=3e-4)
    a = iql.train_scheduler(ds, cfg, log_every=100)
    b = iql.train_scheduler(ds, cfg, log_every=100)
    assert all(np.array_equal(a.q[k], b.q[k]) for k in a.q)
    assert all(np.array_equal(a.v[k], b.v[k]) for k in a.v)
    assert a.meta["history"] == b.meta["history"]
    full = iql.IqlBatch.from_dataset(ds)
    init = iql.SchedulerNets.init(11, 8, 16, 8, 0)
    iql.fit_norm(init, ds, cfg.gamma)
    lq0, lv0 = iql.iql_losses(init, full, cfg)
    lq, lv = iql.iql_losses(a, full, cfg)
    assert lq < 0.2 * lq0
    # the V loss cannot drop below the spread of Q across rates; compare with that floor
    q = iql.q_values(a, ds.o, ds.a_seq).reshape(-1, 4)
    floor = np.mean([iql.expectile_loss(qi - oracle.expectile(qi, cfg.alpha), cfg.alpha).mean() for qi in q])
    assert lv < lv0 and lv < 1.25 * floor


def test_save_load_round_trip(tmp_path):
    ds = _toy()
    nets = _nets(ds, seed=5)
    nets.save(tmp_path / "s.bin")
    back = iql.SchedulerNets.load(tmp_path / "s.bin")
    assert np.array_equal(iql.q_values(nets, ds.o, ds.a_seq), iql.q_values(back, ds.o, ds.a_seq))


def test_tabular_fixed_point_small():
    d = {"states": [0, 0, 1, 1], "rates": [1, 2, 1, 2], "rewards": [1.0, 2.0, 1.0, -5.0], "next": [0, 1, 0, 1]}
    Q, _ = oracle.tabular_iql(d["states"], d["rates"], d["rewards"], d["next"], 0.95, 0.9)
    ds = tabular_dataset(d["states"], d["rates"], d["rewards"], d["next"], 4)
    cfg = iql.IqlConfig(alpha=0.95, gamma=0.9, lr=3e-3, lr_final=1e-5, batch=4, steps=3000, hidden=16,
                        seq_hidden=8)
    nets = iql.train_scheduler(ds, cfg)
    q = iql.q_values(nets, ds.o, ds.a_seq)
    for i, key in enumerate(zip(d["states"], d["rates"])):
        assert q[i] == pytest.approx(Q[key], abs=1e-3)


# rate selection

def _chunk(n=24):
    pos = np.outer(np.arange(1, n + 1) * 0.01, [1.0, 0.0, 0.0])
    return ActionChunk(pos, np.tile(IDENTITY, (n, 1)), np.zeros(n))


def test_select_single_feasible_rate():
    nets = _nets(_toy())
    assert iql.select_rate(nets, np.zeros(11), _chunk(), 3, 3) == 3


def test_select_constant_q_ties_to_smallest():
    const = lambda o, seqs: np.full(len(seqs), 7.0)
    assert iql.select_rate(None, np.zeros(11), _chunk(), 1, 4, q_fn=const) == 1
    assert iql.select_rate(None, np.zeros(11), _chunk(), 2, 4, q_fn=const) == 2


def test_select_no_feasible_rate():
    with pytest.raises(ValueError):
        iql.select_rate(None, np.zeros(11), _chunk(2), 3, 4)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0), st.floats(-100.0, 100.0))
def test_select_invariant_to_positive_affine(seed, scale, shift):
    rng = np.random.default_rng(seed)
    ds = _toy(seed=seed % 5)
    nets = _nets(ds, seed=seed % 3)
    o = ds.o[rng.integers(len(ds))]
    c = _chunk()
    wrapped = lambda obs, seqs: scale * iql.q_values(nets, obs, seqs) + shift
    assert iql.select_rate(nets, o, c, 1, 4) == iql.select_rate(nets, o, c, 1, 4, q_fn=wrapped)


def test_mpc_all_safe_and_only_min_safe(monkeypatch):
    monkeypatch.setattr(iql, "violation", lambda o, c, k, wm, eps: (False, 0.0))
    assert iql.mpc_select_rate(None, np.zeros(11), _chunk(), 1, 4, 0.015) == 4
    monkeypatch.setattr(iql, "violation", lambda o, c, k, wm, eps: (k > 2, 0.0))
    assert iql.mpc_select_rate(None, np.zeros(11), _chunk(), 2, 4, 0.015) == 2
    monkeypatch.setattr(iql, "violation", lambda o, c, k, wm, eps: (True, 1.0))
    assert iql.mpc_select_rate(None, np.zeros(11), _chunk(), 2, 4, 0.015) == 2


# trained scheduler from the shared default pipeline

def test_scheduler_ranks_violating_below_safe(pipeline_dir):
    ds = harness.load_synth(pipeline_dir)
    nets = harness.load_scheduler(pipeline_dir)
    K = len(set(ds.k))
    q = iql.q_values(nets, ds.o, ds.a_seq).reshape(-1, K)
    bad = ds.violated.reshape(-1, K)
    wins = total = 0
    for qi, bi in zip(q, bad):
        if bi.any() and not bi.all():
            diff = qi[~bi][None, :] - qi[bi][:, None]
            wins += int(np.sum(diff > 0))
            total += diff.size
    assert total > 1000
    assert wins / total >= 0.99, wins / total
