import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sup_kit import oracle
from sup_kit.synth import min_penalty_bound


def self_loop(gamma=0.5, k_max=2):
    P = np.ones((1, k_max, 1))
    return oracle.TabularCMDP(P, np.ones((1, k_max), bool), np.zeros((1, k_max), bool), gamma)


def test_self_loop_value():
    _, V, pol = oracle.value_iteration(self_loop())
    assert V[0] == pytest.approx(4.0, abs=1e-10)
    assert pol[0] == 2


def test_gamma_zero_is_greedy_on_reward():
    rng = np.random.default_rng(3)
    for _ in range(50):
        mdp = oracle.random_cmdp(rng, gamma=0.0)
        Q, V, pol = oracle.value_iteration(mdp)
        for s in range(mdp.n_states):
            ks = np.nonzero(mdp.feasible[s])[0]
            best = ks[np.argmax(mdp.reward[s, ks])]
            assert pol[s] == best + 1
            assert V[s] == mdp.reward[s, best]


def test_rejects_non_stochastic_rows():
    P = np.full((1, 2, 1), 0.9)
    with pytest.raises(ValueError):
        oracle.TabularCMDP(P, np.ones((1, 2), bool), np.zeros((1, 2), bool), 0.5)


def test_rejects_state_without_rates():
    P = np.zeros((2, 1, 2))
    P[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        oracle.TabularCMDP(P, [[True], [False]], [[False], [False]], 0.5)


def test_undiscounted_non_terminating_raises():
    with pytest.raises(ValueError):
        oracle.value_iteration(self_loop(gamma=1.0))


def test_monte_carlo_matches_policy_value():
    rng = np.random.default_rng(11)
    mdp = oracle.random_cmdp(rng, n_states=5, k_max=3, gamma=0.5)
    _, V, pol = oracle.value_iteration(mdp)
    chains, steps = 100_000, 40
    s = np.full(chains, mdp.init)
    ret = np.zeros(chains)
    cum = np.cumsum(mdp.P, axis=2)
    for t in range(steps):
        j = pol[s] - 1
        ret += mdp.gamma ** t * mdp.reward[s, j]
        u = rng.random(chains)
        s = np.minimum((u[:, None] > cum[s, j]).sum(axis=1), mdp.n_states - 1)
    assert abs(ret.mean() - V[mdp.init]) < 1e-2


def test_policy_return_matches_value_iteration():
    rng = np.random.default_rng(5)
    for _ in range(30):
        mdp = oracle.random_cmdp(rng)
        _, V, pol = oracle.value_iteration(mdp)
        assert oracle.policy_return(mdp, pol) == pytest.approx(V[mdp.init], abs=1e-8)


def test_myopic_instance_never_violates_at_nonnegative_penalty():
    mdp = oracle.myopic_instance()
    for omega in (0.5, 0.0, -0.5):
        assert oracle.verify_penalty_bound(mdp, omega)["zero_violation"]
    rep = oracle.verify_penalty_bound(mdp, -1.5)
    assert not rep["zero_violation"]
    assert rep["violating_states"] == [0]


def test_penalty_bound_small_suite():
    assert oracle.penalty_bound_suite(100, seed=1) == []


@pytest.mark.parametrize("gamma,k_max", [(0.9, 4), (0.5, 3), (0.8, 2)])
def test_lower_bound_instance_flips_at_threshold(gamma, k_max):
    mdp = oracle.lower_bound_instance(gamma, k_max)
    thr = oracle.lower_bound_threshold(gamma, k_max)
    assert thr < min_penalty_bound(k_max, gamma)
    assert not oracle.verify_penalty_bound(mdp, thr - 0.5)["zero_violation"]
    assert oracle.verify_penalty_bound(mdp, thr + 0.5)["zero_violation"]


def test_chunk_dominance_small_suite():
    checked, bad = oracle.chunk_dominance_suite(100, seed=2)
    assert checked == 100 and bad == []


def test_identical_chunks_give_equal_success():
    rng = np.random.default_rng(4)
    mdp = oracle.random_chunk_mdp(rng, enforce_premise=False)
    mdp.fast_chunks = [list(c) for c in mdp.chunks]
    rep = oracle.verify_chunk_dominance(mdp)
    assert rep["premise_holds"] and rep["conclusion_holds"]
    assert rep["success_fast"] == rep["success_base"]
    assert np.all(rep["c_q"] == 0.0)


def test_premise_violation_is_flagged():
    rep = oracle.verify_chunk_dominance(oracle.premise_violating_instance())
    assert not rep["premise_holds"]
    assert rep["premise_violations"] == [0]
    assert rep["success_fast"] < rep["success_base"]


def test_chunk_mdp_rejects_discounting_and_cycles():
    mdp = oracle.premise_violating_instance()
    with pytest.raises(ValueError):
        oracle.AtomicChunkMDP(mdp.T, mdp.chunks, mdp.fast_chunks, mdp.level, 0, gamma=0.9)
    with pytest.raises(ValueError):
        oracle.AtomicChunkMDP(mdp.T, mdp.chunks, mdp.fast_chunks, np.array([1, 0]), 0)


@settings(max_examples=40)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_brute_force_matches_finite_horizon_vi(seed, horizon):
    rng = np.random.default_rng(seed)
    mdp = oracle.random_cmdp(rng, k_max=int(rng.integers(1, 4)), stochastic=False)
    rates, ret = oracle.brute_force_scheduler(mdp, horizon)
    _, V, _ = oracle.value_iteration(mdp, horizon=horizon)
    assert ret == pytest.approx(V[mdp.init], abs=1e-10)
    assert len(rates) == horizon


def test_brute_force_guards():
    mdp = oracle.trap_instance()
    with pytest.raises(ValueError):
        oracle.brute_force_scheduler(mdp, 13)
    with pytest.raises(ValueError):
        oracle.brute_force_scheduler(oracle.random_cmdp(np.random.default_rng(0), n_states=3), 2)


def test_trap_beats_greedy():
    trap = oracle.trap_instance()
    pen = trap.penalized(1.1 * min_penalty_bound(trap.k_max, trap.gamma))
    rates, ret = oracle.brute_force_scheduler(pen, 2)
    greedy = oracle.greedy_policy(trap)
    assert rates[0] < trap.k_max
    assert list(greedy[:3]) == [4, 1, 4]
    assert oracle.policy_return(pen, greedy) < ret
    assert ret == pytest.approx(3 + 0.9 * 4)


def test_expectile_brute_force():
    rng = np.random.default_rng(8)
    grid = np.linspace(-6, 6, 120_001)
    for alpha in (0.1, 0.5, 0.9, 0.95):
        x = rng.normal(size=5)
        w = rng.uniform(0.5, 2.0, size=5)
        diff = x[None] - grid[:, None]
        loss = (w * np.abs(alpha - (diff < 0)) * diff ** 2).sum(axis=1)
        assert oracle.expectile(x, alpha, w) == pytest.approx(grid[np.argmin(loss)], abs=2e-4)
    assert oracle.expectile([1.0, 3.0], 0.5) == 2.0


def test_tabular_iql_two_state_fixed_point():
    Q, V = oracle.tabular_iql([0, 0, 1, 1], [1, 2, 1, 2], [1.0, 2.0, 1.0, -5.0], [0, 1, 0, 1], 0.95, 0.9)
    expect = {(0, 1): 13.2358, (0, 2): 13.6142, (1, 1): 13.2358, (1, 2): 6.6142}
    for key, val in expect.items():
        assert Q[key] == pytest.approx(val, abs=1e-4)
    for s in (0, 1):
        assert V[s] == pytest.approx(oracle.expectile([Q[(s, 1)], Q[(s, 2)]], 0.95), abs=1e-12)


def test_tabular_iql_alpha_one_is_max_backup():
    # single-successor deterministic data: an upper expectile near 1 approaches the greedy backup
    pairs = list(itertools.product(range(2), range(1, 3)))
    states = [s for s, _ in pairs]
    acts = [a for _, a in pairs]
    rews = [float(a if s == 0 else -a) for s, a in pairs]
    nxt = [1 - s for s in states]
    Q, V = oracle.tabular_iql(states, acts, rews, nxt, 0.999999, 0.5)
    # V0 = 2 + 0.5 V1, V1 = -1 + 0.5 V0
    assert V[0] == pytest.approx(2.0, abs=1e-4)
    assert V[1] == pytest.approx(0.0, abs=1e-4)


def test_tabular_iql_rejects_inconsistent_duplicates():
    with pytest.raises(ValueError):
        oracle.tabular_iql([0, 0], [1, 1], [1.0, 2.0], [0, 0], 0.9, 0.5)
