"""Exact tabular checks of the two guarantees behind the penalty-reward scheduler.

* :func:`verify_penalty_bound` - with violations priced at ``-omega`` and
  ``omega`` above ``gamma * K / (1 - gamma)``, the optimal rate policy never
  picks a violating rate.
* :func:`verify_chunk_dominance` - in an undiscounted atomic-step MDP, if the
  accelerated chunk is never worse than the original one under the base
  policy's values, always accelerating is at least as good.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .synth import min_penalty_bound

_ROW_TOL = 1e-12


@dataclass
class TabularCMDP:
    """Rates are 1-based: column ``j`` of every table is rate ``k = j + 1``.

    ``P[s, j]`` is the next-state distribution, ``feasible[s, j]`` marks
    available rates, ``h[s, j]`` marks violations. Terminal states are
    absorbing, have no decisions and are worth zero.
    """

    P: np.ndarray
    feasible: np.ndarray
    h: np.ndarray
    gamma: float
    init: int = 0
    terminal: np.ndarray | None = None
    reward: np.ndarray | None = None  # defaults to r(s, k) = k

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        S, K, S2 = self.P.shape
        if S != S2:
            raise ValueError("transition table must be (S, K, S)")
        self.feasible = np.asarray(self.feasible, dtype=bool)
        self.h = np.asarray(self.h, dtype=bool)
        self.terminal = np.zeros(S, bool) if self.terminal is None else np.asarray(self.terminal, dtype=bool)
        if self.reward is None:
            self.reward = np.tile(np.arange(1, K + 1, dtype=float), (S, 1))
        rows = self.P[self.feasible & ~self.terminal[:, None]]
        if np.any(rows < -_ROW_TOL) or np.any(np.abs(rows.sum(axis=1) - 1.0) > _ROW_TOL):
            raise ValueError("transition rows must be stochastic")
        live = ~self.terminal
        if np.any(~np.any(self.feasible[live], axis=1)):
            raise ValueError("every non-terminal state needs a feasible rate")

    @property
    def n_states(self):
        return self.P.shape[0]

    @property
    def k_max(self):
        return self.P.shape[1]

    def is_feasible_cmdp(self) -> bool:
        live = ~self.terminal
        return bool(np.all(np.any(self.feasible[live] & ~self.h[live], axis=1)))

    def penalized(self, omega) -> "TabularCMDP":
        r = np.where(self.h, -float(omega), self.reward)
        return TabularCMDP(self.P, self.feasible, self.h, self.gamma, self.init, self.terminal, r)

    def is_deterministic(self) -> bool:
        rows = self.P[self.feasible & ~self.terminal[:, None]]
        return bool(np.all(np.isclose(rows.max(axis=1), 1.0, atol=0, rtol=0)))


def value_iteration(mdp: TabularCMDP, tol=1e-12, max_iter=1_000_000, horizon=None):
    """Optimal ``(Q, V, policy)``; ``policy[s]`` is a rate (1-based), ties to the smallest rate.

    With ``horizon`` the finite-horizon optimum over that many decisions is
    returned instead. ``gamma = 1`` requires every policy to terminate.
    """
    S, K = mdp.n_states, mdp.k_max
    if not 0.0 <= mdp.gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if mdp.gamma == 1.0 and horizon is None:
        # an undiscounted solve is only finite if every policy terminates within S steps
        max_iter = min(max_iter, S + 1)
    V = np.zeros(S)
    live = ~mdp.terminal
    mask = mdp.feasible & live[:, None]
    it = 0
    while True:
        Q = np.where(mask, mdp.reward + mdp.gamma * mdp.P @ V, -np.inf)
        V_new = np.where(live, Q.max(axis=1, initial=-np.inf), 0.0)
        V_new[~live] = 0.0
        it += 1
        delta = np.max(np.abs(V_new - V)) if S else 0.0
        V = V_new
        if horizon is not None:
            if it >= horizon:
                break
        elif delta < tol:
            break
        elif it >= max_iter:
            if mdp.gamma == 1.0:
                raise ValueError("undiscounted MDP does not terminate")
            raise RuntimeError("value iteration did not converge")
    Q = np.where(mask, mdp.reward + mdp.gamma * mdp.P @ V, -np.inf) if horizon is None else Q
    policy = np.where(live, np.argmax(Q, axis=1) + 1, 0)
    return Q, V, policy


def reachable(mdp: TabularCMDP, policy, start=None):
    start = mdp.init if start is None else start
    seen, stack = {start}, [start]
    while stack:
        s = stack.pop()
        if mdp.terminal[s]:
            continue
        for s2 in np.nonzero(mdp.P[s, policy[s] - 1] > 0)[0]:
            if s2 not in seen:
                seen.add(int(s2))
                stack.append(int(s2))
    return sorted(seen)


def verify_penalty_bound(mdp: TabularCMDP, omega) -> dict:
    """Solve the penalised MDP and check that no reachable state picks a violating rate."""
    bound = min_penalty_bound(mdp.k_max, mdp.gamma)
    _, V, policy = value_iteration(mdp.penalized(omega))
    bad = [s for s in reachable(mdp, policy) if not mdp.terminal[s] and mdp.h[s, policy[s] - 1]]
    return {"bound": bound, "omega": float(omega), "satisfied": bool(omega > bound),
            "zero_violation": not bad, "violating_states": bad, "value": float(V[mdp.init])}


def random_cmdp(rng, n_states=None, k_max=None, gamma=None, stochastic=True) -> TabularCMDP:
    """Random feasible CMDP: every state keeps at least one feasible safe rate."""
    S = int(n_states or rng.integers(1, 9))
    K = int(k_max or rng.integers(1, 5))
    gamma = float(rng.uniform(0.0, 0.95) if gamma is None else gamma)
    feasible = rng.random((S, K)) < 0.8
    h = rng.random((S, K)) < 0.5
    for s in range(S):
        j = rng.integers(K)
        feasible[s, j], h[s, j] = True, False
    if stochastic:
        P = rng.dirichlet(np.ones(S) * 0.5, size=(S, K))
        P[P < 0.05] = 0.0
        P /= P.sum(axis=2, keepdims=True)
    else:
        P = np.zeros((S, K, S))
        P[np.arange(S)[:, None], np.arange(K)[None], rng.integers(S, size=(S, K))] = 1.0
    return TabularCMDP(P, feasible, h, gamma)


def penalty_bound_suite(n=500, seed=0, factor=1.01):
    """Randomised check at ``omega = factor * bound``; returns the failing reports."""
    rng = np.random.default_rng(seed)
    failures = []
    for i in range(n):
        mdp = random_cmdp(rng, stochastic=bool(i % 2))
        bound = min_penalty_bound(mdp.k_max, mdp.gamma)
        rep = verify_penalty_bound(mdp, factor * bound)
        if not rep["zero_violation"]:
            failures.append((i, rep))
    return failures


def lower_bound_instance(gamma=0.9, k_max=4) -> TabularCMDP:
    """A start state where violating with rate ``k_max`` leads to a ``k_max`` self-loop.

    The safe rate 1 reaches a state worth one more unit and then ends, so it
    is worth ``1 + gamma``; violating is worth ``-omega + gamma*k_max/(1-gamma)``.
    Zero violation therefore fails exactly when
    ``omega < gamma*k_max/(1-gamma) - 1 - gamma``.
    """
    # states: 0 start, 1 one-more-step, 2 high-value loop, 3 terminal
    S, K = 4, k_max
    P = np.zeros((S, K, S))
    feasible = np.zeros((S, K), bool)
    h = np.zeros((S, K), bool)
    feasible[0, [0, K - 1]] = True
    P[0, 0, 1] = 1.0
    P[0, K - 1, 2] = 1.0
    h[0, K - 1] = True
    feasible[1, 0] = True
    P[1, 0, 3] = 1.0
    feasible[2, K - 1] = True
    P[2, K - 1, 2] = 1.0
    return TabularCMDP(P, feasible, h, gamma, 0, np.array([False, False, False, True]))


def myopic_instance() -> TabularCMDP:
    """One state, gamma 0: rate 1 is safe, rate 2 violates; the episode ends after one step."""
    P = np.zeros((2, 2, 2))
    P[0, :, 1] = 1.0
    feasible = np.array([[True, True], [False, False]])
    h = np.array([[False, True], [False, False]])
    return TabularCMDP(P, feasible, h, 0.0, 0, np.array([False, True]))


def lower_bound_threshold(gamma, k_max):
    return gamma * k_max / (1.0 - gamma) - 1.0 - gamma


# ---------------------------------------------------------------------------
# chunk dominance

@dataclass
class AtomicChunkMDP:
    """Layered atomic-step MDP with a chunk pair ``(A, A^k)`` at every live state.

    ``T[s, u]`` is the next-atomic-state distribution of atomic action ``u``.
    Index ``S`` is the success terminal and ``S + 1`` the failure terminal;
    reaching success pays 1 once (so values are success probabilities).
    ``chunks[s]`` and ``fast_chunks[s]`` are atomic action sequences.
    ``level`` must strictly increase along every non-terminal transition,
    which bounds every episode by the number of levels.
    """

    T: np.ndarray
    chunks: list
    fast_chunks: list
    level: np.ndarray
    init: int = 0
    gamma: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.gamma != 1.0:
            raise ValueError("chunk-dominance checks are undiscounted (gamma = 1)")
        self.T = np.asarray(self.T, dtype=float)
        S = self.T.shape[0]
        if self.T.shape[2] != S + 2:
            raise ValueError("T must be (S, U, S + 2) with success/failure columns last")
        if np.any(np.abs(self.T.sum(axis=2) - 1.0) > _ROW_TOL):
            raise ValueError("transition rows must be stochastic")
        lv = np.asarray(self.level)
        for s in range(S):
            nxt = np.nonzero(self.T[s, :, :S].sum(axis=0) > 0)[0]
            if np.any(lv[nxt] <= lv[s]):
                raise ValueError("non-episodic: a transition does not increase the level")

    @property
    def n_states(self):
        return self.T.shape[0]


def _run_chunk(mdp: AtomicChunkMDP, s, seq):
    """Distribution over atomic states (plus terminals) after executing ``seq`` from ``s``."""
    S = mdp.n_states
    d = np.zeros(S + 2)
    d[s] = 1.0
    for u in seq:
        nd = d[:S] @ mdp.T[:, u, :]
        nd[S:] += d[S:]
        d = nd
    return d


def _chunk_values(mdp: AtomicChunkMDP, chunks):
    """State values of the policy that always executes ``chunks[s]``."""
    S = mdp.n_states
    V = np.zeros(S + 2)
    V[S] = 1.0
    for s in sorted(range(S), key=lambda i: -mdp.level[i]):
        V[s] = _run_chunk(mdp, s, chunks[s]) @ V
    return V


def chunk_q(mdp: AtomicChunkMDP, V, s, seq):
    return float(_run_chunk(mdp, s, seq) @ V)


def verify_chunk_dominance(mdp: AtomicChunkMDP, tol=1e-12) -> dict:
    """Exact ``c_q`` per state, premise/conclusion flags and both success probabilities."""
    if mdp.gamma != 1.0:
        raise ValueError("chunk-dominance checks are undiscounted (gamma = 1)")
    V = _chunk_values(mdp, mdp.chunks)
    S = mdp.n_states
    c_q = np.array([chunk_q(mdp, V, s, mdp.fast_chunks[s]) - V[s] for s in range(S)])
    V_fast = _chunk_values(mdp, mdp.fast_chunks)
    premise = bool(np.all(c_q >= -tol))
    return {"premise_holds": premise, "conclusion_holds": bool(V_fast[mdp.init] >= V[mdp.init] - tol),
            "c_q": c_q, "success_base": float(V[mdp.init]), "success_fast": float(V_fast[mdp.init]),
            "premise_violations": [int(s) for s in np.nonzero(c_q < -tol)[0]]}


def random_chunk_mdp(rng, levels=6, width=3, n_actions=3, chunk_len=4, rates=(2, 4), p_end=0.15,
                     enforce_premise=True):
    """Random layered chunk-MDP.

    Each live state ``s`` owns a dedicated fast atomic action (index
    ``n_actions + s``) that opens its accelerated chunk; the rest of that
    chunk uses shared actions. With ``enforce_premise`` the dedicated action's
    next-state distribution is blended with the success terminal just enough
    to make ``c_q(s) >= 0``.
    """
    S = levels * width
    U = n_actions + S
    level = np.repeat(np.arange(levels), width)

    def draw(lv):
        row = np.zeros(S + 2)
        if lv + 1 < levels:
            w = rng.dirichlet(np.ones(width) * 0.7)
            end = rng.dirichlet([1.0, 1.0]) * p_end * rng.uniform(0.2, 1.0)
            row[(lv + 1) * width:(lv + 2) * width] = w * (1.0 - end.sum())
            row[S:] = end
        else:
            p = rng.uniform()
            row[S], row[S + 1] = p, 1.0 - p
        return row

    T = np.zeros((S, U, S + 2))
    T[:, :, S + 1] = 1.0  # unused dedicated actions fail
    for s in range(S):
        for u in range(n_actions):
            T[s, u] = draw(level[s])
        T[s, n_actions + s] = draw(level[s])
    chunks = [list(rng.integers(n_actions, size=chunk_len)) for _ in range(S)]
    ks = [int(rng.choice(rates)) for _ in range(S)]
    fast = [[n_actions + s] + list(rng.integers(n_actions, size=max(chunk_len // k, 1) - 1))
            for s, k in enumerate(ks)]
    mdp = AtomicChunkMDP(T, chunks, fast, level, 0)
    if enforce_premise:
        V = _chunk_values(mdp, chunks)
        for s in range(S):
            q0 = chunk_q(mdp, V, s, fast[s])
            if q0 < V[s]:
                # success is absorbing, so blending weight lam lifts q linearly to 1
                lam = min((V[s] - q0) / (1.0 - q0) * (1.0 + 1e-9) + 1e-12, 1.0)
                T[s, n_actions + s] = (1.0 - lam) * T[s, n_actions + s]
                T[s, n_actions + s, S] += lam
    mdp.meta["rates"] = ks
    return mdp


def chunk_dominance_suite(n=1000, seed=0, max_tries=None):
    """Premise-satisfying random instances; returns ``(checked, counterexamples)``."""
    rng = np.random.default_rng(seed)
    checked, bad, tries = 0, [], 0
    max_tries = 10 * n if max_tries is None else max_tries
    while checked < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not draw enough premise-satisfying instances")
        mdp = random_chunk_mdp(rng)
        rep = verify_chunk_dominance(mdp)
        if not rep["premise_holds"]:
            continue
        checked += 1
        if not rep["conclusion_holds"]:
            bad.append(rep)
    return checked, bad


def premise_violating_instance() -> AtomicChunkMDP:
    """Two-level instance whose accelerated chunk skips the step that secures success."""
    # atomic actions: 0 careful (always succeeds from level 1), 1 rushed (fails half the time)
    S = 2
    T = np.zeros((S, 2, S + 2))
    T[0, 0, 1] = 1.0
    T[0, 1, 1] = 0.5
    T[0, 1, S + 1] = 0.5
    T[1, 0, S] = 1.0
    T[1, 1, S] = 0.5
    T[1, 1, S + 1] = 0.5
    return AtomicChunkMDP(T, [[0, 0], [0]], [[1], [0]], np.array([0, 1]), 0)


# ---------------------------------------------------------------------------
# exhaustive schedules

def brute_force_scheduler(mdp: TabularCMDP, horizon: int, max_horizon: int = 12):
    """Best open-loop rate sequence over ``horizon`` decisions on a deterministic MDP.

    Returns ``(rates, discounted_return)``; ties go to the lexicographically
    smallest sequence. Rewards are whatever ``mdp.reward`` holds (use
    :meth:`TabularCMDP.penalized` for penalty rewards).
    """
    if horizon < 1 or horizon > max_horizon:
        raise ValueError(f"horizon must lie in [1, {max_horizon}]")
    if not mdp.is_deterministic():
        raise ValueError("brute-force enumeration needs deterministic transitions")
    K = mdp.k_max
    nxt = np.argmax(mdp.P, axis=2)
    best, best_seq = -np.inf, None
    seen = set()
    for seq in itertools.product(range(1, K + 1), repeat=horizon):
        s, ret, disc, used = mdp.init, 0.0, 1.0, []
        for k in seq:
            if mdp.terminal[s]:
                break
            if not mdp.feasible[s, k - 1]:
                used = None
                break
            ret += disc * mdp.reward[s, k - 1]
            used.append(k)
            disc *= mdp.gamma
            s = nxt[s, k - 1]
        # schedules that differ only after termination are the same schedule
        if used is None or tuple(used) in seen:
            continue
        seen.add(tuple(used))
        if ret > best:
            best, best_seq = ret, used
    return best_seq, float(best)


def policy_return(mdp: TabularCMDP, policy, horizon=1000):
    """Exact discounted return of a deterministic stationary policy from ``init``."""
    S = mdp.n_states
    P = np.zeros((S, S))
    r = np.zeros(S)
    for s in range(S):
        if mdp.terminal[s]:
            continue
        j = policy[s] - 1
        P[s] = mdp.P[s, j]
        r[s] = mdp.reward[s, j]
    if mdp.gamma < 1.0:
        V = np.linalg.solve(np.eye(S) - mdp.gamma * P, r)
        return float(V[mdp.init])
    V = np.zeros(S)
    for _ in range(horizon):
        V = r + P @ V
    return float(V[mdp.init])


def trap_instance(gamma=0.9, k_max=4) -> TabularCMDP:
    """Taking ``k_max`` at the start lands in a state where only rate 1 is safe.

    Any lower first rate leads to open space where every rate is safe, so a
    greedy largest-safe-rate rule loses to the best two-step schedule.
    """
    # states: 0 start, 1 trap, 2 open, 3 terminal
    S, K = 4, k_max
    P = np.zeros((S, K, S))
    feasible = np.zeros((S, K), bool)
    h = np.zeros((S, K), bool)
    feasible[:3] = True
    P[0, :K - 1, 2] = 1.0
    P[0, K - 1, 1] = 1.0
    P[1, :, 3] = 1.0
    h[1, 1:] = True
    P[2, :, 3] = 1.0
    return TabularCMDP(P, feasible, h, gamma, 0, np.array([False, False, False, True]))


def greedy_policy(mdp: TabularCMDP):
    """Largest non-violating feasible rate per state (smallest feasible one if all violate)."""
    pol = np.zeros(mdp.n_states, int)
    for s in range(mdp.n_states):
        if mdp.terminal[s]:
            continue
        safe = np.nonzero(mdp.feasible[s] & ~mdp.h[s])[0]
        pol[s] = (safe.max() if len(safe) else np.nonzero(mdp.feasible[s])[0].min()) + 1
    return pol


# ---------------------------------------------------------------------------
# tabular IQL

def expectile(values, alpha, weights=None) -> float:
    """Exact minimiser ``v`` of ``sum w_i |alpha - 1[x_i - v < 0]| (x_i - v)**2``."""
    x = np.asarray(values, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    order = np.argsort(x)
    x, w = x[order], w[order]
    # on each gap between sorted values the optimality condition is linear in v
    for j in range(len(x) + 1):
        wt = np.where(np.arange(len(x)) >= j, alpha, 1.0 - alpha) * w
        v = float(np.sum(wt * x) / np.sum(wt))
        lo = -np.inf if j == 0 else x[j - 1]
        hi = np.inf if j == len(x) else x[j]
        if lo <= v <= hi:
            return v
    raise RuntimeError("no expectile segment found")


def tabular_iql(states, actions, rewards, next_states, alpha, gamma, tol=1e-13, max_iter=100_000,
                residual="q_minus_v"):
    """Fixed point of the IQL backups on a finite dataset of integer-labelled transitions.

    ``Q(s, a) = r + gamma V(s')`` per (s, a) pair and ``V(s)`` the alpha-expectile
    of ``Q(s, .)`` over the dataset's actions at ``s``. Duplicate (s, a) pairs
    must share reward and successor. Returns ``(Q dict, V dict)``.
    """
    pairs = {}
    for s, a, r, s2 in zip(states, actions, rewards, next_states):
        key = (int(s), int(a))
        if key in pairs and pairs[key] != (float(r), int(s2)):
            raise ValueError(f"inconsistent duplicates for {key}")
        pairs[key] = (float(r), int(s2))
    counts = {}
    for s, a in zip(states, actions):
        counts[(int(s), int(a))] = counts.get((int(s), int(a)), 0) + 1
    all_states = sorted({int(s) for s in states} | {int(s) for s in next_states})
    V = {s: 0.0 for s in all_states}
    a_eff = alpha if residual == "q_minus_v" else 1.0 - alpha
    Q = {}
    for _ in range(max_iter):
        Q = {key: r + gamma * V[s2] for key, (r, s2) in pairs.items()}
        newV = {}
        for s in all_states:
            keys = [k for k in Q if k[0] == s]
            newV[s] = expectile([Q[k] for k in keys], a_eff, [counts[k] for k in keys]) if keys else 0.0
        delta = max(abs(newV[s] - V[s]) for s in all_states)
        V = newV
        if delta < tol:
            break
    Q = {key: r + gamma * V[s2] for key, (r, s2) in pairs.items()}
    return Q, V
