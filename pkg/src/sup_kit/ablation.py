"""Ablations: threshold sensitivity, the greedy trap, recurrent vs one-shot world model."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import env as env_mod
from . import harness
from . import iql as iql_mod
from . import oracle
from . import wm as wm_mod
from .synth import SynthDataset, synthesize


def epsilon_sweep(cfg, wm, demos, epsilons=(0.005, 0.015, 0.04), trials=30, trained=None, on_log=None):
    """Retrain the scheduler per threshold and evaluate it.

    ``trained`` maps a threshold to an already trained scheduler (for
    instance the pipeline's own one at ``cfg.epsilon``). Returns
    ``{eps: {"success_rate", "speedup", "violations_per_ep"}}`` averaged over tasks.
    """
    trained = dict(trained or {})
    tasks = harness.task_specs(cfg)
    base = harness.evaluate("base", tasks, trials, cfg.eval.seed, cfg)
    base_steps = {m.task: m.mean_steps for m in base}
    out = {}
    for eps in epsilons:
        nets = trained.get(eps)
        if nets is None:
            ds = synthesize(demos, wm, harness.synth_config(cfg, eps))
            nets = iql_mod.train_scheduler(ds, harness.iql_config(cfg))
        ms = harness.evaluate("sup", tasks, trials, cfg.eval.seed, cfg, nets=nets, base_steps=base_steps,
                              epsilon=eps)
        out[eps] = {"success_rate": float(np.mean([m.success_rate for m in ms])),
                    "speedup": float(np.mean([m.speedup for m in ms])),
                    "violations_per_ep": float(np.mean([m.violations_per_ep for m in ms]))}
        if on_log is not None:
            on_log(eps, out[eps])
    return out


# ---------------------------------------------------------------------------
# trap scenario

_TRAP_CHUNK = 12  # divisible by 1..4, so every rate gives a distinct sequence length


def _trap_obs(s, n_states):
    # identity wrist, state index one-hot in the trailing slots
    o = np.zeros(7 + n_states)
    o[3] = 1.0
    o[7 + s] = 1.0
    return o


def _trap_seq(k):
    n = _TRAP_CHUNK // k
    a = np.zeros((n, 8))
    a[:, 0] = 0.01 * k * (1 + np.arange(n))
    a[:, 3] = 1.0
    return a


def trap_dataset(mdp: oracle.TabularCMDP, omega) -> SynthDataset:
    """Every (state, rate) pair of a deterministic tabular instance as scheduler records.

    Terminal states get a zero-reward self loop so their value is pinned to 0.
    """
    pen = mdp.penalized(omega)
    S, K = mdp.n_states, mdp.k_max
    o, kk, a, r, on, dev, vio = [], [], [], [], [], [], []
    for s in range(S):
        for j in range(K):
            if not mdp.terminal[s] and not mdp.feasible[s, j]:
                continue
            nxt = s if mdp.terminal[s] else int(np.argmax(mdp.P[s, j]))
            o.append(_trap_obs(s, S))
            kk.append(j + 1)
            a.append(_trap_seq(j + 1))
            r.append(0.0 if mdp.terminal[s] else float(pen.reward[s, j]))
            on.append(_trap_obs(nxt, S))
            bad = bool(mdp.h[s, j]) and not mdp.terminal[s]
            dev.append(1.0 if bad else 0.0)
            vio.append(bad)
    return SynthDataset(np.array(o), np.array(kk), a, np.array(r), np.array(on), np.array(dev), np.array(vio))


def trap_ablation(cfg, seed=0, steps=3000):
    """Enumerated optimum, greedy MPC and a trained scheduler on the trap instance."""
    mdp = oracle.trap_instance(cfg.gamma, cfg.k_max)
    omega = harness.synth_config(cfg).penalty
    pen = mdp.penalized(omega)
    opt_rates, opt_ret = oracle.brute_force_scheduler(pen, 2)
    greedy = oracle.greedy_policy(mdp)
    greedy_ret = oracle.policy_return(pen, greedy)
    ds = trap_dataset(mdp, omega)
    icfg = replace(harness.iql_config(cfg), steps=steps, batch=len(ds), hidden=16, seq_hidden=8, seed=seed,
                   lr=3e-3, lr_final=3e-4)
    nets = iql_mod.train_scheduler(ds, icfg)
    policy = np.zeros(mdp.n_states, int)
    for s in range(mdp.n_states):
        if mdp.terminal[s]:
            continue
        ks = [j + 1 for j in range(mdp.k_max) if mdp.feasible[s, j]]
        q = iql_mod.q_values(nets, np.repeat(_trap_obs(s, mdp.n_states)[None], len(ks), 0),
                             [_trap_seq(k) for k in ks])
        policy[s] = ks[int(np.argmax(q))]
    return {"optimum_rates": [int(k) for k in opt_rates], "optimum_return": float(opt_ret),
            "greedy_policy": [int(k) for k in greedy], "greedy_return": float(greedy_ret),
            "scheduler_policy": [int(k) for k in policy],
            "scheduler_return": float(oracle.policy_return(pen, policy))}


# ---------------------------------------------------------------------------
# recurrent vs one-shot world model

def terminal_errors(params, episodes, kind="rnn", horizon=24, stride=4):
    errs = []
    for ep in episodes:
        S, A = wm_mod.episode_arrays(ep)
        for t in range(0, len(A) - horizon + 1, stride):
            if kind == "rnn":
                pred = wm_mod.predict(params, S[t], A[t:t + horizon])[-1]
            else:
                pred = wm_mod.predict_mlp(params, S[t], A[t:t + horizon])
            errs.append(np.linalg.norm(pred[:3] - S[t + horizon, :3]))
    return np.array(errs)


def wm_ablation(seed=0, n_train=120, n_test=20, epochs=40, hidden=32, layers=2):
    """Mean 24-step terminal EEF error of both model kinds on held-out curved paths."""
    train = [env_mod.gen_curved(seed * 10_000 + i) for i in range(n_train)]
    test = [env_mod.gen_curved(seed * 10_000 + 5_000 + i) for i in range(n_test)]
    cfg = wm_mod.WmConfig(hidden=hidden, layers=layers, epochs=epochs, lr=3e-3, lr_final=1e-4, batch=128,
                          patience=epochs, seed=seed)
    out = {}
    for kind in ("rnn", "mlp"):
        params = wm_mod.train_wm(train, cfg, kind=kind)
        out[kind] = float(np.mean(terminal_errors(params, test, kind)))
    return out
