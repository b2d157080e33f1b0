"""The acceptance suite: ten criteria, each with its own tolerance and time budget.

Every check returns a :class:`Result`; ``run_all`` prints one line per
criterion. Criteria 4, 8 and 9 share the default pipeline run in
``workdir/pipeline``; its phase timings are stored in the manifest so a
cached run is still charged its original wall-clock time.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import ablation, chunking, geometry as geo, harness, oracle, wm as wm_mod
from . import iql as iql_mod
from .config import load_config
from .synth import SynthDataset


@dataclass
class Result:
    number: int
    name: str
    passed: bool
    seconds: float
    limit: float
    details: dict = field(default_factory=dict)

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        info = ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items())
        return f"[{tag}] {self.number:2d} {self.name}: {info} ({self.seconds:.1f}s, limit {self.limit:.0f}s)"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k}: {_fmt(x)}" for k, x in v.items()) + "}"
    return str(v)


class Context:
    """Shared state: the working directory and the lazily built default pipeline."""

    def __init__(self, workdir=None, config_path=None):
        self.workdir = workdir or tempfile.mkdtemp(prefix="sup-accept-")
        self.config_path = config_path
        self.cfg = load_config(config_path)

    @property
    def pipeline_dir(self):
        return os.path.join(self.workdir, "pipeline")

    def pipeline(self, upto="eval"):
        harness.run_pipeline(self.cfg, self.pipeline_dir, upto=upto)
        return self.pipeline_dir

    def phase_seconds(self, *phases):
        secs = harness.phase_seconds(self.pipeline_dir)
        return sum(secs.get(p, 0.0) for p in phases)


def _unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _slerp_mid(q0, q1):
    theta = math.acos(min(1.0, float(np.dot(q0, q1))))
    return (q0 + q1) * math.sin(theta / 2.0) / math.sin(theta)


# ---------------------------------------------------------------------------
# 1

def geometry_suite(n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    fails = {}

    def bad(name, cond):
        if not cond:
            fails[name] = fails.get(name, 0) + 1

    qa, qb, qc = _unit_quats(rng, n), _unit_quats(rng, n), _unit_quats(rng, n)
    raw = rng.normal(size=(n, 4)) * rng.uniform(0.01, 100.0, size=(n, 1))
    pa, pb, pc = (rng.normal(scale=0.2, size=(n, 3)) for _ in range(3))
    # invariants over all rows at once through the row-wise forms
    def every(name, cond):
        miss = int(np.size(cond) - np.count_nonzero(cond))
        if miss:
            fails[name] = fails.get(name, 0) + miss

    g = geo.geodesic_rows
    dab, dbc, dac = g(qa, qb), g(qb, qc), g(qa, qc)
    every("antipodal", g(qa, -qa) <= 1e-9)
    every("self_zero", g(qa, qa) == 0.0)
    every("rot_range", (dab >= 0.0) & (dab <= math.pi / 2 + 1e-12))
    every("rot_triangle", dac <= dab + dbc + 1e-9)
    A, B, C = geo.Trajectory(pa, qa), geo.Trajectory(pb, qb), geo.Trajectory(pc, qc)
    pos = lambda x, y: geo.pointwise_distance(x, geo.Trajectory(y.positions, x.quats))
    every("pos_triangle", pos(A, C) <= pos(A, B) + pos(B, C) + 1e-9)
    dAB, dBA = geo.pointwise_distance(A, B), geo.pointwise_distance(B, A)
    every("symmetric", np.abs(dAB - dBA) <= 1e-12)
    every("nonnegative", dAB >= 0.0)
    for i in range(n):
        bad("unit_norm", abs(np.linalg.norm(geo.normalize(raw[i])) - 1.0) <= 1e-9)
        bad("nlerp_unit", abs(np.linalg.norm(geo.nlerp(qa[i], qb[i], rng.uniform())) - 1.0) <= 1e-9)
        q1 = qb[i] if np.dot(qa[i], qb[i]) > 0 else -qb[i]
        if np.dot(qa[i], q1) > 0.1:
            bad("nlerp_slerp_mid", np.linalg.norm(geo.nlerp(qa[i], q1, 0.5) - _slerp_mid(qa[i], q1)) <= 1e-6)
        if i < 500:
            # the scalar entry points agree with the row-wise forms
            bad("scalar_geodesic", geo.geodesic_dist(qa[i], qb[i]) == dab[i])
            bad("scalar_eef", abs(geo.eef_distance(geo.Pose(pa[i], qa[i]), geo.Pose(pb[i], qb[i])) - dAB[i])
                <= 1e-15)
    # trajectories: zero self-deviation, sign-flip invariance, resampling endpoints
    for i in range(n):
        L = int(rng.integers(1, 9))
        tau = geo.Trajectory(rng.normal(scale=0.1, size=(L, 3)), _unit_quats(rng, L))
        M = int(rng.integers(1, 9))
        tau_k = geo.Trajectory(rng.normal(scale=0.1, size=(M, 3)), _unit_quats(rng, M))
        bad("deviation_self_zero", geo.state_deviation(tau, tau) == 0.0)
        flip = geo.Trajectory(tau_k.positions, tau_k.quats * rng.choice([-1.0, 1.0], size=(M, 1)))
        bad("deviation_sign_flip", abs(geo.state_deviation(tau, tau_k) - geo.state_deviation(tau, flip)) <= 1e-9)
        r = geo.resample_trajectory(tau_k, L)
        bad("resample_len", len(r) == L)
        bad("resample_end", np.array_equal(r.positions[-1], tau_k.positions[-1]))
    # worked examples
    ex = {
        "geodesic_pi4": abs(geo.geodesic_dist(geo.IDENTITY, geo.yaw_quat(math.pi / 2)) - math.pi / 4),
        "half_pos": abs(geo.eef_distance(geo.Pose.identity(), geo.Pose.identity((0.02, 0, 0))) - 0.01),
        "rot_only": abs(geo.eef_distance(geo.Pose.identity(), geo.Pose([0, 0, 0], geo.yaw_quat(math.pi / 2)))
                        - math.pi / 4),
    }
    line = geo.Trajectory(np.outer(np.arange(1, 5) / 4.0, [0.03, 0, 0]), np.tile(geo.IDENTITY, (4, 1)))
    short = geo.Trajectory(line.positions[[1, 3]], line.quats[[1, 3]])
    ex["linear_resample"] = geo.state_deviation(line, short, origin=geo.Pose.identity())
    seg = geo.Trajectory([[0, 0, 0], [1, 0, 0]], np.tile(geo.IDENTITY, (2, 1)))
    ex["segment_quarters"] = float(np.max(np.abs(geo.resample_trajectory(seg, 4).positions[:, 0]
                                                 - [0.25, 0.5, 0.75, 1.0])))
    shifted = geo.Trajectory(line.positions + [0.004, 0, 0], line.quats)
    ex["offset_half"] = abs(geo.state_deviation(line, shifted) - 0.002)
    for k, v in ex.items():
        if v > 1e-9:
            fails[k] = v
    return fails


def criterion_1(ctx):
    t = time.perf_counter()
    fails = geometry_suite()
    dt = time.perf_counter() - t
    return Result(1, "geometry suite (1e4 inputs, examples to 1e-9)", not fails and dt < 5, dt, 5,
                  {"failures": fails or 0})


# ---------------------------------------------------------------------------
# 2

def downsample_suite(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    fails = {}

    def bad(name, cond):
        if not cond:
            fails[name] = fails.get(name, 0) + 1

    for i in range(n):
        m = int(rng.integers(1, 31))
        k = int(rng.integers(1, m + 1))
        l = m // k
        for mode in (chunking.ControlMode.ABS, chunking.ControlMode.DELTA):
            chunk = chunking.ActionChunk(rng.normal(scale=0.05, size=(m, 3)), _unit_quats(rng, m),
                                         rng.uniform(-0.2, 0.2, m), mode)
            out = chunking.downsample(chunk, k)
            bad("length", len(out) == l)
            ident = chunking.downsample(chunk, 1)
            bad("k1_identity", np.array_equal(ident.as_array(), chunk.as_array()))
            bad("deterministic", np.array_equal(out.as_array(), chunking.downsample(chunk, k).as_array()))
            if mode is chunking.ControlMode.DELTA:
                bad("telescoping", np.allclose(out.positions.sum(0), chunk.positions[:l * k].sum(0),
                                               rtol=0, atol=1e-12))
                bad("gripper_sum", abs(out.gripper.sum() - chunk.gripper[:l * k].sum()) <= 1e-12)
            else:
                bad("abs_index", np.array_equal(out.positions, chunk.positions[np.arange(1, l + 1) * k - 1]))
                bad("abs_final", np.array_equal(out.positions[-1], chunk.positions[l * k - 1]))
                if m % k == 0:
                    bad("abs_final_original", np.array_equal(out.positions[-1], chunk.positions[-1]))
    return fails


def criterion_2(ctx):
    t = time.perf_counter()
    fails = downsample_suite()
    dt = time.perf_counter() - t
    return Result(2, "downsampling laws (1e3 chunks, both modes)", not fails and dt < 5, dt, 5,
                  {"failures": fails or 0})


# ---------------------------------------------------------------------------
# 3

def wm_gradient_check(n_probe=200, seed=0, hidden=16, layers=3, l_max=6, h=1e-4):
    """Worst relative error ``|a - b| / max(|a|, |b|, 1e-6)`` over random coordinates."""
    rng = np.random.default_rng(seed)
    p = wm_mod.init_params(11, 8, hidden, layers, seed=seed + 1, l_max=l_max)
    p.norm["d_scale"] = rng.uniform(0.5, 2.0, 11)
    samples = []
    for _ in range(5):
        L = int(rng.integers(1, l_max + 1))
        samples.append((rng.normal(size=11), rng.normal(size=(L, 8)), rng.normal(size=(L, 11))))
    batch = wm_mod.WmBatch.from_samples(samples)
    _, grads = wm_mod.wm_backward(p, batch)
    keys = sorted(p.weights)
    worst = 0.0
    for _ in range(n_probe):
        key = keys[rng.integers(len(keys))]
        idx = tuple(int(rng.integers(s)) for s in p.weights[key].shape)
        old = p.weights[key][idx]
        p.weights[key][idx] = old + h
        lp = wm_mod.wm_loss(p, batch)
        p.weights[key][idx] = old - h
        lm = wm_mod.wm_loss(p, batch)
        p.weights[key][idx] = old
        num = (lp - lm) / (2 * h)
        ana = grads[key][idx]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def no_feedback_check(seed=0):
    """Perturbing the decoder changes predictions but not one bit of the hidden sequence."""
    rng = np.random.default_rng(seed)
    p = wm_mod.init_params(11, 8, 16, 3, seed=seed)
    o, acts = rng.normal(size=11), rng.normal(size=(12, 8))
    h0, y0 = wm_mod.hidden_states(p, o, acts), wm_mod.predict(p, o, acts)
    q = p.copy()
    for k in q.weights:
        if k.startswith("dec."):
            q.weights[k] = q.weights[k] + rng.normal(scale=0.5, size=q.weights[k].shape)
    h1, y1 = wm_mod.hidden_states(q, o, acts), wm_mod.predict(q, o, acts)
    return bool(np.array_equal(h0, h1) and not np.allclose(y0, y1))


def criterion_3(ctx):
    t = time.perf_counter()
    worst = wm_gradient_check()
    nf = no_feedback_check()
    dt = time.perf_counter() - t
    return Result(3, "world-model gradient check + no-feedback", worst < 1e-4 and nf and dt < 60, dt, 60,
                  {"max_rel_err": worst, "no_feedback": nf})


# ---------------------------------------------------------------------------
# 4

def wm_fidelity(params, episodes, horizon=24):
    """Mean 1-step and ``horizon``-step terminal EEF position errors over all start steps."""
    e1, eh = [], []
    for ep in episodes:
        S, A = wm_mod.episode_arrays(ep)
        starts = np.arange(len(A))
        pred = wm_mod.predict_batch(params, S[starts], A[starts, None])
        e1.append(np.linalg.norm(pred[:, 0, :3] - S[starts + 1, :3], axis=1))
        starts = np.arange(len(A) - horizon + 1)
        if len(starts):
            windows = np.stack([A[s:s + horizon] for s in starts])
            pred = wm_mod.predict_batch(params, S[starts], windows)
            eh.append(np.linalg.norm(pred[:, -1, :3] - S[starts + horizon, :3], axis=1))
    return float(np.mean(np.concatenate(e1))), float(np.mean(np.concatenate(eh)))


def criterion_4(ctx):
    out = ctx.pipeline(upto="train-wm")
    dt = ctx.phase_seconds("gen-demos", "train-wm")
    demos = harness.load_demos(out, ("demo",))
    held = harness.load_demos(out, ("heldout",))
    e1, e24 = wm_fidelity(harness.load_wm(out), held)
    ok = len(demos) >= 100 and e1 < 1e-3 and e24 < 5e-3 and dt < 900
    return Result(4, "world-model fidelity on held-out demos", ok, dt, 900,
                  {"demos": len(demos), "heldout": len(held), "err_1step_m": e1, "err_24step_m": e24})


# ---------------------------------------------------------------------------
# 5

def criterion_5(ctx):
    t = time.perf_counter()
    failures = oracle.penalty_bound_suite(500, factor=1.01)
    gamma, k_max = 0.9, 4
    below = oracle.lower_bound_threshold(gamma, k_max) - 0.5
    rep = oracle.verify_penalty_bound(oracle.lower_bound_instance(gamma, k_max), below)
    dt = time.perf_counter() - t
    ok = not failures and not rep["zero_violation"] and dt < 60
    return Result(5, "penalty bound: 500 random CMDPs + below-bound counterexample", ok, dt, 60,
                  {"counterexamples": len(failures), "below_bound_violates": not rep["zero_violation"]})


# ---------------------------------------------------------------------------
# 6

def criterion_6(ctx):
    t = time.perf_counter()
    checked, bad = oracle.chunk_dominance_suite(1000)
    rep = oracle.verify_chunk_dominance(oracle.premise_violating_instance())
    dt = time.perf_counter() - t
    flagged = not rep["premise_holds"]
    ok = checked == 1000 and not bad and flagged and dt < 120
    return Result(6, "chunk dominance: 1000 premise instances + flagged instance", ok, dt, 120,
                  {"checked": checked, "counterexamples": len(bad), "flagged": flagged})


# ---------------------------------------------------------------------------
# 7

TWO_STATE = {"states": [0, 0, 1, 1], "rates": [1, 2, 1, 2], "rewards": [1.0, 2.0, 1.0, -5.0],
             "next": [0, 1, 0, 1]}


def tabular_dataset(states, rates, rewards, next_states, n_states) -> SynthDataset:
    o = np.array([ablation._trap_obs(s, n_states) for s in states])
    on = np.array([ablation._trap_obs(s, n_states) for s in next_states])
    return SynthDataset(o, np.array(rates), [ablation._trap_seq(k) for k in rates], np.array(rewards, float),
                        on, np.zeros(len(states)), np.array(rewards) < 0)


def td_loss_naive(nets, ds, gamma):
    total = 0.0
    for i in range(len(ds)):
        target = ds.r_prime[i] + gamma * iql_mod.v_value(nets, ds.o_next[i])
        total += (target - iql_mod.q_value(nets, ds.o[i], ds.a_seq[i])) ** 2
    return total / len(ds)


def iql_checks(seed=0):
    out = {}
    cases = [((2.0, 0.5), 2.0), ((-1.0, 0.95), 0.05), ((1.0, 0.95), 0.95)]
    out["expectile_err"] = max(abs(float(iql_mod.expectile_loss(x, a)) - want) for (x, a), want in cases)
    # TD loss against a per-record re-implementation on a random dataset
    rng = np.random.default_rng(seed)
    n = 24
    ds = SynthDataset(rng.normal(size=(n, 11)), rng.integers(1, 5, n),
                      [rng.normal(size=(int(rng.integers(1, 7)), 8)) for _ in range(n)],
                      rng.normal(size=n), rng.normal(size=(n, 11)), np.zeros(n), np.zeros(n, bool))
    ds.o[:, 3:7] /= np.linalg.norm(ds.o[:, 3:7], axis=1, keepdims=True)
    cfg = iql_mod.IqlConfig(gamma=0.9, hidden=16, seq_hidden=8)
    nets = iql_mod.SchedulerNets.init(11, 8, 16, 8, seed=seed)
    iql_mod.fit_norm(nets, ds, cfg.gamma)
    lq, _ = iql_mod.iql_losses(nets, iql_mod.IqlBatch.from_dataset(ds), cfg)
    out["td_err"] = abs(lq - td_loss_naive(nets, ds, cfg.gamma))
    # two-state dataset against the exact tabular fixed point
    d = TWO_STATE
    Q, V = oracle.tabular_iql(d["states"], d["rates"], d["rewards"], d["next"], 0.95, 0.9)
    ds2 = tabular_dataset(d["states"], d["rates"], d["rewards"], d["next"], 4)
    cfg2 = iql_mod.IqlConfig(alpha=0.95, gamma=0.9, lr=3e-3, lr_final=1e-5, batch=len(ds2), steps=3000,
                             hidden=16, seq_hidden=8, seed=seed)
    nets2 = iql_mod.train_scheduler(ds2, cfg2)
    q = iql_mod.q_values(nets2, ds2.o, ds2.a_seq)
    want = np.array([Q[(s, k)] for s, k in zip(d["states"], d["rates"])])
    out["fixed_point_err"] = float(np.max(np.abs(q - want)))
    return out


def criterion_7(ctx):
    t = time.perf_counter()
    r = iql_checks()
    dt = time.perf_counter() - t
    ok = r["expectile_err"] <= 1e-12 and r["td_err"] <= 1e-10 and r["fixed_point_err"] <= 1e-3 and dt < 60
    return Result(7, "IQL: expectile cases, TD oracle, 2-state fixed point", ok, dt, 60, r)


# ---------------------------------------------------------------------------
# 8

def _by(metrics, variant):
    return {m.task: m for m in metrics if m.variant == variant}


def headline(metrics, k_max, contact_task="pick_place"):
    base, sup, ds = _by(metrics, "base"), _by(metrics, "sup"), _by(metrics, f"ds-{k_max}")
    tasks = sorted(base)
    return {
        "sup_speedup": float(np.mean([sup[t].speedup for t in tasks])),
        "sup_success": float(np.mean([sup[t].success_rate for t in tasks])),
        "base_success": float(np.mean([base[t].success_rate for t in tasks])),
        "ds_drop": base[contact_task].success_rate - ds[contact_task].success_rate,
        "trials": min(m.trials for m in metrics),
    }


def criterion_8(ctx):
    cfg = ctx.cfg
    out = ctx.pipeline()
    dt = ctx.phase_seconds(*harness.PHASES)
    with open(os.path.join(out, "report.csv")) as f:
        metrics = harness.parse_report_csv(f.read())
    have = {m.variant for m in metrics}
    need = {"base", "sup", f"ds-{cfg.k_max}"}
    if not need <= have or cfg.epsilon != 0.015:
        return Result(8, "end-to-end speedup at eps 0.015", False, dt, 1200,
                      {"error": f"report needs variants {sorted(need)} at epsilon 0.015"})
    h = headline(metrics, cfg.k_max)
    ok = (h["sup_speedup"] >= 1.3 and abs(h["sup_success"] - h["base_success"]) <= 0.05
          and h["ds_drop"] > 0.10 and h["trials"] >= 100 and dt < 1200)
    return Result(8, "end-to-end speedup at eps 0.015", ok, dt, 1200, h)


# ---------------------------------------------------------------------------
# 9

def criterion_9(ctx, trials=100):
    out = ctx.pipeline(upto="train-scheduler")
    t = time.perf_counter()
    cfg = ctx.cfg
    wm = harness.load_wm(out)
    demos = harness.load_demos(out)
    sweep = ablation.epsilon_sweep(cfg, wm, demos, (0.005, cfg.epsilon, 0.04), trials,
                                   trained={cfg.epsilon: harness.load_scheduler(out)})
    trap = ablation.trap_ablation(cfg)
    wm_ab = ablation.wm_ablation()
    # the pipeline's own scheduler is reused for the middle threshold; charge its training time
    dt = time.perf_counter() - t + ctx.phase_seconds("synth", "train-scheduler")
    lo, mid, hi = sweep[0.005], sweep[cfg.epsilon], sweep[0.04]
    a = lo["speedup"] < mid["speedup"] and hi["success_rate"] < mid["success_rate"]
    b = (trap["optimum_return"] > trap["greedy_return"]
         and trap["scheduler_return"] >= 0.9 * trap["optimum_return"])
    c = wm_ab["rnn"] <= wm_ab["mlp"]
    details = {"eps_0.005": lo, f"eps_{cfg.epsilon}": mid, "eps_0.04": hi,
               "trap_opt": trap["optimum_return"], "trap_greedy": trap["greedy_return"],
               "trap_sched": trap["scheduler_return"], "term_err_rnn": wm_ab["rnn"], "term_err_mlp": wm_ab["mlp"],
               "a": a, "b": b, "c": c}
    return Result(9, "ablations: threshold, trap, recurrent vs MLP", a and b and c and dt < 900, dt, 900, details)


# ---------------------------------------------------------------------------
# 10

def criterion_10(ctx):
    t = time.perf_counter()
    cfg = load_config(preset="ci")
    blobs = []
    for run in ("a", "b"):
        d = os.path.join(ctx.workdir, f"determinism-{run}")
        harness.run_pipeline(cfg, d, force=True)
        blobs.append(tuple(open(os.path.join(d, f), "rb").read() for f in ("report.csv", "report.json")))
    dt = time.perf_counter() - t
    same = blobs[0] == blobs[1]
    return Result(10, "determinism: two ci pipeline runs, identical reports", same, dt, float("inf"),
                  {"identical": same, "bytes": sum(len(b) for b in blobs[0])})


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9, criterion_10]


def run_all(ctx=None, only=None, echo=print):
    ctx = ctx or Context()
    results = []
    for i, fn in enumerate(CRITERIA, 1):
        if only and i not in only:
            continue
        try:
            r = fn(ctx)
        except Exception as e:  # report the failure and keep going
            r = Result(i, fn.__name__, False, 0.0, 0.0, {"error": f"{type(e).__name__}: {e}"})
        results.append(r)
        if echo is not None:
            echo(r.line())
    return results
