"""Counterfactual relabelling of demonstrations into the scheduler dataset.

Every chunk-aligned demo transition is replayed through the world model
once per downsampling rate. The rate-k rollout is compared with the rollout
of the same commanded sub-path at demo pace; a large end-effector gap marks
the rate as unsafe and its reward is replaced by a fixed penalty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import wm as wm_mod
from .chunking import ActionChunk, ControlMode, accelerate
from .geometry import Pose, state_deviation

RECORD_FIELDS = ("o", "k", "a_seq", "r_prime", "o_next", "deviation", "violated")


@dataclass
class SynthConfig:
    k_min: int = 1
    k_max: int = 4
    epsilon: float = 0.015
    gamma: float = 0.9
    omega_profile: str = "theory"  # "theory" | "paper" | "fixed"
    omega: float | None = None     # used by the "fixed" profile
    paper_penalty: float = -5.0    # violation reward of the "paper" profile
    stride: int = 4                # demo steps between synthesized transitions
    chunk_len: int = 24

    def __post_init__(self):
        if self.k_min < 1 or self.k_max < self.k_min:
            raise ValueError("need 1 <= k_min <= k_max")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.omega_profile not in ("theory", "paper", "fixed"):
            raise ValueError(f"unknown omega profile {self.omega_profile!r}")
        if self.omega_profile == "fixed" and (self.omega is None or self.omega <= 0):
            raise ValueError("the fixed omega profile needs omega > 0")
        if self.omega_profile == "paper" and self.paper_penalty >= 0:
            raise ValueError("paper_penalty is the (negative) violation reward")

    @property
    def penalty(self) -> float:
        """Penalty magnitude Omega > 0; the violation reward is ``-penalty``."""
        if self.omega_profile == "theory":
            return 1.1 * min_penalty_bound(self.k_max, self.gamma) if self.gamma > 0 else 1.0
        if self.omega_profile == "paper":
            return -self.paper_penalty
        return float(self.omega)


def penalty_reward(k, violated, omega) -> float:
    return -float(omega) if violated else float(k)


def min_penalty_bound(k_max, gamma) -> float:
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    return gamma * k_max / (1.0 - gamma)


def _origin(o):
    o = np.asarray(o, dtype=float)
    return Pose(o[:3], o[3:7])


def _rollouts(wm, o, chunk: ActionChunk, k):
    """World-model rollouts of the reference sub-path and of the rate-k chunk."""
    l = len(chunk) // k
    ref = wm_mod.predict(wm, o, chunk.head(l * k).as_array())
    acc = accelerate(chunk, k)
    fast = wm_mod.predict(wm, o, acc.as_array())
    return ref, fast, acc


def violation(o, chunk: ActionChunk, k, wm, epsilon):
    """``(violated, deviation)`` of running ``chunk`` at rate ``k`` from state ``o``."""
    o = o.vector() if hasattr(o, "vector") else np.asarray(o, dtype=float)
    if len(chunk) < k:
        raise ValueError(f"chunk shorter than rate (n={len(chunk)}, k={k})")
    if k == 1:
        return False, 0.0
    ref, fast, _ = _rollouts(wm, o, chunk, k)
    dev = state_deviation(wm_mod.trajectory(ref), wm_mod.trajectory(fast), origin=_origin(o))
    return bool(dev > epsilon), float(dev)


def batched_deviations(wm, obs, chunks, k):
    """Deviation and terminal prediction for many ``(o, chunk)`` pairs at one rate.

    All chunks must share one length. Returns ``(deviations, o_next, a_seqs)``.
    """
    obs = np.asarray(obs, dtype=float)
    n = len(chunks[0])
    l = n // k
    acc = [accelerate(c, k) for c in chunks]
    a_fast = np.stack([a.as_array() for a in acc])
    fast = wm_mod.predict_batch(wm, obs, a_fast)
    if k == 1:
        return np.zeros(len(obs)), fast[:, -1], a_fast
    a_ref = np.stack([c.head(l * k).as_array() for c in chunks])
    ref = wm_mod.predict_batch(wm, obs, a_ref)
    devs = np.array([state_deviation(wm_mod.trajectory(r), wm_mod.trajectory(f), origin=_origin(o))
                     for o, r, f in zip(obs, ref, fast)])
    return devs, fast[:, -1], a_fast


@dataclass
class SynthDataset:
    o: np.ndarray         # (N, S)
    k: np.ndarray         # (N,)
    a_seq: list           # N arrays of shape (l_k, 8)
    r_prime: np.ndarray
    o_next: np.ndarray
    deviation: np.ndarray
    violated: np.ndarray  # bool

    def __len__(self):
        return len(self.k)

    def records(self):
        for i in range(len(self)):
            yield {"o": self.o[i].tolist(), "k": int(self.k[i]), "a_seq": np.asarray(self.a_seq[i]).ravel().tolist(),
                   "r_prime": float(self.r_prime[i]), "o_next": self.o_next[i].tolist(),
                   "deviation": float(self.deviation[i]), "violated": int(bool(self.violated[i]))}

    def write_jsonl(self, path):
        with open(path, "w") as f:
            for rec in self.records():
                f.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path, action_dim=8):
        o, k, a, r, on, dev, vio = [], [], [], [], [], [], []
        with open(path) as f:
            for line in f:
                rec = json.loads(line)
                if tuple(rec) != RECORD_FIELDS:
                    raise ValueError(f"{path}: unexpected record fields {tuple(rec)}")
                o.append(rec["o"])
                k.append(rec["k"])
                a.append(np.array(rec["a_seq"], dtype=float).reshape(-1, action_dim))
                r.append(rec["r_prime"])
                on.append(rec["o_next"])
                dev.append(rec["deviation"])
                vio.append(bool(rec["violated"]))
        return cls(np.array(o, dtype=float), np.array(k, dtype=int), a, np.array(r, dtype=float),
                   np.array(on, dtype=float), np.array(dev, dtype=float), np.array(vio, dtype=bool))

    @classmethod
    def from_records(cls, recs):
        recs = list(recs)
        return cls(np.array([r["o"] for r in recs], dtype=float), np.array([r["k"] for r in recs], dtype=int),
                   [np.asarray(r["a_seq"], dtype=float).reshape(-1, 8) for r in recs],
                   np.array([r["r_prime"] for r in recs], dtype=float),
                   np.array([r["o_next"] for r in recs], dtype=float),
                   np.array([r.get("deviation", 0.0) for r in recs], dtype=float),
                   np.array([bool(r.get("violated", False)) for r in recs]))


def demo_transitions(demos, n, stride, mode=ControlMode.ABS):
    """``(o, chunk)`` pairs every ``stride`` steps; short tails are padded by holding the last action."""
    out = []
    for ep in demos:
        acts = np.asarray(ep.actions, dtype=float)
        for t in range(0, len(acts), stride):
            seg = acts[t:t + n]
            if len(seg) < n:
                seg = np.vstack([seg, np.repeat(seg[-1:], n - len(seg), axis=0)])
                seg[len(acts) - t:, 7] = 0.0  # a held pose does not keep moving the gripper
            out.append((ep.observations[t].vector(), ActionChunk.from_array(seg, mode)))
    return out


def synthesize(demos, wm, cfg: SynthConfig = SynthConfig(), transitions=None) -> SynthDataset:
    """Relabel every transition at every rate in ``[k_min, k_max]``.

    Records are ordered by (transition index, k).
    """
    if transitions is None:
        if not demos:
            raise ValueError("synthesize needs a non-empty demo set")
        transitions = demo_transitions(demos, cfg.chunk_len, cfg.stride)
    if not transitions:
        raise ValueError("synthesize needs at least one transition")
    obs = np.array([o for o, _ in transitions])
    chunks = [c for _, c in transitions]
    n = len(chunks[0])
    if any(len(c) != n for c in chunks):
        raise ValueError("all chunks must share one length")
    ks = [k for k in range(cfg.k_min, cfg.k_max + 1) if k <= n]
    if not ks:
        raise ValueError(f"chunk shorter than rate (n={n}, k={cfg.k_min})")
    per_k = {k: batched_deviations(wm, obs, chunks, k) for k in ks}
    omega = cfg.penalty
    o, kk, a, r, on, dev, vio = [], [], [], [], [], [], []
    for i in range(len(obs)):
        for k in ks:
            d, nxt, seq = per_k[k][0][i], per_k[k][1][i], per_k[k][2][i]
            bad = bool(d > cfg.epsilon)
            o.append(obs[i])
            kk.append(k)
            a.append(seq)
            r.append(penalty_reward(k, bad, omega))
            on.append(nxt)
            dev.append(d)
            vio.append(bad)
    return SynthDataset(np.array(o), np.array(kk), a, np.array(r), np.array(on), np.array(dev), np.array(vio))
