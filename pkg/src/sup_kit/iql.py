"""Implicit Q-learning over downsampling rates, plus the greedy MPC selector.

Q(o, A^k) reads the already-downsampled action sequence through a GRU and
fuses its final state with an MLP embedding of o; V(o) is a plain MLP. The
scheduler acts by argmax over the feasible rates.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .chunking import accelerate, feasible_rates
from .synth import SynthDataset, violation
from .wm import relative_actions

log = logging.getLogger(__name__)


@dataclass
class IqlConfig:
    alpha: float = 0.95
    gamma: float = 0.9
    lr: float = 3e-4
    lr_final: float = 3e-4
    batch: int = 256
    steps: int = 4000
    hidden: int = 64
    seq_hidden: int = 32
    clip: float = 10.0
    seed: int = 0
    # "q_minus_v": expectile of Q - V (upper expectile for alpha > 0.5);
    # "v_minus_q": the argument order as printed, giving the lower expectile
    residual: str = "q_minus_v"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("expectile alpha must lie in (0, 1)")
        if self.residual not in ("q_minus_v", "v_minus_q"):
            raise ValueError(f"unknown residual convention {self.residual!r}")


def expectile_loss(x, alpha):
    """``|alpha - 1[x < 0]| * x**2``, elementwise."""
    x = np.asarray(x, dtype=float)
    return np.abs(alpha - (x < 0)) * x * x


def expectile_grad(x, alpha):
    x = np.asarray(x, dtype=float)
    return 2.0 * np.abs(alpha - (x < 0)) * x


class SchedulerNets:
    def __init__(self, q, v, norm, meta):
        self.q, self.v, self.norm, self.meta = q, v, norm, meta
        self._opt = None

    @classmethod
    def init(cls, state_dim, action_dim=8, hidden=64, seq_hidden=32, seed=0):
        rng = np.random.default_rng(seed)
        q = nn.init_gru(rng, "seq", action_dim, seq_hidden, 1)
        q.update(nn.init_mlp(rng, "state", [state_dim, hidden]))
        q.update(nn.init_mlp(rng, "fuse", [seq_hidden + hidden, hidden, 1]))
        v = nn.init_mlp(rng, "v", [state_dim, hidden, hidden, 1])
        norm = {"o_mean": np.zeros(state_dim), "o_std": np.ones(state_dim),
                "a_mean": np.zeros(action_dim), "a_std": np.ones(action_dim), "scale": np.ones(1)}
        meta = {"state_dim": state_dim, "action_dim": action_dim, "hidden": hidden, "seq_hidden": seq_hidden}
        return cls(q, v, norm, meta)

    def copy(self):
        return SchedulerNets({k: a.copy() for k, a in self.q.items()}, {k: a.copy() for k, a in self.v.items()},
                             {k: a.copy() for k, a in self.norm.items()}, dict(self.meta))

    def save(self, path):
        arrays = {f"q.{k}": a for k, a in self.q.items()}
        arrays.update({f"v.{k}": a for k, a in self.v.items()})
        arrays.update({f"norm.{k}": a for k, a in self.norm.items()})
        nn.save_params(path, arrays, self.meta)

    @classmethod
    def load(cls, path):
        arrays, meta = nn.load_params(path)
        pick = lambda p: {k[len(p):]: a for k, a in arrays.items() if k.startswith(p)}
        out = cls(pick("q."), pick("v."), pick("norm."), meta)
        ref = cls.init(meta["state_dim"], meta["action_dim"], meta["hidden"], meta["seq_hidden"])
        for mine, theirs in ((out.q, ref.q), (out.v, ref.v)):
            for k, a in theirs.items():
                if k not in mine or mine[k].shape != a.shape:
                    raise ValueError(f"{path}: shape mismatch for {k}")
        return out


# ---------------------------------------------------------------------------
# forward / backward

def _state_feat(nets, o):
    o = np.atleast_2d(np.asarray(o, dtype=float))
    if o.shape[-1] != nets.meta["state_dim"]:
        raise ValueError(f"state has dim {o.shape[-1]}, expected {nets.meta['state_dim']}")
    return (o - nets.norm["o_mean"]) / nets.norm["o_std"]


def pad_sequences(seqs, action_dim=8):
    T = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), T, action_dim))
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        s = np.asarray(s, dtype=float).reshape(-1, action_dim)
        out[i, :len(s)] = s
        out[i, len(s):] = s[-1]
        mask[i, :len(s)] = 1.0
    return out, mask


def _seq_feat(nets, o, a, mask):
    if np.shape(a)[-1] != nets.meta["action_dim"]:
        raise ValueError(f"action has dim {np.shape(a)[-1]}, expected {nets.meta['action_dim']}")
    a = relative_actions(np.atleast_2d(o), a)
    return (a - nets.norm["a_mean"]) / nets.norm["a_std"]


def _q_forward(nets, o, a, mask):
    o = np.atleast_2d(np.asarray(o, dtype=float))
    xs = _seq_feat(nets, o, a, mask)
    B = len(o)
    H = nets.meta["seq_hidden"]
    # run each sequence length separately so short (fast) chunks skip the padding
    lengths = mask.sum(axis=1).astype(int)
    hT = np.empty((B, H))
    groups = []
    for T in np.unique(lengths):
        idx = np.flatnonzero(lengths == T)
        top, gc = nn.gru_forward(nets.q, "seq", xs[idx, :T], [np.zeros((len(idx), H))])
        hT[idx] = top[:, -1]
        groups.append((idx, T, gc))
    s, scache = nn.mlp_forward(nets.q, "state", _state_feat(nets, o), final_tanh=True)
    y, fcache = nn.mlp_forward(nets.q, "fuse", np.hstack([hT, s]))
    return y[:, 0] * nets.norm["scale"][0], (groups, scache, fcache, H)


def _q_backward(nets, cache, dq, grads):
    groups, scache, fcache, H = cache
    dy = (dq * nets.norm["scale"][0])[:, None]
    dcat = nn.mlp_backward(nets.q, "fuse", fcache, dy, grads)
    nn.mlp_backward(nets.q, "state", scache, dcat[:, H:], grads)
    for idx, T, gc in groups:
        dtop = np.zeros((len(idx), T, H))
        dtop[:, -1] = dcat[idx, :H]
        nn.gru_backward(nets.q, "seq", gc, dtop, grads)


def _v_forward(nets, o):
    y, cache = nn.mlp_forward(nets.v, "v", _state_feat(nets, o))
    return y[:, 0] * nets.norm["scale"][0], cache


def _v_backward(nets, cache, dv, grads):
    nn.mlp_backward(nets.v, "v", cache, (dv * nets.norm["scale"][0])[:, None], grads)


def q_values(nets, o, seqs):
    """Q for a batch of states and (possibly ragged) action sequences."""
    a, mask = pad_sequences(seqs, nets.meta["action_dim"])
    return _q_forward(nets, o, a, mask)[0]


def q_value(nets, o, a_seq) -> float:
    return float(q_values(nets, np.asarray(o, dtype=float)[None], [a_seq])[0])


def v_values(nets, o):
    return _v_forward(nets, o)[0]


def v_value(nets, o) -> float:
    return float(v_values(nets, np.asarray(o, dtype=float)[None])[0])


# ---------------------------------------------------------------------------
# IQL

@dataclass
class IqlBatch:
    o: np.ndarray
    a: np.ndarray
    mask: np.ndarray
    r: np.ndarray
    o_next: np.ndarray

    @classmethod
    def from_dataset(cls, ds: SynthDataset, idx=None):
        idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
        a, mask = pad_sequences([ds.a_seq[i] for i in idx])
        return cls(ds.o[idx], a, mask, ds.r_prime[idx], ds.o_next[idx])

    def __len__(self):
        return len(self.r)


def iql_losses(nets, batch: IqlBatch, cfg: IqlConfig, with_grads=False):
    """``(loss_q, loss_v)`` and optionally their gradients (Q's for the Q step, V's for the V step)."""
    B = len(batch)
    q, qc = _q_forward(nets, batch.o, batch.a, batch.mask)
    v_next, _ = _v_forward(nets, batch.o_next)
    v, vc = _v_forward(nets, batch.o)
    td = batch.r + cfg.gamma * v_next - q
    loss_q = float(np.mean(td ** 2))
    if cfg.residual == "q_minus_v":
        u = q - v
        loss_v = float(np.mean(expectile_loss(u, cfg.alpha)))
        dv = -expectile_grad(u, cfg.alpha) / B
    else:
        u = v - q
        loss_v = float(np.mean(expectile_loss(u, cfg.alpha)))
        dv = expectile_grad(u, cfg.alpha) / B
    if not (np.isfinite(loss_q) and np.isfinite(loss_v)):
        raise FloatingPointError("training diverged: non-finite IQL loss")
    if not with_grads:
        return loss_q, loss_v
    gq = nn.zeros_like(nets.q)
    # the bootstrap target r' + gamma V(o') is held fixed in the Q step
    _q_backward(nets, qc, -2.0 * td / B, gq)
    gv = nn.zeros_like(nets.v)
    _v_backward(nets, vc, dv, gv)
    return loss_q, loss_v, gq, gv


def iql_update(nets, batch: IqlBatch, cfg: IqlConfig):
    """One simultaneous Adam step on L_Q and L_V; returns ``(loss_q, loss_v, nets)``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if nets._opt is None:
        nets._opt = (nn.Adam(nets.q, cfg.lr, clip=cfg.clip), nn.Adam(nets.v, cfg.lr, clip=cfg.clip))
    loss_q, loss_v, gq, gv = iql_losses(nets, batch, cfg, with_grads=True)
    nets._opt[0].step(nets.q, gq)
    nets._opt[1].step(nets.v, gv)
    return loss_q, loss_v, nets


def fit_norm(nets, ds: SynthDataset, gamma):
    S = np.vstack([ds.o, ds.o_next])
    A = np.vstack([relative_actions(o, a) for a, o in zip(ds.a_seq, ds.o)])
    nets.norm["o_mean"] = S.mean(0)
    nets.norm["o_std"] = np.maximum(S.std(0), 1e-3)
    nets.norm["a_mean"] = A.mean(0)
    nets.norm["a_std"] = np.maximum(A.std(0), 1e-3)
    nets.norm["scale"] = np.array([max(float(np.abs(ds.r_prime).max()), 1.0) / max(1.0 - gamma, 1e-3) ** 0.5])


def train_scheduler(ds: SynthDataset, cfg: IqlConfig = IqlConfig(), on_log=None, log_every=200):
    if len(ds) == 0:
        raise ValueError("empty synthetic dataset")
    rng = np.random.default_rng(cfg.seed)
    nets = SchedulerNets.init(ds.o.shape[1], np.asarray(ds.a_seq[0]).shape[1], cfg.hidden, cfg.seq_hidden, cfg.seed)
    fit_norm(nets, ds, cfg.gamma)
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(cfg.steps - 1, 1))
    # pre-pad the whole dataset once; minibatches slice it
    full = IqlBatch.from_dataset(ds)
    lengths = full.mask.sum(axis=1).astype(int)
    history = []
    order = rng.permutation(len(ds))
    pos = 0
    for step in range(cfg.steps):
        if pos + cfg.batch > len(order):
            order = rng.permutation(len(ds))
            pos = 0
        idx = np.sort(order[pos:pos + cfg.batch])
        pos += cfg.batch
        T = int(lengths[idx].max())
        b = IqlBatch(full.o[idx], full.a[idx, :T], full.mask[idx, :T], full.r[idx], full.o_next[idx])
        lr = cfg.lr * decay ** step
        if nets._opt is not None:
            nets._opt[0].lr = nets._opt[1].lr = lr
        lq, lv, _ = iql_update(nets, b, cfg)
        if step % log_every == 0 or step == cfg.steps - 1:
            history.append([step, lq, lv])
            log.info("iql step %d loss_q %.4g loss_v %.4g", step, lq, lv)
            if on_log is not None:
                on_log(step, lq, lv)
    nets.meta["history"] = history
    nets.meta["config"] = asdict(cfg)
    nets._opt = None
    return nets


# ---------------------------------------------------------------------------
# rate selection

def select_rate(nets, o, chunk, k_min, k_max, compensate=True, q_fn=None) -> int:
    """Argmax of Q over the feasible rates; ties go to the smallest rate.

    ``q_fn(o, seqs) -> values`` overrides the network (used to wrap it).
    """
    ks = feasible_rates(len(chunk), k_min, k_max)
    if not ks:
        raise ValueError(f"no feasible rate for a chunk of length {len(chunk)} in [{k_min}, {k_max}]")
    if len(ks) == 1:
        return ks[0]
    o = o.vector() if hasattr(o, "vector") else np.asarray(o, dtype=float)
    seqs = [accelerate(chunk, k, compensate).as_array() for k in ks]
    obs = np.repeat(o[None], len(ks), axis=0)
    vals = q_fn(obs, seqs) if q_fn is not None else q_values(nets, obs, seqs)
    return ks[int(np.argmax(vals))]


def mpc_select_rate(wm, o, chunk, k_min, k_max, epsilon) -> int:
    """Largest rate whose predicted deviation stays within ``epsilon``; ``k_min`` if none does."""
    ks = feasible_rates(len(chunk), k_min, k_max)
    if not ks:
        raise ValueError(f"no feasible rate for a chunk of length {len(chunk)} in [{k_min}, {k_max}]")
    for k in reversed(ks):
        if not violation(o, chunk, k, wm, epsilon)[0]:
            return k
    return ks[0]
