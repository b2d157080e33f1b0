"""Recurrent world model: MLP encoder -> stacked GRU driven by actions -> MLP decoder.

The hidden state is seeded once from the start observation and then evolves
only through the action sequence; decoded predictions never re-enter it.
A one-shot MLP baseline that maps (o, padded action sequence) to the final
state is kept alongside for the recurrent-vs-MLP comparison.

Fixed input/output transforms (not learned, no feedback):
  * states are standardized before the encoder;
  * Abs action positions are taken relative to the start EEF position, then
    standardized;
  * the decoder emits a scaled displacement from the start state, so
    ``o_hat_i = o + scale * dec(h_i)``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .chunking import ACTION_DIM
from .geometry import Trajectory, quat_conj, quat_mul_rows

log = logging.getLogger(__name__)

POS, QUAT, APERTURE = slice(0, 3), slice(3, 7), 7


@dataclass
class WmConfig:
    hidden: int = 64
    layers: int = 3
    lr: float = 1e-3
    lr_final: float = 1e-3  # exponential per-epoch decay from lr towards this
    batch: int = 128
    epochs: int = 60
    l_max: int = 24
    patience: int = 8
    holdout: float = 0.1
    clip: float = 1.0
    seed: int = 0
    relative_actions: bool = True


class RwmParams:
    """Trainable weights plus the fixed normalisation statistics."""

    def __init__(self, weights, norm, meta):
        self.weights = weights
        self.norm = norm
        self.meta = meta

    @property
    def hidden(self):
        return self.meta["hidden"]

    def copy(self):
        return RwmParams({k: v.copy() for k, v in self.weights.items()},
                         {k: v.copy() for k, v in self.norm.items()}, dict(self.meta))

    def save(self, path):
        arrays = {f"w.{k}": v for k, v in self.weights.items()}
        arrays.update({f"norm.{k}": v for k, v in self.norm.items()})
        nn.save_params(path, arrays, self.meta)

    @classmethod
    def load(cls, path):
        arrays, meta = nn.load_params(path)
        w = {k[2:]: v for k, v in arrays.items() if k.startswith("w.")}
        norm = {k[5:]: v for k, v in arrays.items() if k.startswith("norm.")}
        out = cls(w, norm, meta)
        ref = init_params(out.meta["state_dim"], out.meta["action_dim"], out.meta["hidden"], out.meta["layers"],
                          kind=out.meta.get("kind", "rnn"), l_max=out.meta.get("l_max", 24))
        for k, v in ref.weights.items():
            if k not in w or w[k].shape != v.shape:
                raise ValueError(f"{path}: shape mismatch for {k}")
        return out


def _identity_norm(state_dim, action_dim):
    return {"o_mean": np.zeros(state_dim), "o_std": np.ones(state_dim),
            "a_mean": np.zeros(action_dim), "a_std": np.ones(action_dim), "d_scale": np.ones(state_dim)}


def init_params(state_dim, action_dim=ACTION_DIM, hidden=64, layers=3, seed=0, kind="rnn", l_max=24,
                relative_actions=True):
    rng = np.random.default_rng(seed)
    meta = {"kind": kind, "state_dim": state_dim, "action_dim": action_dim, "hidden": hidden,
            "layers": layers, "l_max": l_max, "relative_actions": relative_actions}
    if kind == "rnn":
        w = nn.init_mlp(rng, "enc", [state_dim, hidden, hidden])
        w.update(nn.init_gru(rng, "gru", action_dim, hidden, layers))
        w.update(nn.init_mlp(rng, "dec", [hidden, hidden, state_dim]))
    elif kind == "mlp":
        w = nn.init_mlp(rng, "mlp", [state_dim + l_max * (action_dim + 1), hidden, hidden, state_dim])
    else:
        raise ValueError(f"unknown world-model kind {kind!r}")
    return RwmParams(w, _identity_norm(state_dim, action_dim), meta)


# ---------------------------------------------------------------------------
# transforms

def _check(params, o, actions=None):
    o = np.asarray(o, dtype=float)
    if o.shape[-1] != params.meta["state_dim"]:
        raise ValueError(f"state has dim {o.shape[-1]}, expected {params.meta['state_dim']}")
    if actions is not None and np.shape(actions)[-1] != params.meta["action_dim"]:
        raise ValueError(f"action has dim {np.shape(actions)[-1]}, expected {params.meta['action_dim']}")
    return o


def canonical_states(x):
    """Flip quaternion signs so ``w >= 0`` (the fixed chart of the state vector)."""
    x = np.array(x, dtype=float)
    flip = x[..., 3:4] < 0
    x[..., QUAT] = np.where(flip, -x[..., QUAT], x[..., QUAT])
    return x


def relative_actions(o, actions):
    """Abs targets expressed in the start EEF frame: position offset and rotation ``q_o^-1 q_a``."""
    a = np.array(actions, dtype=float)
    o = np.asarray(o, dtype=float)
    a[..., :3] = a[..., :3] - o[..., None, :3]
    a[..., 3:7] = quat_mul_rows(quat_conj(o[..., None, 3:7]), a[..., 3:7])
    a[..., 3:7] = np.where(a[..., 3:4] < 0, -a[..., 3:7], a[..., 3:7])
    return a


def _feat_actions(params, o, actions):
    if params.meta["relative_actions"]:
        a = relative_actions(o, actions)
    else:
        a = np.array(actions, dtype=float)
        a[..., 3:7] = np.where(a[..., 3:4] < 0, -a[..., 3:7], a[..., 3:7])
    return (a - params.norm["a_mean"]) / params.norm["a_std"]


def _feat_state(params, o):
    return (o - params.norm["o_mean"]) / params.norm["o_std"]


# ---------------------------------------------------------------------------
# recurrent model

def encode(params: RwmParams, o):
    o = _check(params, o)
    h, _ = nn.mlp_forward(params.weights, "enc", _feat_state(params, o), final_tanh=True)
    return h


def gru_step(params: RwmParams, h, a_feat):
    """One stacked-GRU tick. ``h`` is a list of per-layer states; ``a_feat`` is a transformed action."""
    x = np.atleast_2d(a_feat)
    out = []
    for l in range(params.meta["layers"]):
        x, _ = nn.gru_cell(params.weights, "gru", l, x, np.atleast_2d(h[l]))
        out.append(x)
    return out


def decode(params: RwmParams, h_top, o):
    d, _ = nn.mlp_forward(params.weights, "dec", h_top)
    return o + params.norm["d_scale"] * d


def _forward(params, o, actions, mask):
    """Batched forward: ``o`` (B, S), ``actions`` (B, T, A) -> raw predictions (B, T, S)."""
    w = params.weights
    xs = _feat_actions(params, o, actions)
    h0, enc_cache = nn.mlp_forward(w, "enc", _feat_state(params, o), final_tanh=True)
    top, gru_cache = nn.gru_forward(w, "gru", xs, [h0] * params.meta["layers"], mask)
    d, dec_cache = nn.mlp_forward(w, "dec", top)
    pred = o[:, None, :] + params.norm["d_scale"] * d
    return pred, (enc_cache, gru_cache, dec_cache)


def hidden_states(params: RwmParams, o, actions):
    """Top-layer hidden sequence ``(T, H)`` for a single start state."""
    o = _check(params, o, actions)
    _, (_, gru_cache, dec_cache) = _forward(params, o[None], np.asarray(actions, dtype=float)[None], None)
    return dec_cache[0][0][0]


def _finish(pred):
    pred = np.array(pred)
    q = pred[..., QUAT]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    pred[..., QUAT] = np.where(q[..., :1] < 0, -q, q)
    return pred


def predict_batch(params: RwmParams, o, actions, mask=None):
    """Predicted states for a batch; quaternions re-normalised into the ``w >= 0`` chart."""
    o = _check(params, np.atleast_2d(o), actions)
    pred, _ = _forward(params, o, np.asarray(actions, dtype=float), mask)
    return _finish(pred)


def predict(params: RwmParams, o, actions):
    """Roll the model along ``actions`` from ``o``; returns ``(len(actions), state_dim)``."""
    actions = np.asarray(actions, dtype=float).reshape(-1, params.meta["action_dim"])
    if len(actions) == 0:
        raise ValueError("predict needs at least one action")
    return predict_batch(params, np.asarray(o, dtype=float)[None], actions[None])[0]


def trajectory(states) -> Trajectory:
    states = np.asarray(states)
    return Trajectory(states[:, POS], states[:, QUAT])


# ---------------------------------------------------------------------------
# loss and gradients

@dataclass
class WmBatch:
    o: np.ndarray        # (B, S)
    actions: np.ndarray  # (B, T, A), zero padded
    targets: np.ndarray  # (B, T, S)
    mask: np.ndarray     # (B, T) 1 on valid steps

    @classmethod
    def from_samples(cls, samples):
        """``samples``: iterable of ``(o, actions (L, A), targets (L, S))``."""
        samples = list(samples)
        T = max(len(a) for _, a, _ in samples)
        B = len(samples)
        S = len(samples[0][0])
        A = np.shape(samples[0][1])[-1]
        o = np.zeros((B, S))
        acts = np.zeros((B, T, A))
        tg = np.zeros((B, T, S))
        mask = np.zeros((B, T))
        for i, (oi, ai, ti) in enumerate(samples):
            L = len(ai)
            o[i], acts[i, :L], tg[i, :L], mask[i, :L] = oi, ai, ti, 1.0
            acts[i, L:] = ai[-1]
        return cls(o, acts, canonical_states(tg), mask)

    def __len__(self):
        return len(self.o)


def wm_loss(params: RwmParams, batch: WmBatch, weights=None):
    """Mean over the batch of the summed squared state error along each sequence.

    ``weights`` optionally rescales state dimensions; ``None`` is the plain loss.
    """
    pred, _ = _forward(params, batch.o, batch.actions, batch.mask)
    err = (pred - batch.targets) ** 2
    if weights is not None:
        err = err * weights
    return float(np.sum(err.sum(axis=-1) * batch.mask) / len(batch))


def wm_backward(params: RwmParams, batch: WmBatch, weights=None):
    """``(loss, grads)`` with ``grads`` keyed like ``params.weights``."""
    w = params.weights
    pred, (enc_cache, gru_cache, dec_cache) = _forward(params, batch.o, batch.actions, batch.mask)
    diff = pred - batch.targets
    wdiff = diff if weights is None else diff * weights
    B = len(batch)
    loss = float(np.sum((diff * wdiff).sum(axis=-1) * batch.mask) / B)
    dpred = 2.0 * wdiff * batch.mask[..., None] / B
    grads = nn.zeros_like(w)
    dtop = nn.mlp_backward(w, "dec", dec_cache, dpred * params.norm["d_scale"], grads)
    _, dh0 = nn.gru_backward(w, "gru", gru_cache, dtop, grads)
    nn.mlp_backward(w, "enc", enc_cache, sum(dh0), grads)
    nn.check_finite(grads)
    return loss, grads


# ---------------------------------------------------------------------------
# MLP baseline

def _mlp_input(params, o, actions, lengths):
    l_max = params.meta["l_max"]
    B = len(o)
    a = np.zeros((B, l_max, params.meta["action_dim"] + 1))
    feats = _feat_actions(params, o, actions)
    for i, L in enumerate(lengths):
        a[i, :L, :-1] = feats[i, :L]
        a[i, :L, -1] = 1.0
    return np.hstack([_feat_state(params, o), a.reshape(B, -1)])


def _mlp_forward(params, o, actions, lengths):
    x = _mlp_input(params, o, actions, lengths)
    d, cache = nn.mlp_forward(params.weights, "mlp", x)
    return o + params.norm["d_scale"] * d, cache


def predict_mlp(params_mlp: RwmParams, o, actions):
    """Final-state prediction of the one-shot MLP baseline."""
    actions = np.asarray(actions, dtype=float).reshape(-1, params_mlp.meta["action_dim"])
    if len(actions) > params_mlp.meta["l_max"]:
        raise ValueError("action sequence longer than the MLP input window")
    o = _check(params_mlp, o)[None]
    pred, _ = _mlp_forward(params_mlp, o, actions[None], [len(actions)])
    return _finish(pred)[0]


def _final_targets(batch):
    idx = batch.mask.sum(axis=1).astype(int) - 1
    return idx, batch.targets[np.arange(len(batch)), idx]


def mlp_loss(params, batch: WmBatch, weights=None):
    idx, tg = _final_targets(batch)
    pred, _ = _mlp_forward(params, batch.o, batch.actions, idx + 1)
    err = (pred - tg) ** 2
    if weights is not None:
        err = err * weights
    return float(err.sum() / len(batch))


def mlp_backward(params, batch: WmBatch, weights=None):
    idx, tg = _final_targets(batch)
    pred, cache = _mlp_forward(params, batch.o, batch.actions, idx + 1)
    diff = pred - tg
    wdiff = diff if weights is None else diff * weights
    loss = float((diff * wdiff).sum() / len(batch))
    grads = nn.zeros_like(params.weights)
    nn.mlp_backward(params.weights, "mlp", cache, 2.0 * wdiff * params.norm["d_scale"] / len(batch), grads)
    nn.check_finite(grads)
    return loss, grads


# ---------------------------------------------------------------------------
# data and training

def episode_arrays(ep):
    states = canonical_states(np.array([o.vector() for o in ep.observations]))
    return states, np.asarray(ep.actions, dtype=float)


def fit_norm(params, episodes, l_max):
    S, A = [], []
    D = []
    for states, acts in episodes:
        S.append(states)
        a = np.array(acts)
        if params.meta["relative_actions"]:
            a = relative_actions(states[:-1], a[:, None])[:, 0]
        A.append(a)
        for lag in (1, l_max):
            if len(states) > lag:
                D.append(states[lag:] - states[:-lag])
    S, A, D = np.vstack(S), np.vstack(A), np.vstack(D)
    floor = 1e-3
    params.norm = {"o_mean": S.mean(0), "o_std": np.maximum(S.std(0), floor),
                   "a_mean": A.mean(0), "a_std": np.maximum(A.std(0), floor),
                   "d_scale": np.maximum(np.sqrt((D ** 2).mean(0)), floor)}


def sample_windows(episodes, l_max, rng, starts_per_episode=None):
    """One window per start index with ``L ~ U[1, l_max]`` clipped to what remains."""
    samples = []
    for states, acts in episodes:
        T = len(acts)
        starts = np.arange(T) if starts_per_episode is None else rng.choice(T, size=min(T, starts_per_episode),
                                                                             replace=False)
        for t in starts:
            L = min(int(rng.integers(1, l_max + 1)), T - t)
            samples.append((states[t], acts[t:t + L], states[t + 1:t + 1 + L]))
    return samples


def _batches(samples, size, rng, bucket=16):
    """Shuffled minibatches; within groups of ``bucket`` batches samples are
    sorted by length so padding stays small."""
    order = rng.permutation(len(samples))
    batches = []
    for g in range(0, len(order), size * bucket):
        grp = sorted(order[g:g + size * bucket], key=lambda j: len(samples[j][1]))
        batches += [grp[i:i + size] for i in range(0, len(grp), size)]
    for i in rng.permutation(len(batches)):
        yield WmBatch.from_samples([samples[j] for j in batches[i]])


def _eval_loss(params, samples, loss_fn, weights, size=512):
    tot = 0.0
    for i in range(0, len(samples), size):
        b = WmBatch.from_samples(samples[i:i + size])
        tot += loss_fn(params, b, weights) * len(b)
    return tot / max(len(samples), 1)


def train_wm(demos, cfg: WmConfig = WmConfig(), kind="rnn", on_epoch=None):
    """Adam on windows of random length; early stop on held-out loss.

    ``demos`` are episodes (with ``observations``/``actions``) or
    ``(states, actions)`` array pairs. The optimised objective weights each
    state dimension by ``1 / d_scale**2`` so position, orientation and
    aperture errors are balanced; held-out losses are reported unweighted.
    """
    data = [d if isinstance(d, tuple) else episode_arrays(d) for d in demos]
    if not data:
        raise ValueError("train_wm needs at least one demonstration")
    rng = np.random.default_rng(cfg.seed)
    n_hold = int(round(cfg.holdout * len(data))) if len(data) > 1 else 0
    order = rng.permutation(len(data))
    hold = [data[i] for i in order[:n_hold]]
    train = [data[i] for i in order[n_hold:]]
    state_dim = train[0][0].shape[1]
    params = init_params(state_dim, train[0][1].shape[1], cfg.hidden, cfg.layers, cfg.seed, kind, cfg.l_max,
                         cfg.relative_actions)
    fit_norm(params, train, cfg.l_max)
    weights = 1.0 / params.norm["d_scale"] ** 2
    loss_fn, grad_fn = (wm_loss, wm_backward) if kind == "rnn" else (mlp_loss, mlp_backward)
    opt = nn.Adam(params.weights, lr=cfg.lr, clip=cfg.clip)
    hold_samples = sample_windows(hold, cfg.l_max, np.random.default_rng(cfg.seed + 1)) if hold else []
    best, best_w, stale = np.inf, None, 0
    history = []
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(cfg.epochs - 1, 1))
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * decay ** epoch
        samples = sample_windows(train, cfg.l_max, rng)
        train_loss = 0.0
        for b in _batches(samples, cfg.batch, rng):
            loss, grads = grad_fn(params, b, weights)
            opt.step(params.weights, grads)
            train_loss += loss * len(b)
        train_loss /= len(samples)
        held = _eval_loss(params, hold_samples, loss_fn, None) if hold_samples else train_loss
        history.append((epoch, train_loss, held))
        log.info("wm[%s] epoch %d train %.4g held-out %.4g", kind, epoch, train_loss, held)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, held)
        if held < best:
            best, best_w, stale = held, {k: v.copy() for k, v in params.weights.items()}, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_w is not None:
        params.weights = best_w
    params.meta["history"] = [[int(e), float(a), float(b)] for e, a, b in history]
    params.meta["config"] = asdict(cfg)
    return params
