"""Small float64 numpy networks with hand-written reverse mode.

Parameters live in flat ``dict[str, ndarray]`` maps keyed ``"<prefix>.<name>"``
so optimizers, gradient checks and serialization treat every network alike.
Gradients are accumulated into a dict of the same keys.
"""

from __future__ import annotations

import json
import struct

import numpy as np


def _uniform(rng, fan_in, shape):
    b = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-b, b, size=shape)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# MLP

def init_mlp(rng, prefix, sizes):
    p = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        p[f"{prefix}.W{i}"] = _uniform(rng, a, (a, b))
        p[f"{prefix}.b{i}"] = _uniform(rng, a, (b,))
    return p


def mlp_depth(params, prefix):
    n = 0
    while f"{prefix}.W{n}" in params:
        n += 1
    return n


def mlp_forward(params, prefix, x, final_tanh=False):
    """tanh between layers; the last layer is linear unless ``final_tanh``."""
    n = mlp_depth(params, prefix)
    acts = [x]
    for i in range(n):
        y = acts[-1] @ params[f"{prefix}.W{i}"] + params[f"{prefix}.b{i}"]
        if i < n - 1 or final_tanh:
            y = np.tanh(y)
        acts.append(y)
    return acts[-1], (acts, final_tanh)


def mlp_backward(params, prefix, cache, dy, grads):
    acts, final_tanh = cache
    n = len(acts) - 1
    for i in reversed(range(n)):
        if i < n - 1 or final_tanh:
            dy = dy * (1.0 - acts[i + 1] ** 2)
        x = acts[i].reshape(-1, acts[i].shape[-1])
        d2 = dy.reshape(-1, dy.shape[-1])
        grads[f"{prefix}.W{i}"] += x.T @ d2
        grads[f"{prefix}.b{i}"] += d2.sum(axis=0)
        dy = dy @ params[f"{prefix}.W{i}"].T
    return dy


# ---------------------------------------------------------------------------
# stacked GRU
#
#   r = s(x Wr + h Ur + br)      z = s(x Wz + h Uz + bz)
#   n = tanh(x Wn + bn + r * (h Un + bhn))
#   h' = (1 - z) * n + z * h
#
# W, U, b hold the r|z|n blocks side by side. A 0/1 mask freezes h on
# padded steps so variable-length sequences share one batch.

def init_gru(rng, prefix, in_dim, hidden, layers):
    p = {}
    for l in range(layers):
        d = in_dim if l == 0 else hidden
        p[f"{prefix}.W{l}"] = _uniform(rng, hidden, (d, 3 * hidden))
        p[f"{prefix}.U{l}"] = _uniform(rng, hidden, (hidden, 3 * hidden))
        p[f"{prefix}.b{l}"] = _uniform(rng, hidden, (3 * hidden,))
        p[f"{prefix}.bh{l}"] = _uniform(rng, hidden, (hidden,))
    return p


def gru_layers(params, prefix):
    n = 0
    while f"{prefix}.W{n}" in params:
        n += 1
    return n


def gru_cell(params, prefix, l, x, h):
    H = h.shape[-1]
    gx = x @ params[f"{prefix}.W{l}"] + params[f"{prefix}.b{l}"]
    U = params[f"{prefix}.U{l}"]
    gh = h @ U[:, :2 * H]
    r = sigmoid(gx[:, :H] + gh[:, :H])
    z = sigmoid(gx[:, H:2 * H] + gh[:, H:])
    hn = h @ U[:, 2 * H:] + params[f"{prefix}.bh{l}"]
    n = np.tanh(gx[:, 2 * H:] + r * hn)
    return (1.0 - z) * n + z * h, (x, h, r, z, n, hn)


def gru_forward(params, prefix, xs, h0, mask=None):
    """Run the stack over ``xs`` ``(B, T, D)`` from per-layer states ``h0``.

    Returns the top-layer outputs ``(B, T, H)`` and a cache for
    :func:`gru_backward`.
    """
    B, T, _ = xs.shape
    L = gru_layers(params, prefix)
    hs = [np.array(h, dtype=float) for h in h0]
    top = np.empty((B, T, hs[0].shape[-1]))
    cache = []
    for t in range(T):
        m = None if mask is None else mask[:, t:t + 1]
        x = xs[:, t]
        step = []
        for l in range(L):
            h_new, c = gru_cell(params, prefix, l, x, hs[l])
            if m is not None:
                h_new = m * h_new + (1.0 - m) * hs[l]
            step.append(c)
            hs[l] = h_new
            x = h_new
        top[:, t] = x
        cache.append(step)
    return top, (cache, mask, hs)


def gru_backward(params, prefix, cache, dtop, grads, dh_last=None):
    """Backprop through time. Returns ``(dxs, dh0)`` with ``dh0`` per layer."""
    steps, mask, _ = cache
    T = len(steps)
    L = len(steps[0])
    H = dtop.shape[-1]
    dh = [np.zeros_like(dtop[:, 0]) for _ in range(L)] if dh_last is None else [d.copy() for d in dh_last]
    dxs = None
    for t in reversed(range(T)):
        m = None if mask is None else mask[:, t:t + 1]
        dh[L - 1] = dh[L - 1] + dtop[:, t]
        for l in reversed(range(L)):
            x, h, r, z, n, hn = steps[t][l]
            g = dh[l]
            if m is not None:
                carry = (1.0 - m) * g
                g = m * g
            else:
                carry = 0.0
            dn = g * (1.0 - z)
            dz = g * (h - n)
            dh_prev = g * z + carry
            dn_pre = dn * (1.0 - n * n)
            dr = dn_pre * hn
            dhn = dn_pre * r
            dr_pre = dr * r * (1.0 - r)
            dz_pre = dz * z * (1.0 - z)
            dgx = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
            dgh = np.concatenate([dr_pre, dz_pre, dhn], axis=1)
            grads[f"{prefix}.W{l}"] += x.T @ dgx
            grads[f"{prefix}.b{l}"] += dgx.sum(axis=0)
            grads[f"{prefix}.U{l}"] += h.T @ dgh
            grads[f"{prefix}.bh{l}"] += dhn.sum(axis=0)
            dh_prev = dh_prev + dgh @ params[f"{prefix}.U{l}"].T
            dx = dgx @ params[f"{prefix}.W{l}"].T
            dh[l] = dh_prev
            if l > 0:
                dh[l - 1] = dh[l - 1] + dx
            else:
                if dxs is None:
                    dxs = np.zeros((dx.shape[0], T, dx.shape[1]))
                dxs[:, t] = dx
    return dxs, dh


# ---------------------------------------------------------------------------
# optimisation and bookkeeping

def zeros_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def check_finite(grads, what="gradient"):
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"training diverged: non-finite {what} in {k}")


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class Adam:
    def __init__(self, params, lr=3e-4, b1=0.9, b2=0.999, eps=1e-8, clip=None):
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, b1, b2, eps, clip
        self.m = zeros_like(params)
        self.v = zeros_like(params)
        self.t = 0

    def step(self, params, grads):
        check_finite(grads)
        scale = 1.0
        if self.clip is not None:
            gn = global_norm(grads)
            if gn > self.clip:
                scale = self.clip / gn
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        check_finite(params, "parameter")


# ---------------------------------------------------------------------------
# flat binary parameter files
#
# layout: magic b"SUPP", u32 version, u32 header length, UTF-8 JSON header
# {"meta": ..., "arrays": [[name, shape], ...]}, then every array as
# little-endian float64 in header order.

MAGIC = b"SUPP"
FORMAT_VERSION = 1


def save_params(path, params, meta=None):
    names = list(params)
    header = json.dumps({"meta": meta or {}, "arrays": [[k, list(params[k].shape)] for k in names]},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        for k in names:
            f.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_params(path, expect_shapes=None):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    header = json.loads(blob[12:12 + hlen])
    off = 12 + hlen
    params = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
        off += 8 * n
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes after parameter payload")
    if expect_shapes is not None:
        for k, shape in expect_shapes.items():
            if k not in params or params[k].shape != tuple(shape):
                raise ValueError(f"{path}: shape mismatch for {k}")
    return params, header["meta"]
