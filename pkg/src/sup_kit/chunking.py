"""Action chunks, rate-k downsampling and gripper compensation."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import canonical, normalize, quat_mul

ACTION_DIM = 8  # position(3) + quaternion(4) + gripper(1)


class ControlMode(str, Enum):
    ABS = "abs"
    DELTA = "delta"


@dataclass(frozen=True)
class Action:
    eef_pos: np.ndarray
    eef_quat: np.ndarray
    gripper: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "eef_pos", np.asarray(self.eef_pos, dtype=float).reshape(3))
        object.__setattr__(self, "eef_quat", normalize(self.eef_quat))
        object.__setattr__(self, "gripper", float(self.gripper))

    def as_vector(self):
        return np.concatenate([self.eef_pos, self.eef_quat, [self.gripper]])


@dataclass
class ActionChunk:
    """``n`` consecutive actions stored column-wise.

    positions ``(n, 3)``, quats ``(n, 4)``, gripper ``(n,)``.
    """

    positions: np.ndarray
    quats: np.ndarray
    gripper: np.ndarray
    mode: ControlMode = ControlMode.ABS

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        self.gripper = np.asarray(self.gripper, dtype=float).reshape(-1)
        self.mode = ControlMode(self.mode)
        n = len(self.positions)
        if n < 1:
            raise ValueError("a chunk holds at least one action")
        if len(self.quats) != n or len(self.gripper) != n:
            raise ValueError("chunk columns differ in length")

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> Action:
        return Action(self.positions[i], self.quats[i], self.gripper[i])

    @classmethod
    def from_actions(cls, actions, mode=ControlMode.ABS):
        actions = list(actions)
        return cls(np.array([a.eef_pos for a in actions]), np.array([a.eef_quat for a in actions]),
                   np.array([a.gripper for a in actions]), mode)

    @classmethod
    def from_array(cls, arr, mode=ControlMode.ABS):
        arr = np.asarray(arr, dtype=float).reshape(-1, ACTION_DIM)
        return cls(arr[:, :3], arr[:, 3:7], arr[:, 7], mode)

    def as_array(self):
        """``(n, 8)`` matrix with quaternions in the ``w >= 0`` chart."""
        q = np.where(self.quats[:, :1] < 0, -self.quats, self.quats)
        return np.hstack([self.positions, q, self.gripper[:, None]])

    def head(self, m: int) -> "ActionChunk":
        return ActionChunk(self.positions[:m], self.quats[:m], self.gripper[:m], self.mode)

    def copy(self):
        return ActionChunk(self.positions.copy(), self.quats.copy(), self.gripper.copy(), self.mode)


def _merge_delta(chunk: ActionChunk, lo: int, hi: int):
    pos = chunk.positions[lo:hi].sum(axis=0)
    q = chunk.quats[lo]
    # deltas act in the world frame, so later rotations multiply on the left
    for i in range(lo + 1, hi):
        q = quat_mul(chunk.quats[i], q)
    return pos, canonical(normalize(q)), chunk.gripper[lo:hi].sum()


def downsample(chunk: ActionChunk, k: int) -> ActionChunk:
    """Shorten ``chunk`` to ``floor(n / k)`` actions.

    Abs chunks keep every k-th waypoint (0-indexed ``k-1, 2k-1, ...``); Delta
    chunks merge each block of ``k`` deltas by summing translations and gripper
    commands and composing rotations in order. The ``n - l*k`` tail is dropped.
    """
    k = int(k)
    n = len(chunk)
    if k < 1:
        raise ValueError("downsample rate must be >= 1")
    if n < k:
        raise ValueError(f"chunk shorter than rate (n={n}, k={k})")
    if k == 1:
        return chunk.copy()
    l = n // k
    if chunk.mode is ControlMode.ABS:
        idx = np.arange(1, l + 1) * k - 1
        return ActionChunk(chunk.positions[idx], chunk.quats[idx], chunk.gripper[idx], chunk.mode)
    merged = [_merge_delta(chunk, j * k, (j + 1) * k) for j in range(l)]
    return ActionChunk(np.array([m[0] for m in merged]), np.array([m[1] for m in merged]),
                       np.array([m[2] for m in merged]), chunk.mode)


def compensate_gripper(chunk_k: ActionChunk, k: int) -> ActionChunk:
    """Scale gripper commands by ``k`` and clamp them to ``[-1, 1]``."""
    out = chunk_k.copy()
    out.gripper = np.clip(out.gripper * k, -1.0, 1.0)
    return out


def accelerate(chunk: ActionChunk, k: int, compensate: bool = True) -> ActionChunk:
    """Downsample and, for decimated (Abs) chunks, compensate the gripper.

    Delta merging already sums the gripper commands of each block, which
    preserves cumulative closure on its own.
    """
    out = downsample(chunk, k)
    if compensate and k > 1 and chunk.mode is ControlMode.ABS:
        out = compensate_gripper(out, k)
    return out


def feasible_rates(n: int, k_min: int, k_max: int):
    return list(range(k_min, min(k_max, n) + 1))
