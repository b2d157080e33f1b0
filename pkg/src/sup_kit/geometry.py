"""Poses, quaternion interpolation and the end-effector deviation metric.

Quaternions are plain ``numpy`` arrays in ``(w, x, y, z)`` order. A pose is a
position in meters plus a unit quaternion; trajectories store both as stacked
arrays so the deviation metric can be evaluated without Python loops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

# below this norm the NLERP blend is treated as the antipodal-degenerate case
_DEGENERATE_NORM = 1e-9


def normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _DEGENERATE_NORM:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def canonical(q):
    """Return the representative of ``q`` with ``w >= 0``."""
    q = np.asarray(q, dtype=float)
    return -q if q[0] < 0 else q


def from_axis_angle(axis, angle: float):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis])


def yaw_quat(yaw: float):
    return np.array([np.cos(yaw / 2.0), 0.0, 0.0, np.sin(yaw / 2.0)])


def quat_yaw(q) -> float:
    """Rotation angle about +z of a quaternion assumed to be a pure yaw."""
    q = canonical(q)
    return 2.0 * np.arctan2(q[3], q[0])


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_mul_rows(a, b):
    """Broadcasting Hamilton product over the last axis."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.array(q, dtype=float)
    q[..., 1:] *= -1.0
    return q


def nlerp(q0, q1, t: float, with_flag: bool = False):
    """Normalized linear interpolation along the shorter arc.

    ``q1`` is sign-flipped when it lies in the opposite hemisphere of ``q0``.
    If the blend collapses to (near) zero norm, ``q0`` is returned; pass
    ``with_flag=True`` to also receive a boolean marking that case.
    """
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    if np.dot(q0, q1) < 0.0:
        q1 = -q1
    blend = (1.0 - t) * q0 + t * q1
    n = np.linalg.norm(blend)
    if n < _DEGENERATE_NORM:
        return (q0.copy(), True) if with_flag else q0.copy()
    out = blend / n
    return (out, False) if with_flag else out


def _half_angle(q0, q1):
    # arccos(|<q0, q1>|) for unit rows, evaluated as the angle between q0 and the
    # sign-matched q1; exact 0 for equal inputs where arccos loses ~1e-8
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    s = np.where(np.einsum("...i,...i->...", q0, q1) < 0.0, -1.0, 1.0)[..., None]
    d, e = q0 - s * q1, q0 + s * q1
    return 2.0 * np.arctan2(np.sqrt(np.einsum("...i,...i->...", d, d)), np.sqrt(np.einsum("...i,...i->...", e, e)))


def geodesic_dist(q0, q1) -> float:
    """Angular distance ``arccos(|<q0, q1>|)`` in radians, range ``[0, pi/2]``."""
    return float(_half_angle(q0, q1))


def geodesic_rows(q0, q1):
    """Row-wise :func:`geodesic_dist` over ``(..., 4)`` arrays."""
    return _half_angle(q0, q1)


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "orientation", normalize(self.orientation))

    @classmethod
    def identity(cls, position=(0.0, 0.0, 0.0)):
        return cls(np.asarray(position, dtype=float), IDENTITY)


def eef_distance(a: Pose, b: Pose, rot_weight: float = 1.0) -> float:
    """Half the Euclidean position gap plus the geodesic orientation gap."""
    pos = 0.5 * float(np.linalg.norm(a.position - b.position))
    return pos + rot_weight * geodesic_dist(a.orientation, b.orientation)


def interpolate_pose(a: Pose, b: Pose, t: float) -> Pose:
    pos = (1.0 - t) * a.position + t * b.position
    return Pose(pos, nlerp(a.orientation, b.orientation, t))


@dataclass
class Trajectory:
    """Stacked poses: ``positions`` is ``(n, 3)``, ``quats`` is ``(n, 4)``."""

    positions: np.ndarray
    quats: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        if len(self.positions) != len(self.quats):
            raise ValueError("positions and quats differ in length")

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> Pose:
        return Pose(self.positions[i], self.quats[i])

    @classmethod
    def from_poses(cls, poses):
        poses = list(poses)
        return cls(np.array([p.position for p in poses]), np.array([p.orientation for p in poses]))

    def poses(self):
        return [self[i] for i in range(len(self))]


def _nlerp_rows(q0, q1, t):
    """Row-wise NLERP with the same degenerate fallback as :func:`nlerp`."""
    sign = np.where(np.einsum("ij,ij->i", q0, q1) < 0.0, -1.0, 1.0)[:, None]
    blend = (1.0 - t)[:, None] * q0 + t[:, None] * sign * q1
    n = np.sqrt(np.einsum("ij,ij->i", blend, blend))
    bad = n < _DEGENERATE_NORM
    n[bad] = 1.0
    out = blend / n[:, None]
    out[bad] = q0[bad]
    return out


def resample_trajectory(traj: Trajectory, target_len: int, origin: Pose | None = None) -> Trajectory:
    """Resample ``traj`` to ``target_len`` poses on a shared time axis.

    Output sample ``i`` (1-based) sits at normalized time ``i / target_len``,
    so the last output pose is the last input pose exactly.

    With an ``origin``, the ``L`` poses of ``traj`` are the states reached at
    times ``j / L`` (``j = 1..L``) after leaving ``origin`` at time 0; this is
    how rollouts are compared. Without one, the poses themselves span the
    unit interval at times ``j / (L - 1)``.
    """
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    n_in = len(traj)
    if n_in < 1:
        raise ValueError("empty trajectory")
    if n_in == target_len:
        return Trajectory(traj.positions.copy(), traj.quats.copy())
    if origin is not None:
        knots_p = np.vstack([origin.position[None], traj.positions])
        knots_q = np.vstack([origin.orientation[None], traj.quats])
    elif n_in == 1:
        return Trajectory(np.repeat(traj.positions, target_len, 0), np.repeat(traj.quats, target_len, 0))
    else:
        knots_p, knots_q = traj.positions, traj.quats
    segs = len(knots_p) - 1
    # fractional knot index of each output sample; exact integer at the end
    idx = np.arange(1, target_len + 1) * segs / target_len
    lo = np.minimum(np.floor(idx).astype(int), segs - 1)
    frac = idx - lo
    pos = (1.0 - frac)[:, None] * knots_p[lo] + frac[:, None] * knots_p[lo + 1]
    quat = _nlerp_rows(knots_q[lo], knots_q[lo + 1], frac)
    return Trajectory(pos, quat)


def pointwise_distance(tau: Trajectory, other: Trajectory, rot_weight: float = 1.0):
    """Vector of :func:`eef_distance` values for two equal-length trajectories."""
    pos = 0.5 * np.linalg.norm(tau.positions - other.positions, axis=1)
    return pos + rot_weight * _half_angle(tau.quats, other.quats)


def state_deviation(tau: Trajectory, tau_k: Trajectory, origin: Pose | None = None,
                    rot_weight: float = 1.0) -> float:
    """Largest end-effector gap between ``tau`` and ``tau_k`` after length matching.

    ``tau_k`` is resampled onto the time grid of ``tau``; ``origin`` is the
    pose both rollouts started from.
    """
    if len(tau) < 1 or len(tau_k) < 1:
        raise ValueError("empty trajectory")
    matched = resample_trajectory(tau_k, len(tau), origin=origin)
    return float(np.max(pointwise_distance(tau, matched, rot_weight)))
