"""Deterministic toy manipulation world.

A single end effector tracks commanded poses through a first-order lag
(``pos += gain * (target - pos)``, orientation via NLERP with the same gain),
so commanding far-away waypoints leaves it further behind. Contacts are
predicates: closing the gripper near an object grasps it when the wrist yaw
is aligned and topples it otherwise; a closed fist pushes pucks.

Object ids carry their kind as a prefix: ``block``/``corner`` objects are
graspable, ``puck`` objects are pushable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .chunking import ActionChunk, ControlMode, accelerate
from .geometry import (Pose, Trajectory, canonical, from_axis_angle, nlerp, quat_mul,
                       quat_yaw, yaw_quat)

STATE_DIM = 11  # eef pos(3) + eef quat(4) + aperture(1) + object pos(3)
CONTACT_PHASES = frozenset({"approach", "place"})


@dataclass(frozen=True)
class World:
    gain: float = 0.6
    max_lead: float = 0.1  # target lead saturation, meters
    grasp_threshold: float = 0.5
    grasp_radius: float = 0.012
    knock_radius: float = 0.03
    yaw_tolerance: float = 0.065
    push_radius: float = 0.05
    push_height: float = 0.03
    rest_z: float = 0.02

    @property
    def trackable_step(self) -> float:
        """Largest per-step displacement the lagged controller can deliver."""
        return self.gain * self.max_lead


DEFAULT_WORLD = World()


@dataclass(frozen=True)
class Observation:
    eef: Pose
    gripper_aperture: float
    held_object: Optional[str] = None
    object_poses: dict = field(default_factory=dict)

    def vector(self):
        parts = [self.eef.position, canonical(self.eef.orientation), [self.gripper_aperture]]
        for oid in sorted(self.object_poses):
            parts.append(self.object_poses[oid].position)
        return np.concatenate(parts)


def is_toppled(pose: Pose) -> bool:
    # an upright object keeps its local z axis within 45 degrees of world z
    w, x, y, z = pose.orientation
    return 1.0 - 2.0 * (x * x + y * y) < np.cos(np.pi / 4)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def step(obs: Observation, a, mode: ControlMode = ControlMode.ABS, world: World = DEFAULT_WORLD) -> Observation:
    """Advance one control tick. ``a`` is an :class:`Action` or an 8-vector."""
    vec = a.as_vector() if hasattr(a, "as_vector") else np.asarray(a, dtype=float)
    pos = obs.eef.position
    q = obs.eef.orientation
    if ControlMode(mode) is ControlMode.ABS:
        target_p, target_q = vec[:3], vec[3:7]
    else:
        target_p, target_q = pos + vec[:3], quat_mul(vec[3:7], q)
    lead = target_p - pos
    norm = np.linalg.norm(lead)
    if norm > world.max_lead:
        lead = lead * (world.max_lead / norm)
    new_pos = pos + world.gain * lead
    new_q = nlerp(q, target_q, world.gain)
    cmd = float(np.clip(vec[7], -1.0, 1.0))
    prev_ap = obs.gripper_aperture
    ap = float(np.clip(prev_ap + cmd, 0.0, 1.0))

    objects = dict(obs.object_poses)
    held = obs.held_object
    delta = new_pos - pos
    thr = world.grasp_threshold

    if held is not None:
        p = objects[held]
        objects[held] = Pose(p.position + delta, p.orientation)
        if prev_ap <= thr < ap:
            p = objects[held]
            objects[held] = Pose([p.position[0], p.position[1], world.rest_z], p.orientation)
            held = None
    elif prev_ap > thr >= ap:
        best, best_d = None, np.inf
        for oid, p in objects.items():
            if oid.startswith("puck") or is_toppled(p):
                continue
            d = np.linalg.norm(p.position - new_pos)
            if d < best_d:
                best, best_d = oid, d
        if best is not None:
            p = objects[best]
            yaw_err = abs(_wrap(quat_yaw(new_q) - quat_yaw(p.orientation)))
            if best_d <= world.grasp_radius and yaw_err <= world.yaw_tolerance:
                held = best
            elif best_d <= world.knock_radius:
                objects[best] = Pose(p.position, quat_mul(from_axis_angle([1, 0, 0], np.pi / 2), p.orientation))
    elif ap <= thr:
        for oid, p in objects.items():
            if not oid.startswith("puck"):
                continue
            near = np.linalg.norm((p.position - pos)[:2]) < world.push_radius
            if near and abs(pos[2] - p.position[2]) < world.push_height:
                objects[oid] = Pose(p.position + np.array([delta[0], delta[1], 0.0]), p.orientation)

    return Observation(Pose(new_pos, new_q), ap, held, objects)


def rollout(obs: Observation, chunk: ActionChunk, world: World = DEFAULT_WORLD, keep_obs: bool = False):
    """Execute every action of ``chunk``; returns ``(trajectory, final_obs[, observations])``."""
    seq = []
    cur = obs
    arr = chunk.as_array()
    for row in arr:
        cur = step(cur, row, chunk.mode, world)
        seq.append(cur)
    traj = Trajectory(np.array([o.eef.position for o in seq]), np.array([o.eef.orientation for o in seq]))
    if keep_obs:
        return traj, cur, seq
    return traj, cur


# ---------------------------------------------------------------------------
# tasks

@dataclass(frozen=True)
class Predicate:
    kind: str  # "reach" | "grasp" | "place"; reach tracks ``obj`` when set, else the EEF
    target: Optional[tuple] = None
    obj: Optional[str] = None
    tol: Optional[float] = None


@dataclass(frozen=True)
class TaskSpec:
    """Nominal task template; :func:`instantiate` samples a concrete scene."""

    task_id: str
    kind: str  # "pick_place" | "push_path" | "fold"
    tolerance: float = 0.02
    horizon: int = 400
    chunk_len: int = 24
    free_speed: float = 0.01
    contact_speed: float = 0.003
    yaw_rate: float = 0.06
    jitter_pos: float = 3e-4
    jitter_yaw: float = 2e-3
    yaw_range: tuple = (1.3, 1.8)  # |object yaw| for grasp tasks, radians


@dataclass(frozen=True)
class TaskInstance:
    spec: TaskSpec
    predicates: tuple
    params: dict
    init: Observation

    @property
    def task_id(self):
        return self.spec.task_id

    @property
    def horizon(self):
        return self.spec.horizon


DEFAULT_TASKS = (
    TaskSpec("pick_place", "pick_place"),
    TaskSpec("push_path", "push_path"),
    TaskSpec("fold", "fold"),
)

_START = np.array([0.0, 0.0, 0.15])
_PRE_HEIGHT = 0.06


def instantiate(spec: TaskSpec, seed: int, world: World = DEFAULT_WORLD) -> TaskInstance:
    rng = np.random.default_rng([seed, sum(map(ord, spec.task_id))])
    z = world.rest_z
    tol = spec.tolerance
    if spec.kind in ("pick_place", "fold"):
        oid = "block" if spec.kind == "pick_place" else "corner"
        yaw = rng.choice([-1.0, 1.0]) * rng.uniform(*spec.yaw_range)
        if spec.kind == "pick_place":
            obj = np.array([rng.uniform(0.15, 0.25), rng.uniform(-0.15, 0.15), z])
            goal = np.array([rng.uniform(-0.23, -0.17), rng.uniform(-0.15, 0.15), z])
        else:
            obj = np.array([rng.uniform(0.12, 0.2), rng.uniform(-0.1, 0.1), z])
            goal = obj + np.array([-rng.uniform(0.14, 0.18), 0.0, 0.0])
        objects = {oid: Pose(obj, yaw_quat(yaw))}
        preds = (Predicate("grasp", obj=oid), Predicate("place", tuple(goal), oid, tol))
        params = {"obj": oid, "goal": goal, "yaw": yaw}
        aperture = 1.0
    elif spec.kind == "push_path":
        puck = np.array([rng.uniform(0.08, 0.14), rng.uniform(-0.08, 0.08), z])
        heading = rng.uniform(-0.4, 0.4)
        pts = []
        cur = puck.copy()
        for i in range(3):
            heading += rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 0.6) if i else 0.0
            cur = cur + rng.uniform(0.08, 0.12) * np.array([np.cos(heading), np.sin(heading), 0.0])
            pts.append(cur.copy())
        objects = {"puck": Pose(puck, yaw_quat(0.0))}
        offset = 0.03
        preds = tuple(Predicate("reach", tuple(p), "puck", tol) for p in pts[:-1])
        preds += (Predicate("place", tuple(pts[-1]), "puck", tol),)
        params = {"obj": "puck", "path": np.array(pts), "offset": offset}
        aperture = 0.0
    else:
        raise ValueError(f"unknown task kind {spec.kind!r}")
    init = Observation(Pose(_START, yaw_quat(0.0)), aperture, None, objects)
    return TaskInstance(spec, preds, params, init)


# ---------------------------------------------------------------------------
# scripted expert program

def _line(start_p, start_yaw, end_p, end_yaw, speed, yaw_rate):
    dist = np.linalg.norm(end_p - start_p)
    dyaw = abs(end_yaw - start_yaw)
    steps = max(int(np.ceil(dist / speed - 1e-9)), int(np.ceil(dyaw / yaw_rate - 1e-9)), 1)
    f = np.arange(1, steps + 1)[:, None] / steps
    return start_p + f * (end_p - start_p), start_yaw + f[:, 0] * (end_yaw - start_yaw)


class _Plan:
    """Accumulates waypoint targets, gripper commands and phase labels."""

    def __init__(self, pos, yaw, aperture):
        self.pos = np.asarray(pos, dtype=float)
        self.yaw = float(yaw)
        self.aperture = float(aperture)
        self.p, self.y, self.g, self.labels = [], [], [], []

    def add(self, ps, ys, gs, label):
        for p, y, g in zip(ps, ys, gs):
            self.p.append(p)
            self.y.append(y)
            self.g.append(g)
            self.labels.append(label)
        if len(ps):
            self.pos, self.yaw = np.asarray(ps[-1]), float(ys[-1])
        self.aperture = float(np.clip(self.aperture + float(np.sum(gs)), 0.0, 1.0))

    def move(self, end_p, end_yaw, speed, yaw_rate, label):
        ps, ys = _line(self.pos, self.yaw, np.asarray(end_p, dtype=float), end_yaw, speed, yaw_rate)
        self.add(ps, ys, np.zeros(len(ps)), label)

    def hold_gripper(self, rate, steps, label):
        self.add([self.pos] * steps, [self.yaw] * steps, [rate] * steps, label)

    def __len__(self):
        return len(self.p)


GRIP_RATE = 0.125


def _approach(plan: _Plan, target, yaw, spec: TaskSpec, thr: float):
    ps, ys = _line(plan.pos, plan.yaw, np.asarray(target), yaw, spec.contact_speed, spec.yaw_rate)
    steps = len(ps)
    # close so that the aperture reaches the threshold on the arrival tick
    need = max(int(np.ceil((plan.aperture - thr) / GRIP_RATE - 1e-9)), 0)
    gs = np.zeros(steps)
    if need:
        gs[max(steps - need, 0):] = -GRIP_RATE
    plan.add(ps, ys, gs, "approach")
    plan.hold_gripper(-GRIP_RATE, int(np.ceil(plan.aperture / GRIP_RATE - 1e-9)), "approach")


def _place(plan: _Plan, target, spec: TaskSpec):
    plan.move(target, plan.yaw, spec.contact_speed, spec.yaw_rate, "place")
    plan.hold_gripper(GRIP_RATE, int(np.ceil((1.0 - plan.aperture) / GRIP_RATE - 1e-9)), "place")


def _xy(a):
    return np.asarray(a)[:2]


def _program(obs: Observation, inst: TaskInstance, n: int, world: World) -> _Plan:
    spec = inst.spec
    eef = obs.eef.position
    plan = _Plan(eef, quat_yaw(obs.eef.orientation), obs.gripper_aperture)
    thr = world.grasp_threshold
    oid = inst.params["obj"]
    obj = obs.object_poses[oid]
    held = obs.held_object == oid
    v, vc, w = spec.free_speed, spec.contact_speed, spec.yaw_rate
    near = 0.012

    if spec.kind == "push_path":
        path = inst.params["path"]
        push_z = world.rest_z + 0.005
        puck = obj.position
        knots = np.vstack([inst.init.object_poses[oid].position[None], path])
        seg = 0
        for seg in range(len(path)):
            a, b = knots[seg], knots[seg + 1]
            d = _xy(b - a)
            if np.dot(_xy(puck - a), d) / np.dot(d, d) < 1.0 - 1e-3:
                break
        else:
            seg = len(path)
        if seg < len(path):
            in_contact = (np.linalg.norm(_xy(puck - eef)) < world.push_radius
                          and abs(eef[2] - puck[2]) < world.push_height and obs.gripper_aperture <= thr)
            if in_contact:
                offset = puck - eef
            else:
                d = knots[seg + 1] - knots[seg]
                offset = inst.params["offset"] * d / np.linalg.norm(d)
                plan.move(_at_z(puck - offset, push_z), plan.yaw, v, w, "move")
            for i in range(seg, len(path)):
                plan.move(_at_z(path[i] - offset, push_z), plan.yaw, v, w, "push")
        plan.move(plan.pos + np.array([0.0, 0.0, 0.05]), plan.yaw, v, w, "retreat")
        return plan

    goal = inst.params["goal"]
    pick_yaw = quat_yaw(obj.orientation)
    if is_toppled(obj):
        plan.hold_gripper(0.0, n, "failed")
        return plan

    if not held:
        if np.linalg.norm(_xy(obj.position - goal)) <= spec.tolerance and obs.gripper_aperture > thr:
            plan.move(plan.pos + np.array([0.0, 0.0, 0.05]), plan.yaw, v, w, "retreat")
            return plan
        pre = obj.position + np.array([0.0, 0.0, _PRE_HEIGHT])
        in_zone = np.linalg.norm(_xy(eef - obj.position)) < near and eef[2] <= pre[2] + 0.005
        if not in_zone and obs.gripper_aperture < 1.0:
            plan.hold_gripper(GRIP_RATE, int(np.ceil((1.0 - plan.aperture) / GRIP_RATE - 1e-9)), "move")
        if not in_zone:
            plan.move(pre, plan.yaw, v, w, "move")
        _approach(plan, obj.position, pick_yaw, spec, thr)
    offset = obj.position - eef if held else np.zeros(3)
    drop = goal - offset
    pre_drop = drop + np.array([0.0, 0.0, _PRE_HEIGHT])
    in_drop = held and np.linalg.norm(_xy(eef - drop)) < near and eef[2] <= pre_drop[2] + 0.005
    if spec.kind == "pick_place":
        if not in_drop:
            plan.move(pre_drop, plan.yaw, v, w, "transport")
        _place(plan, drop, spec)
    else:
        if not in_drop:
            # fold: carry the corner over a half circle in the vertical plane
            start = inst.init.object_poses[oid].position - offset
            c = 0.5 * (start + drop)
            r = 0.5 * np.linalg.norm(_xy(start - drop))
            u = np.concatenate([_xy(start - c) / r, [0.0]])
            theta0 = np.arctan2(plan.pos[2] - c[2], np.dot(plan.pos - c, u)) if held else 0.0
            theta0 = float(np.clip(theta0, 0.0, np.pi))
            steps = max(int(np.ceil((np.pi - theta0) * r / v - 1e-9)), 1)
            th = theta0 + (np.pi - theta0) * np.arange(1, steps + 1) / steps
            ps = c + r * (np.cos(th)[:, None] * u + np.sin(th)[:, None] * np.array([0.0, 0.0, 1.0]))
            plan.add(ps, [plan.yaw] * steps, np.zeros(steps), "fold")
        _place(plan, drop, spec)
    plan.move(plan.pos + np.array([0.0, 0.0, 0.05]), plan.yaw, v, w, "retreat")
    return plan


def _at_z(p, z):
    return np.array([p[0], p[1], z])


def _emit(plan: _Plan, n: int):
    m = min(len(plan), n)
    ps = list(plan.p[:m])
    ys = list(plan.y[:m])
    gs = list(plan.g[:m])
    labels = list(plan.labels[:m])
    while len(ps) < n:
        ps.append(plan.pos)
        ys.append(plan.yaw)
        gs.append(0.0)
        labels.append(labels[-1] if labels else "hold")
    quats = np.array([yaw_quat(y) for y in ys])
    return ActionChunk(np.array(ps), quats, np.array(gs), ControlMode.ABS), labels


def base_policy_chunk(obs: Observation, inst: TaskInstance, n: Optional[int] = None,
                      world: World = DEFAULT_WORLD, with_labels: bool = False):
    """Frozen scripted policy: re-plan from ``obs`` and emit the next ``n`` actions."""
    n = inst.spec.chunk_len if n is None else n
    chunk, labels = _emit(_program(obs, inst, n, world), n)
    return (chunk, labels) if with_labels else chunk


def phase_of(obs: Observation, inst: TaskInstance, world: World = DEFAULT_WORLD) -> str:
    """Label of the program phase the next action belongs to."""
    plan = _program(obs, inst, 1, world)
    return plan.labels[0] if plan.labels else "hold"


# ---------------------------------------------------------------------------
# episodes and success

@dataclass
class Episode:
    observations: list
    actions: list  # 8-vectors actually executed
    chunks: list  # (ActionChunk as emitted, index of its first controlled step)
    success: bool
    task_id: str = ""
    seed: int = 0
    rates: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.actions)


class SuccessTracker:
    """Walks the ordered goal predicates of an instance over a stream of observations."""

    def __init__(self, inst: TaskInstance, world: World = DEFAULT_WORLD):
        self.preds = inst.predicates
        self.world = world
        self.idx = 0

    @property
    def done(self) -> bool:
        return self.idx >= len(self.preds)

    def _holds(self, pred: Predicate, prev: Observation, obs: Observation) -> bool:
        if pred.kind == "reach":
            p = obs.eef.position if pred.obj is None else obs.object_poses[pred.obj].position
            return np.linalg.norm(p - np.asarray(pred.target)) <= pred.tol
        if pred.kind == "grasp":
            return obs.held_object == pred.obj and prev.held_object != pred.obj
        if pred.kind == "place":
            p = obs.object_poses[pred.obj]
            return (obs.held_object != pred.obj and not is_toppled(p)
                    and np.linalg.norm(_xy(p.position - np.asarray(pred.target))) <= pred.tol
                    and abs(p.position[2] - self.world.rest_z) < 1e-6)
        raise ValueError(f"unknown predicate {pred.kind!r}")

    def update(self, prev: Observation, obs: Observation) -> bool:
        while not self.done and self._holds(self.preds[self.idx], prev, obs):
            self.idx += 1
        return self.done


def is_failed(obs: Observation) -> bool:
    """Irrecoverable states: a graspable object knocked over."""
    return any(is_toppled(p) for oid, p in obs.object_poses.items() if not oid.startswith("puck"))


def is_success(ep: Episode, inst: TaskInstance, world: World = DEFAULT_WORLD) -> bool:
    tracker = SuccessTracker(inst, world)
    obs = ep.observations
    for t in range(1, min(len(obs), inst.horizon + 1)):
        if tracker.update(obs[t - 1], obs[t]):
            return True
    return False


def run_episode(inst: TaskInstance, choose_rate, world: World = DEFAULT_WORLD, noise_rng=None,
                compensate: bool = True, on_chunk=None) -> Episode:
    """Closed loop: base chunk every boundary, rate from ``choose_rate(obs, chunk)``."""

    obs = inst.init
    observations = [obs]
    actions, chunks, rates = [], [], []
    tracker = SuccessTracker(inst, world)
    spec = inst.spec
    success = False
    while len(actions) < inst.horizon and not success:
        chunk = base_policy_chunk(obs, inst, world=world)
        if noise_rng is not None:
            chunk = _jitter(chunk, spec, noise_rng)
        k = int(choose_rate(obs, chunk))
        exec_chunk = accelerate(chunk, k, compensate)
        chunks.append((chunk, len(actions)))
        rates.append(k)
        if on_chunk is not None:
            on_chunk(obs, chunk, k, exec_chunk)
        for row in exec_chunk.as_array():
            prev = obs
            obs = step(obs, row, exec_chunk.mode, world)
            observations.append(obs)
            actions.append(row)
            if tracker.update(prev, obs):
                success = True
                break
            if is_failed(obs) or len(actions) >= inst.horizon:
                break
        if is_failed(obs):
            break
    return Episode(observations, actions, chunks, success, inst.task_id, 0, rates)


def _jitter(chunk: ActionChunk, spec: TaskSpec, rng) -> ActionChunk:
    n = len(chunk)
    pos = chunk.positions + rng.normal(0.0, spec.jitter_pos, size=(n, 3))
    yaws = np.array([quat_yaw(q) for q in chunk.quats]) + rng.normal(0.0, spec.jitter_yaw, size=n)
    return ActionChunk(pos, np.array([yaw_quat(y) for y in yaws]), chunk.gripper.copy(), chunk.mode)


def gen_demo(spec: TaskSpec, seed: int, world: World = DEFAULT_WORLD) -> Episode:
    """Scripted expert demonstration at demonstration pace with per-seed jitter."""
    inst = instantiate(spec, seed, world)
    rng = np.random.default_rng([seed, 7919])
    ep = run_episode(inst, lambda o, c: 1, world, noise_rng=rng)
    ep.seed = seed
    if not ep.success:
        raise RuntimeError(f"scripted demo failed for {spec.task_id} seed {seed} "
                           f"after {ep.length} steps")
    return ep


def gen_play(spec: TaskSpec, seed: int, k_max: int = 4, world: World = DEFAULT_WORLD) -> Episode:
    """Base-policy rollout at a random rate per chunk, kept whether or not it succeeds.

    Dynamics data for the world model covering the step sizes that
    accelerated chunks produce.
    """
    inst = instantiate(spec, seed, world)
    rng = np.random.default_rng([seed, 104729])
    ep = run_episode(inst, lambda o, c: int(rng.integers(1, k_max + 1)), world, noise_rng=rng)
    ep.seed = seed
    return ep


def gen_curved(seed: int, n_chunks: int = 6, chunk_len: int = 24, k_max: int = 4,
               world: World = DEFAULT_WORLD) -> Episode:
    """Free-space arcs with a turning wrist, each chunk executed at a random rate.

    No contact; a block rests far out of reach so observations keep the
    usual layout.
    """
    rng = np.random.default_rng([seed, 31337])
    p0 = _START + rng.uniform(-0.03, 0.03, 3)
    yaw0 = rng.uniform(-0.5, 0.5)
    obs = Observation(Pose(p0, yaw_quat(yaw0)), 1.0, None,
                      {"block": Pose(np.array([0.5, 0.5, world.rest_z]), yaw_quat(0.0))})
    radius = rng.uniform(0.05, 0.15)
    theta = rng.uniform(-np.pi, np.pi)
    center = p0[:2] - radius * np.array([np.cos(theta), np.sin(theta)])
    dtheta = rng.choice([-1.0, 1.0]) * rng.uniform(0.005, 0.012) / radius
    yaw_rate = rng.uniform(-0.04, 0.04)
    z_amp, z_freq = rng.uniform(0.0, 0.02), rng.uniform(0.02, 0.08)
    observations, actions, chunks, rates = [obs], [], [], []
    t = 0
    for _ in range(n_chunks):
        steps = t + 1 + np.arange(chunk_len)
        th = theta + dtheta * steps
        pos = np.column_stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th),
                               p0[2] + z_amp * np.sin(z_freq * steps)])
        quats = np.array([yaw_quat(yaw0 + yaw_rate * s) for s in steps])
        chunk = ActionChunk(pos, quats, np.zeros(chunk_len))
        k = int(rng.integers(1, k_max + 1))
        exec_chunk = accelerate(chunk, k)
        chunks.append((chunk, len(actions)))
        rates.append(k)
        for row in exec_chunk.as_array():
            obs = step(obs, row, exec_chunk.mode, world)
            observations.append(obs)
            actions.append(row)
        t += (chunk_len // k) * k
    return Episode(observations, actions, chunks, True, "curved", seed, rates)


def demo_displacement_ratio(episodes, world: World = DEFAULT_WORLD) -> float:
    """Mean per-step EEF displacement of ``episodes`` over the trackable step."""
    steps = []
    for ep in episodes:
        p = np.array([o.eef.position for o in ep.observations])
        steps.append(np.linalg.norm(np.diff(p, axis=0), axis=1))
    return float(np.mean(np.concatenate(steps)) / world.trackable_step)


def with_chunk_len(spec: TaskSpec, n: int) -> TaskSpec:
    return replace(spec, chunk_len=n)


# ---------------------------------------------------------------------------
# episode files
#
# One JSON object per line and per observation, in episode order:
#   ep, kind, task, seed, success  - episode fields, repeated on each line
#   t                              - step index of the observation
#   eef_pos, eef_quat, aperture, held
#   objects                        - {id: [x, y, z, qw, qx, qy, qz]}
#   action                         - 8-vector executed from this observation (null on the last line)
#   chunk, mode, rate              - emitted chunk (flat n*8), its control mode and the rate
#                                    chosen, on lines where a chunk starts; null otherwise

def _obs_record(o: Observation):
    return {"eef_pos": o.eef.position.tolist(), "eef_quat": o.eef.orientation.tolist(),
            "aperture": o.gripper_aperture, "held": o.held_object,
            "objects": {k: np.concatenate([p.position, p.orientation]).tolist()
                        for k, p in sorted(o.object_poses.items())}}


def _record_obs(rec) -> Observation:
    objs = {k: Pose(v[:3], v[3:]) for k, v in rec["objects"].items()}
    return Observation(Pose(rec["eef_pos"], rec["eef_quat"]), rec["aperture"], rec["held"], objs)


def save_episodes(path, episodes, kind="demo"):
    kinds = kind if isinstance(kind, (list, tuple)) else [kind] * len(episodes)
    with open(path, "w") as f:
        for i, (ep, kd) in enumerate(zip(episodes, kinds)):
            starts = {start: (c, r) for (c, start), r in zip(ep.chunks, ep.rates)}
            for t, o in enumerate(ep.observations):
                rec = {"ep": i, "kind": kd, "task": ep.task_id, "seed": ep.seed, "success": bool(ep.success), "t": t}
                rec.update(_obs_record(o))
                rec["action"] = np.asarray(ep.actions[t]).tolist() if t < len(ep.actions) else None
                c = starts.get(t) if t < len(ep.actions) else None
                rec["chunk"] = c[0].as_array().ravel().tolist() if c else None
                rec["mode"] = c[0].mode.value if c else None
                rec["rate"] = int(c[1]) if c else None
                f.write(json.dumps(rec) + "\n")


def load_episodes(path):
    """Inverse of :func:`save_episodes`; returns ``(episodes, kinds)``."""
    eps, kinds, cur, cur_id = [], [], None, None
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            if rec["ep"] != cur_id:
                cur = Episode([], [], [], rec["success"], rec["task"], rec["seed"], [])
                cur_id = rec["ep"]
                eps.append(cur)
                kinds.append(rec["kind"])
            cur.observations.append(_record_obs(rec))
            if rec["action"] is not None:
                cur.actions.append(np.asarray(rec["action"], dtype=float))
            if rec["chunk"] is not None:
                cur.chunks.append((ActionChunk.from_array(rec["chunk"], rec["mode"]), rec["t"]))
                cur.rates.append(rec["rate"])
    return eps, kinds


def task_by_id(task_id: str, tasks=DEFAULT_TASKS) -> TaskSpec:
    for t in tasks:
        if t.task_id == task_id:
            return t
    raise ValueError(f"unknown task {task_id!r}")
