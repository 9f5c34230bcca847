"""Planar-arm embodiments, scripted expert controllers, and closed-loop rollouts.

Embodiments differ in action space (joint targets vs end-effector deltas), arm
count, number of observation streams, link lengths, and control rate
(temporal subsampling). Each demonstration also draws an operator-speed gain
in [0.5, 1.5] that scales the controller's step size.

Units are arm lengths; angles are radians limited to [-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import ActionSpace, Embodiment

DELTA = 0.01          # reach tolerance
KP = 0.35             # proportional gain before operator-speed scaling
MAX_JOINT_STEP = 0.25
MAX_EEF_STEP = 0.08
CLOSE_STEPS = 3
MAX_BASE_STEPS = 400
FEAT_DIM = 6
MAX_STREAMS = 2
TOKENS_PER_STREAM = 2
TEMPLATES = ("reach", "handover")
N_BINS = 8
VOCAB = len(TEMPLATES) + 2 * N_BINS
STREAM_NOISE = (0.002, 0.005)
DUAL_BASES = ((0.35, 0.0), (-0.35, 0.0))


class UnreachableTarget(ValueError):
    pass


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

def fk(theta, links, base=(0.0, 0.0)) -> np.ndarray:
    """Tip position of a 2-link planar arm; theta [..., 2] -> [..., 2]."""
    theta = np.asarray(theta, dtype=np.float64)
    l1, l2 = links
    t1, t12 = theta[..., 0], theta[..., 0] + theta[..., 1]
    x = base[0] + l1 * np.cos(t1) + l2 * np.cos(t12)
    y = base[1] + l1 * np.sin(t1) + l2 * np.sin(t12)
    return np.stack([x, y], axis=-1)


def jacobian(theta, links) -> np.ndarray:
    l1, l2 = links
    t1, t12 = theta[0], theta[0] + theta[1]
    return np.array([[-l1 * math.sin(t1) - l2 * math.sin(t12), -l2 * math.sin(t12)],
                     [l1 * math.cos(t1) + l2 * math.cos(t12), l2 * math.cos(t12)]])


def reach_bounds(links) -> tuple:
    return abs(links[0] - links[1]), links[0] + links[1]


def ik(target, links, base=(0.0, 0.0), elbow: float = 1.0) -> np.ndarray:
    """Closed-form IK; points outside the annulus are projected onto it."""
    l1, l2 = links
    dx, dy = target[0] - base[0], target[1] - base[1]
    r2 = dx * dx + dy * dy
    c2 = np.clip((r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2), -1.0, 1.0)
    t2 = math.copysign(math.acos(c2), elbow if elbow != 0 else 1.0)
    t1 = math.atan2(dy, dx) - math.atan2(l2 * math.sin(t2), l1 + l2 * math.cos(t2))
    return np.array([wrap(t1), t2])


def ik_same_elbow(target, links, base, theta) -> np.ndarray:
    """IK branch with the elbow on the same side as the current configuration.

    Staying on one branch keeps servo paths away from the +-pi joint limit.
    """
    return ik(target, links, base, 1.0 if theta[1] >= 0 else -1.0)


def wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def clamp_to_workspace(p, links, base, margin=1e-3) -> np.ndarray:
    lo, hi = reach_bounds(links)
    d = np.asarray(p, dtype=np.float64) - base
    r = float(np.hypot(*d))
    rc = min(max(r, lo + margin), hi - margin)
    if r < 1e-12:
        return np.asarray(base, dtype=np.float64) + np.array([rc, 0.0])
    return np.asarray(base, dtype=np.float64) + d * (rc / r)


@dataclass
class PlanarArm:
    link_lengths: tuple
    joint_angles: np.ndarray
    gripper: float = 0.0
    base: tuple = (0.0, 0.0)

    def tip(self) -> np.ndarray:
        return fk(self.joint_angles, self.link_lengths, self.base)

    def copy(self) -> "PlanarArm":
        return PlanarArm(self.link_lengths, self.joint_angles.copy(), self.gripper, self.base)


# ---------------------------------------------------------------------------
# default embodiments
# ---------------------------------------------------------------------------

def _single_joint(id, links, streams, hz, sub):
    return Embodiment(id, ActionSpace.JOINT, 1, 3, 3, hz, (8, 9, 15), (8, 9, 15),
                      n_streams=streams, link_lengths=links, subsample=sub)


def _single_eef(id, links, streams, hz, sub):
    return Embodiment(id, ActionSpace.EEF, 1, 3, 3, hz, (0, 1, 2), (0, 1, 2),
                      n_streams=streams, link_lengths=links, subsample=sub)


DEFAULT_EMBODIMENTS = {
    e.id: e for e in (
        _single_joint("joint_a", (0.55, 0.45), 1, 20.0, 1),
        _single_joint("joint_b", (0.5, 0.5), 2, 10.0, 2),
        _single_eef("eef_a", (0.55, 0.45), 1, 20.0, 1),
        _single_eef("eef_b", (0.5, 0.5), 2, 10.0, 2),
        _single_eef("eef_c", (0.7, 0.3), 1, 10.0, 2),
        Embodiment("dual_joint", ActionSpace.JOINT, 2, 6, 6, 20.0,
                   (8, 9, 15, 16, 17, 23), (8, 9, 15, 16, 17, 23),
                   n_streams=2, link_lengths=(0.5, 0.4), subsample=1, task="handover"),
    )
}


def get_embodiment(emb) -> Embodiment:
    return emb if isinstance(emb, Embodiment) else DEFAULT_EMBODIMENTS[emb]


# ---------------------------------------------------------------------------
# world state
# ---------------------------------------------------------------------------

@dataclass
class World:
    """Arms of one embodiment plus the task target."""

    emb: Embodiment
    arms: list
    target: np.ndarray

    def copy(self) -> "World":
        return World(self.emb, [a.copy() for a in self.arms], self.target.copy())

    def raw_state(self) -> np.ndarray:
        if self.emb.action_space is ActionSpace.EEF:
            a = self.arms[0]
            return np.array([*a.tip(), a.gripper])
        out = []
        for a in self.arms:
            out += [*a.joint_angles, a.gripper]
        return np.array(out)

    def distances(self) -> np.ndarray:
        return np.array([np.linalg.norm(a.tip() - self.target) for a in self.arms])

    def success(self) -> bool:
        return bool((self.distances() < DELTA).all() and all(a.gripper > 0.5 for a in self.arms))

    def apply(self, raw_action) -> None:
        """Execute one recorded-rate action."""
        act = np.asarray(raw_action, dtype=np.float64)
        if self.emb.action_space is ActionSpace.EEF:
            a = self.arms[0]
            goal = clamp_to_workspace(a.tip() + act[:2], a.link_lengths, a.base)
            a.joint_angles = ik_same_elbow(goal, a.link_lengths, a.base, a.joint_angles)
            a.gripper = float(np.clip(act[2], 0.0, 1.0))
            return
        for k, a in enumerate(self.arms):
            a.joint_angles = np.clip(act[3 * k:3 * k + 2], -np.pi, np.pi)
            a.gripper = float(np.clip(act[3 * k + 2], 0.0, 1.0))


def sample_world(emb: Embodiment, rng: np.random.Generator, min_sep: float = 5 * DELTA) -> World:
    """Random start configuration and a reachable target at least ``min_sep`` away."""
    links = emb.link_lengths
    if emb.arm_count == 2:
        arms = []
        for k, base in enumerate(DUAL_BASES):
            sign = 1.0 if k == 0 else -1.0
            th = np.array([rng.uniform(0.25, 0.75) * np.pi, sign * rng.uniform(0.5, 2.0)])
            arms.append(PlanarArm(links, th, 0.0, base))
        for _ in range(100):
            target = np.array([rng.uniform(-0.15, 0.15), rng.uniform(0.3, 0.7)])
            if all(np.linalg.norm(a.tip() - target) >= min_sep for a in arms):
                return World(emb, arms, target)
        raise UnreachableTarget("could not place a handover target")
    lo, hi = reach_bounds(links)
    th = np.array([rng.uniform(0.1, 0.9) * np.pi, rng.uniform(0.5, 2.0)])
    arm = PlanarArm(links, th, 0.0, (0.0, 0.0))
    for _ in range(100):
        r = rng.uniform(lo + 0.3 * (hi - lo), hi - 0.05)
        phi = rng.uniform(0.15, 0.85) * np.pi
        target = np.array([r * math.cos(phi), r * math.sin(phi)])
        if np.linalg.norm(arm.tip() - target) >= min_sep:
            return World(emb, [arm], target)
    raise UnreachableTarget("could not place a reach target")


def check_reachable(world: World) -> None:
    for a in world.arms:
        lo, hi = reach_bounds(a.link_lengths)
        r = float(np.linalg.norm(world.target - np.asarray(a.base)))
        if not lo <= r <= hi:
            raise UnreachableTarget(f"target at radius {r:.3f} outside [{lo:.3f}, {hi:.3f}]")


# ---------------------------------------------------------------------------
# observations and instructions
# ---------------------------------------------------------------------------

def instruction_ids(emb: Embodiment, target) -> np.ndarray:
    """[template, x-bin, y-bin] with coordinates binned over [-1, 1]."""
    bins = np.clip(np.floor((np.asarray(target) + 1.0) / 2.0 * N_BINS), 0, N_BINS - 1).astype(int)
    t = TEMPLATES.index(emb.task)
    return np.array([t, len(TEMPLATES) + bins[0], len(TEMPLATES) + N_BINS + bins[1]])


def _arm_offset_feats(a: PlanarArm, target):
    p = a.tip()
    return [target[0], target[1], p[0], p[1], target[0] - p[0], target[1] - p[1]]


def _arm_proprio_feats(a: PlanarArm, target):
    th = a.joint_angles
    return [math.sin(th[0]), math.cos(th[0]), math.sin(th[1]), math.cos(th[1]), a.gripper,
            float(np.linalg.norm(target - a.tip()))]


def _wrist_feats(a: PlanarArm, target):
    p = a.tip()
    head = float(a.joint_angles.sum())
    c, s = math.cos(head), math.sin(head)
    d = target - p
    lx, ly = c * d[0] + s * d[1], -s * d[0] + c * d[1]
    return ([lx, ly, float(np.hypot(lx, ly)), c, s, a.gripper],
            [p[0], p[1], a.base[0], a.base[1], 0.0, 0.0])


def observe(world: World, rng: np.random.Generator):
    """Observation tokens [2, 2, 6] and stream mask [2]; absent streams are zeros."""
    obs = np.zeros((MAX_STREAMS, TOKENS_PER_STREAM, FEAT_DIM))
    mask = np.zeros(MAX_STREAMS, dtype=bool)
    arms, tgt = world.arms, world.target
    if world.emb.arm_count == 2:
        streams = [[_arm_offset_feats(arms[0], tgt), _arm_offset_feats(arms[1], tgt)],
                   [_arm_proprio_feats(arms[0], tgt), _arm_proprio_feats(arms[1], tgt)]]
    else:
        streams = [[_arm_offset_feats(arms[0], tgt), _arm_proprio_feats(arms[0], tgt)],
                   list(_wrist_feats(arms[0], tgt))]
    for s in range(world.emb.n_streams):
        obs[s] = np.asarray(streams[s]) + STREAM_NOISE[s] * rng.standard_normal((TOKENS_PER_STREAM, FEAT_DIM))
        mask[s] = True
    return obs, mask


# ---------------------------------------------------------------------------
# scripted expert
# ---------------------------------------------------------------------------

def expert_base_action(world: World, gain: float, closing: bool) -> np.ndarray:
    """One base-rate action: proportional servo toward the target.

    Joint embodiments servo in joint space toward the IK solution; EEF
    embodiments move the tip along the straight line to the target.
    """
    k = min(gain * KP, 1.0)
    g = 1.0 if closing else 0.0
    if world.emb.action_space is ActionSpace.EEF:
        a = world.arms[0]
        step = k * (world.target - a.tip())
        n = float(np.linalg.norm(step))
        if n > MAX_EEF_STEP:
            step *= MAX_EEF_STEP / n
        return np.array([step[0], step[1], g])
    out = []
    for a in world.arms:
        goal = ik_same_elbow(world.target, a.link_lengths, a.base, a.joint_angles)
        step = np.clip(k * (goal - a.joint_angles), -MAX_JOINT_STEP, MAX_JOINT_STEP)
        out += [*(a.joint_angles + step), g]
    return np.array(out)


def combine_actions(emb: Embodiment, acts: list) -> np.ndarray:
    """Merge consecutive base-rate actions into one recorded-rate action."""
    if emb.action_space is ActionSpace.EEF:
        d = np.sum([a[:2] for a in acts], axis=0)
        return np.array([d[0], d[1], acts[-1][2]])
    return acts[-1].copy()


def expert_action(world: World, gain: float = 1.0) -> np.ndarray:
    """Recorded-rate expert action from the current world state.

    The gripper closes once every tip is within DELTA and stays closed (a
    closed gripper in the state keeps it closed); servoing continues.
    """
    closing = all(a.gripper > 0.5 for a in world.arms) or bool((world.distances() < DELTA).all())
    sim = world.copy()
    acts = []
    for _ in range(world.emb.subsample):
        a = expert_base_action(sim, gain, closing)
        sim.apply(a)
        acts.append(a)
    return combine_actions(world.emb, acts)


@dataclass
class Episode:
    emb_id: str
    instruction: np.ndarray
    target: np.ndarray
    gain: float
    control_hz: float
    states: np.ndarray        # [T, raw_state_dim]
    actions: np.ndarray       # [T, raw_action_dim]
    obs: np.ndarray           # [T, S, tokens, F]
    stream_mask: np.ndarray   # [S]
    final_distance: float = 0.0
    success: bool = False

    def __len__(self) -> int:
        return len(self.actions)


def generate_episode(emb, seed, world: World | None = None, gain: float | None = None) -> Episode:
    """Roll out the scripted expert from a random (or given) start.

    The controller servos until the tip is within DELTA, then issues
    CLOSE_STEPS more actions with the gripper closed. Recording happens at
    the embodiment's rate: with ``subsample`` 2 every recorded action merges
    two base-rate controller steps.
    """
    emb = get_embodiment(emb)
    rng = np.random.default_rng(seed)
    if gain is None:
        gain = float(rng.uniform(0.5, 1.5))
    if world is None:
        world = sample_world(emb, rng)
    check_reachable(world)
    world = world.copy()
    states, actions, obs_list = [], [], []
    stream_mask = None
    closing_left = None
    base_steps = 0
    while True:
        s = world.raw_state()
        o, stream_mask = observe(world, rng)
        acts = []
        for _ in range(emb.subsample):
            if closing_left is None and (world.distances() < DELTA).all():
                closing_left = CLOSE_STEPS
            a = expert_base_action(world, gain, closing_left is not None)
            world.apply(a)
            acts.append(a)
            base_steps += 1
            if closing_left is not None:
                closing_left -= 1
                if closing_left == 0:
                    break
        states.append(s)
        obs_list.append(o)
        actions.append(combine_actions(emb, acts))
        if closing_left == 0:
            break
        if base_steps > MAX_BASE_STEPS:
            raise UnreachableTarget(f"{emb.id}: controller did not converge in {MAX_BASE_STEPS} steps")
    return Episode(emb.id, instruction_ids(emb, world.target), world.target.copy(), gain,
                   emb.control_hz, np.array(states), np.array(actions), np.array(obs_list),
                   stream_mask, float(world.distances().max()), world.success())


# ---------------------------------------------------------------------------
# closed-loop evaluation
# ---------------------------------------------------------------------------

@dataclass
class RolloutObs:
    """Batched observation handed to a policy during rollouts."""

    emb: Embodiment
    raw_states: np.ndarray    # [n, raw_state_dim]
    obs: np.ndarray           # [n, S, tokens, F]
    stream_mask: np.ndarray   # [n, S]
    instr: np.ndarray         # [n, L]
    worlds: list = field(default_factory=list)


class ExpertPolicy:
    """Scripted expert exposed through the policy interface (chunks of length ``horizon``)."""

    def __init__(self, horizon: int = 8, gain: float = 1.0):
        self.horizon = horizon
        self.gain = gain

    def __call__(self, ro: RolloutObs) -> np.ndarray:
        chunks = []
        for w in ro.worlds:
            sim, chunk = w.copy(), []
            for _ in range(self.horizon):
                a = expert_action(sim, self.gain)
                sim.apply(a)
                chunk.append(a)
            chunks.append(chunk)
        return np.array(chunks)


class ZeroPolicy:
    def __init__(self, horizon: int = 8):
        self.horizon = horizon

    def __call__(self, ro: RolloutObs) -> np.ndarray:
        n = ro.raw_states.shape[0]
        return np.zeros((n, self.horizon, ro.emb.raw_action_dim))


def rollout_eval(policy, emb, n_trials: int, seed: int, max_steps: int = 60,
                 execute: int = 4, return_worlds: bool = False):
    """Fraction of trials ending with every tip within DELTA and grippers closed.

    ``policy(RolloutObs) -> [n, h, raw_action_dim]`` is queried every
    ``execute`` steps (receding horizon); trials run in one batch.
    """
    emb = get_embodiment(emb)
    if n_trials <= 0:
        return (0.0, []) if return_worlds else 0.0
    rng = np.random.default_rng(seed)
    worlds = [sample_world(emb, rng) for _ in range(n_trials)]
    t = 0
    while t < max_steps:
        obs, masks = zip(*(observe(w, rng) for w in worlds))
        ro = RolloutObs(emb, np.array([w.raw_state() for w in worlds]), np.array(obs),
                        np.array(masks), np.array([instruction_ids(emb, w.target) for w in worlds]),
                        worlds)
        chunk = np.asarray(policy(ro))
        for j in range(min(execute, chunk.shape[1], max_steps - t)):
            for w, a in zip(worlds, chunk[:, j]):
                w.apply(a)
        t += execute
    rate = float(np.mean([w.success() for w in worlds])) if worlds else 0.0
    return (rate, worlds) if return_worlds else rate
