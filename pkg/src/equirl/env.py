"""Synthetic planar-grasp environment with exact quarter-turn rotation symmetry.

A kinematic stand-in for a physics manipulation benchmark: a gripper moves in
a square workspace, grasps a single box, and earns a binary reward for lifting
it.  Observations are gripper-centered 2-channel images (object height map +
holding flag), actions are the factored (grip, dx, dy, dz, dtheta) tuple, and
the whole MDP is invariant under planar rotations.

Exactness: orientations are stored as integer ticks (2^20 per turn) and all
quarter-turn geometry uses sign flips and axis swaps, so rotating a state by
90 degrees commutes bitwise with stepping, rewarding, and rendering.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from equirl.groups import FactoredAction

ANGLE_TICKS = 1 << 20
QUARTER_TICKS = ANGLE_TICKS // 4
_TICK = 2.0 * math.pi / ANGLE_TICKS


class EnvError(RuntimeError):
    """Contract violations such as stepping a finished episode."""


def ticks_from_angle(theta: float) -> int:
    return int(round(theta / _TICK)) % ANGLE_TICKS


def angle_from_ticks(ticks: int) -> float:
    return (ticks % ANGLE_TICKS) * _TICK


def tick_trig(ticks: int) -> tuple[float, float]:
    """(cos, sin) of a tick angle, with quarter turns applied as exact swaps."""
    q, r = divmod(ticks % ANGLE_TICKS, QUARTER_TICKS)
    a = r * _TICK
    c, s = math.cos(a), math.sin(a)
    if q == 0:
        return c, s
    if q == 1:
        return -s, c
    if q == 2:
        return -c, -s
    return s, -c


@dataclass(frozen=True)
class ActionBounds:
    """Per-dimension action box: (grip, dx, dy, dz, dtheta)."""

    low: tuple = (0.0, -0.05, -0.05, -0.05, -math.pi / 8)
    high: tuple = (1.0, 0.05, 0.05, 0.05, math.pi / 8)

    @property
    def low_array(self) -> np.ndarray:
        return np.array(self.low)

    @property
    def high_array(self) -> np.ndarray:
        return np.array(self.high)

    @property
    def center(self) -> np.ndarray:
        return (self.low_array + self.high_array) / 2.0

    @property
    def half_width(self) -> np.ndarray:
        return (self.high_array - self.low_array) / 2.0

    def clip(self, vec: np.ndarray) -> np.ndarray:
        return np.clip(vec, self.low_array, self.high_array)

    def contains(self, vec: np.ndarray) -> bool:
        return bool(np.all(vec >= self.low_array) and np.all(vec <= self.high_array))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low_array, self.high_array)


@dataclass(frozen=True)
class EnvConfig:
    workspace_half_extent: float = 0.15
    resolution: int = 65
    grasp_xy_tolerance: float = 0.02
    grasp_z_threshold: float = 0.02
    lift_height: float = 0.08
    gripper_start_z: float = 0.10
    gripper_z_max: float = 0.20
    max_steps: int = 50
    object_half_extents: tuple = (0.015, 0.03)
    object_height: float = 0.03

    def __post_init__(self):
        if self.resolution < 3 or self.resolution % 2 == 0:
            raise EnvError("resolution must be an odd integer >= 3")
        if self.grasp_xy_tolerance >= self.workspace_half_extent:
            raise EnvError("grasp tolerance must be smaller than the workspace")

    @property
    def pitch(self) -> float:
        return 2.0 * self.workspace_half_extent / self.resolution

    @property
    def spawn_margin(self) -> float:
        hx, hy = self.object_half_extents
        return math.hypot(2.0 * hx, 2.0 * hy)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_half_extents"] = list(self.object_half_extents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "object_half_extents" in d:
            d["object_half_extents"] = tuple(d["object_half_extents"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "EnvConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class EnvState:
    grip_xy: np.ndarray
    grip_z: float
    grip_theta_ticks: int
    aperture_closed: bool
    holding: bool
    held_offset: np.ndarray  # object minus gripper xy while holding, else zeros
    obj_xy: np.ndarray
    obj_theta_ticks: int
    steps: int
    done: bool

    def copy(self) -> "EnvState":
        return EnvState(
            grip_xy=self.grip_xy.copy(),
            grip_z=self.grip_z,
            grip_theta_ticks=self.grip_theta_ticks,
            aperture_closed=self.aperture_closed,
            holding=self.holding,
            held_offset=self.held_offset.copy(),
            obj_xy=self.obj_xy.copy(),
            obj_theta_ticks=self.obj_theta_ticks,
            steps=self.steps,
            done=self.done,
        )


def _rot_quarter_xy(v: np.ndarray, q: int) -> np.ndarray:
    """Exact counter-clockwise quarter rotations of a 2-vector."""
    x, y = v[0], v[1]
    q %= 4
    if q == 0:
        return np.array([x, y])
    if q == 1:
        return np.array([-y, x])
    if q == 2:
        return np.array([-x, -y])
    return np.array([y, -x])


def rotate_state(state: EnvState, quarter_turns: int) -> EnvState:
    """World rotation of a state by 90-degree multiples; exact by construction."""
    q = quarter_turns % 4
    return EnvState(
        grip_xy=_rot_quarter_xy(state.grip_xy, q),
        grip_z=state.grip_z,
        grip_theta_ticks=(state.grip_theta_ticks + q * QUARTER_TICKS) % ANGLE_TICKS,
        aperture_closed=state.aperture_closed,
        holding=state.holding,
        held_offset=_rot_quarter_xy(state.held_offset, q),
        obj_xy=_rot_quarter_xy(state.obj_xy, q),
        obj_theta_ticks=(state.obj_theta_ticks + q * QUARTER_TICKS) % ANGLE_TICKS,
        steps=state.steps,
        done=state.done,
    )


def rotate_action(action: FactoredAction, quarter_turns: int) -> FactoredAction:
    return FactoredAction(
        grip=action.grip,
        xy=_rot_quarter_xy(action.xy, quarter_turns),
        z=action.z,
        theta=action.theta,
    )


def render_observation(state: EnvState, config: EnvConfig) -> np.ndarray:
    """Gripper-centered 2-channel observation (float32, 2 x H x W).

    Channel 0 is the object height map on world axes with the gripper at the
    image center; channel 1 is the spatially constant holding flag.
    """
    res = config.resolution
    c = (res - 1) / 2.0
    p = config.pitch
    cols = (np.arange(res) - c) * p
    rows = (c - np.arange(res)) * p
    px = np.broadcast_to(cols[None, :], (res, res))
    py = np.broadcast_to(rows[:, None], (res, res))

    dx = state.obj_xy[0] - state.grip_xy[0]
    dy = state.obj_xy[1] - state.grip_xy[1]
    co, si = tick_trig(state.obj_theta_ticks)
    rel_x = px - dx
    rel_y = py - dy
    # object-frame coordinates of each pixel center
    u = rel_x * co + rel_y * si
    v = -rel_x * si + rel_y * co
    hx, hy = config.object_half_extents
    inside = (np.abs(u) <= hx) & (np.abs(v) <= hy)

    obs = np.zeros((2, res, res), dtype=np.float32)
    obs[0][inside] = config.object_height
    obs[1][:] = 1.0 if state.holding else 0.0
    return obs


class GraspEnv:
    """Single-object planar grasp task with binary lift reward."""

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.bounds = ActionBounds()
        self.state: EnvState | None = None

    def reset(self, seed=None, rng: np.random.Generator | None = None) -> np.ndarray:
        if rng is None:
            rng = np.random.default_rng(seed)
        half = self.config.workspace_half_extent
        margin = self.config.spawn_margin
        obj_xy = rng.uniform(-half + margin, half - margin, size=2)
        obj_theta = rng.uniform(0.0, 2.0 * math.pi)
        self.state = EnvState(
            grip_xy=np.zeros(2),
            grip_z=self.config.gripper_start_z,
            grip_theta_ticks=0,
            aperture_closed=False,
            holding=False,
            held_offset=np.zeros(2),
            obj_xy=obj_xy,
            obj_theta_ticks=ticks_from_angle(obj_theta),
            steps=0,
            done=False,
        )
        return self.observation()

    def observation(self) -> np.ndarray:
        return render_observation(self.state, self.config)

    def get_state(self) -> EnvState:
        return self.state.copy()

    def set_state(self, state: EnvState) -> None:
        self.state = state.copy()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.state is None:
            raise EnvError("reset() must be called before step()")
        if self.state.done:
            raise EnvError("episode is done; call reset() before stepping again")
        if isinstance(action, FactoredAction):
            vec = action.as_vector()
        else:
            vec = np.asarray(action, dtype=np.float64)
        vec = self.bounds.clip(vec)

        s = self.state
        cfg = self.config
        half = cfg.workspace_half_extent

        grip_xy = np.clip(s.grip_xy + vec[1:3], -half, half)
        grip_z = min(max(s.grip_z + vec[3], 0.0), cfg.gripper_z_max)
        grip_ticks = (s.grip_theta_ticks + ticks_from_angle(vec[4])) % ANGLE_TICKS
        close = vec[0] >= 0.5

        holding = s.holding
        held_offset = s.held_offset
        obj_xy = s.obj_xy
        if holding:
            if close:
                obj_xy = grip_xy + held_offset
            else:
                holding = False
                obj_xy = s.obj_xy.copy()
                held_offset = np.zeros(2)
        elif close and not s.aperture_closed:
            d = s.obj_xy - grip_xy
            within = d[0] * d[0] + d[1] * d[1] <= cfg.grasp_xy_tolerance**2
            if within and grip_z < cfg.grasp_z_threshold:
                holding = True
                held_offset = d.copy()
                obj_xy = grip_xy + held_offset

        reward = 1.0 if (holding and grip_z >= cfg.lift_height) else 0.0
        steps = s.steps + 1
        done = reward > 0.0 or steps >= cfg.max_steps

        self.state = EnvState(
            grip_xy=grip_xy,
            grip_z=grip_z,
            grip_theta_ticks=grip_ticks,
            aperture_closed=close,
            holding=holding,
            held_offset=held_offset,
            obj_xy=obj_xy,
            obj_theta_ticks=s.obj_theta_ticks,
            steps=steps,
            done=done,
        )
        return self.observation(), reward, done


# --- scripted policies ------------------------------------------------------


def _wrap_half_turn(delta: float) -> float:
    """Smallest orientation error for a box symmetric under half turns."""
    return (delta + math.pi / 2.0) % math.pi - math.pi / 2.0


def expert_policy(state: EnvState, config: EnvConfig) -> FactoredAction:
    """Phase-machine grasp expert: align, descend, close, lift."""
    bounds = ActionBounds()
    step_xy = bounds.high[1]
    step_z = bounds.high[3]
    step_theta = bounds.high[4]

    if state.holding:
        return FactoredAction(grip=1.0, xy=np.zeros(2), z=step_z, theta=0.0)

    d = state.obj_xy - state.grip_xy
    dist2 = d[0] * d[0] + d[1] * d[1]
    aligned = dist2 <= (0.5 * config.grasp_xy_tolerance) ** 2
    dtheta = _wrap_half_turn(
        angle_from_ticks(state.obj_theta_ticks) - angle_from_ticks(state.grip_theta_ticks)
    )
    a_theta = float(np.clip(dtheta, -step_theta, step_theta))

    if not aligned:
        move = np.clip(d, -step_xy, step_xy)
        return FactoredAction(grip=0.0, xy=move, z=0.0, theta=a_theta)
    z_target = 0.5 * config.grasp_z_threshold
    if state.grip_z >= config.grasp_z_threshold:
        dz = float(np.clip(z_target - state.grip_z, -step_z, step_z))
        return FactoredAction(grip=0.0, xy=np.zeros(2), z=dz, theta=a_theta)
    return FactoredAction(grip=1.0, xy=np.zeros(2), z=0.0, theta=0.0)


# (epsilon, sigma) pairs calibrated so the behavior policy's mean discounted
# return lands on the 0.4 / 0.2 dataset-quality targets (scripts/calibrate_noise.py)
NOISE_PRESETS = {
    "medium": (0.19, 0.29),
    "near-random": (0.27, 0.35),
}


def noisy_policy(
    state: EnvState,
    config: EnvConfig,
    rng: np.random.Generator,
    epsilon: float,
    sigma: float,
) -> FactoredAction:
    """Expert corrupted by uniform resampling (prob epsilon) and Gaussian noise.

    sigma is relative to each dimension's half-width; actions stay in bounds.
    """
    bounds = ActionBounds()
    if rng.random() < epsilon:
        return FactoredAction.from_vector(bounds.sample(rng))
    vec = expert_policy(state, config).as_vector()
    vec = vec + rng.normal(0.0, sigma, size=5) * bounds.half_width
    return FactoredAction.from_vector(bounds.clip(vec))


def make_policy(name: str, config: EnvConfig, rng: np.random.Generator):
    """Policy factory for dataset collection: expert | medium | near-random."""
    if name == "expert":
        return lambda state: expert_policy(state, config)
    if name in NOISE_PRESETS:
        eps, sigma = NOISE_PRESETS[name]
        return lambda state: noisy_policy(state, config, rng, eps, sigma)
    raise EnvError(f"unknown policy {name!r}; expected expert|medium|near-random")


def discounted_return(rewards, gamma: float) -> float:
    total = 0.0
    for t, r in enumerate(rewards):
        total += (gamma**t) * r
    return total


def rollout_episode(env: GraspEnv, policy, seed, gamma: float = 0.99):
    """Run one episode with a state-based policy; returns (return, steps, success)."""
    env.reset(seed=seed)
    rewards = []
    while True:
        action = policy(env.get_state())
        _, reward, done = env.step(action)
        rewards.append(reward)
        if done:
            break
    return discounted_return(rewards, gamma), len(rewards), rewards[-1] > 0.0


def mean_policy_return(
    config: EnvConfig, policy_name: str, episodes: int, seed: int, gamma: float = 0.99
):
    """Mean discounted return of a scripted policy over fresh episodes."""
    env = GraspEnv(config)
    rng = np.random.default_rng(seed)
    policy = make_policy(policy_name, config, rng)
    returns = []
    successes = 0
    for i in range(episodes):
        ret, _, ok = rollout_episode(env, policy, seed=(seed, i), gamma=gamma)
        returns.append(ret)
        successes += int(ok)
    return float(np.mean(returns)), successes / episodes
