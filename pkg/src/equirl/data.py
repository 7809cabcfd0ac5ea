"""Offline dataset collection, a small binary on-disk format, and batch sampling.

On disk a dataset is two files, `<name>.bin` and `<name>.manifest.json`.  The
blob is magic "EQRL", a little-endian u32 format version, then contiguous
little-endian float32 arrays in order (states, actions, rewards, dones,
next_states), row-major; all lengths are derived from the manifest, which is
validated against the payload on load.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from equirl.env import EnvConfig, GraspEnv, discounted_return, make_policy
from equirl.groups import CyclicGroup, rotate_action_xy, rotate_image, rotate_image_quarter

MAGIC = b"EQRL"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed dataset files or inconsistent manifests."""


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    episode: int


@dataclass
class DatasetManifest:
    env_name: str
    env_config_hash: str
    observation_shape: tuple
    action_dim: int
    n_episodes: int
    n_transitions: int
    policy: str
    behavioral_return: float
    seed: int
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["observation_shape"] = list(self.observation_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        d["observation_shape"] = tuple(d["observation_shape"])
        return cls(**d)


@dataclass
class OfflineDataset:
    """Immutable set of (s, a, r, s', done) records plus its manifest."""

    states: np.ndarray  # (N, C, H, W) float32
    actions: np.ndarray  # (N, 5) float32
    rewards: np.ndarray  # (N,) float32
    dones: np.ndarray  # (N,) float32 in {0, 1}
    next_states: np.ndarray  # (N, C, H, W) float32
    manifest: DatasetManifest

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def episode_ids(self) -> np.ndarray:
        """Episode index per transition, recovered from the done flags."""
        ends = np.cumsum(self.dones.astype(np.int64))
        return np.concatenate([[0], ends[:-1]])

    def transition(self, i: int) -> Transition:
        return Transition(
            state=self.states[i],
            action=self.actions[i],
            reward=float(self.rewards[i]),
            next_state=self.next_states[i],
            done=bool(self.dones[i]),
            episode=int(self.episode_ids[i]),
        )

    def validate(self) -> None:
        m = self.manifest
        n = len(self)
        shapes_ok = (
            self.states.shape == (n,) + m.observation_shape
            and self.next_states.shape == self.states.shape
            and self.actions.shape == (n, m.action_dim)
            and self.rewards.shape == (n,)
            and self.dones.shape == (n,)
        )
        if not shapes_ok:
            raise DatasetError("array shapes disagree with the manifest")
        if n != m.n_transitions:
            raise DatasetError(
                f"manifest says {m.n_transitions} transitions, payload has {n}"
            )
        if int(self.dones.sum()) != m.n_episodes:
            raise DatasetError(
                f"manifest says {m.n_episodes} episodes, payload has {int(self.dones.sum())}"
            )


def collect_dataset(
    env_config: EnvConfig,
    policy_name: str,
    seed: int,
    n_episodes: int | None = None,
    n_transitions: int | None = None,
    gamma: float = 0.99,
) -> OfflineDataset:
    """Roll out full episodes of a scripted policy until the budget is met.

    Exactly one of n_episodes / n_transitions must be given.  A transition
    budget stops at the first episode boundary at or past the count.
    """
    if (n_episodes is None) == (n_transitions is None):
        raise DatasetError("specify exactly one of n_episodes or n_transitions")
    if (n_episodes or n_transitions) < 1:
        raise DatasetError("budget must be positive")

    env = GraspEnv(env_config)
    policy_rng = np.random.default_rng((seed, 0x9E3779B9))
    policy = make_policy(policy_name, env_config, policy_rng)

    states, actions, rewards, dones, next_states = [], [], [], [], []
    episode_returns = []
    episode = 0
    while True:
        obs = env.reset(seed=(seed, episode))
        ep_rewards = []
        done = False
        while not done:
            action = policy(env.get_state()).as_vector()
            next_obs, reward, done = env.step(action)
            states.append(obs)
            actions.append(action)
            rewards.append(reward)
            dones.append(float(done))
            next_states.append(next_obs)
            ep_rewards.append(reward)
            obs = next_obs
        episode_returns.append(discounted_return(ep_rewards, gamma))
        episode += 1
        if n_episodes is not None and episode >= n_episodes:
            break
        if n_transitions is not None and len(states) >= n_transitions:
            break

    manifest = DatasetManifest(
        env_name="grasp",
        env_config_hash=env_config.config_hash(),
        observation_shape=tuple(states[0].shape),
        action_dim=5,
        n_episodes=episode,
        n_transitions=len(states),
        policy=policy_name,
        behavioral_return=float(np.mean(episode_returns)),
        seed=seed,
    )
    dataset = OfflineDataset(
        states=np.stack(states).astype(np.float32),
        actions=np.stack(actions).astype(np.float32),
        rewards=np.asarray(rewards, dtype=np.float32),
        dones=np.asarray(dones, dtype=np.float32),
        next_states=np.stack(next_states).astype(np.float32),
        manifest=manifest,
    )
    dataset.validate()
    return dataset


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix == ".bin":
        stem = stem.with_suffix("")
    return stem.with_suffix(".bin"), stem.with_name(stem.name + ".manifest.json")


def save(dataset: OfflineDataset, stem) -> Path:
    """Write `<stem>.bin` and `<stem>.manifest.json`; returns the blob path."""
    dataset.validate()
    bin_path, manifest_path = _paths(stem)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    with open(bin_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", dataset.manifest.format_version))
        for arr in (
            dataset.states,
            dataset.actions,
            dataset.rewards,
            dataset.dones,
            dataset.next_states,
        ):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(manifest_path, "w") as f:
        json.dump(dataset.manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return bin_path


def load(stem) -> OfflineDataset:
    """Load a dataset pair written by save(); validates sizes and counts."""
    bin_path, manifest_path = _paths(stem)
    with open(manifest_path) as f:
        manifest = DatasetManifest.from_dict(json.load(f))
    if manifest.format_version != FORMAT_VERSION:
        raise DatasetError(f"unsupported format version {manifest.format_version}")

    raw = bin_path.read_bytes()
    if raw[:4] != MAGIC:
        raise DatasetError(f"{bin_path} is not a dataset blob (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise DatasetError(f"blob format version {version} != {FORMAT_VERSION}")

    n = manifest.n_transitions
    obs_count = n * int(np.prod(manifest.observation_shape))
    sizes = [obs_count, n * manifest.action_dim, n, n, obs_count]
    expected = 8 + 4 * sum(sizes)
    if len(raw) != expected:
        raise DatasetError(
            f"blob has {len(raw)} bytes, manifest implies {expected}; refusing to truncate"
        )

    offset = 8
    arrays = []
    for count in sizes:
        arrays.append(np.frombuffer(raw, dtype="<f4", count=count, offset=offset).copy())
        offset += 4 * count
    states, actions, rewards, dones, next_states = arrays
    dataset = OfflineDataset(
        states=states.reshape((n,) + manifest.observation_shape),
        actions=actions.reshape((n, manifest.action_dim)),
        rewards=rewards,
        dones=dones,
        next_states=next_states.reshape((n,) + manifest.observation_shape),
        manifest=manifest,
    )
    dataset.validate()
    return dataset


# --- batch sampling and rotation augmentation --------------------------------

AUGMENT_MODES = ("none", "random_so2", "full_group_c8")


@dataclass
class Batch:
    states: np.ndarray  # (B, C, H, W) float32
    actions: np.ndarray  # (B, 5) float64
    rewards: np.ndarray  # (B,) float64
    next_states: np.ndarray  # (B, C, H, W) float32
    dones: np.ndarray  # (B,) float64

    def __len__(self) -> int:
        return self.states.shape[0]


def _rotate_transition_arrays(states, actions, next_states, angle: float):
    """Rotate s and s' images and the planar action component by one angle."""
    out_s = rotate_image(states, angle)
    out_s2 = rotate_image(next_states, angle)
    out_a = actions.copy()
    out_a[..., 1:3] = rotate_action_xy(actions[..., 1:3].T, angle).T
    return out_s, out_a, out_s2


def sample_batch(
    dataset: OfflineDataset,
    rng: np.random.Generator,
    batch_size: int,
    mode: str = "none",
) -> Batch:
    """Uniform-with-replacement batch, optionally rotation-augmented.

    random_so2 rotates each sampled transition by an independent angle uniform
    on [0, 2pi) (s and s' share the angle); full_group_c8 expands the batch
    8-fold by applying every C_8 element to every transition.  Rotation never
    touches reward, done, grip, dz, or dtheta.
    """
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise DatasetError("dataset is empty")
    if mode not in AUGMENT_MODES:
        raise DatasetError(f"unknown augmentation mode {mode!r}")

    idx = rng.integers(0, len(dataset), size=batch_size)
    states = dataset.states[idx].copy()
    actions = dataset.actions[idx].astype(np.float64)
    rewards = dataset.rewards[idx].astype(np.float64)
    next_states = dataset.next_states[idx].copy()
    dones = dataset.dones[idx].astype(np.float64)

    if mode == "random_so2":
        angles = rng.uniform(0.0, 2.0 * math.pi, size=batch_size)
        for i, angle in enumerate(angles):
            states[i], actions[i], next_states[i] = _rotate_transition_arrays(
                states[i], actions[i], next_states[i], angle
            )
    elif mode == "full_group_c8":
        group = CyclicGroup(8)
        reps = []
        for g in group.elements():
            s, a, s2 = _rotate_transition_arrays(
                states, actions, next_states, group.angle(g)
            )
            reps.append((s, a, s2))
        states = np.concatenate([r[0] for r in reps])
        actions = np.concatenate([r[1] for r in reps])
        next_states = np.concatenate([r[2] for r in reps])
        rewards = np.tile(rewards, 8)
        dones = np.tile(dones, 8)

    return Batch(
        states=states,
        actions=actions,
        rewards=rewards,
        next_states=next_states,
        dones=dones,
    )
