import json

import numpy as np
import pytest

from equirl.data import (
    DatasetError,
    FORMAT_VERSION,
    OfflineDataset,
    collect_dataset,
    load,
    sample_batch,
    save,
)
from equirl.env import EnvConfig


def tiny_config():
    return EnvConfig(resolution=17, max_steps=30)


@pytest.fixture(scope="module")
def expert_dataset():
    return collect_dataset(tiny_config(), "expert", seed=0, n_episodes=5)


def test_collect_episode_budget_expert(expert_dataset):
    d = expert_dataset
    assert d.manifest.n_episodes == 5
    assert d.dones.sum() == 5
    # expert episodes all end in success
    terminal_rewards = d.rewards[d.dones == 1.0]
    np.testing.assert_array_equal(terminal_rewards, np.ones(5))
    assert d.manifest.behavioral_return > 0.85


def test_collect_transition_budget_stops_at_episode_end():
    cfg = tiny_config()
    d = collect_dataset(cfg, "medium", seed=1, n_transitions=200)
    assert 200 <= len(d) < 200 + cfg.max_steps
    assert d.dones[-1] == 1.0


def test_collect_requires_exactly_one_budget():
    with pytest.raises(DatasetError):
        collect_dataset(tiny_config(), "expert", seed=0)
    with pytest.raises(DatasetError):
        collect_dataset(tiny_config(), "expert", seed=0, n_episodes=2, n_transitions=10)


def test_collect_is_deterministic(tmp_path):
    a = collect_dataset(tiny_config(), "medium", seed=7, n_episodes=3)
    b = collect_dataset(tiny_config(), "medium", seed=7, n_episodes=3)
    pa = save(a, tmp_path / "a")
    pb = save(b, tmp_path / "b")
    assert pa.read_bytes() == pb.read_bytes()


def test_save_load_roundtrip_is_byte_exact(expert_dataset, tmp_path):
    p1 = save(expert_dataset, tmp_path / "d1")
    loaded = load(tmp_path / "d1")
    p2 = save(loaded, tmp_path / "d2")
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(loaded.states, expert_dataset.states)
    np.testing.assert_array_equal(loaded.actions, expert_dataset.actions)
    assert loaded.manifest == expert_dataset.manifest


def test_load_rejects_bad_magic(expert_dataset, tmp_path):
    path = save(expert_dataset, tmp_path / "d")
    raw = bytearray(path.read_bytes())
    raw[:4] = b"JUNK"
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="magic"):
        load(tmp_path / "d")


def test_load_rejects_truncation(expert_dataset, tmp_path):
    path = save(expert_dataset, tmp_path / "d")
    raw = path.read_bytes()
    path.write_bytes(raw[:-40])
    with pytest.raises(DatasetError, match="refusing to truncate"):
        load(tmp_path / "d")


def test_load_rejects_manifest_count_mismatch(expert_dataset, tmp_path):
    save(expert_dataset, tmp_path / "d")
    mpath = tmp_path / "d.manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["n_transitions"] -= 1
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(DatasetError):
        load(tmp_path / "d")


def test_episode_ids_follow_done_flags(expert_dataset):
    ids = expert_dataset.episode_ids
    assert ids[0] == 0
    assert ids[-1] == expert_dataset.manifest.n_episodes - 1
    jumps = np.flatnonzero(np.diff(ids))
    np.testing.assert_array_equal(jumps, np.flatnonzero(expert_dataset.dones)[:-1])


def test_sample_batch_mode_none_returns_stored_transitions(expert_dataset):
    rng = np.random.default_rng(0)
    batch = sample_batch(expert_dataset, rng, 16, mode="none")
    assert len(batch) == 16
    # every sampled row, bit for bit, appears in the dataset
    for i in range(16):
        matches = np.flatnonzero(
            (expert_dataset.actions == batch.actions[i].astype(np.float32)).all(axis=1)
            & (expert_dataset.rewards == batch.rewards[i])
        )
        assert any(
            np.array_equal(expert_dataset.states[j], batch.states[i]) for j in matches
        )


class _ZeroAngleRng:
    """Stub generator: uniform() -> 0 angles, integers delegated to a real rng."""

    def __init__(self, seed):
        self._rng = np.random.default_rng(seed)

    def integers(self, *args, **kwargs):
        return self._rng.integers(*args, **kwargs)

    def uniform(self, low, high, size=None):
        return np.zeros(size) if size is not None else 0.0


def test_random_so2_with_zero_angle_is_identity(expert_dataset):
    real = np.random.default_rng(3)
    stub = _ZeroAngleRng(3)
    plain = sample_batch(expert_dataset, real, 8, mode="none")
    augmented = sample_batch(expert_dataset, stub, 8, mode="random_so2")
    np.testing.assert_array_equal(plain.states, augmented.states)
    np.testing.assert_array_equal(plain.actions, augmented.actions)


def test_random_so2_preserves_invariant_components_and_xy_norm(expert_dataset):
    rng_a = np.random.default_rng(5)
    rng_b = np.random.default_rng(5)
    plain = sample_batch(expert_dataset, rng_a, 64, mode="none")
    augmented = sample_batch(expert_dataset, rng_b, 64, mode="random_so2")
    np.testing.assert_array_equal(plain.rewards, augmented.rewards)
    np.testing.assert_array_equal(plain.dones, augmented.dones)
    np.testing.assert_array_equal(plain.actions[:, [0, 3, 4]], augmented.actions[:, [0, 3, 4]])
    np.testing.assert_allclose(
        np.linalg.norm(plain.actions[:, 1:3], axis=1),
        np.linalg.norm(augmented.actions[:, 1:3], axis=1),
        atol=1e-12,
    )


def test_full_group_c8_expands_batch_eightfold(expert_dataset):
    rng = np.random.default_rng(9)
    batch = sample_batch(expert_dataset, rng, 64, mode="full_group_c8")
    assert len(batch) == 512
    for k in range(8):
        block = slice(64 * k, 64 * (k + 1))
        np.testing.assert_array_equal(batch.rewards[block], batch.rewards[:64])
        np.testing.assert_array_equal(batch.dones[block], batch.dones[:64])
        np.testing.assert_array_equal(
            batch.actions[block][:, [0, 3, 4]], batch.actions[:64][:, [0, 3, 4]]
        )
    # quarter-turn copies preserve the xy norm exactly
    np.testing.assert_array_equal(
        np.linalg.norm(batch.actions[128:192, 1:3], axis=1),
        np.linalg.norm(batch.actions[:64, 1:3], axis=1),
    )


def _synthetic_ten_item_dataset():
    from equirl.data import DatasetManifest

    n = 10
    states = np.zeros((n, 1, 3, 3), dtype=np.float32)
    next_states = np.zeros_like(states)
    actions = np.zeros((n, 5), dtype=np.float32)
    actions[:, 3] = np.linspace(-0.05, 0.05, n)  # unique dz tags each row
    manifest = DatasetManifest(
        env_name="synthetic",
        env_config_hash="0" * 12,
        observation_shape=(1, 3, 3),
        action_dim=5,
        n_episodes=1,
        n_transitions=n,
        policy="expert",
        behavioral_return=0.0,
        seed=0,
    )
    dones = np.zeros(n, dtype=np.float32)
    dones[-1] = 1.0
    return OfflineDataset(states, actions, np.zeros(n, np.float32), dones, next_states, manifest)


def test_sampling_is_uniform():
    ten = _synthetic_ten_item_dataset()
    rng = np.random.default_rng(11)
    draws = 100_000
    got = sample_batch(ten, rng, draws, mode="none")
    tags = np.linspace(-0.05, 0.05, 10).astype(np.float32).astype(np.float64)
    counts = np.array([(got.actions[:, 3] == v).sum() for v in tags])
    assert counts.sum() == draws
    p = 0.1
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 5 * sigma)


def test_sample_batch_validates_inputs(expert_dataset):
    rng = np.random.default_rng(0)
    with pytest.raises(DatasetError):
        sample_batch(expert_dataset, rng, 0)
    with pytest.raises(DatasetError):
        sample_batch(expert_dataset, rng, 4, mode="mirror")
