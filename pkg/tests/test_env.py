import math
from dataclasses import replace

import numpy as np
import pytest

from heteromorpheus.env import (EnvConfig, SoftBodyState, VoxelWalkerEnv, build_structure, episode_return,
                                random_policy_baseline)
from heteromorpheus.morphology import parse_grid

from conftest import random_grid

WALKER = parse_grid({"name": "walker", "grid": [[3, 4, 3], [4, 3, 4]]})


def lifted(env, state, height=5.0):
    pos = state.positions.copy()
    pos[:, 1] += height
    return replace(state, positions=pos)


def test_one_by_two_lattice():
    env = VoxelWalkerEnv(parse_grid({"grid": [[3, 1]]}))
    s = env.structure
    assert env.num_vertices == 6
    edges = (s.spring_orient != 2).sum()
    diagonals = (s.spring_orient == 2).sum()
    assert (edges, diagonals) == (7, 4)
    shared = np.flatnonzero(s.spring_shared == 2)
    assert len(shared) == 1
    cfg = EnvConfig()
    assert s.spring_stiffness[shared[0]] == cfg.stiffness_actuator + cfg.stiffness_rigid


@pytest.mark.parametrize("seed", range(5))
def test_vertex_and_spring_counts(seed):
    rng = np.random.default_rng(seed)
    grid = random_grid(rng, 5, 5)
    env = VoxelWalkerEnv(grid)
    cells = grid.cells != 0
    corners = np.zeros((grid.rows + 1, grid.cols + 1), dtype=bool)
    for dr in (0, 1):
        for dc in (0, 1):
            corners[dr:dr + grid.rows, dc:dc + grid.cols] |= cells
    assert env.num_vertices == corners.sum()
    s = env.structure
    assert len(s.contrib_spring) == 6 * cells.sum()
    horizontal_pairs = (cells[:, 1:] & cells[:, :-1]).sum()
    vertical_pairs = (cells[1:] & cells[:-1]).sum()
    assert (s.spring_shared == 2).sum() == horizontal_pairs + vertical_pairs
    assert env.num_springs == 6 * cells.sum() - horizontal_pairs - vertical_pairs


def test_reset_placement_and_determinism():
    env = VoxelWalkerEnv(WALKER)
    a, oa = env.reset(7)
    b, ob = env.reset(7)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(oa.local, ob.local)
    assert a.positions[:, 1].min() == 0.0 and a.positions[:, 0].min() == 0.0
    assert (a.velocities == 0).all()
    c, _ = env.reset(8)
    assert not np.array_equal(a.positions, c.positions)
    lattice = np.stack([env.structure.vertex_lattice[:, 1], 2 - env.structure.vertex_lattice[:, 0]], axis=1)
    assert np.abs(a.positions - lattice).max() <= 2e-4


def test_rest_lengths_start_geometric():
    env = VoxelWalkerEnv(WALKER)
    s, _ = env.reset(0)
    a, b = env.structure.spring_ends.T
    np.testing.assert_allclose(s.rest_lengths, np.linalg.norm(s.positions[b] - s.positions[a], axis=1))


def test_initial_global_observation():
    env = VoxelWalkerEnv(WALKER)
    s, obs = env.reset(3)
    assert obs.local.shape == (6, 16) and obs.global_.shape == (3,)
    assert np.abs(obs.global_[:2]).max() <= 1e-4
    assert abs(obs.global_[2] - s.positions[:, 1].mean()) < 1e-15
    assert abs(obs.global_[2] - 1.0) < 2e-4


def test_action_scale():
    cfg = EnvConfig()
    assert cfg.action_scale(0.0) == pytest.approx(1.1, abs=1e-15)
    assert cfg.action_scale(-1.0) == pytest.approx(0.6, abs=1e-15)
    assert cfg.action_scale(1.0) == pytest.approx(1.6, abs=1e-15)
    assert cfg.action_scale(5.0) == pytest.approx(1.6, abs=1e-15)


def test_rest_lengths_for_single_actuators():
    cfg = replace(EnvConfig(), jitter=0.0)
    horiz = VoxelWalkerEnv(parse_grid({"grid": [[3, 1]]}), cfg)
    s = horiz.structure
    rest = horiz.rest_lengths_for(np.array([0.0, 0.7]))
    own = s.spring_shared == 1
    left_only = own & np.isin(np.arange(horiz.num_springs), s.contrib_spring[s.contrib_voxel == 0])
    h = left_only & (s.spring_orient == 0)
    v = left_only & (s.spring_orient == 1)
    d = left_only & (s.spring_orient == 2)
    np.testing.assert_allclose(rest[h], 1.1)
    np.testing.assert_allclose(rest[v], 1.0)
    np.testing.assert_allclose(rest[d], math.hypot(1.1, 1.0))
    # the rigid voxel's action is ignored
    np.testing.assert_array_equal(rest, horiz.rest_lengths_for(np.array([0.0, -0.9])))
    # the shared vertical edge is unaffected by a horizontal actuator
    shared = np.flatnonzero(s.spring_shared == 2)
    np.testing.assert_allclose(rest[shared], 1.0)

    vert = VoxelWalkerEnv(parse_grid({"grid": [[4, 1]]}), cfg)
    rest = vert.rest_lengths_for(np.array([0.0, 0.0]))
    shared = vert.structure.spring_shared == 2
    k_a, k_r = cfg.stiffness_actuator, cfg.stiffness_rigid
    np.testing.assert_allclose(rest[shared], (k_a * 1.1 + k_r * 1.0) / (k_a + k_r))


def test_step_errors_and_clamping():
    env = VoxelWalkerEnv(WALKER)
    s, _ = env.reset(0)
    with pytest.raises(ValueError):
        env.step(s, np.zeros(5))
    a, *_ = env.step(s, np.full(6, 3.0))
    b, *_ = env.step(s, np.full(6, 1.0))
    np.testing.assert_array_equal(a.positions, b.positions)


def test_free_fall_single_substep():
    cfg = replace(EnvConfig(), jitter=0.0)
    env = VoxelWalkerEnv(WALKER, cfg)
    s, _ = env.reset(0)
    s = lifted(env, s)
    # a = -0.2 gives scale 1.0, so every spring is at rest and gravity is the only force
    rest = env.rest_lengths_for(np.full(6, -0.2))
    np.testing.assert_allclose(rest, s.rest_lengths, atol=1e-15)
    _, vel = env.substep(s.positions, s.velocities, rest)
    np.testing.assert_allclose(vel, np.tile([0.0, -9.81 * cfg.dt], (env.num_vertices, 1)), atol=1e-12)


def test_free_fall_centre_of_mass_with_zero_actions():
    # internal forces cancel in the sum, so the CoM falls freely for any action
    env = VoxelWalkerEnv(WALKER)
    s, _ = env.reset(0)
    s = lifted(env, s)
    rest = env.rest_lengths_for(np.zeros(6))
    _, vel = env.substep(s.positions, s.velocities, rest)
    np.testing.assert_allclose(vel.mean(axis=0), [0.0, -9.81 * env.config.dt], atol=1e-12)


def test_symmetric_robot_does_not_drift():
    cfg = replace(EnvConfig(), jitter=0.0)
    for cells in ([[3, 1, 3]], [[4, 4], [1, 1]], [[2, 3, 2], [4, 0, 4]]):
        env = VoxelWalkerEnv(parse_grid({"grid": cells}), cfg)
        s, _ = env.reset(0)
        n = env.num_nodes
        for t in range(40):
            s, _, r, _ = env.step(s, np.full(n, math.sin(0.4 * t)))
            assert abs(r) < 1e-9


def test_episode_return_examples():
    assert episode_return([0.1, 0.2, -0.05]) == pytest.approx(0.25, abs=1e-15)
    env = VoxelWalkerEnv(parse_grid({"grid": [[1, 3, 1]]}), replace(EnvConfig(), jitter=0.0))
    s, _ = env.reset(0)
    # settle with scale-1 actions: the resting robot stays put
    rewards = []
    for _ in range(20):
        s, _, r, _ = env.step(s, np.full(3, -0.2))
        rewards.append(r)
    assert abs(episode_return(rewards)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_rewards_telescope(seed):
    rng = np.random.default_rng(seed)
    grid = random_grid(rng, 3, 3)
    env = VoxelWalkerEnv(grid)
    s, _ = env.reset(seed)
    x0 = env.center_of_mass(s)[0]
    rewards = []
    done = False
    while not done:
        s, _, r, done = env.step(s, rng.uniform(-1, 1, env.num_nodes))
        rewards.append(r)
    assert len(rewards) == env.config.horizon
    assert abs(episode_return(rewards) - (env.center_of_mass(s)[0] - x0)) < 1e-9
    with pytest.raises(RuntimeError):
        env.step(s, np.zeros(env.num_nodes))


def test_divergence_ends_episode_with_penalty():
    env = VoxelWalkerEnv(WALKER)
    s, _ = env.reset(0)
    s = replace(s, velocities=np.full_like(s.velocities, np.inf))
    s2, obs, r, done = env.step(s, np.zeros(6))
    assert done and r == env.config.divergence_penalty
    assert np.isfinite(obs.local).all() and np.isfinite(obs.global_).all()


def test_passivity_without_contact():
    env = VoxelWalkerEnv(WALKER)
    s, _ = env.reset(0)
    s = lifted(env, s, 1000.0)
    rest = env.rest_lengths_for(np.zeros(6))  # stretched springs start oscillating
    s = replace(s, rest_lengths=rest)
    pos, vel = s.positions, s.velocities
    energies = [env.mechanical_energy(s)]
    for _ in range(100):
        pos, vel = env.substep(pos, vel, rest)
        assert pos[:, 1].min() > 0
        energies.append(env.mechanical_energy(SoftBodyState(pos, vel, rest)))
    energies = np.array(energies)
    assert (np.diff(energies) <= 1e-9 * abs(energies[0])).all()
    assert energies[-1] < energies[0]


def test_determinism_of_trajectories():
    env = VoxelWalkerEnv(WALKER)
    actions = np.random.default_rng(0).uniform(-1, 1, (30, 6))
    runs = []
    for _ in range(2):
        s, _ = env.reset(11)
        for a in actions:
            s, obs, _, _ = env.step(s, a)
        runs.append((s.positions.copy(), obs.local.copy()))
    np.testing.assert_array_equal(runs[0][0], runs[1][0])
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_observation_locality():
    env = VoxelWalkerEnv(WALKER)
    s, _ = env.reset(0)
    s, obs, _, _ = env.step(s, np.zeros(6))
    corners = env.structure.voxel_corners
    com = s.positions.mean(axis=0)
    for node in range(6):
        c = corners[node]
        np.testing.assert_allclose(obs.local[node, :8], (s.positions[c] - com).ravel(), atol=1e-15)
        np.testing.assert_allclose(obs.local[node, 8:], s.velocities[c].ravel(), atol=1e-15)
    # moving a vertex outside voxel 0 changes row 0 only through the CoM
    far = np.setdiff1d(np.arange(env.num_vertices), corners[0])[0]
    pos = s.positions.copy()
    pos[far] += [0.3, 0.0]
    moved = env.observe(replace(s, positions=pos))
    shift = 0.3 / env.num_vertices
    np.testing.assert_allclose(moved.local[0, 0:8:2], obs.local[0, 0:8:2] - shift, atol=1e-14)
    np.testing.assert_array_equal(moved.local[0, 8:], obs.local[0, 8:])


def test_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(damping=0.0)
    with pytest.raises(ValueError):
        EnvConfig(substeps=1)  # dt too coarse for the stiffest springs
    with pytest.raises(ValueError):
        EnvConfig(min_scale=1.6, max_scale=0.6)


def test_random_baseline_is_reproducible():
    a = random_policy_baseline(WALKER, episodes=2, seed=5)
    b = random_policy_baseline(WALKER, episodes=2, seed=5)
    assert a == b and math.isfinite(a)
