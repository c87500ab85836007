"""2D mass-spring voxel locomotion environment.

Each voxel is a unit square whose corners are shared lattice vertices of unit
mass.  Voxels contribute four edge springs and two diagonal (shear) springs;
an edge shared by two voxels is one spring carrying both contributions, so
its stiffness is the sum and its rest length the stiffness-weighted mean.
Actuator voxels rescale the rest lengths they contribute to.  Ground contact
is a penalty spring-damper plus Coulomb friction clamped so that friction can
stop a sliding vertex but never reverse it within a substep.

The reward of a control step is the x-displacement of the centre of mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .morphology import H_ACTUATOR, V_ACTUATOR, VoxelGrid

LOCAL_OBS_DIM = 16
GLOBAL_OBS_DIM = 3

# corner order used by observations: top-left, top-right, bottom-left, bottom-right
_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))

ORIENT_HORIZONTAL, ORIENT_VERTICAL, ORIENT_DIAGONAL = 0, 1, 2


@dataclass(frozen=True)
class EnvConfig:
    voxel_size: float = 1.0
    vertex_mass: float = 1.0
    stiffness_rigid: float = 800.0
    stiffness_soft: float = 120.0
    stiffness_actuator: float = 300.0
    shear_ratio: float = 0.5
    damping: float = 20.0
    gravity: float = 9.81
    ground_stiffness: float = 2000.0
    ground_damping: float = 10.0
    friction: float = 0.8
    control_dt: float = 0.05
    substeps: int = 10
    horizon: int = 128
    min_scale: float = 0.6
    max_scale: float = 1.6
    jitter: float = 1e-4
    divergence_penalty: float = -10.0

    def __post_init__(self):
        positive = ("voxel_size", "vertex_mass", "stiffness_rigid", "stiffness_soft", "stiffness_actuator",
                    "shear_ratio", "damping", "gravity", "ground_stiffness", "ground_damping", "friction",
                    "control_dt", "min_scale", "max_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"EnvConfig.{name} must be positive")
        if self.substeps < 1 or self.horizon < 1:
            raise ValueError("substeps and horizon must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if not self.min_scale < self.max_scale:
            raise ValueError("min_scale must be below max_scale")
        _check_integrator_stability(self)

    @property
    def dt(self) -> float:
        return self.control_dt / self.substeps

    def stiffness(self, code: int) -> float:
        if code == 1:
            return self.stiffness_rigid
        if code == 2:
            return self.stiffness_soft
        return self.stiffness_actuator

    def action_scale(self, action):
        """Affine map of [-1, 1] onto [min_scale, max_scale] (1.1 + 0.5 a by default)."""
        a = np.clip(action, -1.0, 1.0)
        mid = 0.5 * (self.min_scale + self.max_scale)
        half = 0.5 * (self.max_scale - self.min_scale)
        return mid + half * a


def _check_integrator_stability(cfg: EnvConfig) -> None:
    # free spring-mass test at the stiffest plausible vertex load: two shared
    # rigid edges plus two diagonals plus ground contact
    k = 4.0 * cfg.stiffness_rigid + 2.0 * cfg.shear_ratio * cfg.stiffness_rigid + cfg.ground_stiffness
    dt, m = cfg.dt, cfg.vertex_mass
    x, v = 0.1, 0.0
    e0 = 0.5 * k * x * x
    for _ in range(2000):
        v -= dt * k * x / m
        x += dt * v
        if not 0.5 * m * v * v + 0.5 * k * x * x <= 4.0 * e0:
            raise ValueError(f"substep dt={dt:g} is unstable for stiffness {k:g}; increase substeps")


@dataclass(frozen=True)
class SoftBodyStructure:
    """Static topology of a robot: vertices, springs and which voxel owns what."""

    vertex_lattice: np.ndarray   # (V, 2) lattice (row, col) of each vertex
    voxel_corners: np.ndarray    # (n, 4) vertex ids in _CORNERS order, graph node order
    voxel_codes: np.ndarray      # (n,)
    spring_ends: np.ndarray      # (S, 2)
    spring_orient: np.ndarray    # (S,)
    spring_shared: np.ndarray    # (S,) number of voxels contributing
    contrib_spring: np.ndarray   # (C,) spring id of each per-voxel contribution
    contrib_voxel: np.ndarray    # (C,)
    contrib_orient: np.ndarray   # (C,)
    contrib_stiffness: np.ndarray  # (C,)
    spring_stiffness: np.ndarray   # (S,) summed


@dataclass
class SoftBodyState:
    positions: np.ndarray
    velocities: np.ndarray
    rest_lengths: np.ndarray
    step_count: int = 0
    done: bool = False

    def copy(self) -> "SoftBodyState":
        return replace(self, positions=self.positions.copy(), velocities=self.velocities.copy(),
                       rest_lengths=self.rest_lengths.copy())


@dataclass
class Observation:
    local: np.ndarray    # (n, 16)
    global_: np.ndarray  # (3,)


def build_structure(grid: VoxelGrid, config: EnvConfig) -> SoftBodyStructure:
    cells = grid.cells
    voxels = np.argwhere(cells != 0)
    vertex_id: dict[tuple[int, int], int] = {}
    for r, c in voxels:
        for dr, dc in _CORNERS:
            vertex_id.setdefault((int(r) + dr, int(c) + dc), len(vertex_id))
    lattice = np.array(sorted(vertex_id, key=vertex_id.get), dtype=np.int64)

    spring_of: dict[tuple[int, int], int] = {}
    ends, orient = [], []
    c_spring, c_voxel, c_orient, c_k = [], [], [], []
    corners = np.zeros((len(voxels), 4), dtype=np.int64)

    def add(a, b, o, voxel, k):
        key = (min(a, b), max(a, b))
        sid = spring_of.get(key)
        if sid is None:
            sid = len(ends)
            spring_of[key] = sid
            ends.append(key)
            orient.append(o)
        c_spring.append(sid)
        c_voxel.append(voxel)
        c_orient.append(o)
        c_k.append(k)

    for v, (r, c) in enumerate(voxels):
        tl, tr, bl, br = (vertex_id[(int(r) + dr, int(c) + dc)] for dr, dc in _CORNERS)
        corners[v] = (tl, tr, bl, br)
        k = config.stiffness(int(cells[r, c]))
        add(tl, tr, ORIENT_HORIZONTAL, v, k)
        add(bl, br, ORIENT_HORIZONTAL, v, k)
        add(tl, bl, ORIENT_VERTICAL, v, k)
        add(tr, br, ORIENT_VERTICAL, v, k)
        add(tl, br, ORIENT_DIAGONAL, v, k * config.shear_ratio)
        add(tr, bl, ORIENT_DIAGONAL, v, k * config.shear_ratio)

    c_spring = np.array(c_spring, dtype=np.int64)
    c_k = np.array(c_k, dtype=np.float64)
    n_springs = len(ends)
    return SoftBodyStructure(
        vertex_lattice=lattice,
        voxel_corners=corners,
        voxel_codes=cells[voxels[:, 0], voxels[:, 1]].astype(np.int64),
        spring_ends=np.array(ends, dtype=np.int64).reshape(-1, 2),
        spring_orient=np.array(orient, dtype=np.int64),
        spring_shared=np.bincount(c_spring, minlength=n_springs),
        contrib_spring=c_spring,
        contrib_voxel=np.array(c_voxel, dtype=np.int64),
        contrib_orient=np.array(c_orient, dtype=np.int64),
        contrib_stiffness=c_k,
        spring_stiffness=np.bincount(c_spring, weights=c_k, minlength=n_springs),
    )


class VoxelWalkerEnv:
    """Locomotion on flat ground.  The environment object is immutable; all
    per-episode data lives in :class:`SoftBodyState`."""

    def __init__(self, grid: VoxelGrid, config: EnvConfig | None = None):
        self.grid = grid
        self.config = config or EnvConfig()
        self.structure = build_structure(grid, self.config)
        s = self.structure
        self.num_nodes = len(s.voxel_codes)
        self.num_vertices = len(s.vertex_lattice)
        self.num_springs = len(s.spring_ends)
        self._h_act = s.voxel_codes == H_ACTUATOR
        self._v_act = s.voxel_codes == V_ACTUATOR
        self._is_actuator = self._h_act | self._v_act

    # -- construction -------------------------------------------------------

    def reset(self, seed: int | None = 0) -> tuple[SoftBodyState, Observation]:
        cfg = self.config
        lat = self.structure.vertex_lattice
        rows = self.grid.rows
        pos = np.empty((self.num_vertices, 2))
        pos[:, 0] = lat[:, 1] * cfg.voxel_size
        pos[:, 1] = (rows - lat[:, 0]) * cfg.voxel_size
        if cfg.jitter > 0:
            rng = np.random.default_rng(seed)
            pos += rng.uniform(-cfg.jitter, cfg.jitter, size=pos.shape)
        pos -= pos.min(axis=0)
        rest = self._geometric_lengths(pos)
        state = SoftBodyState(positions=pos, velocities=np.zeros_like(pos), rest_lengths=rest)
        return state, self.observe(state)

    def _geometric_lengths(self, pos: np.ndarray) -> np.ndarray:
        a, b = self.structure.spring_ends.T
        return np.linalg.norm(pos[b] - pos[a], axis=1)

    # -- actuation ----------------------------------------------------------

    def rest_lengths_for(self, actions: np.ndarray) -> np.ndarray:
        """Per-spring rest lengths implied by per-node actions (clamped to [-1, 1])."""
        s = self.structure
        scale = self.config.action_scale(np.asarray(actions, dtype=np.float64))
        sx = np.where(self._h_act, scale, 1.0)[s.contrib_voxel]
        sy = np.where(self._v_act, scale, 1.0)[s.contrib_voxel]
        base = self.config.voxel_size
        lengths = np.where(
            s.contrib_orient == ORIENT_HORIZONTAL, sx * base,
            np.where(s.contrib_orient == ORIENT_VERTICAL, sy * base, np.hypot(sx, sy) * base),
        )
        weighted = np.bincount(s.contrib_spring, weights=s.contrib_stiffness * lengths,
                               minlength=self.num_springs)
        return weighted / s.spring_stiffness

    # -- dynamics -----------------------------------------------------------

    def internal_forces(self, pos: np.ndarray, vel: np.ndarray, rest: np.ndarray) -> np.ndarray:
        s = self.structure
        a, b = s.spring_ends[:, 0], s.spring_ends[:, 1]
        d = pos[b] - pos[a]
        length = np.sqrt((d * d).sum(axis=1))
        unit = d / np.maximum(length, 1e-12)[:, None]
        rel_v = ((vel[b] - vel[a]) * unit).sum(axis=1)
        mag = s.spring_stiffness * (length - rest) + self.config.damping * rel_v
        f = unit * mag[:, None]
        forces = np.zeros_like(pos)
        np.add.at(forces, a, f)
        np.add.at(forces, b, -f)
        return forces

    def substep(self, pos: np.ndarray, vel: np.ndarray, rest: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One semi-implicit Euler substep; returns new (positions, velocities)."""
        cfg = self.config
        dt, m = cfg.dt, cfg.vertex_mass
        forces = self.internal_forces(pos, vel, rest)
        forces[:, 1] -= m * cfg.gravity
        depth = -pos[:, 1]
        contact = depth > 0
        if contact.any():
            normal = np.where(contact, cfg.ground_stiffness * depth - cfg.ground_damping * vel[:, 1], 0.0)
            normal = np.maximum(normal, 0.0)
            forces[:, 1] += normal
            # friction needed to stop tangential motion this substep, clamped by mu * N
            vx_free = vel[:, 0] + dt * forces[:, 0] / m
            limit = cfg.friction * normal
            forces[:, 0] += np.clip(-m * vx_free / dt, -limit, limit)
        vel = vel + dt * forces / m
        pos = pos + dt * vel
        return pos, vel

    def step(self, state: SoftBodyState, actions) -> tuple[SoftBodyState, Observation, float, bool]:
        actions = np.asarray(actions, dtype=np.float64).reshape(-1)
        if actions.shape[0] != self.num_nodes:
            raise ValueError(f"expected {self.num_nodes} actions, got {actions.shape[0]}")
        if state.done:
            raise RuntimeError("episode finished; call reset()")
        cfg = self.config
        rest = self.rest_lengths_for(np.nan_to_num(actions))
        pos, vel = state.positions, state.velocities
        x0 = pos[:, 0].mean()
        with np.errstate(all="ignore"):
            for _ in range(cfg.substeps):
                pos, vel = self.substep(pos, vel, rest)
        count = state.step_count + 1
        finite = bool(np.isfinite(pos).all() and np.isfinite(vel).all())
        if not finite:
            new = SoftBodyState(positions=state.positions.copy(), velocities=np.zeros_like(vel),
                                rest_lengths=rest, step_count=count, done=True)
            return new, self.observe(new), float(cfg.divergence_penalty), True
        reward = float(pos[:, 0].mean() - x0)
        done = count >= cfg.horizon
        new = SoftBodyState(positions=pos, velocities=vel, rest_lengths=rest, step_count=count, done=done)
        return new, self.observe(new), reward, done

    # -- observation and diagnostics -----------------------------------------

    def observe(self, state: SoftBodyState) -> Observation:
        pos, vel = state.positions, state.velocities
        com = pos.mean(axis=0)
        corners = self.structure.voxel_corners
        rel = (pos[corners] - com).reshape(self.num_nodes, 8)
        cv = vel[corners].reshape(self.num_nodes, 8)
        local = np.concatenate([rel, cv], axis=1)
        global_ = np.array([*vel.mean(axis=0), com[1]])
        return Observation(local=local, global_=global_)

    def center_of_mass(self, state: SoftBodyState) -> np.ndarray:
        return state.positions.mean(axis=0)

    def mechanical_energy(self, state: SoftBodyState) -> float:
        """Kinetic + spring + gravitational energy (ground contact excluded)."""
        cfg = self.config
        s = self.structure
        pos, vel = state.positions, state.velocities
        a, b = s.spring_ends.T
        stretch = np.linalg.norm(pos[b] - pos[a], axis=1) - state.rest_lengths
        kinetic = 0.5 * cfg.vertex_mass * (vel * vel).sum()
        elastic = 0.5 * (s.spring_stiffness * stretch * stretch).sum()
        potential = cfg.vertex_mass * cfg.gravity * pos[:, 1].sum()
        return float(kinetic + elastic + potential)


def episode_return(rewards) -> float:
    return float(np.sum(np.asarray(rewards, dtype=np.float64)))


def random_policy_baseline(grid: VoxelGrid, config: EnvConfig | None = None, episodes: int = 8,
                           seed: int = 0) -> float:
    """Mean return of uniform random actions in [-1, 1]."""
    env = VoxelWalkerEnv(grid, config)
    rng = np.random.default_rng(seed)
    returns = []
    for ep in range(episodes):
        state, _ = env.reset(seed=seed + ep)
        total = 0.0
        done = False
        while not done:
            state, _, r, done = env.step(state, rng.uniform(-1.0, 1.0, env.num_nodes))
            total += r
        returns.append(total)
    return float(np.mean(returns))
