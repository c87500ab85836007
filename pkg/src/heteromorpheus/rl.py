"""PPO with GAE over a population of morphologies sharing one policy.

Each morphology owns a group of environments.  Forward passes are batched over
the environments of one morphology (all share a graph); there is no padding
across morphologies.  The optimised quantity is the average episode return
over morphologies.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint_with_metadata, read_checkpoint, save_checkpoint, write_checkpoint
from .env import EnvConfig, Observation, SoftBodyState, VoxelWalkerEnv
from .model import (ModelConfig, Parameters, forward, gaussian_entropy, gaussian_log_prob,
                    init_parameters, log_prob_and_sample)
from .morphology import HeteroGraph, VoxelGrid, build_graph
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    horizon: int = 128
    envs_per_morphology: int = 4
    total_updates: int = 1000

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_eps <= 0 or self.learning_rate <= 0 or self.max_grad_norm <= 0:
            raise ValueError("clip_eps, learning_rate and max_grad_norm must be positive")
        if min(self.epochs, self.minibatches, self.horizon, self.envs_per_morphology) < 1:
            raise ValueError("epochs, minibatches, horizon and envs_per_morphology must be >= 1")
        if self.total_updates < 0:
            raise ValueError("total_updates must be >= 0")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PPOConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ppo config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    def __init__(self, params: Parameters, lr: float = 3e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.t = 0

    def step(self, params: Parameters, grads: dict[str, np.ndarray]) -> Parameters:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        new: Parameters = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            new[k] = Tensor(p.data - update, requires_grad=True, name=k)
        return new


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if not math.isfinite(total):
        raise TrainingError("non-finite gradient norm")
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# ---------------------------------------------------------------------------
# advantages


def compute_gae(rewards, values, dones, bootstrap, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates along axis 0 (time).

    ``dones[t]`` marks that the episode ended at step t, so ``V(s_{t+1})``
    is not bootstrapped across that boundary.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap, dtype=np.float64)
    next_adv = np.zeros_like(rewards[0])
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(batches: Sequence["RolloutBatch"]) -> None:
    """Zero-mean, unit-variance advantages jointly over all morphologies (in place)."""
    flat = np.concatenate([b.advantages.reshape(-1) for b in batches])
    mu, sd = flat.mean(), flat.std()
    for b in batches:
        b.advantages = (b.advantages - mu) / (sd + 1e-8)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBatch:
    """Transitions for one morphology; arrays are ``(time, env, ...)``."""

    name: str
    graph: HeteroGraph
    local_obs: np.ndarray
    global_obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episode_returns: list[float] = field(default_factory=list)

    @property
    def num_transitions(self) -> int:
        return self.rewards.size


class MorphologyRunner:
    """A morphology, its graph and a group of environments with persistent state."""

    def __init__(self, grid: VoxelGrid, model_config: ModelConfig, env_config: EnvConfig,
                 num_envs: int, seed: int, index: int = 0):
        self.grid = grid
        self.name = grid.name
        self.graph = build_graph(grid, model_config.scheme)
        self.env = VoxelWalkerEnv(grid, env_config)
        self.seed = seed
        self.index = index
        self.episode_count = [0] * num_envs
        self.running_return = [0.0] * num_envs
        self.states: list[SoftBodyState] = []
        self.obs: list[Observation] = []
        for e in range(num_envs):
            state, obs = self.env.reset(self._reset_seed(e))
            self.states.append(state)
            self.obs.append(obs)

    @property
    def num_envs(self) -> int:
        return len(self.states)

    def _reset_seed(self, env_index: int) -> int:
        seq = np.random.SeedSequence([self.seed, self.index, env_index, self.episode_count[env_index]])
        return int(seq.generate_state(1)[0])

    def stacked_obs(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.stack([o.local for o in self.obs]), np.stack([o.global_ for o in self.obs]))

    def step_env(self, e: int, action: np.ndarray) -> tuple[float, bool, float | None]:
        state, obs, reward, done = self.env.step(self.states[e], action)
        self.running_return[e] += reward
        finished = None
        if done:
            finished = self.running_return[e]
            self.running_return[e] = 0.0
            self.episode_count[e] += 1
            state, obs = self.env.reset(self._reset_seed(e))
        self.states[e] = state
        self.obs[e] = obs
        return reward, done, finished


def _worker_count() -> int:
    raw = os.environ.get("HM_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"HM_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def collect_rollouts(params: Parameters, model_config: ModelConfig, runners: Sequence[MorphologyRunner],
                     horizon: int, rng: np.random.Generator, workers: int | None = None) -> list[RolloutBatch]:
    """Step every environment ``horizon`` times under the current policy.

    Environments auto-reset when an episode ends.  Results are keyed by
    (morphology, env, step), so the env-stepping thread pool cannot change them.
    """
    workers = workers or 1
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    batches = []
    try:
        for runner in runners:
            E, n = runner.num_envs, runner.graph.num_nodes
            local = np.zeros((horizon, E, n, model_config.local_dim))
            glob = np.zeros((horizon, E, model_config.global_dim))
            acts = np.zeros((horizon, E, n))
            logps = np.zeros((horizon, E))
            rews = np.zeros((horizon, E))
            vals = np.zeros((horizon, E))
            dones = np.zeros((horizon, E))
            finished: list[float] = []
            for t in range(horizon):
                lo, gl = runner.stacked_obs()
                out = forward(lo, gl, runner.graph, params, model_config)
                action, logp = log_prob_and_sample(out.mu, model_config.log_std, rng=rng)
                local[t], glob[t], acts[t] = lo, gl, action
                logps[t], vals[t] = logp.data, out.value.data
                if pool is None:
                    results = [runner.step_env(e, action[e]) for e in range(E)]
                else:
                    results = list(pool.map(runner.step_env, range(E), action))
                for e, (r, d, ep_ret) in enumerate(results):
                    rews[t, e], dones[t, e] = r, float(d)
                    if ep_ret is not None:
                        finished.append(ep_ret)
            lo, gl = runner.stacked_obs()
            bootstrap = forward(lo, gl, runner.graph, params, model_config).value.data.copy()
            batches.append(RolloutBatch(runner.name, runner.graph, local, glob, acts, logps, rews, vals,
                                        dones, bootstrap, episode_returns=finished))
    finally:
        if pool is not None:
            pool.shutdown()
    return batches


# ---------------------------------------------------------------------------
# update


def clipped_objective(ratio, advantages, clip_eps: float) -> np.ndarray:
    """Per-sample ``min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    return np.minimum(ratio * advantages, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages)


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_frac: float
    grad_norm: float
    first_ratio_max_dev: float
    first_approx_kl: float


def _minibatch_loss(params, model_config, ppo, parts, total_count):
    """Build the scalar loss over one minibatch (a list of per-morphology slices).

    Returns the loss tensor and numpy diagnostics.  The clipped branch of
    the surrogate is a constant wherever it is selected, so it enters as data.
    """
    policy_terms, value_terms = [], []
    ratios, kl_terms, clipped = [], [], []
    entropy = 0.0
    for graph, lo, gl, act, old_logp, adv, ret in parts:
        out = forward(lo, gl, graph, params, model_config)
        new_logp = gaussian_log_prob(out.mu, model_config.log_std, act)
        ratio = T.exp(T.sub(new_logp, Tensor(old_logp)))
        r = ratio.data
        lo_b, hi_b = 1.0 - ppo.clip_eps, 1.0 + ppo.clip_eps
        use_unclipped = r * adv <= np.clip(r, lo_b, hi_b) * adv
        const = np.where(use_unclipped, 0.0, np.clip(r, lo_b, hi_b) * adv)
        surrogate = T.add(T.mul(ratio, Tensor(np.where(use_unclipped, adv, 0.0))), Tensor(const))
        policy_terms.append(T.sum_(surrogate))
        diff = T.sub(out.value, Tensor(ret))
        value_terms.append(T.sum_(T.mul(diff, diff)))
        ratios.append(r)
        log_r = new_logp.data - old_logp
        kl_terms.append((r - 1.0) - log_r)
        clipped.append(np.abs(r - 1.0) > ppo.clip_eps)
        entropy += gaussian_entropy(graph.num_nodes, model_config.log_std) * len(r)
    inv = 1.0 / total_count
    policy_loss = T.scalar_mul(_total(policy_terms), -inv)
    value_loss = T.scalar_mul(_total(value_terms), 0.5 * inv)
    entropy /= total_count
    loss = T.add(T.add(policy_loss, T.scalar_mul(value_loss, ppo.value_coef)),
                 Tensor(-ppo.entropy_coef * entropy))
    r_all = np.concatenate(ratios)
    diag = dict(policy_loss=policy_loss.item(), value_loss=value_loss.item(), entropy=entropy,
                approx_kl=float(np.concatenate(kl_terms).mean()),
                clip_frac=float(np.concatenate(clipped).mean()),
                ratio_max_dev=float(np.abs(r_all - 1.0).max()))
    return loss, diag


def _total(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc


def ppo_update(params: Parameters, optimizer: Adam, batches: Sequence[RolloutBatch], model_config: ModelConfig,
               ppo: PPOConfig, rng: np.random.Generator) -> tuple[Parameters, UpdateStats]:
    """Several epochs of clipped-surrogate minibatch steps.

    Advantages must already be computed; they are normalised here jointly
    across morphologies.
    """
    if any(b.advantages is None for b in batches):
        raise TrainingError("compute advantages before ppo_update")
    normalize_advantages(batches)
    flat = []
    for b in batches:
        N = b.rewards.size
        n = b.graph.num_nodes
        flat.append((b.graph, b.local_obs.reshape(N, n, -1), b.global_obs.reshape(N, -1),
                     b.actions.reshape(N, n), b.log_probs.reshape(N), b.advantages.reshape(N),
                     b.returns.reshape(N)))
    history: list[dict[str, float]] = []
    grad_norms = []
    first_dev = first_kl = None
    for _ in range(ppo.epochs):
        splits = [np.array_split(rng.permutation(len(f[4])), ppo.minibatches) for f in flat]
        for j in range(ppo.minibatches):
            parts = []
            for f, split in zip(flat, splits):
                idx = split[j]
                if len(idx):
                    parts.append((f[0], f[1][idx], f[2][idx], f[3][idx], f[4][idx], f[5][idx], f[6][idx]))
            count = sum(len(p[4]) for p in parts)
            try:
                with T.Tape() as tape:
                    loss, diag = _minibatch_loss(params, model_config, ppo, parts, count)
            except T.NonFiniteError as exc:
                raise TrainingError(f"non-finite value in PPO loss: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite PPO loss ({diag})")
            grads = tape.backward(loss, params)
            grads, norm = clip_grad_norm({k: g.data for k, g in grads.items()}, ppo.max_grad_norm)
            if first_dev is None:
                first_dev, first_kl = diag["ratio_max_dev"], diag["approx_kl"]
            params = optimizer.step(params, grads)
            history.append(diag)
            grad_norms.append(norm)
    avg = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    return params, UpdateStats(policy_loss=avg["policy_loss"], value_loss=avg["value_loss"],
                               entropy=avg["entropy"], approx_kl=avg["approx_kl"],
                               clip_frac=avg["clip_frac"], grad_norm=float(np.mean(grad_norms)),
                               first_ratio_max_dev=float(first_dev), first_approx_kl=float(first_kl))


# ---------------------------------------------------------------------------
# training driver


@dataclass
class TrainRunConfig:
    morphologies: list[VoxelGrid]
    model: ModelConfig = field(default_factory=ModelConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    seed: int = 0
    out_dir: Path | None = None
    checkpoint_every: int = 0
    initial_params: Parameters | None = None
    workers: int | None = None

    def __post_init__(self):
        if not self.morphologies:
            raise ValueError("need at least one morphology")
        names = [g.name for g in self.morphologies]
        if len(set(names)) != len(names):
            raise ValueError("morphology names must be unique")


@dataclass
class TrainResult:
    params: Parameters
    config: ModelConfig
    metrics: list[dict[str, float]]
    checkpoint: bytes


def metrics_columns(names: Sequence[str]) -> list[str]:
    return ["update", "mean_return_overall", *[f"mean_return_{n}" for n in names],
            "policy_loss", "value_loss", "kl", "clip_frac"]


def _seeds(seed: int) -> tuple[int, np.random.Generator, np.random.Generator, int]:
    ss = np.random.SeedSequence(seed)
    init_ss, sample_ss, batch_ss, env_ss = ss.spawn(4)
    return (int(init_ss.generate_state(1)[0]), np.random.default_rng(sample_ss),
            np.random.default_rng(batch_ss), int(env_ss.generate_state(1)[0]))


def train(run: TrainRunConfig) -> TrainResult:
    """collect -> GAE -> update, ``run.ppo.total_updates`` times.

    Writes ``metrics.csv`` and checkpoints into ``run.out_dir`` when given.
    The first line of the CSV is a ``#``-prefixed JSON comment with the PPO
    hyperparameters.
    """
    init_seed, sample_rng, batch_rng, env_seed = _seeds(run.seed)
    cfg, ppo = run.model, run.ppo
    params = run.initial_params if run.initial_params is not None else init_parameters(cfg, init_seed)
    names = [g.name for g in run.morphologies]
    meta = {"train_morphologies": names, "seed": run.seed, "env": asdict(run.env)}
    runners = [MorphologyRunner(g, cfg, run.env, ppo.envs_per_morphology, env_seed, i)
               for i, g in enumerate(run.morphologies)]
    optimizer = Adam(params, ppo.learning_rate, (ppo.adam_beta1, ppo.adam_beta2), ppo.adam_eps)
    workers = run.workers if run.workers is not None else _worker_count()

    out = Path(run.out_dir) if run.out_dir is not None else None
    csv_file = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_file = open(out / "metrics.csv", "w", newline="", encoding="utf-8")
        csv_file.write("# " + json.dumps({"ppo": asdict(ppo)}, sort_keys=True) + "\n")
        writer = csv.writer(csv_file)
        writer.writerow(metrics_columns(names))
        write_checkpoint(out / "checkpoint_init.bin", params, cfg, meta)

    metrics: list[dict[str, float]] = []
    last_returns = {n: float("nan") for n in names}
    try:
        for update in range(1, ppo.total_updates + 1):
            batches = collect_rollouts(params, cfg, runners, ppo.horizon, sample_rng, workers)
            for b in batches:
                b.advantages, b.returns = compute_gae(b.rewards, b.values, b.dones, b.bootstrap,
                                                      ppo.gamma, ppo.gae_lambda)
                if b.episode_returns:
                    last_returns[b.name] = float(np.mean(b.episode_returns))
            params, stats = ppo_update(params, optimizer, batches, cfg, ppo, batch_rng)
            per = [last_returns[n] for n in names]
            row = {"update": update, "mean_return_overall": float(np.mean(per)),
                   **{f"mean_return_{n}": v for n, v in zip(names, per)},
                   "policy_loss": stats.policy_loss, "value_loss": stats.value_loss,
                   "kl": stats.approx_kl, "clip_frac": stats.clip_frac}
            metrics.append(row)
            log.info("update %d mean return %.4f kl %.4f", update, row["mean_return_overall"], stats.approx_kl)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in metrics_columns(names)])
                csv_file.flush()
                if run.checkpoint_every and update % run.checkpoint_every == 0:
                    write_checkpoint(out / f"checkpoint_{update:05d}.bin", params, cfg, meta)
    finally:
        if csv_file is not None:
            csv_file.close()

    blob = save_checkpoint(params, cfg, meta)
    if out is not None:
        (out / "checkpoint_final.bin").write_bytes(blob)
    return TrainResult(params=params, config=cfg, metrics=metrics, checkpoint=blob)


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


# ---------------------------------------------------------------------------
# evaluation and transfer


@dataclass
class EvalResult:
    mean_return: float
    returns: list[float]


def _resolve(checkpoint) -> tuple[Parameters, ModelConfig, dict[str, Any]]:
    if isinstance(checkpoint, tuple):
        params, config = checkpoint[:2]
        return params, config, dict(checkpoint[2]) if len(checkpoint) > 2 else {}
    if isinstance(checkpoint, (bytes, bytearray)):
        return load_checkpoint_with_metadata(bytes(checkpoint))
    return read_checkpoint(checkpoint)


def env_config_from_metadata(meta: dict[str, Any]) -> EnvConfig:
    """The environment a checkpoint was trained in, or the defaults."""
    return EnvConfig(**meta["env"]) if meta.get("env") else EnvConfig()


def evaluate(checkpoint, grid: VoxelGrid, episodes: int = 5, deterministic: bool = True, seed: int = 0,
             env_config: EnvConfig | None = None) -> EvalResult:
    """Run full episodes; ``checkpoint`` is a path, raw bytes or a ``(params, config)`` pair."""
    params, config, meta = _resolve(checkpoint)
    env_config = env_config or env_config_from_metadata(meta)
    graph = build_graph(grid, config.scheme)
    if graph.num_nodes > config.max_nodes:
        raise ValueError(f"{grid.name}: {graph.num_nodes} voxels exceed max_nodes={config.max_nodes}")
    env = VoxelWalkerEnv(grid, env_config)
    rng = np.random.default_rng(seed)
    returns = []
    for ep in range(episodes):
        state, obs = env.reset(seed + ep)
        total, done = 0.0, False
        while not done:
            out = forward(obs.local, obs.global_, graph, params, config, with_value=False)
            action, _ = log_prob_and_sample(out.mu, config.log_std, rng=rng, deterministic=deterministic)
            state, obs, reward, done = env.step(state, action)
            total += reward
        returns.append(total)
    return EvalResult(float(np.mean(returns)), returns)


def transfer(checkpoint, unseen: Sequence[VoxelGrid], mode: str = "zero-shot", budget: int = 10,
             seed: int = 0, ppo: PPOConfig | None = None, env_config: EnvConfig | None = None,
             eval_episodes: int = 3, train_names: Sequence[str] | None = None,
             out_dir: str | Path | None = None) -> dict[str, Any]:
    """Zero-shot evaluation on held-out morphologies, optionally followed by fine-tuning."""
    if mode not in ("zero-shot", "fine-tune"):
        raise ValueError(f"mode must be 'zero-shot' or 'fine-tune', got {mode!r}")
    params, config, meta = _resolve(checkpoint)
    known = set(train_names if train_names is not None else meta.get("train_morphologies", []))
    overlap = sorted(known & {g.name for g in unseen})
    if overlap:
        raise ValueError(f"held-out set overlaps the training set: {overlap}")
    env_config = env_config or env_config_from_metadata(meta)

    def score(p):
        return [evaluate((p, config), g, eval_episodes, True, seed, env_config).mean_return for g in unseen]

    zero_shot = score(params)
    fine_tuned: list[float | None] = [None] * len(unseen)
    curve: list[float] = []
    if mode == "fine-tune":
        ppo = ppo or PPOConfig()
        ppo = PPOConfig(**{**asdict(ppo), "total_updates": budget})
        result = train(TrainRunConfig(morphologies=list(unseen), model=config, ppo=ppo, env=env_config,
                                      seed=seed, out_dir=out_dir, initial_params=params))
        curve = [row["mean_return_overall"] for row in result.metrics]
        fine_tuned = score(result.params)
    report = {
        "mode": mode,
        "per_morphology": [{"name": g.name, "zero_shot": z, "fine_tuned": f}
                           for g, z, f in zip(unseen, zero_shot, fine_tuned)],
        "seed": seed,
        "budget": budget if mode == "fine-tune" else 0,
        "mean_zero_shot": float(np.mean(zero_shot)),
        "mean_fine_tuned": float(np.mean(fine_tuned)) if mode == "fine-tune" else None,
        "curve": curve,
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "transfer_report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    return report
