"""Attention recording and stable-rank traces."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import EnvConfig, VoxelWalkerEnv
from .model import forward
from .morphology import VoxelGrid, build_graph
from .tensor import singular_values


class AnalysisError(ValueError):
    pass


def stable_rank(matrix) -> float:
    """Sum of squared singular values over the largest squared singular value."""
    sigma = singular_values(np.asarray(matrix, dtype=np.float64))
    top = sigma[0] if sigma.size else 0.0
    if top == 0.0:
        raise AnalysisError("stable rank of an all-zero matrix is undefined")
    return float((sigma ** 2).sum() / top ** 2)


@dataclass
class AttentionRecord:
    step: int
    layer: int
    matrix: np.ndarray                 # head-averaged, [target, source]
    labels: tuple[str, ...]
    per_head: np.ndarray | None = None  # [head, target, source]


@dataclass
class AttentionTrace:
    records: list[AttentionRecord]
    series: dict[int, np.ndarray]       # layer -> stable rank per step
    peaks: dict[int, np.ndarray] = field(default_factory=dict)
    valleys: dict[int, np.ndarray] = field(default_factory=dict)
    returns: float = 0.0

    def flagged(self, layer: int = 0) -> list[AttentionRecord]:
        """Records of ``layer`` at the peaks and valleys of its series."""
        steps = set(np.flatnonzero(self.peaks[layer] | self.valleys[layer]).tolist())
        return [r for r in self.records if r.layer == layer and r.step in steps]


def local_extrema(series, window: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Strict peaks / valleys: strictly above (below) every other value within
    the centred window.  Positions whose window runs off either end are never flagged."""
    x = np.asarray(series, dtype=np.float64)
    half = window // 2
    peaks = np.zeros(len(x), dtype=bool)
    valleys = np.zeros(len(x), dtype=bool)
    for i in range(half, len(x) - half):
        others = np.concatenate([x[i - half:i], x[i + 1:i + half + 1]])
        peaks[i] = bool((x[i] > others).all())
        valleys[i] = bool((x[i] < others).all())
    return peaks, valleys


def node_labels(grid: VoxelGrid) -> tuple[str, ...]:
    return tuple(f"{r},{c}" for r, c in np.argwhere(grid.cells != 0))


def trace_attention(checkpoint, grid: VoxelGrid, steps: int | None = None, env_config: EnvConfig | None = None,
                    seed: int = 0, keep_heads: bool = False, window: int = 5) -> AttentionTrace:
    """One deterministic episode; records every layer's attention at every step."""
    from .rl import _resolve, env_config_from_metadata

    params, config, meta = _resolve(checkpoint)
    graph = build_graph(grid, config.scheme)
    env = VoxelWalkerEnv(grid, env_config or env_config_from_metadata(meta))
    limit = steps if steps is not None else env.config.horizon
    labels = node_labels(grid)
    state, obs = env.reset(seed)
    records: list[AttentionRecord] = []
    total = 0.0
    for step in range(limit):
        out = forward(obs.local, obs.global_, graph, params, config, with_value=False)
        for layer, att in enumerate(out.attention):
            records.append(AttentionRecord(step, layer, att.mean(axis=0), labels,
                                           att.copy() if keep_heads else None))
        state, obs, reward, done = env.step(state, out.mu.data)
        total += reward
        if done:
            break
    series = {}
    for layer in range(config.num_layers):
        series[layer] = np.array([stable_rank(r.matrix) for r in records if r.layer == layer])
    trace = AttentionTrace(records, series, returns=total)
    for layer, values in series.items():
        trace.peaks[layer], trace.valleys[layer] = local_extrema(values, window)
    return trace


def export_series_csv(trace: AttentionTrace, path: str | Path, layers: Sequence[int] | None = None) -> Path:
    """Columns: step, layer, stable_rank, is_peak, is_valley; ordered by step then layer."""
    layers = sorted(trace.series) if layers is None else list(layers)
    if not layers or not any(len(trace.series[l]) for l in layers):
        raise AnalysisError("nothing to export")
    path = Path(path)
    length = max(len(trace.series[l]) for l in layers)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "layer", "stable_rank", "is_peak", "is_valley"])
        for step in range(length):
            for l in layers:
                if step < len(trace.series[l]):
                    w.writerow([step, l, f"{trace.series[l][step]:.17g}",
                                int(trace.peaks[l][step]), int(trace.valleys[l][step])])
    return path


def export_matrices_csv(records: Sequence[AttentionRecord], path: str | Path,
                        per_head: bool = False) -> Path:
    """Nonzero entries only.  Columns: step, layer, [head,] row, col, weight."""
    if not records:
        raise AnalysisError("nothing to export")
    path = Path(path)
    ordered = sorted(records, key=lambda r: (r.step, r.layer))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if per_head:
            if any(r.per_head is None for r in ordered):
                raise AnalysisError("per-head export needs records traced with keep_heads=True")
            w.writerow(["step", "layer", "head", "row", "col", "weight"])
            for r in ordered:
                for h, mat in enumerate(r.per_head):
                    for row, col in zip(*np.nonzero(mat)):
                        w.writerow([r.step, r.layer, h, row, col, f"{mat[row, col]:.17g}"])
        else:
            w.writerow(["step", "layer", "row", "col", "weight"])
            for r in ordered:
                for row, col in zip(*np.nonzero(r.matrix)):
                    w.writerow([r.step, r.layer, row, col, f"{r.matrix[row, col]:.17g}"])
    return path
