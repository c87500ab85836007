"""Heterogeneous graph transformer policy (actor) and value network (critic).

Parameters live in a flat, ordered ``dict[str, Tensor]``.  Names follow
``{trunk}.{block}...`` with ``trunk`` in ``("actor", "critic")``; the critic
is an independent copy of the actor trunk whose decoder reads the mean-pooled
node features instead of each node.

Row-vector convention throughout: a linear map is ``x @ W + b`` with
``W`` of shape ``(fan_in, fan_out)``; an edge message is ``v @ W_msg``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .morphology import MAX_NODES, EdgeScheme, HeteroGraph
from .tensor import Tensor

Parameters = dict[str, Tensor]

TRUNKS = ("actor", "critic")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    local_dim: int = 16
    global_dim: int = 3
    embed_dim: int = 128
    num_layers: int = 3
    num_heads: int = 2
    global_hidden: tuple[int, ...] = (64, 64)
    decoder_hidden: tuple[int, ...] = (64,)
    scheme: EdgeScheme = EdgeScheme.NODE_PAIR
    log_std: float = -0.7
    activation: str = "relu"
    out_mlp_depth: int = 1
    max_nodes: int = MAX_NODES

    def __post_init__(self):
        object.__setattr__(self, "scheme", EdgeScheme.parse(self.scheme))
        object.__setattr__(self, "global_hidden", tuple(int(h) for h in self.global_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(int(h) for h in self.decoder_hidden))
        dims = (self.local_dim, self.global_dim, self.embed_dim, self.max_nodes, *self.global_hidden,
                *self.decoder_hidden)
        if min(dims) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.num_layers < 1 or self.num_heads < 1 or self.out_mlp_depth < 1:
            raise ValueError("num_layers, num_heads and out_mlp_depth must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if not math.isfinite(self.log_std):
            raise ValueError("log_std must be finite")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def num_node_types(self) -> int:
        return self.scheme.num_node_types

    @property
    def num_edge_types(self) -> int:
        return self.scheme.num_edge_types

    @property
    def action_std(self) -> float:
        return math.exp(self.log_std)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        d["global_hidden"] = list(self.global_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh}


@dataclass
class PolicyOutput:
    """``mu``: per-node action means; ``value``: critic estimate (either is None if skipped).

    ``attention`` holds, per layer, the per-head weights ``[..., head, target, source]``.
    """

    mu: Tensor | None
    value: Tensor | None
    attention: list[np.ndarray] = field(default_factory=list)

    def head_averaged(self, layer: int) -> np.ndarray:
        return self.attention[layer].mean(axis=-3)


# ---------------------------------------------------------------------------
# parameters


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table; a pure function of the config."""
    E, dh, U, P = config.embed_dim, config.head_dim, config.num_node_types, config.num_edge_types
    shapes: dict[str, tuple[int, ...]] = {}

    def linear(name, fan_in, fan_out):
        shapes[f"{name}.weight"] = (fan_in, fan_out)
        shapes[f"{name}.bias"] = (fan_out,)

    for trunk in TRUNKS:
        for u in range(U):
            linear(f"{trunk}.encoder.{u}", config.local_dim, E)
        shapes[f"{trunk}.pos"] = (config.max_nodes, E)
        for l in range(config.num_layers):
            for proj in ("q", "k", "v"):
                for u in range(U):
                    for i in range(config.num_heads):
                        linear(f"{trunk}.layer{l}.{proj}.{u}.{i}", E, dh)
            for p in range(P):
                shapes[f"{trunk}.layer{l}.msg.{p}"] = (E, E)
            for u in range(U):
                for j in range(config.out_mlp_depth):
                    linear(f"{trunk}.layer{l}.out.{u}.{j}", E, E)
        width = config.global_dim
        for j, h in enumerate(config.global_hidden):
            linear(f"{trunk}.global.{j}", width, h)
            width = h
        width = E + (config.global_hidden[-1] if config.global_hidden else config.global_dim)
        for j, h in enumerate((*config.decoder_hidden, 1)):
            linear(f"{trunk}.decoder.{j}", width, h)
            width = h
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


def init_parameters(config: ModelConfig, seed: int = 0) -> Parameters:
    """Glorot-uniform weights, zero biases, N(0, 0.02) positional table."""
    rng = np.random.default_rng(seed)
    params: Parameters = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            value = np.zeros(shape)
        elif name.endswith(".pos"):
            value = rng.normal(0.0, 0.02, size=shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def message_matrix_names(params: Parameters, trunk: str = "actor") -> list[str]:
    return [k for k in params if k.startswith(f"{trunk}.layer") and ".msg." in k]


# ---------------------------------------------------------------------------
# building blocks


def _linear(x: Tensor, params: Parameters, name: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def _mlp(x: Tensor, params: Parameters, name: str, depth: int, final_activation: bool) -> Tensor:
    for j in range(depth):
        x = _linear(x, params, f"{name}.{j}")
        if j < depth - 1 or final_activation:
            x = T.relu(x)
    return x


def _typed(x: Tensor, type_index: np.ndarray, fn) -> Tensor:
    """Apply ``fn(rows, u)`` to the node rows of each type ``u`` and restore node order.

    ``x`` has nodes on axis -2.
    """
    present = np.unique(type_index)
    if len(present) == 1:
        return fn(x, int(present[0]))
    parts, order = [], []
    for u in present:
        idx = np.flatnonzero(type_index == u)
        parts.append(fn(T.gather_rows(x, idx, axis=-2), int(u)))
        order.append(idx)
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return T.gather_rows(T.concat(parts, axis=-2), inverse, axis=-2)


def _check_graph(graph: HeteroGraph, config: ModelConfig) -> None:
    if graph.scheme is not config.scheme:
        raise ValueError(f"graph built with scheme {graph.scheme.value!r}, model expects {config.scheme.value!r}")
    if graph.num_nodes > config.max_nodes or (graph.num_nodes and graph.positions.max() >= config.max_nodes):
        raise ValueError(f"morphology with {graph.num_nodes} nodes exceeds max_nodes={config.max_nodes}")


def encode(local_obs: Tensor, graph: HeteroGraph, params: Parameters, config: ModelConfig,
           trunk: str = "actor") -> Tensor:
    """Typed linear embedding of each node's observation plus its positional row."""
    _check_graph(graph, config)
    if local_obs.shape[-2:] != (graph.num_nodes, config.local_dim):
        raise T.ShapeError(f"local obs shape {local_obs.shape} does not match "
                           f"({graph.num_nodes}, {config.local_dim})")
    embedded = _typed(local_obs, graph.type_index,
                      lambda x, u: _linear(x, params, f"{trunk}.encoder.{u}"))
    pos = T.gather_rows(params[f"{trunk}.pos"], graph.positions, axis=0)
    return T.add(embedded, pos)


def _head_projection(H: Tensor, graph: HeteroGraph, params: Parameters, prefix: str, head: int) -> Tensor:
    return _typed(H, graph.type_index, lambda x, u: _linear(x, params, f"{prefix}.{u}.{head}"))


def hetero_attention(H: Tensor, graph: HeteroGraph, params: Parameters, config: ModelConfig,
                     layer: int, trunk: str = "actor") -> list[Tensor]:
    """Per-head ``[..., target, source]`` weights, softmax-normalised over each target's neighbours."""
    base = f"{trunk}.layer{layer}"
    scale = 1.0 / math.sqrt(config.head_dim)
    mask = graph.adjacency
    alphas = []
    for i in range(config.num_heads):
        q = _head_projection(H, graph, params, f"{base}.q", i)
        k = _head_projection(H, graph, params, f"{base}.k", i)
        scores = T.scalar_mul(T.matmul(q, T.transpose(k)), scale)
        alphas.append(T.masked_softmax(scores, mask, axis=-1))
    return alphas


def hetero_message(H: Tensor, graph: HeteroGraph, params: Parameters, config: ModelConfig,
                   layer: int, trunk: str = "actor") -> Tensor:
    """Messages ``[..., edge, embed]`` in graph edge order: concatenated per-head
    value projections of the source, mapped by the edge type's matrix."""
    base = f"{trunk}.layer{layer}"
    values = T.concat([_head_projection(H, graph, params, f"{base}.v", i)
                       for i in range(config.num_heads)], axis=-1)
    parts, order = [], []
    for p in np.unique(graph.edge_types):
        name = f"{base}.msg.{p}"
        if name not in params:
            raise KeyError(f"unknown edge type id {p} (no parameter {name})")
        idx = np.flatnonzero(graph.edge_types == p)
        parts.append(T.matmul(T.gather_rows(values, graph.src[idx], axis=-2), params[name]))
        order.append(idx)
    if len(parts) == 1:
        return parts[0]
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return T.gather_rows(T.concat(parts, axis=-2), inverse, axis=-2)


def hgt_aggregate(H: Tensor, alphas: list[Tensor], messages: Tensor, graph: HeteroGraph,
                  params: Parameters, config: ModelConfig, layer: int, trunk: str = "actor") -> Tensor:
    """Attention-weighted sum of incoming messages, typed output map, residual."""
    n, m, dh = graph.num_nodes, graph.num_edges, config.head_dim
    lead = H.shape[:-2]
    incidence = np.zeros((n, m))
    incidence[graph.dst, np.arange(m)] = 1.0
    incidence_t = Tensor(incidence)
    flat_edge = graph.dst * n + graph.src
    heads = []
    for i, alpha in enumerate(alphas):
        weights = T.gather_rows(T.reshape(alpha, (*lead, n * n)), flat_edge, axis=-1)
        weights = T.reshape(weights, (*lead, m, 1))
        msg = T.slice_(messages, (Ellipsis, slice(i * dh, (i + 1) * dh)))
        heads.append(T.matmul(incidence_t, T.mul(msg, weights)))
    aggregated = T.concat(heads, axis=-1) if len(heads) > 1 else heads[0]
    activated = _ACTIVATIONS[config.activation](aggregated)
    depth = config.out_mlp_depth
    mapped = _typed(activated, graph.type_index,
                    lambda x, u: _mlp(x, params, f"{trunk}.layer{layer}.out.{u}", depth, False))
    return T.add(mapped, H)


def hgt_layer(H: Tensor, graph: HeteroGraph, params: Parameters, config: ModelConfig,
              layer: int, trunk: str = "actor") -> tuple[Tensor, list[Tensor]]:
    alphas = hetero_attention(H, graph, params, config, layer, trunk)
    messages = hetero_message(H, graph, params, config, layer, trunk)
    return hgt_aggregate(H, alphas, messages, graph, params, config, layer, trunk), alphas


def trunk_features(local_obs: Tensor, graph: HeteroGraph, params: Parameters, config: ModelConfig,
                   trunk: str = "actor") -> tuple[Tensor, list[np.ndarray]]:
    """Final node features ``H^L`` and per-layer attention arrays ``[..., head, t, s]``."""
    H = encode(local_obs, graph, params, config, trunk)
    attention = []
    for layer in range(config.num_layers):
        H, alphas = hgt_layer(H, graph, params, config, layer, trunk)
        attention.append(np.stack([a.data for a in alphas], axis=-3))
    return H, attention


def _global_embedding(global_obs: Tensor, params: Parameters, config: ModelConfig, trunk: str) -> Tensor:
    return _mlp(global_obs, params, f"{trunk}.global", len(config.global_hidden), True)


def forward(local_obs, global_obs, graph: HeteroGraph, params: Parameters, config: ModelConfig,
            with_value: bool = True, with_policy: bool = True) -> PolicyOutput:
    """Policy means per node and the critic value; either head can be skipped.

    Accepts unbatched ``(n, d)`` / ``(g,)`` inputs or batched ``(B, n, d)`` / ``(B, g)``.
    """
    local_obs = local_obs if isinstance(local_obs, Tensor) else Tensor(local_obs)
    global_obs = global_obs if isinstance(global_obs, Tensor) else Tensor(global_obs)
    unbatched = local_obs.ndim == 2
    if unbatched:
        local_obs = T.reshape(local_obs, (1, *local_obs.shape))
        global_obs = T.reshape(global_obs, (1, *global_obs.shape))
    if local_obs.ndim != 3 or global_obs.ndim != 2 or global_obs.shape[0] != local_obs.shape[0]:
        raise T.ShapeError(f"inconsistent observation shapes {local_obs.shape} / {global_obs.shape}")
    if global_obs.shape[-1] != config.global_dim:
        raise T.ShapeError(f"global obs dim {global_obs.shape[-1]} != {config.global_dim}")
    B, n = local_obs.shape[0], graph.num_nodes

    mu, attention = None, []
    if with_policy:
        H, attention = trunk_features(local_obs, graph, params, config, "actor")
        g = _global_embedding(global_obs, params, config, "actor")
        g_nodes = T.gather_rows(T.reshape(g, (B, 1, g.shape[-1])), np.zeros(n, dtype=np.intp), axis=-2)
        dec = _mlp(T.concat([H, g_nodes], axis=-1), params, "actor.decoder",
                   len(config.decoder_hidden) + 1, False)
        mu = T.reshape(dec, (B, n))

    value = None
    if with_value:
        Hc, _ = trunk_features(local_obs, graph, params, config, "critic")
        gc = _global_embedding(global_obs, params, config, "critic")
        pooled = T.concat([T.mean(Hc, axis=-2), gc], axis=-1)
        value = T.reshape(_mlp(pooled, params, "critic.decoder", len(config.decoder_hidden) + 1, False), (B,))

    if unbatched:
        mu = T.reshape(mu, (n,)) if mu is not None else None
        value = T.reshape(value, ()) if value is not None else None
        attention = [a[0] for a in attention]
    return PolicyOutput(mu=mu, value=value, attention=attention)


# ---------------------------------------------------------------------------
# Gaussian policy head


def gaussian_log_prob(mu: Tensor, log_std: float, action) -> Tensor:
    """Log density of ``action`` under N(mu, s^2 I), summed over the last axis."""
    s = math.exp(log_std)
    a = Tensor(action)
    if a.shape != mu.shape:
        raise T.ShapeError(f"action shape {a.shape} != mean shape {mu.shape}")
    diff = T.sub(a, mu)
    quad = T.sum_(T.mul(diff, diff), axis=-1)
    n = mu.shape[-1]
    const = n * (-log_std - 0.5 * LOG_2PI)
    return T.add(T.scalar_mul(quad, -0.5 / (s * s)), Tensor(const))


def gaussian_entropy(num_nodes: int, log_std: float) -> float:
    return num_nodes * (0.5 + 0.5 * LOG_2PI + log_std)


def log_prob_and_sample(mu: Tensor, log_std: float, action=None, rng: np.random.Generator | None = None,
                        deterministic: bool = False) -> tuple[np.ndarray, Tensor]:
    """Sample (or take ``action`` / the mean) and return it with its log-probability."""
    if not np.isfinite(mu.data).all():
        raise T.NonFiniteError("policy mean is not finite")
    if action is None:
        if deterministic:
            action = mu.data.copy()
        else:
            rng = rng if rng is not None else np.random.default_rng()
            action = mu.data + math.exp(log_std) * rng.standard_normal(mu.shape)
    action = np.asarray(action, dtype=np.float64)
    return action, gaussian_log_prob(mu, log_std, action)
