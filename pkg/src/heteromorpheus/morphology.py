"""Voxel-grid morphologies and their heterogeneous neighbour graphs."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

EMPTY, RIGID, SOFT, H_ACTUATOR, V_ACTUATOR = 0, 1, 2, 3, 4
VOXEL_CODES = (EMPTY, RIGID, SOFT, H_ACTUATOR, V_ACTUATOR)
ACTUATORS = (H_ACTUATOR, V_ACTUATOR)

MAX_GRID = 7
MAX_NODES = MAX_GRID * MAX_GRID

# position of the SOURCE relative to the TARGET
DIRECTIONS = ("up", "down", "left", "right")
_OFFSETS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}


class MorphologyError(ValueError):
    """A morphology document or grid violates the voxel-grid rules."""


class EdgeScheme(str, enum.Enum):
    NODE_PAIR = "n"
    DIRECTION = "d"
    HOMOGENEOUS = "homo"

    @property
    def num_edge_types(self) -> int:
        return {"n": 20, "d": 4, "homo": 1}[self.value]

    @property
    def num_node_types(self) -> int:
        return 1 if self is EdgeScheme.HOMOGENEOUS else 4

    @classmethod
    def parse(cls, value: "str | EdgeScheme") -> "EdgeScheme":
        if isinstance(value, EdgeScheme):
            return value
        aliases = {"node_pair": "n", "nodepair": "n", "direction": "d", "homogeneous": "homo"}
        key = str(value).lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown edge scheme {value!r} (expected n, d or homo)") from None


@dataclass(frozen=True)
class VoxelGrid:
    cells: np.ndarray
    name: str = "robot"

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int64)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        _validate_cells(cells, self.name)

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def num_voxels(self) -> int:
        return int(np.count_nonzero(self.cells))

    def to_document(self) -> dict[str, Any]:
        return {"name": self.name, "grid": self.cells.tolist()}

    def __eq__(self, other) -> bool:
        return (isinstance(other, VoxelGrid) and self.name == other.name
                and np.array_equal(self.cells, other.cells))

    def __hash__(self) -> int:
        return hash((self.name, self.cells.tobytes(), self.cells.shape))


def _validate_cells(cells: np.ndarray, name: str) -> None:
    if cells.ndim != 2 or cells.shape[0] == 0 or cells.shape[1] == 0:
        raise MorphologyError(f"{name}: grid must be a non-empty 2D matrix")
    if cells.shape[0] > MAX_GRID or cells.shape[1] > MAX_GRID:
        raise MorphologyError(f"{name}: grid {cells.shape[0]}x{cells.shape[1]} exceeds {MAX_GRID}x{MAX_GRID}")
    bad = ~np.isin(cells, VOXEL_CODES)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise MorphologyError(f"{name}: invalid voxel code {cells[r, c]} at ({r}, {c}); allowed 0-4")
    filled = cells != 0
    count = int(filled.sum())
    if count < 2:
        raise MorphologyError(f"{name}: needs at least 2 voxels, found {count}")
    if _component_size(filled) != count:
        raise MorphologyError(f"{name}: voxels are not one 4-connected component")
    if not np.isin(cells, ACTUATORS).any():
        raise MorphologyError(f"{name}: needs at least one actuator voxel (code 3 or 4)")


def _component_size(filled: np.ndarray) -> int:
    start = tuple(np.argwhere(filled)[0])
    seen = {start}
    stack = [start]
    rows, cols = filled.shape
    while stack:
        r, c = stack.pop()
        for dr, dc in _OFFSETS.values():
            nr, nc = r + dr, c + dc
            if 0 <= nr < rows and 0 <= nc < cols and filled[nr, nc] and (nr, nc) not in seen:
                seen.add((nr, nc))
                stack.append((nr, nc))
    return len(seen)


def parse_grid(document: str | bytes | Mapping[str, Any]) -> VoxelGrid:
    """Parse a morphology document ``{"name": ..., "grid": [[...], ...]}``.

    Row 0 of ``grid`` is the top row of the robot.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise MorphologyError(f"malformed morphology JSON: {exc}") from None
    if not isinstance(document, Mapping) or "grid" not in document:
        raise MorphologyError('morphology must be a JSON object with a "grid" field')
    name = document.get("name", "robot")
    if not isinstance(name, str):
        raise MorphologyError("morphology name must be a string")
    grid = document["grid"]
    if not isinstance(grid, list) or not grid or not all(isinstance(row, list) for row in grid):
        raise MorphologyError(f"{name}: grid must be a non-empty array of arrays")
    widths = {len(row) for row in grid}
    if len(widths) != 1:
        raise MorphologyError(f"{name}: ragged rows (lengths {sorted(widths)})")
    for row in grid:
        for v in row:
            if isinstance(v, bool) or not isinstance(v, int):
                raise MorphologyError(f"{name}: voxel codes must be integers, got {v!r}")
    return VoxelGrid(np.array(grid, dtype=np.int64), name)


def load_morphology(path: str | Path) -> VoxelGrid:
    return parse_grid(Path(path).read_text(encoding="utf-8"))


def load_morphology_set(path: str | Path) -> list[VoxelGrid]:
    """Load a JSON array of morphology documents (a single object is accepted too)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MorphologyError(f"{path}: malformed JSON: {exc}") from None
    if isinstance(doc, Mapping):
        doc = [doc]
    if not isinstance(doc, list) or not doc:
        raise MorphologyError(f"{path}: expected a non-empty JSON array of morphologies")
    grids = []
    for i, item in enumerate(doc):
        try:
            grids.append(parse_grid(item))
        except MorphologyError as exc:
            raise MorphologyError(f"{path} entry #{i}: {exc}") from None
    names = [g.name for g in grids]
    if len(set(names)) != len(names):
        raise MorphologyError(f"{path}: duplicate morphology names")
    return grids


def morphology_set_hash(grids: Sequence[VoxelGrid]) -> str:
    payload = json.dumps([g.to_document() for g in grids], sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def edge_type_id(scheme: EdgeScheme | str, source_type: int, target_type: int, direction: str) -> int:
    scheme = EdgeScheme.parse(scheme)
    if source_type not in VOXEL_CODES:
        raise MorphologyError(f"invalid source voxel code {source_type}")
    if target_type not in (RIGID, SOFT, H_ACTUATOR, V_ACTUATOR):
        raise MorphologyError(f"invalid target voxel code {target_type}")
    if direction not in DIRECTIONS:
        raise MorphologyError(f"invalid direction {direction!r}")
    if scheme is EdgeScheme.NODE_PAIR:
        return source_type * 4 + (target_type - 1)
    if scheme is EdgeScheme.DIRECTION:
        return DIRECTIONS.index(direction)
    return 0


@dataclass(frozen=True)
class HeteroGraph:
    """Typed nodes (row-major voxel order) and typed directed edges.

    ``node_types`` holds voxel codes (1-4); ``type_index`` holds the
    parameter slot each node uses (code-1, or 0 in homogeneous mode).
    Edge ``e`` runs ``src[e] -> dst[e]``.
    """

    scheme: EdgeScheme
    grid_shape: tuple[int, int]
    coords: np.ndarray
    node_types: np.ndarray
    type_index: np.ndarray
    positions: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_types: np.ndarray
    directions: tuple[str, ...]
    num_node_types: int
    num_edge_types: int
    full_connectivity: bool = False
    _adjacency: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.node_types)
        adj = np.zeros((n, n), dtype=bool)
        adj[self.dst, self.src] = True
        adj.setflags(write=False)
        object.__setattr__(self, "_adjacency", adj)

    @property
    def num_nodes(self) -> int:
        return len(self.node_types)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def adjacency(self) -> np.ndarray:
        """Boolean ``[target, source]`` neighbour mask."""
        return self._adjacency

    def in_degree(self) -> np.ndarray:
        return self._adjacency.sum(axis=1)

    def neighbors(self, t: int) -> np.ndarray:
        return np.flatnonzero(self._adjacency[t])


def build_graph(grid: VoxelGrid, scheme: EdgeScheme | str = EdgeScheme.NODE_PAIR,
                full_connectivity: bool = False) -> HeteroGraph:
    """Nodes are the non-empty voxels in row-major order; one edge per ordered adjacent pair.

    ``full_connectivity`` links every ordered pair of distinct nodes instead of
    4-neighbours.  It is a testing aid and only valid with the homogeneous scheme.
    """
    scheme = EdgeScheme.parse(scheme)
    if full_connectivity and scheme is not EdgeScheme.HOMOGENEOUS:
        raise ValueError("full connectivity is only defined for the homogeneous scheme")
    cells = grid.cells
    coords = np.argwhere(cells != 0)
    index = {(int(r), int(c)): i for i, (r, c) in enumerate(coords)}
    codes = cells[coords[:, 0], coords[:, 1]]
    type_index = np.zeros_like(codes) if scheme is EdgeScheme.HOMOGENEOUS else codes - 1

    src, dst, etypes, dirs = [], [], [], []
    for t, (r, c) in enumerate(coords):
        if full_connectivity:
            for s in range(len(coords)):
                if s != t:
                    src.append(s)
                    dst.append(t)
                    etypes.append(0)
                    dirs.append("")
            continue
        for direction in DIRECTIONS:
            dr, dc = _OFFSETS[direction]
            s = index.get((int(r) + dr, int(c) + dc))
            if s is None:
                continue
            src.append(s)
            dst.append(t)
            etypes.append(edge_type_id(scheme, int(codes[s]), int(codes[t]), direction))
            dirs.append(direction)

    def frozen(values, dtype=np.int64):
        arr = np.array(values, dtype=dtype)
        arr.setflags(write=False)
        return arr

    return HeteroGraph(
        scheme=scheme,
        grid_shape=(grid.rows, grid.cols),
        coords=frozen(coords.reshape(-1, 2)),
        node_types=frozen(codes),
        type_index=frozen(type_index),
        positions=frozen(coords[:, 0] * MAX_GRID + coords[:, 1]),
        src=frozen(src),
        dst=frozen(dst),
        edge_types=frozen(etypes),
        directions=tuple(dirs),
        num_node_types=scheme.num_node_types,
        num_edge_types=scheme.num_edge_types,
        full_connectivity=full_connectivity,
    )


def graph_distances(graph: HeteroGraph) -> np.ndarray:
    """All-pairs hop counts (BFS); unreachable pairs get -1."""
    n = graph.num_nodes
    dist = np.full((n, n), -1, dtype=np.int64)
    adj = graph.adjacency
    for start in range(n):
        dist[start, start] = 0
        frontier = [start]
        while frontier:
            nxt = []
            for u in frontier:
                for v in np.flatnonzero(adj[:, u] | adj[u]):
                    if dist[start, v] < 0:
                        dist[start, v] = dist[start, u] + 1
                        nxt.append(v)
            frontier = nxt
    return dist
