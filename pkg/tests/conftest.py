import numpy as np
import pytest

from heteromorpheus.morphology import VoxelGrid


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, max-abs difference over the larger max-abs value."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def random_grid(rng: np.random.Generator, max_rows: int = 4, max_cols: int = 4, name: str = "rand") -> VoxelGrid:
    """A random valid morphology: largest 4-connected blob of a random fill, with an actuator."""
    while True:
        rows, cols = rng.integers(1, max_rows + 1), rng.integers(1, max_cols + 1)
        cells = rng.integers(0, 5, size=(rows, cols))
        cells[rng.random((rows, cols)) < 0.25] = 0
        filled = cells != 0
        if filled.sum() < 2:
            continue
        # keep the component containing the first voxel
        start = tuple(np.argwhere(filled)[0])
        seen, stack = {start}, [start]
        while stack:
            r, c = stack.pop()
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                q = (r + dr, c + dc)
                if 0 <= q[0] < rows and 0 <= q[1] < cols and filled[q] and q not in seen:
                    seen.add(q)
                    stack.append(q)
        keep = np.zeros_like(filled)
        for q in seen:
            keep[q] = True
        cells = np.where(keep, cells, 0)
        if keep.sum() < 2:
            continue
        if not np.isin(cells, (3, 4)).any():
            r, c = sorted(seen)[0]
            cells[r, c] = 3
        return VoxelGrid(cells, name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, when the acceptance module ran."""
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: int(k[1:])):
        ok, detail = results[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
