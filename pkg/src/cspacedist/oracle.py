"""Dense-grid ground truth for the configuration-space distance field.

The grid census enumerates the colliding set at cell centres; distances and
minimal-distance sets are then exact up to grid resolution. Nothing here is
used to produce training data.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import INF, RobotModel, Scene, clearance_batch

MAX_CELLS = 10**8
_GRID_MAGIC = b"CSGRID01"


class GridTooLargeError(MemoryError):
    pass


class GradientUndefinedError(ValueError):
    """Raised where the distance is zero and no direction exists."""


@dataclass(frozen=True)
class CollisionGrid:
    resolution: tuple
    bounds: np.ndarray = field(repr=False)  # (dof, 2)
    flags: np.ndarray = field(repr=False)  # bool, shape == resolution
    colliding_points: np.ndarray = field(repr=False)  # (M, dof)

    @property
    def dof(self) -> int:
        return len(self.resolution)

    @property
    def cell_size(self) -> np.ndarray:
        return (self.bounds[:, 1] - self.bounds[:, 0]) / np.asarray(self.resolution)

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.cell_size))

    @property
    def default_tol(self) -> float:
        return 1.5 * self.cell_diagonal

    def axes(self):
        return [
            lo + (np.arange(n) + 0.5) * (hi - lo) / n
            for (lo, hi), n in zip(self.bounds, self.resolution)
        ]

    def cell_centers(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_index(self, q) -> tuple:
        q = np.asarray(q, dtype=float)
        idx = np.floor((q - self.bounds[:, 0]) / self.cell_size).astype(int)
        return tuple(np.clip(idx, 0, np.asarray(self.resolution) - 1))

    def cell_center(self, index) -> np.ndarray:
        index = np.asarray(index)
        return self.bounds[:, 0] + (index + 0.5) * self.cell_size

    @property
    def colliding_fraction(self) -> float:
        return float(self.flags.mean())


@dataclass
class OracleAnswer:
    d_min: float
    minimal_set: np.ndarray  # (m, dof)
    query: np.ndarray

    @property
    def free_scene(self) -> bool:
        return math.isinf(self.d_min)


def build_collision_grid(model: RobotModel, scene: Scene, resolution, chunk: int = 1 << 16) -> CollisionGrid:
    if np.isscalar(resolution):
        resolution = (int(resolution),) * model.dof
    resolution = tuple(int(r) for r in resolution)
    if len(resolution) != model.dof:
        raise ValueError("resolution needs one entry per joint")
    if any(r < 2 for r in resolution):
        raise ValueError("resolution must be at least 2 per axis")
    n_cells = math.prod(resolution)
    if n_cells > MAX_CELLS:
        raise GridTooLargeError(f"{n_cells} cells exceeds the {MAX_CELLS} cell limit")
    bounds = np.array(model.joint_limits, dtype=float)
    grid = CollisionGrid(resolution, bounds, np.zeros(resolution, bool), np.zeros((0, model.dof)))
    centers = grid.cell_centers()
    flat = np.zeros(n_cells, dtype=bool)
    for start in range(0, n_cells, chunk):
        flat[start:start + chunk] = clearance_batch(model, scene, centers[start:start + chunk]) <= 0.0
    flags = flat.reshape(resolution)
    return CollisionGrid(resolution, bounds, flags, centers[flat])


def _distances(grid: CollisionGrid, q: np.ndarray) -> np.ndarray:
    return np.linalg.norm(grid.colliding_points - q, axis=1)


def oracle_cdf(grid: CollisionGrid, q, tol: float | None = None) -> OracleAnswer:
    q = np.asarray(q, dtype=float)
    if np.any(q < grid.bounds[:, 0] - 1e-12) or np.any(q > grid.bounds[:, 1] + 1e-12):
        raise ValueError(f"query {q} outside grid bounds")
    tol = grid.default_tol if tol is None else tol
    if len(grid.colliding_points) == 0:
        return OracleAnswer(INF, np.zeros((0, grid.dof)), q)
    idx = grid.cell_index(q)
    if grid.flags[idx]:
        return OracleAnswer(0.0, grid.cell_center(idx)[None], q)
    d = _distances(grid, q)
    d_min = float(d.min())
    return OracleAnswer(d_min, grid.colliding_points[d <= d_min + tol], q)


def oracle_gradient(grid: CollisionGrid, q, tol: float | None = None) -> np.ndarray:
    ans = oracle_cdf(grid, q, tol)
    if ans.free_scene:
        raise GradientUndefinedError("no colliding configurations in the grid")
    if ans.d_min <= 0.0:
        raise GradientUndefinedError(f"query {ans.query} is colliding; distance field has no gradient there")
    diff = ans.query - ans.minimal_set
    return np.mean(diff / np.linalg.norm(diff, axis=1, keepdims=True), axis=0)


def oracle_distance_batch(grid: CollisionGrid, Q, chunk: int = 256) -> np.ndarray:
    """d_min for many queries; colliding cells give 0."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    out = np.empty(len(Q))
    if len(grid.colliding_points) == 0:
        out[:] = INF
        return out
    P = grid.colliding_points
    for s in range(0, len(Q), chunk):
        block = Q[s:s + chunk]
        d2 = (np.sum(block**2, 1)[:, None] + np.sum(P**2, 1)[None] - 2.0 * block @ P.T)
        out[s:s + chunk] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    for i, q in enumerate(Q):
        if grid.flags[grid.cell_index(q)]:
            out[i] = 0.0
    return out


def save_grid(grid: CollisionGrid, path) -> None:
    """Header (dof, resolution, bounds) followed by zlib-compressed bit-packed flags."""
    payload = zlib.compress(np.packbits(grid.flags.ravel()).tobytes())
    header = struct.pack("<8sI", _GRID_MAGIC, grid.dof)
    header += struct.pack(f"<{grid.dof}I", *grid.resolution)
    header += struct.pack(f"<{2 * grid.dof}d", *grid.bounds.ravel())
    with open(path, "wb") as fh:
        fh.write(header + struct.pack("<Q", len(payload)) + payload)


def load_grid(path) -> CollisionGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, dof = struct.unpack_from("<8sI", data, 0)
    if magic != _GRID_MAGIC:
        raise ValueError(f"{path} is not a collision grid file")
    off = 12
    resolution = struct.unpack_from(f"<{dof}I", data, off)
    off += 4 * dof
    bounds = np.array(struct.unpack_from(f"<{2 * dof}d", data, off)).reshape(dof, 2)
    off += 16 * dof
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    bits = np.frombuffer(zlib.decompress(data[off:off + n]), dtype=np.uint8)
    n_cells = math.prod(resolution)
    flags = np.unpackbits(bits)[:n_cells].astype(bool).reshape(resolution)
    grid = CollisionGrid(tuple(resolution), bounds, flags, np.zeros((0, dof)))
    return CollisionGrid(grid.resolution, bounds, flags, grid.cell_centers()[flags.ravel()])
