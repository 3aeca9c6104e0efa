"""Synthetic 3-D worlds and sensing simulation.

Obstacles are segmented point clouds sampled from analytic primitives
(pillars, wall blocks, spheres).  Sensing returns the points inside a cube
about the agent, optionally restricted to a view cone, with the cube size
drawn from a truncated Gaussian when noise is enabled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.special import ndtr, ndtri

from .geometry import Box, ObstaclePoints, SensingRegion, as_point


class GenerationFailed(RuntimeError):
    """Random world generation could not satisfy its constraints."""


# ---------------------------------------------------------------------------
# Analytic primitives with deterministic surface sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CylinderSpec:
    """Vertical pillar; only the lateral surface is sampled."""

    cx: float
    cy: float
    radius: float
    z0: float
    z1: float

    def sample_surface(self, spacing: float) -> np.ndarray:
        n_theta = max(6, int(math.ceil(2 * math.pi * self.radius / spacing)))
        n_z = max(2, int(math.ceil((self.z1 - self.z0) / spacing)) + 1)
        theta = 2 * math.pi * np.arange(n_theta) / n_theta
        zs = np.linspace(self.z0, self.z1, n_z)
        xs = self.cx + self.radius * np.cos(theta)
        ys = self.cy + self.radius * np.sin(theta)
        pts = np.empty((n_theta * n_z, 3))
        pts[:, 0] = np.repeat(xs, n_z)
        pts[:, 1] = np.repeat(ys, n_z)
        pts[:, 2] = np.tile(zs, n_theta)
        return pts

    def to_json(self) -> dict:
        return {"kind": "cylinder", "cx": self.cx, "cy": self.cy,
                "radius": self.radius, "z0": self.z0, "z1": self.z1}


@dataclass(frozen=True)
class BoxSpec:
    """Axis-aligned block; all six faces are sampled."""

    lo: tuple
    hi: tuple

    def sample_surface(self, spacing: float) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        grids = [np.linspace(lo[k], hi[k],
                             max(2, int(math.ceil((hi[k] - lo[k]) / spacing)) + 1))
                 for k in range(3)]
        faces = []
        for axis in range(3):
            u, v = (axis + 1) % 3, (axis + 2) % 3
            uu, vv = np.meshgrid(grids[u], grids[v], indexing="ij")
            for val in (lo[axis], hi[axis]):
                face = np.empty((uu.size, 3))
                face[:, axis] = val
                face[:, u] = uu.ravel()
                face[:, v] = vv.ravel()
                faces.append(face)
        pts = np.concatenate(faces)
        # Face grids share edge points; keep the first occurrence of each.
        keys = np.round(pts * 1e6).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        return pts[np.sort(first)]

    def to_json(self) -> dict:
        return {"kind": "box", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class SphereSpec:
    center: tuple
    radius: float

    def sample_surface(self, spacing: float) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        n_phi = max(3, int(math.ceil(math.pi * self.radius / spacing)) + 1)
        rows = []
        for phi in np.linspace(0.0, math.pi, n_phi):
            ring_r = self.radius * math.sin(phi)
            n_theta = max(1, int(math.ceil(2 * math.pi * ring_r / spacing)))
            theta = 2 * math.pi * np.arange(n_theta) / n_theta
            ring = np.empty((n_theta, 3))
            ring[:, 0] = c[0] + ring_r * np.cos(theta)
            ring[:, 1] = c[1] + ring_r * np.sin(theta)
            ring[:, 2] = c[2] + self.radius * math.cos(phi)
            rows.append(ring)
        return np.concatenate(rows)

    def to_json(self) -> dict:
        return {"kind": "sphere", "center": list(self.center),
                "radius": self.radius}


_PRIMITIVE_KINDS = {"cylinder": CylinderSpec, "box": BoxSpec, "sphere": SphereSpec}


def _primitive_from_json(doc: dict):
    kind = doc["kind"]
    if kind == "cylinder":
        return CylinderSpec(doc["cx"], doc["cy"], doc["radius"], doc["z0"], doc["z1"])
    if kind == "box":
        return BoxSpec(tuple(doc["lo"]), tuple(doc["hi"]))
    if kind == "sphere":
        return SphereSpec(tuple(doc["center"]), doc["radius"])
    raise ValueError(f"unknown primitive kind {kind!r}")


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------

class Environment:
    """Immutable ground-truth world: bounds plus segmented obstacle clouds."""

    def __init__(self, bounds: Box, obstacles, seed: int = 0,
                 primitives=None, spacing: float | None = None,
                 metadata: dict | None = None):
        self.bounds = bounds
        self.obstacles = tuple(obstacles)
        ids = [ob.id for ob in self.obstacles]
        if len(set(ids)) != len(ids):
            raise ValueError("obstacle ids must be unique")
        self.seed = int(seed)
        self.primitives = tuple(primitives) if primitives is not None else None
        self.spacing = spacing
        self.metadata = dict(metadata or {})
        if self.obstacles:
            self._points = np.concatenate([ob.points for ob in self.obstacles])
            counts = np.array([len(ob) for ob in self.obstacles])
            self._offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
            self._ids = np.array(ids)
        else:
            self._points = np.empty((0, 3))
            self._offsets = np.empty(0, dtype=np.int64)
            self._ids = np.empty(0, dtype=np.int64)
        self._tree = None

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def tree(self) -> cKDTree | None:
        if self._tree is None and len(self._points):
            self._tree = cKDTree(self._points)
        return self._tree

    def min_distances(self, pts: np.ndarray) -> np.ndarray:
        """Distance from each query point to the nearest obstacle point."""
        if not len(self._points):
            return np.full(len(pts), np.inf)
        d, _ = self.tree.query(pts)
        return d

    def min_distance(self, p) -> float:
        return float(self.min_distances(np.asarray(p, dtype=np.float64)[None, :])[0])


def collision_check(point, env: Environment, clearance: float = 0.1) -> bool:
    """True iff the point is within `clearance` of any ground-truth point."""
    return env.min_distance(point) < clearance


# ---------------------------------------------------------------------------
# Sensing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorModel:
    """Cube sensor with optional view-cone restriction and size noise."""

    nominal_half_side: float = 5.0
    fov_half_angle: float = math.pi
    noise_sigma: float = 1.0
    noise_bound: float = 0.0  # half-width of the truncation interval; 0 = ideal

    def __post_init__(self):
        if self.nominal_half_side <= 0:
            raise ValueError("nominal_half_side must be positive")
        if not 0 <= self.noise_bound < self.nominal_half_side:
            raise ValueError("noise_bound must lie in [0, nominal_half_side)")


@dataclass
class LocalMap:
    """Obstacle points visible inside the sensing region at one replan."""

    obstacles: tuple
    region: SensingRegion
    point_rows: tuple = ()  # per obstacle, row indices into the ground-truth cloud
    points: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    offsets: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def m_loc(self) -> int:
        return len(self.obstacles)


def sample_truncated_gaussian(rng: np.random.Generator, mu: float,
                              sigma: float, a: float) -> float:
    """One draw from a normal(mu, sigma) truncated to [mu - a, mu + a].

    Inverse-CDF transform of a single uniform draw; a = 0 returns mu exactly
    without consuming randomness.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if a < 0:
        raise ValueError("a must be non-negative")
    if a == 0:
        return float(mu)
    lo = ndtr(-a / sigma)
    hi = ndtr(a / sigma)
    u = rng.random()
    x = mu + sigma * float(ndtri(lo + u * (hi - lo)))
    return float(min(max(x, mu - a), mu + a))


def sense(env: Environment, agent, heading, sensor: SensorModel,
          rng: np.random.Generator) -> LocalMap:
    """Segmented local map about the agent.

    The effective cube half-side is one truncated-Gaussian draw per call;
    points are grouped by ground-truth obstacle id, so segmentation never
    merges or splits obstacles.
    """
    agent = as_point(agent)
    h = np.asarray(heading, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(h)
    h = h / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
    half = sample_truncated_gaussian(rng, sensor.nominal_half_side,
                                     sensor.noise_sigma, sensor.noise_bound)
    region = SensingRegion(agent, half, sensor.fov_half_angle, h)
    if not len(env.points):
        return LocalMap((), region)
    mask = region.contains_many(env.points)
    sel = np.flatnonzero(mask)
    if not len(sel):
        return LocalMap((), region)
    block_ends = np.append(env._offsets[1:], len(env.points))
    bounds_idx = np.searchsorted(sel, np.concatenate([env._offsets, [len(env.points)]]))
    obstacles, rows, keep = [], [], []
    for i in range(len(env._offsets)):
        part = sel[bounds_idx[i]:bounds_idx[i + 1]]
        if len(part):
            obstacles.append(ObstaclePoints(int(env._ids[i]), env.points[part]))
            rows.append(part - env._offsets[i])
            keep.append(i)
    del block_ends
    pts = env.points[sel]
    counts = np.array([len(r) for r in rows])
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    ids = np.array([ob.id for ob in obstacles])
    return LocalMap(tuple(obstacles), region, tuple(rows), pts, offsets, ids)


# ---------------------------------------------------------------------------
# Accumulated memory of sensed points (voxel-hash index)
# ---------------------------------------------------------------------------

_CELL = 0.2
_MASK = (1 << 21) - 1
_SHIFT = 1 << 20


def _voxel_codes(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray) -> np.ndarray:
    return (((ix + _SHIFT) & _MASK) << 42) | (((iy + _SHIFT) & _MASK) << 21) \
        | ((iz + _SHIFT) & _MASK)


class VoxelIndex:
    """Sorted voxel hash over a fixed point cloud for small-radius queries."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx = np.floor(pts / _CELL).astype(np.int64)
        codes = _voxel_codes(idx[:, 0], idx[:, 1], idx[:, 2])
        order = np.argsort(codes, kind="stable")
        self.codes = codes[order]
        self.points = pts[order]

    def any_within(self, pts: np.ndarray, radius: float) -> np.ndarray:
        return _any_within(self.codes, self.points, pts, radius)


class MemoryMap:
    """All obstacle points sensed so far in a run, indexed for range queries.

    Used for collision-aware graph pruning and traversal safety checks; shape
    construction always uses only the current local map.
    """

    def __init__(self, env: Environment):
        self._env = env
        self._seen = {int(ob.id): np.zeros(len(ob), dtype=bool)
                      for ob in env.obstacles}
        self._row_base = {int(env._ids[i]): int(env._offsets[i])
                          for i in range(len(env._ids))}
        self._codes = np.empty(0, dtype=np.int64)
        self._pts = np.empty((0, 3))

    def __len__(self) -> int:
        return len(self._pts)

    def update(self, local_map: LocalMap) -> np.ndarray:
        """Absorb a local map; returns the points not seen before."""
        fresh = []
        for ob, rows in zip(local_map.obstacles, local_map.point_rows):
            seen = self._seen[ob.id]
            new = rows[~seen[rows]]
            if len(new):
                seen[new] = True
                fresh.append(self._env.points[self._row_base[ob.id] + new])
        if not fresh:
            return np.empty((0, 3))
        new_pts = np.concatenate(fresh)
        idx = np.floor(new_pts / _CELL).astype(np.int64)
        new_codes = _voxel_codes(idx[:, 0], idx[:, 1], idx[:, 2])
        order = np.argsort(new_codes, kind="stable")
        new_codes, sorted_new = new_codes[order], new_pts[order]
        pos = np.searchsorted(self._codes, new_codes)
        self._codes = np.insert(self._codes, pos, new_codes)
        self._pts = np.insert(self._pts, pos, sorted_new, axis=0)
        return new_pts

    def any_within(self, pts: np.ndarray, radius: float) -> np.ndarray:
        """Per-point flag: is any remembered point within `radius`?"""
        return _any_within(self._codes, self._pts, pts, radius)


def _any_within(codes: np.ndarray, cloud: np.ndarray, pts: np.ndarray,
                radius: float) -> np.ndarray:
    if radius * 2 > _CELL + 1e-12:
        raise ValueError(f"radius {radius} exceeds half the voxel cell {_CELL}")
    out = np.zeros(len(pts), dtype=bool)
    if not len(cloud) or not len(pts):
        return out
    base = np.floor((pts - radius) / _CELL).astype(np.int64)
    r2 = radius * radius
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c = _voxel_codes(base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz)
                lo = np.searchsorted(codes, c, side="left")
                hi = np.searchsorted(codes, c, side="right")
                counts = hi - lo
                nz = np.flatnonzero(counts)
                if not len(nz):
                    continue
                cnt = counts[nz]
                total = int(cnt.sum())
                pt_idx = np.repeat(nz, cnt)
                starts = np.repeat(lo[nz], cnt)
                local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                mem_idx = starts + local
                diff = pts[pt_idx] - cloud[mem_idx]
                hit = np.einsum("ij,ij->i", diff, diff) < r2
                out[pt_idx[hit]] = True
    return out


# ---------------------------------------------------------------------------
# World generators
# ---------------------------------------------------------------------------

def _build_env(bounds: Box, specs, spacing: float, seed: int,
               metadata: dict) -> Environment:
    obstacles = [ObstaclePoints(i, spec.sample_surface(spacing))
                 for i, spec in enumerate(specs)]
    return Environment(bounds, obstacles, seed=seed, primitives=specs,
                       spacing=spacing, metadata=metadata)


def _footprint_connected(bounds: Box, centers: np.ndarray, radii: np.ndarray,
                         start, goal, inflate: float = 0.25,
                         cell: float = 0.25) -> bool:
    """Flood-fill connectivity of the pillar footprint between start and goal."""
    lo, hi = bounds.lo[:2], bounds.hi[:2]
    nx = int(math.ceil((hi[0] - lo[0]) / cell))
    ny = int(math.ceil((hi[1] - lo[1]) / cell))
    xs = lo[0] + (np.arange(nx) + 0.5) * cell
    ys = lo[1] + (np.arange(ny) + 0.5) * cell
    free = np.ones((nx, ny), dtype=bool)
    for (cx, cy), r in zip(centers, radii):
        rr = r + inflate
        i0 = max(0, int((cx - rr - lo[0]) / cell) - 1)
        i1 = min(nx, int((cx + rr - lo[0]) / cell) + 2)
        j0 = max(0, int((cy - rr - lo[1]) / cell) - 1)
        j1 = min(ny, int((cy + rr - lo[1]) / cell) + 2)
        if i0 >= i1 or j0 >= j1:
            continue
        dx = xs[i0:i1, None] - cx
        dy = ys[None, j0:j1] - cy
        free[i0:i1, j0:j1] &= dx * dx + dy * dy > rr * rr
    labels, _ = ndimage.label(free)

    def cell_of(p):
        i = min(nx - 1, max(0, int((p[0] - lo[0]) / cell)))
        j = min(ny - 1, max(0, int((p[1] - lo[1]) / cell)))
        return i, j

    si, sj = cell_of(start)
    gi, gj = cell_of(goal)
    return labels[si, sj] != 0 and labels[si, sj] == labels[gi, gj]


def generate_random_forest(seed: int, density: float, extent: Box,
                           pillar_radius_range=(0.05, 0.12),
                           height: float | None = None,
                           start=None, goal=None,
                           min_gap: float = 0.30,
                           spacing: float = 0.2,
                           keep_clear_radius: float = 1.0,
                           max_attempts: int = 100) -> Environment:
    """Random pillar forest at `density` obstacles per square meter.

    Pillars keep at least `min_gap` of surface-to-surface separation and at
    least 1 m (`keep_clear_radius`) from the start and goal; generation
    retries until a coarse-grid flood fill connects start to goal.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = extent.lo, extent.hi
    area = float((hi[0] - lo[0]) * (hi[1] - lo[1]))
    n = int(round(density * area))
    z_mid = 0.5 * (lo[2] + hi[2])
    start = as_point(start) if start is not None else \
        np.array([lo[0] + 2.0, lo[1] + 2.0, z_mid])
    goal = as_point(goal) if goal is not None else \
        np.array([hi[0] - 2.0, hi[1] - 2.0, z_mid])
    r_lo, r_hi = pillar_radius_range
    z1 = lo[2] + height if height is not None else hi[2]
    cell = 2 * r_hi + min_gap

    for _ in range(max_attempts):
        centers, radii = [], []
        grid: dict = {}
        tries = 0
        budget = 300 * n
        while len(centers) < n and tries < budget:
            tries += 1
            r = rng.uniform(r_lo, r_hi)
            cx = rng.uniform(lo[0] + r, hi[0] - r)
            cy = rng.uniform(lo[1] + r, hi[1] - r)
            if min((cx - start[0]) ** 2 + (cy - start[1]) ** 2,
                   (cx - goal[0]) ** 2 + (cy - goal[1]) ** 2) < \
                    (keep_clear_radius + r) ** 2:
                continue
            gi, gj = int(cx / cell), int(cy / cell)
            ok = True
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    for k in grid.get((gi + di, gj + dj), ()):
                        dx, dy = cx - centers[k][0], cy - centers[k][1]
                        lim = r + radii[k] + min_gap
                        if dx * dx + dy * dy < lim * lim:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                continue
            grid.setdefault((gi, gj), []).append(len(centers))
            centers.append((cx, cy))
            radii.append(r)
        if len(centers) < n:
            continue
        centers_arr = np.asarray(centers)
        radii_arr = np.asarray(radii)
        if not _footprint_connected(extent, centers_arr, radii_arr, start, goal):
            continue
        specs = [CylinderSpec(float(cx), float(cy), float(r), float(lo[2]), float(z1))
                 for (cx, cy), r in zip(centers, radii)]
        meta = {"kind": "random_forest", "density": density,
                "suggested_start": [float(v) for v in start],
                "suggested_goal": [float(v) for v in goal]}
        return _build_env(extent, specs, spacing, seed, meta)
    raise GenerationFailed(
        f"no connected forest after {max_attempts} attempts "
        f"(density={density}, n={n})")


def generate_narrow_passage(width: float, spacing: float = 0.15) -> Environment:
    """Two wall blocks with a `width`-wide slot between them."""
    if width <= 0:
        raise ValueError("width must be positive")
    bounds = Box((0, 0, 0), (20, 10, 5))
    y_mid = 5.0
    specs = [
        BoxSpec((9.5, 0.0, 0.0), (10.5, y_mid - width / 2, 5.0)),
        BoxSpec((9.5, y_mid + width / 2, 0.0), (10.5, 10.0, 5.0)),
    ]
    meta = {"kind": "narrow_passage", "width": width,
            "passage_box": {"lo": [9.5, y_mid - width / 2, 0.0],
                            "hi": [10.5, y_mid + width / 2, 5.0]},
            "suggested_start": [2.0, 5.0, 2.5],
            "suggested_goal": [18.0, 5.0, 2.5]}
    return _build_env(bounds, specs, spacing, 0, meta)


def generate_horseshoe(width: float = 1.0, spacing: float = 0.15) -> Environment:
    """U-shaped pocket opening toward the start; the goal sits behind it."""
    if width <= 0:
        raise ValueError("width must be positive")
    bounds = Box((0, 0, 0), (20, 20, 5))
    y0, y1 = 10 - width / 2, 10 + width / 2
    specs = [
        BoxSpec((8.0, y0 - 0.5, 0.0), (14.0, y0, 5.0)),   # lower arm
        BoxSpec((8.0, y1, 0.0), (14.0, y1 + 0.5, 5.0)),   # upper arm
        BoxSpec((7.5, y0 - 0.5, 0.0), (8.0, y1 + 0.5, 5.0)),  # back wall
    ]
    meta = {"kind": "horseshoe", "width": width,
            "suggested_start": [16.0, 10.0, 2.5],
            "suggested_goal": [4.0, 10.0, 2.5]}
    return _build_env(bounds, specs, spacing, 0, meta)


def generate_thin_corridor(width: float = 1.0, spacing: float = 0.15) -> Environment:
    """Long straight channel of the given width; walls block every detour."""
    if width <= 0:
        raise ValueError("width must be positive")
    bounds = Box((0, 0, 0), (20, 10, 5))
    y0, y1 = 5 - width / 2, 5 + width / 2
    specs = [
        BoxSpec((5.0, 0.0, 0.0), (15.0, y0, 5.0)),
        BoxSpec((5.0, y1, 0.0), (15.0, 10.0, 5.0)),
    ]
    meta = {"kind": "thin_corridor", "width": width,
            "passage_box": {"lo": [5.0, y0, 0.0], "hi": [15.0, y1, 5.0]},
            "suggested_start": [2.0, 5.0, 2.5],
            "suggested_goal": [18.0, 5.0, 2.5]}
    return _build_env(bounds, specs, spacing, 0, meta)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def env_to_json(env: Environment) -> dict:
    obstacles = []
    for i, ob in enumerate(env.obstacles):
        entry: dict = {"id": int(ob.id)}
        if env.primitives is not None and env.primitives[i] is not None:
            entry["primitive"] = env.primitives[i].to_json()
        else:
            entry["points"] = [[float(v) for v in row] for row in ob.points]
        obstacles.append(entry)
    return {
        "schema": 1,
        "seed": env.seed,
        "spacing": env.spacing,
        "bounds": {"lo": [float(v) for v in env.bounds.lo],
                   "hi": [float(v) for v in env.bounds.hi]},
        "metadata": env.metadata,
        "obstacles": obstacles,
    }


def env_from_json(doc: dict) -> Environment:
    if doc.get("schema") != 1:
        raise ValueError(f"unsupported environment schema {doc.get('schema')!r}")
    bounds = Box(doc["bounds"]["lo"], doc["bounds"]["hi"])
    spacing = doc.get("spacing")
    obstacles, primitives = [], []
    for entry in doc["obstacles"]:
        if "primitive" in entry:
            spec = _primitive_from_json(entry["primitive"])
            primitives.append(spec)
            obstacles.append(ObstaclePoints(entry["id"], spec.sample_surface(spacing)))
        else:
            primitives.append(None)
            obstacles.append(ObstaclePoints(entry["id"],
                                            np.asarray(entry["points"])))
    return Environment(bounds, obstacles, seed=doc.get("seed", 0),
                       primitives=primitives, spacing=spacing,
                       metadata=doc.get("metadata", {}))


def save_environment(env: Environment, path) -> None:
    Path(path).write_text(json.dumps(env_to_json(env), indent=1))


def load_environment(path) -> Environment:
    return env_from_json(json.loads(Path(path).read_text()))
