"""Star-convex safe regions built from segmented obstacle point clouds.

The safe region about a query point is a union of spherical sectors, one per
obstacle, plus the part of the workspace no sector's cone covers.  Membership
reduces to a nearest-cone radius test, which keeps queries cheap enough for
sampling-based planning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Keep cones strictly narrower than a half-space.
MAX_HALF_ANGLE = math.pi / 2 - 1e-6


class EmptyObstacle(ValueError):
    """Obstacle point set is empty."""


class CenterInsideObstacle(ValueError):
    """Query point is within the clearance margin of an obstacle point."""


def as_point(p) -> np.ndarray:
    """Coerce to a finite (3,) float64 point."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"non-finite point: {p}")
    return p


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, inclusive on both faces."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", as_point(self.lo))
        object.__setattr__(self, "hi", as_point(self.hi))
        if np.any(self.hi <= self.lo):
            raise ValueError("box must have positive extent on every axis")

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))

    def contains_many(self, pts: np.ndarray) -> np.ndarray:
        return np.all(pts >= self.lo, axis=1) & np.all(pts <= self.hi, axis=1)

    def ray_exit(self, origin: np.ndarray, direction: np.ndarray) -> float:
        """Distance from an interior origin to the box boundary along a ray."""
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (self.lo - origin) / direction
            t_hi = (self.hi - origin) / direction
        t = np.where(direction > 0, t_hi, np.where(direction < 0, t_lo, np.inf))
        return float(max(np.min(t), 0.0))

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.lo + rng.random(3) * self.extent


@dataclass(frozen=True)
class ObstaclePoints:
    """Segmented point cloud of a single obstacle."""

    id: int
    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise EmptyObstacle(f"obstacle {self.id}: need a non-empty (N, 3) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"obstacle {self.id}: non-finite points")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SectorParams:
    """Spherical-sector parameters of one obstacle as seen from a point.

    r is the minimum distance to the obstacle, p the closest point, n the unit
    axis toward p, and l the largest spread of the obstacle's ray-plane
    intersections around p in the plane through p normal to n.
    """

    obstacle_id: int
    r: float
    p: np.ndarray
    n: np.ndarray
    l: float

    @property
    def half_angle(self) -> float:
        return min(math.atan2(self.l, self.r), MAX_HALF_ANGLE)


@dataclass(frozen=True)
class SensingRegion:
    """Cube-shaped sensing volume, optionally restricted to a view cone."""

    center: np.ndarray
    half_side: float
    fov_half_angle: float = math.pi
    heading: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        h = np.asarray(self.heading, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(h)
        if norm > 0:
            h = h / norm
        object.__setattr__(self, "heading", h)
        if self.half_side <= 0:
            raise ValueError("half_side must be positive")
        if not 0 < self.fov_half_angle <= math.pi:
            raise ValueError("fov_half_angle must lie in (0, pi]")

    @property
    def omnidirectional(self) -> bool:
        return self.fov_half_angle >= math.pi - 1e-12

    def shrunk(self, margin: float) -> "SensingRegion":
        return SensingRegion(self.center, max(self.half_side - margin, 1e-6),
                             self.fov_half_angle, self.heading)

    def contains(self, p) -> bool:
        d = np.asarray(p, dtype=np.float64) - self.center
        if np.max(np.abs(d)) > self.half_side:
            return False
        if self.omnidirectional:
            return True
        dist = np.linalg.norm(d)
        if dist < 1e-12:
            return True
        return float(d @ self.heading) >= dist * math.cos(self.fov_half_angle)

    def contains_many(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center
        inside = np.max(np.abs(d), axis=1) <= self.half_side
        if self.omnidirectional:
            return inside
        dist = np.linalg.norm(d, axis=1)
        ang_ok = (d @ self.heading) >= dist * math.cos(self.fov_half_angle)
        return inside & (ang_ok | (dist < 1e-12))


class GeneralizedShape:
    """Union-of-sectors free region about a center point.

    Sectors are stored sorted by ascending r.  A clearance margin shrinks each
    sector's admissible radius and widens its cone so that membership implies
    at least `clearance` separation from every point used to build the shape.
    """

    __slots__ = ("center", "sectors", "bounds", "clearance",
                 "_n", "_cos_eff", "_r_eff")

    def __init__(self, center, sectors, bounds: Box, clearance: float = 0.0):
        self.center = as_point(center)
        self.sectors = tuple(sorted(sectors, key=lambda s: (s.r, s.obstacle_id)))
        self.bounds = bounds
        self.clearance = float(clearance)
        m = len(self.sectors)
        self._n = np.empty((m, 3))
        self._cos_eff = np.empty(m)
        self._r_eff = np.empty(m)
        for i, s in enumerate(self.sectors):
            if s.r <= clearance:
                raise CenterInsideObstacle(
                    f"obstacle {s.obstacle_id} at distance {s.r:.6f} <= clearance")
            self._n[i] = s.n
            widen = math.asin(min(1.0, clearance / s.r)) if clearance > 0 else 0.0
            self._cos_eff[i] = math.cos(min(s.half_angle + widen, MAX_HALF_ANGLE))
            self._r_eff[i] = s.r - clearance

    @property
    def m_loc(self) -> int:
        return len(self.sectors)


def _sector_arrays(center: np.ndarray, points: np.ndarray, offsets: np.ndarray):
    """Sector parameters for all obstacles of a concatenated point array.

    `offsets` holds the start row of each obstacle's block; blocks are
    contiguous.  Returns (r, p, n, l) with one row/value per obstacle.
    """
    d = points - center
    dist = np.sqrt(np.einsum("ij,ij->i", d, d))
    counts = np.diff(np.append(offsets, len(points)))
    r = np.minimum.reduceat(dist, offsets)
    # First index attaining the per-block minimum (deterministic tie-break).
    is_min = dist == np.repeat(r, counts)
    cand = np.flatnonzero(is_min)
    first = cand[np.searchsorted(cand, offsets, side="left")]
    p = points[first]
    n = d[first] / r[:, None]
    group = np.repeat(np.arange(len(offsets)), counts)
    s = np.einsum("ij,ij->i", d, n[group])
    valid = s > 0
    t = np.where(valid, np.repeat(r, counts) / np.where(valid, s, 1.0), 0.0)
    proj = center + t[:, None] * d
    spread = np.linalg.norm(proj - p[group], axis=1)
    spread = np.where(valid, spread, 0.0)
    l = np.maximum.reduceat(spread, offsets)
    return r, p, n, l


def obstacle_sector(center, obstacle: ObstaclePoints,
                    clearance: float = 0.0) -> SectorParams:
    """Sector parameters of one obstacle as seen from `center`.

    Rays from the center through obstacle points are intersected with the
    plane through the closest point, normal to the closest-point direction;
    rays parallel to or away from that plane are skipped.
    """
    if len(obstacle) == 0:
        raise EmptyObstacle(f"obstacle {obstacle.id}")
    center = as_point(center)
    r, p, n, l = _sector_arrays(center, obstacle.points, np.array([0]))
    if r[0] <= clearance:
        raise CenterInsideObstacle(
            f"obstacle {obstacle.id} at distance {r[0]:.6f} <= clearance {clearance}")
    return SectorParams(obstacle.id, float(r[0]), p[0], n[0], float(l[0]))


def build_generalized_shape(center, obstacles, bounds: Box,
                            clearance: float = 0.0) -> GeneralizedShape:
    """Shape about `center` with one sector per obstacle, sorted by r."""
    sectors = [obstacle_sector(center, ob, clearance) for ob in obstacles]
    return GeneralizedShape(center, sectors, bounds, clearance)


def build_shape_from_arrays(center, points: np.ndarray, offsets: np.ndarray,
                            ids: np.ndarray, bounds: Box,
                            clearance: float = 0.0) -> GeneralizedShape:
    """build_generalized_shape over pre-concatenated obstacle blocks."""
    center = as_point(center)
    if len(points) == 0:
        return GeneralizedShape(center, (), bounds, clearance)
    r, p, n, l = _sector_arrays(center, points, offsets)
    if np.min(r) <= clearance:
        i = int(np.argmin(r))
        raise CenterInsideObstacle(
            f"obstacle {ids[i]} at distance {r[i]:.6f} <= clearance {clearance}")
    sectors = [SectorParams(int(ids[i]), float(r[i]), p[i], n[i], float(l[i]))
               for i in range(len(offsets))]
    return GeneralizedShape(center, sectors, bounds, clearance)


def contains(shape: GeneralizedShape, y) -> bool:
    """Membership of y in the shape.

    Among the sectors whose cone covers the direction of y, only the one with
    the smallest r decides, and it admits y strictly inside its (clearance-
    shrunk) radius.  Directions no cone covers fall back to the workspace box.
    """
    y = np.asarray(y, dtype=np.float64)
    d = y - shape.center
    dist = math.sqrt(float(d @ d))
    if dist < 1e-12 or shape.m_loc == 0:
        return shape.bounds.contains(y)
    in_cone = (shape._n @ d) >= dist * shape._cos_eff
    if not in_cone.any():
        return shape.bounds.contains(y)
    return dist < shape._r_eff[int(np.argmax(in_cone))]


def contains_many(shape: GeneralizedShape, pts: np.ndarray) -> np.ndarray:
    """Vectorized `contains` over an (N, 3) array."""
    d = pts - shape.center
    dist = np.linalg.norm(d, axis=1)
    in_bounds = shape.bounds.contains_many(pts)
    if shape.m_loc == 0:
        return in_bounds
    proj = d @ shape._n.T  # (N, m)
    in_cone = proj >= dist[:, None] * shape._cos_eff
    any_cone = in_cone.any(axis=1)
    first = np.argmax(in_cone, axis=1)
    in_first = dist < shape._r_eff[first]
    at_center = dist < 1e-12
    return np.where(at_center, in_bounds,
                    np.where(any_cone, in_first, in_bounds))


def brute_force_contains(center, obstacles, bounds: Box, y,
                         clearance: float = 0.0) -> bool:
    """Literal term-by-term evaluation of the union-of-sectors definition.

    Each sector term is the spherical sector minus the overlap with every
    earlier (smaller-r) sector's infinite cone; the final term is the part of
    the workspace outside all cones.  Serves as the oracle for `contains`.
    """
    center = as_point(center)
    y = as_point(y)
    sectors = sorted((obstacle_sector(center, ob) for ob in obstacles),
                     key=lambda s: (s.r, s.obstacle_id))
    d = y - center
    dist = math.sqrt(float(d @ d))
    if dist < 1e-12:
        return bounds.contains(y)

    def in_cone(sec: SectorParams) -> bool:
        widen = math.asin(min(1.0, clearance / sec.r)) if clearance > 0 else 0.0
        ang = min(sec.half_angle + widen, MAX_HALF_ANGLE)
        return float(d @ sec.n) >= dist * math.cos(ang)

    cone_flags = [in_cone(s) for s in sectors]
    for i, sec in enumerate(sectors):
        in_sector = cone_flags[i] and dist < sec.r - clearance
        subtracted = any(cone_flags[j] for j in range(i))
        if in_sector and not subtracted:
            return True
    if not any(cone_flags) and bounds.contains(y):
        return True
    return False


def ray_exit_distance(shape: GeneralizedShape, direction) -> float:
    """Length of the membership interval along a ray from the shape center.

    Directions covered by at least one cone exit at the smallest admissible
    sector radius; uncovered directions exit at the workspace boundary.
    """
    u = np.asarray(direction, dtype=np.float64)
    if shape.m_loc:
        in_cone = (shape._n @ u) >= shape._cos_eff
        if in_cone.any():
            return float(np.min(shape._r_eff[in_cone]))
    return shape.bounds.ray_exit(shape.center, u)


def sensing_shape_contains(shape: GeneralizedShape, region: SensingRegion,
                           y) -> bool:
    """Membership in the sensing shape (sensing region intersected with shape)."""
    return region.contains(y) and contains(shape, y)
