"""Sampling-based path planning over generalized shapes.

The graph grows by steering random samples into the safe region of their
nearest vertex; every vertex carries the shape built about it from the
current local map, and a directed edge (u, v) certifies that v lies inside
u's shape, so the straight segment u-v is collision-free with respect to the
sensed points (star-convexity about u).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .environment import LocalMap, MemoryMap, VoxelIndex
from .geometry import (Box, CenterInsideObstacle, GeneralizedShape,
                       SensingRegion, build_shape_from_arrays, contains,
                       contains_many, ray_exit_distance)


class IterationCapExceeded(RuntimeError):
    """Sampling budget exhausted before start and goal became connected."""


class DegenerateRay(RuntimeError):
    """Steering direction exits the source shape immediately."""


class Unreachable(RuntimeError):
    """No directed path between the requested vertices."""


@dataclass(frozen=True)
class PlannerParams:
    eta: float = 2.0            # max steer step, meters
    goal_bias: float = 0.05
    sample_cap: int = 5000
    clearance: float = 0.1      # safety margin baked into every shape
    steer_frac: float = 0.9     # fraction of the ray exit distance used
    min_step: float = 0.05      # discard steers shorter than this

    def __post_init__(self):
        if not 0 <= self.goal_bias < 1:
            raise ValueError("goal_bias must lie in [0, 1)")
        if self.eta <= 0 or self.sample_cap < 1:
            raise ValueError("eta and sample_cap must be positive")


@dataclass
class Vertex:
    position: np.ndarray
    shape: GeneralizedShape


@dataclass
class PathResult:
    waypoints: np.ndarray            # (h, 3), first = start, last = goal
    shapes: list                     # shape attached to each waypoint
    total_length: float
    sampled_point_count: int


class _GrowArray:
    """Append-only array with amortized doubling."""

    def __init__(self, width: int = 0, dtype=np.float64, cap: int = 64):
        shape = (cap, width) if width else (cap,)
        self._data = np.empty(shape, dtype=dtype)
        self.n = 0

    def _ensure(self, extra: int) -> None:
        need = self.n + extra
        if need > len(self._data):
            new_len = max(2 * len(self._data), need)
            grown = np.empty((new_len,) + self._data.shape[1:],
                             dtype=self._data.dtype)
            grown[:self.n] = self._data[:self.n]
            self._data = grown

    def append(self, row) -> None:
        self._ensure(1)
        self._data[self.n] = row
        self.n += 1

    def extend(self, rows) -> None:
        k = len(rows)
        if not k:
            return
        self._ensure(k)
        self._data[self.n:self.n + k] = rows
        self.n += k

    def view(self) -> np.ndarray:
        return self._data[:self.n]


class PlanGraph:
    """Directed graph of (point, shape) vertices with Euclidean edge weights.

    Sector data of all vertex shapes is kept in flat append-only arrays so
    that membership of a query point in every vertex's shape is a single
    vectorized pass.
    """

    def __init__(self, bounds: Box):
        self.bounds = bounds
        self.vertices: list[Vertex] = []
        self.out: list[dict] = []          # vid -> {target: weight}
        self.edge_validated: dict = {}     # (u, v) -> bool (survived a prune)
        self.reachable: list[bool] = []
        self.samples: list[np.ndarray] = []
        self._pos = _GrowArray(3)
        self._sec_n = _GrowArray(3)
        self._sec_cos = _GrowArray()
        self._sec_reff = _GrowArray()
        self._sec_vid = _GrowArray(dtype=np.int64)
        self._ne_vid = _GrowArray(dtype=np.int64)   # vertices with sectors
        self._ne_off = _GrowArray(dtype=np.int64)   # their first sector row

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edge_validated)

    @property
    def sample_count(self) -> int:
        return len(self.samples)

    def positions(self) -> np.ndarray:
        return self._pos.view()

    def add_vertex(self, position: np.ndarray, shape: GeneralizedShape,
                   reachable: bool = False) -> int:
        vid = len(self.vertices)
        self.vertices.append(Vertex(np.asarray(position, dtype=np.float64), shape))
        self.out.append({})
        self.reachable.append(reachable)
        self._pos.append(self.vertices[-1].position)
        m = shape.m_loc
        if m:
            self._ne_vid.append(vid)
            self._ne_off.append(self._sec_vid.n)
            self._sec_n.extend(shape._n)
            self._sec_cos.extend(shape._cos_eff)
            self._sec_reff.extend(shape._r_eff)
            self._sec_vid.extend(np.full(m, vid, dtype=np.int64))
        return vid

    def add_edge(self, u: int, v: int, validated: bool = False) -> None:
        if v in self.out[u]:
            return
        w = float(np.linalg.norm(self.vertices[u].position - self.vertices[v].position))
        self.out[u][v] = w
        self.edge_validated[(u, v)] = validated
        if self.reachable[u] and not self.reachable[v]:
            self._propagate(v)

    def _propagate(self, root: int) -> None:
        stack = [root]
        self.reachable[root] = True
        while stack:
            u = stack.pop()
            for v in self.out[u]:
                if not self.reachable[v]:
                    self.reachable[v] = True
                    stack.append(v)

    def contains_batch(self, y: np.ndarray) -> np.ndarray:
        """For each vertex: does its shape contain y?"""
        n_v = len(self.vertices)
        if n_v == 0:
            return np.zeros(0, dtype=bool)
        pos = self.positions()
        dist = np.linalg.norm(y - pos, axis=1)
        in_bounds = self.bounds.contains(y)
        result = np.full(n_v, in_bounds)
        if self._sec_vid.n:
            cat_vid = self._sec_vid.view()
            dv = y - pos[cat_vid]
            proj = np.einsum("ij,ij->i", dv, self._sec_n.view())
            in_cone = proj >= dist[cat_vid] * self._sec_cos.view()
            vals = np.where(in_cone, self._sec_reff.view(), np.inf)
            group_min = np.minimum.reduceat(vals, self._ne_off.view())
            covered = np.isfinite(group_min)
            covered_vids = self._ne_vid.view()[covered]
            result[covered_vids] = dist[covered_vids] < group_min[covered]
        result[dist < 1e-12] = in_bounds
        return result


def sample_point(rng: np.random.Generator, region: SensingRegion,
                 goal: np.ndarray, goal_bias: float) -> np.ndarray:
    """Goal with probability goal_bias, else uniform over the sensing cube."""
    if goal_bias > 0 and rng.random() < goal_bias:
        return np.asarray(goal, dtype=np.float64).copy()
    offset = region.half_side * (2.0 * rng.random(3) - 1.0)
    return region.center + offset


def nearest(graph: PlanGraph, x: np.ndarray, exclude: int | None = None) -> int:
    """Index of the vertex closest to x (ties: lowest index)."""
    if not len(graph):
        raise ValueError("graph has no vertices")
    d = np.linalg.norm(graph.positions() - x, axis=1)
    if exclude is not None and len(d) > 1:
        d = d.copy()
        d[exclude] = np.inf
    return int(np.argmin(d))


def steer(x_rand: np.ndarray, x_nearest: Vertex, eta: float,
          steer_frac: float = 0.9) -> np.ndarray:
    """Point along the ray toward x_rand, capped by eta and the shape exit.

    The returned point lies strictly inside the source shape, so the edge
    from the source to it is safe by star-convexity.
    """
    dvec = x_rand - x_nearest.position
    dist = float(np.linalg.norm(dvec))
    if dist < 1e-12:
        raise DegenerateRay("sample coincides with the nearest vertex")
    u = dvec / dist
    exit_d = ray_exit_distance(x_nearest.shape, u)
    if exit_d < 1e-6:
        raise DegenerateRay(f"exit distance {exit_d:.2e} along sampled ray")
    step = min(dist, eta, steer_frac * exit_d)
    return x_nearest.position + step * u


def near_intersected_shapes(graph: PlanGraph, x_new: np.ndarray) -> np.ndarray:
    """Indices of all vertices whose shape contains x_new."""
    return np.flatnonzero(graph.contains_batch(x_new))


def _build_shape(center, local_map: LocalMap, bounds: Box,
                 clearance: float) -> GeneralizedShape:
    return build_shape_from_arrays(center, local_map.points, local_map.offsets,
                                   local_map.ids, bounds, clearance)


def _relaxed_shape(center, local_map: LocalMap, bounds: Box,
                   clearance: float) -> GeneralizedShape:
    """Shape with the clearance relaxed when the center sits too close.

    Noisy sensing can reveal points within the nominal margin of the agent's
    own position; planning must still be able to move it away.
    """
    try:
        return _build_shape(center, local_map, bounds, clearance)
    except CenterInsideObstacle:
        d = np.linalg.norm(local_map.points - np.asarray(center), axis=1)
        relaxed = max(0.5 * float(d.min()), 0.0)
        return _build_shape(center, local_map, bounds, relaxed)


def gse_plan(start, goal, local_map: LocalMap, region: SensingRegion,
             rng: np.random.Generator, params: PlannerParams, bounds: Box,
             seed_graph: PlanGraph | None = None) -> PlanGraph:
    """Grow a graph from start toward goal until they are connected.

    Seeds the vertex set with start and goal (plus any reused graph), then
    repeats sample / nearest / steer / connect until a directed start-to-goal
    path exists or the sample cap is exceeded.
    """
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    g = PlanGraph(bounds)
    if seed_graph is not None and len(seed_graph):
        # Reused vertices almost on top of the fresh start would inject
        # micrometer path segments; the start's own fresh edges cover them.
        seed_pos = seed_graph.positions()
        keep = np.linalg.norm(seed_pos - start, axis=1) >= params.min_step
        remap = np.full(len(seed_graph), -1, dtype=np.int64)
        for old_vid in np.flatnonzero(keep):
            remap[old_vid] = g.add_vertex(seed_graph.vertices[old_vid].position,
                                          seed_graph.vertices[old_vid].shape)
        for u, nbrs in enumerate(seed_graph.out):
            if remap[u] < 0:
                continue
            for v in nbrs:
                if remap[v] >= 0:
                    g.add_edge(int(remap[u]), int(remap[v]),
                               validated=seed_graph.edge_validated[(u, v)])
    n_seed = len(g)

    start_shape = _relaxed_shape(start, local_map, bounds, params.clearance)
    start_vid = g.add_vertex(start, start_shape, reachable=True)
    for vid in np.flatnonzero(g.contains_batch(start)[:start_vid]):
        g.add_edge(int(vid), start_vid)
    if n_seed:
        seed_pos = g.positions()[:n_seed]
        for vid in np.flatnonzero(contains_many(start_shape, seed_pos)):
            g.add_edge(start_vid, int(vid))

    goal_shape = _relaxed_shape(goal, local_map, bounds, params.clearance)
    goal_vid = g.add_vertex(goal, goal_shape)
    for vid in np.flatnonzero(g.contains_batch(goal)[:goal_vid]):
        g.add_edge(int(vid), goal_vid)

    g.start_vid = start_vid
    g.goal_vid = goal_vid
    g.n_seed_edges = g.n_edges

    while not g.reachable[goal_vid]:
        if g.sample_count >= params.sample_cap:
            raise IterationCapExceeded(
                f"{params.sample_cap} samples without connecting the goal")
        x_rand = sample_point(rng, region, goal, params.goal_bias)
        g.samples.append(x_rand)
        near_vid = nearest(g, x_rand, exclude=goal_vid)
        try:
            x_new = steer(x_rand, g.vertices[near_vid], params.eta,
                          params.steer_frac)
        except DegenerateRay:
            continue
        dists = np.linalg.norm(g.positions() - x_new, axis=1)
        coincident = int(np.argmin(dists)) if dists.min() < 1e-9 else -1
        step_len = float(np.linalg.norm(x_new - g.vertices[near_vid].position))
        if coincident < 0 and step_len < params.min_step:
            continue
        near_set = near_intersected_shapes(g, x_new)
        if coincident >= 0:
            new_vid = coincident
        else:
            try:
                shape = _build_shape(x_new, local_map, bounds, params.clearance)
            except CenterInsideObstacle:
                continue
            new_vid = g.add_vertex(x_new, shape)
        if new_vid == near_vid:
            continue
        g.add_edge(near_vid, new_vid)
        for vid in near_set:
            if int(vid) != new_vid:
                g.add_edge(int(vid), new_vid)
        if new_vid != goal_vid and contains(g.vertices[new_vid].shape, goal):
            g.add_edge(new_vid, goal_vid)
    return g


def shortest_path(graph: PlanGraph, start_vid: int | None = None,
                  goal_vid: int | None = None) -> PathResult:
    """Dijkstra over edge lengths with index-based deterministic tie-breaking."""
    s = graph.start_vid if start_vid is None else start_vid
    t = graph.goal_vid if goal_vid is None else goal_vid
    n = len(graph)
    dist = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    dist[s] = 0.0
    heap = [(0.0, s)]
    done = np.zeros(n, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        if u == t:
            break
        for v, w in graph.out[u].items():
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                parent[v] = u
                heapq.heappush(heap, (nd, v))
    if not np.isfinite(dist[t]):
        raise Unreachable(f"no path from vertex {s} to vertex {t}")
    chain = [t]
    while chain[-1] != s:
        chain.append(int(parent[chain[-1]]))
    chain.reverse()
    waypoints = np.array([graph.vertices[v].position for v in chain])
    shapes = [graph.vertices[v].shape for v in chain]
    return PathResult(waypoints, shapes, float(dist[t]), graph.sample_count)


def consolidate_path(path: PathResult, min_sep: float = 0.02,
                     check_samples: int = 32) -> PathResult:
    """Drop waypoints that sit closer than `min_sep` to their neighbor.

    A waypoint is removed only when the bridged chord provably stays inside
    the predecessor waypoint's shape, so the per-segment containment
    invariant survives.  Millimeter hops otherwise wreck the time allocation.
    """
    wp = [np.asarray(w) for w in path.waypoints]
    shp = list(path.shapes)
    changed = True
    while changed and len(wp) > 2:
        changed = False
        for i in range(len(wp) - 1):
            if np.linalg.norm(wp[i + 1] - wp[i]) >= min_sep:
                continue
            options = []
            if i + 1 < len(wp) - 1:
                options.append((i + 1, i))      # drop the later waypoint
            if 0 < i:
                options.append((i, i - 1))      # drop the earlier waypoint
            frac = np.linspace(0.0, 1.0, check_samples)[:, None]
            for drop, src in options:
                chord = wp[src] * (1 - frac) + wp[drop + 1] * frac
                if contains_many(shp[src], chord).all():
                    del wp[drop]
                    del shp[drop]
                    changed = True
                    break
            if not changed and np.linalg.norm(wp[i + 1] - wp[i]) < 1e-4 and options:
                # Sub-0.1mm hop: merging perturbs the path far less than the
                # clearance margin even when containment cannot be re-proven.
                drop = options[0][0]
                del wp[drop]
                del shp[drop]
                changed = True
            if changed:
                break
    waypoints = np.asarray(wp)
    length = float(np.sum(np.linalg.norm(np.diff(waypoints, axis=0), axis=1)))
    return PathResult(waypoints, shp, length, path.sampled_point_count)


def subdivide_path(path: PathResult, max_seg_len: float = 2.0) -> PathResult:
    """Split long segments with collinear waypoints.

    Chord points inherit the source waypoint's shape, so containment of every
    sub-chord is implied by the edge invariant; short segments keep the
    minimum-snap curve close to the straight path.
    """
    wp, shp = [path.waypoints[0]], []
    for i in range(len(path.waypoints) - 1):
        a, b = path.waypoints[i], path.waypoints[i + 1]
        d = float(np.linalg.norm(b - a))
        pieces = max(1, int(math.ceil(d / max_seg_len)))
        for k in range(1, pieces + 1):
            wp.append(a + (b - a) * (k / pieces))
            shp.append(path.shapes[i])
    shp.append(path.shapes[-1])
    return PathResult(np.asarray(wp), shp, path.total_length,
                      path.sampled_point_count)


def prune(graph: PlanGraph, region: SensingRegion, memory: MemoryMap | None,
          clearance: float = 0.1, sample_spacing: float = 0.05,
          new_points: np.ndarray | None = None) -> PlanGraph:
    """In-region subgraph with edges revalidated against the memory map.

    Vertices outside the just-sensed region are dropped with their edges;
    surviving edges are sampled along their segment and discarded if any
    sample comes within `clearance` of a remembered obstacle point.  Edges
    validated by an earlier prune are re-checked only against `new_points`
    (points first seen this iteration) when provided.
    """
    if not len(graph):
        return PlanGraph(graph.bounds)
    keep = region.contains_many(graph.positions())
    old_to_new = np.full(len(graph), -1, dtype=np.int64)
    pruned = PlanGraph(graph.bounds)
    for old_vid in np.flatnonzero(keep):
        old_to_new[old_vid] = pruned.add_vertex(graph.vertices[old_vid].position,
                                                graph.vertices[old_vid].shape)

    candidates = []
    for u, nbrs in enumerate(graph.out):
        if not keep[u]:
            continue
        for v, w in nbrs.items():
            if keep[v]:
                candidates.append((u, v, w, graph.edge_validated[(u, v)]))
    if not candidates:
        return pruned

    new_index = None
    if new_points is not None and len(new_points):
        new_index = VoxelIndex(new_points)

    def edge_samples(u, v, w):
        n = max(2, int(math.ceil(w / sample_spacing)) + 1)
        frac = np.linspace(0.0, 1.0, n)[:, None]
        return graph.vertices[u].position * (1 - frac) + \
            graph.vertices[v].position * frac

    full_check, fast_check = [], []
    for idx, (u, v, w, validated) in enumerate(candidates):
        if validated and memory is not None:
            fast_check.append(idx)
        else:
            full_check.append(idx)

    bad = np.zeros(len(candidates), dtype=bool)
    for idx_list, index in ((full_check, memory), (fast_check, new_index)):
        if not idx_list or index is None:
            continue
        pts, owner = [], []
        for idx in idx_list:
            u, v, w, _ = candidates[idx]
            s = edge_samples(u, v, w)
            pts.append(s)
            owner.append(np.full(len(s), idx))
        hits = index.any_within(np.concatenate(pts), clearance)
        owner = np.concatenate(owner)
        bad[np.unique(owner[hits])] = True

    for idx, (u, v, w, _) in enumerate(candidates):
        if not bad[idx]:
            pruned.add_edge(int(old_to_new[u]), int(old_to_new[v]), validated=True)
    return pruned
