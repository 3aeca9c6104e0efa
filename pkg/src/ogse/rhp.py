"""Receding-horizon main loop: sense, plan, optimize, traverse, repeat.

Each iteration senses a local map about the current position, plans a path to
the goal treating unexplored space as free, fits a minimum-snap trajectory,
and follows it until the lookahead point leaves the sensing shape (sensing
region intersected with the safe region about the iteration start).  The next
iteration starts exactly where the previous one stopped, with matching
velocity, acceleration, and jerk.
"""

from __future__ import annotations

import dataclasses
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .environment import (Environment, MemoryMap, SensorModel, sense)
from .geometry import (GeneralizedShape, SensingRegion, as_point, contains,
                       sensing_shape_contains)
from .planner import (IterationCapExceeded, PlannerParams,
                      consolidate_path, gse_plan, prune, shortest_path)
from .trajopt import (BoundaryState, InfeasibleConstraints, SingularKKT,
                      TrajoptParams, allocate_times, enforce_feasibility,
                      fallback_trajectory, min_snap_qp, snap_cost)


@dataclass
class AgentState:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray
    time: float = 0.0


@dataclass
class IterationRecord:
    index: int
    p_start: np.ndarray
    p_end: np.ndarray
    path_time_ms: float
    trajopt_time_ms: float
    snap_cost: float
    sampled_points: int
    trigger_reason: str          # exit-cube | exit-shape | goal | safety
    m_loc: int = 0
    n_vertices: int = 0
    n_waypoints: int = 0
    repair_rounds: int = 0
    fallback: bool = False
    steps: int = 0


@dataclass
class RunConfig:
    epsilon: float = 0.1
    dt: float = 0.05
    lookahead: int = 1
    max_iterations: int = 200
    planner: PlannerParams = field(default_factory=PlannerParams)
    trajopt: TrajoptParams = field(default_factory=TrajoptParams)
    sensor: SensorModel = field(default_factory=SensorModel)
    seed: int = 0
    trigger_margin: float = 0.3   # cube shrink: one step + clearance + slack
    collision_clearance: float = 0.1
    collision_substeps: int = 5
    record_samples: bool = False
    initial_heading: tuple | None = None

    def __post_init__(self):
        if self.epsilon <= 0 or self.dt <= 0 or self.lookahead < 1:
            raise ValueError("epsilon, dt must be positive and lookahead >= 1")


@dataclass
class RunResult:
    success: bool
    status: str                  # success | iteration_cap | plan_failed | stuck
    iterations: list
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    snap_cost_total: float
    trigger_count: int
    safety_trigger_count: int
    collision_count: int
    collision_samples: int
    path_length: float
    fallback_count: int
    x_init: np.ndarray
    x_goal: np.ndarray
    seed: int
    sample_points: np.ndarray | None = None

    @property
    def collided(self) -> bool:
        return self.collision_count > 0


def trigger(p_k0, region: SensingRegion, shape: GeneralizedShape,
            next_point) -> int:
    """Replanning trigger: 0 to keep following, 1 to replan.

    Fires as soon as the lookahead point leaves the sensing region or the
    safe region computed at the iteration start.
    """
    if sensing_shape_contains(shape, region, next_point):
        return 0
    return 1


def _unit_or(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 1e-9 else fallback


def run(env: Environment, x_init, x_goal, config: RunConfig) -> RunResult:
    """Execute the full receding-horizon loop until the goal or a cap."""
    x_init = as_point(x_init)
    x_goal = as_point(x_goal)
    if env.min_distance(x_init) < config.collision_clearance:
        raise ValueError("x_init is not in ground-truth free space")
    if env.min_distance(x_goal) < config.collision_clearance:
        raise ValueError("x_goal is not in ground-truth free space")

    rng = np.random.default_rng(config.seed)
    memory = MemoryMap(env)
    reused_graph = None
    zero = np.zeros(3)
    state = AgentState(x_init.copy(), zero.copy(), zero.copy(), zero.copy(), 0.0)
    heading = _unit_or(np.asarray(config.initial_heading, dtype=np.float64)
                       if config.initial_heading is not None
                       else x_goal - x_init, np.array([1.0, 0.0, 0.0]))

    records: list[IterationRecord] = []
    stitched_t = [0.0]
    stitched_p = [state.position.copy()]
    stitched_v = [state.velocity.copy()]
    collision_count = 0
    collision_samples = 0
    safety_triggers = 0
    fallback_count = 0
    all_samples: list[np.ndarray] = []
    status = "iteration_cap"
    stall = 0

    for k in range(1, config.max_iterations + 1):
        if np.linalg.norm(state.position - x_goal) < config.epsilon:
            status = "success"
            break
        p_k0 = state.position.copy()
        local_map = sense(env, p_k0, heading, config.sensor, rng)
        new_points = memory.update(local_map)

        t0 = _time.perf_counter()
        try:
            graph = gse_plan(p_k0, x_goal, local_map, local_map.region, rng,
                             config.planner, env.bounds, seed_graph=reused_graph)
        except IterationCapExceeded:
            retry = dataclasses.replace(config.planner,
                                        sample_cap=2 * config.planner.sample_cap)
            try:
                graph = gse_plan(p_k0, x_goal, local_map, local_map.region, rng,
                                 retry, env.bounds, seed_graph=reused_graph)
            except IterationCapExceeded:
                status = "plan_failed"
                break
        path = consolidate_path(shortest_path(graph))
        path_ms = (_time.perf_counter() - t0) * 1e3
        if config.record_samples and graph.samples:
            all_samples.append(np.asarray(graph.samples))

        t1 = _time.perf_counter()
        start_state = BoundaryState(p_k0, state.velocity, state.acceleration,
                                    state.jerk)
        end_state = BoundaryState.at_rest(x_goal) if sensing_shape_contains(
            path.shapes[0], local_map.region, x_goal) else None
        times = allocate_times(path, config.trajopt)
        try:
            traj = min_snap_qp(path, times, start_state, end_state)
            traj = enforce_feasibility(traj, path.shapes[:-1], config.trajopt,
                                       extra_dt=config.dt)
        except (SingularKKT, InfeasibleConstraints):
            traj = fallback_trajectory(path.waypoints, path.shapes[:-1],
                                       config.trajopt)
        trajopt_ms = (_time.perf_counter() - t1) * 1e3
        if traj.fallback:
            fallback_count += 1

        trig_region = local_map.region.shrunk(config.trigger_margin)
        shape_k0 = path.shapes[0]
        duration = traj.duration
        j = 0
        reason = None
        iter_positions = []
        while True:
            t_prev = min(j * config.dt, duration)
            if t_prev >= duration - 1e-12:
                reason = "goal"
                break
            t_next = min((j + 1) * config.dt, duration)
            p_next = traj.eval(t_next, 0)
            t_la = min((j + config.lookahead) * config.dt, duration)
            la_point = traj.eval(t_la, 0)
            if trigger(p_k0, trig_region, shape_k0, la_point) or (
                    config.lookahead > 1
                    and trigger(p_k0, trig_region, shape_k0, p_next)):
                if not trig_region.contains(la_point):
                    reason = "exit-cube"
                else:
                    reason = "exit-shape"
                break
            if len(memory) and memory.any_within(
                    p_next[None, :], config.collision_clearance)[0]:
                reason = "safety"
                safety_triggers += 1
                break
            sub = np.linspace(t_prev, t_next, config.collision_substeps + 1)[1:]
            iter_positions.append(traj.eval_many(sub, 0))
            j += 1
            state.position = p_next
            state.velocity = traj.eval(t_next, 1)
            state.acceleration = traj.eval(t_next, 2)
            state.jerk = traj.eval(t_next, 3)
            state.time += t_next - t_prev
            stitched_t.append(state.time)
            stitched_p.append(state.position.copy())
            stitched_v.append(state.velocity.copy())
            if np.linalg.norm(state.position - x_goal) < config.epsilon:
                reason = "goal"
                break

        if iter_positions:
            pts = np.concatenate(iter_positions)
            dists = env.min_distances(pts)
            collision_count += int(np.sum(dists < config.collision_clearance))
            collision_samples += len(pts)

        records.append(IterationRecord(
            index=k, p_start=p_k0, p_end=state.position.copy(),
            path_time_ms=path_ms, trajopt_time_ms=trajopt_ms,
            snap_cost=snap_cost(traj), sampled_points=path.sampled_point_count,
            trigger_reason=reason, m_loc=local_map.m_loc,
            n_vertices=len(graph), n_waypoints=len(path.waypoints),
            repair_rounds=traj.repair_rounds, fallback=traj.fallback, steps=j))

        if j == 0 and reason != "goal":
            stall += 1
            if stall >= 5:
                status = "stuck"
                break
        else:
            stall = 0

        pruned = prune(graph, local_map.region, memory,
                       clearance=config.collision_clearance,
                       new_points=new_points)
        reused_graph = pruned
        heading = _unit_or(state.velocity, _unit_or(x_goal - state.position,
                                                    heading))
    else:
        status = "iteration_cap"

    if np.linalg.norm(state.position - x_goal) < config.epsilon:
        status = "success"

    positions = np.asarray(stitched_p)
    seg = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    result = RunResult(
        success=status == "success",
        status=status,
        iterations=records,
        times=np.asarray(stitched_t),
        positions=positions,
        velocities=np.asarray(stitched_v),
        snap_cost_total=float(sum(r.snap_cost for r in records)),
        trigger_count=sum(1 for r in records if r.trigger_reason != "goal"),
        safety_trigger_count=safety_triggers,
        collision_count=collision_count,
        collision_samples=collision_samples,
        path_length=float(seg.sum()),
        fallback_count=fallback_count,
        x_init=x_init, x_goal=x_goal, seed=config.seed,
        sample_points=(np.concatenate(all_samples)
                       if config.record_samples and all_samples else None),
    )
    return result


def run_result_to_json(result: RunResult) -> dict:
    """JSON document for a run; wall-clock timings live under 'timing'."""
    return {
        "schema": 1,
        "success": result.success,
        "status": result.status,
        "seed": result.seed,
        "x_init": [float(v) for v in result.x_init],
        "x_goal": [float(v) for v in result.x_goal],
        "snap_cost_total": result.snap_cost_total,
        "trigger_count": result.trigger_count,
        "safety_trigger_count": result.safety_trigger_count,
        "collision_count": result.collision_count,
        "collision_samples": result.collision_samples,
        "path_length": result.path_length,
        "fallback_count": result.fallback_count,
        "iterations": [
            {
                "k": r.index,
                "p_start": [float(v) for v in r.p_start],
                "p_end": [float(v) for v in r.p_end],
                "snap_cost": r.snap_cost,
                "sampled_points": r.sampled_points,
                "trigger_reason": r.trigger_reason,
                "m_loc": r.m_loc,
                "n_vertices": r.n_vertices,
                "n_waypoints": r.n_waypoints,
                "repair_rounds": r.repair_rounds,
                "fallback": r.fallback,
                "steps": r.steps,
            }
            for r in result.iterations
        ],
        "timing": {
            "path_time_ms": [r.path_time_ms for r in result.iterations],
            "trajopt_time_ms": [r.trajopt_time_ms for r in result.iterations],
        },
    }
