"""Online generalized-shape motion planning for 3-D agents."""

from .geometry import (Box, CenterInsideObstacle, EmptyObstacle,
                       GeneralizedShape, ObstaclePoints, SectorParams,
                       SensingRegion, brute_force_contains,
                       build_generalized_shape, contains, contains_many,
                       obstacle_sector, ray_exit_distance,
                       sensing_shape_contains)
from .environment import (BoxSpec, CylinderSpec, Environment, GenerationFailed,
                          LocalMap, MemoryMap, SensorModel, SphereSpec,
                          collision_check, env_from_json, env_to_json,
                          generate_horseshoe, generate_narrow_passage,
                          generate_random_forest, generate_thin_corridor,
                          load_environment, sample_truncated_gaussian,
                          save_environment, sense)
from .planner import (DegenerateRay, IterationCapExceeded, PathResult,
                      PlanGraph, PlannerParams, Unreachable, consolidate_path,
                      gse_plan, near_intersected_shapes, nearest, prune,
                      sample_point, shortest_path, steer)
from .trajopt import (BoundaryState, InfeasibleConstraints, OutOfDomain,
                      PiecewisePolynomial, SingularKKT, TrajoptParams,
                      allocate_times, enforce_feasibility, fallback_trajectory,
                      min_snap_qp, snap_cost)
from .rhp import (AgentState, IterationRecord, RunConfig, RunResult, run,
                  run_result_to_json, trigger)

__version__ = "0.1.0"
