import asyncio
import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import config
from costs import CostWeights, barrier_h
from dynamics import OMEGA, ControlInput, VehicleParams, predict_sv
from nlp import Solution, SolveMode, SolveStatus, initialize, solve_sqp, transcribe
from traffic import LaneSet

# Configure logging
logger = logging.getLogger(__name__)


class PlannerMode(str, Enum):
    PTO1 = "pto1"
    PTO3 = "pto3"
    PTO6 = "pto6"


@dataclass(frozen=True)
class CandidateSpec:
    """One candidate slot: target lane, its centerline and the desired cruise speed"""
    id: int
    lane: int
    target_y: float
    target_speed: float

    @property
    def slot(self) -> Tuple[int, float]:
        """Warm-start key (lane, target speed), stable across lane changes"""
        return self.lane, self.target_speed


@dataclass
class CandidateTrajectory:
    """
    Optimized candidate together with its barrier evaluations

    barriers has shape (N + 1, M): barrier_h of state k against SV i
    predicted k * Ts ahead.
    """
    spec: CandidateSpec
    solution: Solution
    barriers: np.ndarray
    feasible: bool = True

    @property
    def id(self) -> int:
        return self.spec.id

    @property
    def lane(self) -> int:
        return self.spec.lane

    @property
    def degraded(self) -> bool:
        return self.solution.status == SolveStatus.DEGRADED

    @property
    def min_barrier(self) -> float:
        """Smallest barrier value over the horizon; inf without perceived SVs"""
        if self.barriers.size == 0:
            return float("inf")
        return float(self.barriers.min())


@dataclass(frozen=True)
class PlannerConfig:
    """
    Planner settings shared by every candidate

    The number of candidates follows from the mode: PTO1 plans on the
    current lane only, PTO3 once per lane and PTO6 at four speeds on the
    current lane plus once per remaining lane.
    """
    mode: PlannerMode = PlannerMode.PTO6
    weights: CostWeights = field(default_factory=CostWeights)
    params: VehicleParams = field(default_factory=VehicleParams)
    lanes: LaneSet = field(default_factory=LaneSet)
    N: int = 50
    Ts: float = 0.1
    target_speed: float = 15.0
    speed_fractions: Tuple[float, ...] = (1.0, 0.8, 0.6, 0.4)

    def __post_init__(self):
        object.__setattr__(self, "mode", PlannerMode(self.mode))
        if self.N < 2:
            raise ValueError(f"PlannerConfig needs N >= 2, got {self.N}")
        if self.Ts <= 0:
            raise ValueError(f"PlannerConfig needs Ts > 0, got {self.Ts}")
        if not self.params.v_min <= self.target_speed <= self.params.v_max:
            raise ValueError(f"Target speed {self.target_speed} outside "
                             f"[{self.params.v_min}, {self.params.v_max}]")
        if not self.speed_fractions or any(f <= 0 for f in self.speed_fractions):
            raise ValueError(f"Speed fractions must be positive, got {self.speed_fractions}")
        if self.mode != PlannerMode.PTO1 and len(self.lanes) != 3:
            raise ValueError(f"{self.mode.value} plans over three lanes, the lane set has {len(self.lanes)}")
        if self.mode == PlannerMode.PTO6 and len(self.speed_fractions) != 4:
            raise ValueError(f"pto6 uses four same-lane speed fractions, got {len(self.speed_fractions)}")

    @property
    def num_candidates(self) -> int:
        return {PlannerMode.PTO1: 1, PlannerMode.PTO3: 3, PlannerMode.PTO6: 6}[self.mode]


def make_candidates(lanes: LaneSet, ev, cfg: PlannerConfig) -> List[CandidateSpec]:
    """
    Build the candidate slots for one planning cycle

    Args:
        lanes: Lane set
        ev: Current EV state
        cfg: Planner configuration

    Returns:
        Candidate specs with ids 0..N_t-1
    """
    current = lanes.nearest(float(np.asarray(ev, dtype=float)[1]))
    v_g = cfg.target_speed

    if cfg.mode == PlannerMode.PTO1:
        return [CandidateSpec(0, current, lanes.y(current), v_g)]
    if cfg.mode == PlannerMode.PTO3:
        return [CandidateSpec(j, j, lanes.y(j), v_g) for j in range(len(lanes))]

    specs = [CandidateSpec(j, current, lanes.y(current), fraction * v_g)
             for j, fraction in enumerate(cfg.speed_fractions)]
    for lane in range(len(lanes)):
        if lane != current:
            specs.append(CandidateSpec(len(specs), lane, lanes.y(lane), v_g))
    return specs


def candidate_barriers(states: np.ndarray, svs: np.ndarray, Ts: float, w: CostWeights) -> np.ndarray:
    """
    Barrier values of a state sequence against constant-velocity SV predictions

    Args:
        states: EV states, shape (N + 1, 5)
        svs: Perceived SV states, shape (M, 4)
        Ts: Interval length (s)
        w: Cost weights (ellipse semi-axes)

    Returns:
        Array of shape (N + 1, M)
    """
    states = np.asarray(states, dtype=float)
    svs = np.asarray(svs, dtype=float).reshape(-1, 4)
    if len(svs) == 0:
        return np.zeros((len(states), 0))
    offsets = np.arange(len(states)) * Ts
    grid = predict_sv(svs[None, :, :], offsets[:, None])
    return barrier_h(states[:, None, :], grid, w)


def _solve_candidate(spec: CandidateSpec, ev, svs: np.ndarray, prev: Optional[Solution],
                     cfg: PlannerConfig, mode: SolveMode) -> CandidateTrajectory:
    problem = transcribe(spec.target_y, spec.target_speed, ev, svs, cfg.weights, cfg.params, cfg.N, cfg.Ts)
    solution = solve_sqp(problem, initialize(problem, prev), mode)
    if solution.status == SolveStatus.DEGRADED:
        logger.warning(f"Candidate {spec.id} (lane {spec.lane}) returned a degraded solution "
                       f"after {solution.iterations} iterations")
    barriers = candidate_barriers(solution.states, svs, cfg.Ts, cfg.weights)
    return CandidateTrajectory(spec, solution, barriers)


async def _solve_all(specs: Sequence[CandidateSpec], ev, svs: np.ndarray,
                     prev: Mapping[Tuple[int, float], Solution], cfg: PlannerConfig,
                     mode: SolveMode, threads: int) -> List[CandidateTrajectory]:
    semaphore = asyncio.Semaphore(threads)

    async def solve_one(spec: CandidateSpec) -> CandidateTrajectory:
        async with semaphore:
            return await asyncio.to_thread(_solve_candidate, spec, ev, svs, prev.get(spec.slot), cfg, mode)

    # gather keeps the input order, so results stay id-ordered
    return await asyncio.gather(*(solve_one(spec) for spec in specs))


def plan_parallel(ev, svs: Sequence, prev: Optional[Mapping[Tuple[int, float], Solution]], cfg: PlannerConfig,
                  mode: SolveMode = SolveMode.RTI, threads: Optional[int] = None) -> List[CandidateTrajectory]:
    """
    Transcribe and solve every candidate concurrently

    Args:
        ev: Current EV state
        svs: Perceived SV states
        prev: Previous solutions keyed by candidate slot (warm starts, see warm_starts)
        cfg: Planner configuration
        mode: SQP mode; RTI in closed loop
        threads: Worker count override; defaults to config.solver_threads()

    Returns:
        One CandidateTrajectory per candidate, ordered by id
    """
    specs = make_candidates(cfg.lanes, ev, cfg)
    sv_array = np.asarray(svs, dtype=float).reshape(-1, 4)
    workers = threads if threads is not None else config.solver_threads()
    if workers < 1:
        raise ValueError(f"plan_parallel needs at least one worker thread, got {workers}")

    start = time.perf_counter()
    candidates = asyncio.run(_solve_all(specs, ev, sv_array, prev or {}, cfg, mode, workers))
    logger.debug(f"Solved {len(candidates)} candidates on {workers} threads "
                 f"in {(time.perf_counter() - start) * 1000:.1f} ms")
    return candidates


def precheck_safety(cands: Sequence[CandidateTrajectory], svs: Sequence, Ts: float,
                    w: CostWeights) -> List[CandidateTrajectory]:
    """
    Flag candidates whose next position enters an SV safety ellipse

    Only the state at k = 1 is checked against the SVs predicted Ts ahead;
    h = 0 counts as safe.

    Args:
        cands: Candidate trajectories
        svs: Perceived SV states
        Ts: Interval length (s)
        w: Cost weights (ellipse semi-axes)

    Returns:
        Copies of the candidates with the feasible flag set
    """
    sv_array = np.asarray(svs, dtype=float).reshape(-1, 4)
    checked = []
    for cand in cands:
        if len(sv_array) == 0:
            feasible = True
        else:
            h_next = barrier_h(cand.solution.states[1], predict_sv(sv_array, Ts), w)
            feasible = bool(np.all(h_next >= 0.0))
        if not feasible:
            logger.debug(f"Candidate {cand.id} fails the next-position safety check")
        checked.append(replace(cand, feasible=feasible))
    return checked


def fallback_brake(ev, params: VehicleParams, Ts: float = 0.1) -> ControlInput:
    """
    Emergency control used when no candidate passes the safety check

    Args:
        ev: Current EV state
        params: Vehicle limits
        Ts: Control period (s)

    Returns:
        Maximal deceleration with the yaw-rate derivative steering omega toward zero
    """
    omega = float(np.asarray(ev, dtype=float)[OMEGA])
    omega_dot = float(np.clip(-omega / Ts, params.omega_dot_min, params.omega_dot_max))
    return ControlInput(params.a_min, omega_dot)


def warm_starts(cands: Sequence[CandidateTrajectory]) -> Dict[Tuple[int, float], Solution]:
    """
    Previous-solution map for the next cycle, keyed by (lane, target speed)

    PTO6 renumbers its candidates when the EV changes lane, so ids do not
    identify a candidate across cycles.
    """
    return {cand.spec.slot: cand.solution for cand in cands}
