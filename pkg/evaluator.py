import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence

import numpy as np

from dynamics import PY, V
from planner import CandidateSpec, CandidateTrajectory

# Configure logging
logger = logging.getLogger(__name__)


class NoFeasibleCandidate(Exception):
    """Raised by select when every candidate failed the safety check"""


@dataclass(frozen=True)
class EvalWeights:
    """
    Relative importance of the four evaluation metrics and their discounting

    Stages before n_c count fully; later stages decay with the metric's
    discount factor.
    """
    w_g: float = 2500.0
    w_l: float = 150.0
    w_c: float = 100.0
    w_m: float = 100.0
    n_c: int = 10
    gamma_g: float = 40.0
    gamma_l: float = 40.0
    gamma_c: float = 40.0
    v_g: float = 15.0

    def __post_init__(self):
        if min(self.w_g, self.w_l, self.w_c, self.w_m) < 0:
            raise ValueError("Evaluation weights must be nonnegative")
        if self.n_c < 1:
            raise ValueError(f"EvalWeights needs n_c >= 1, got {self.n_c}")
        if min(self.gamma_g, self.gamma_l, self.gamma_c) <= 0:
            raise ValueError("Metric discount factors must be positive")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.w_g, self.w_l, self.w_c, self.w_m])


@dataclass
class ScoredCandidate:
    candidate_id: int
    lane: int
    raw: np.ndarray
    normalized: np.ndarray
    total: float


class Selection(NamedTuple):
    lane: int
    trajectory: CandidateTrajectory
    scores: List[ScoredCandidate]


def discounted_sum(values, n_c: int, gamma: float) -> float:
    """
    Sum with full weight before stage n_c and exp(-(i - n_c) / gamma) from n_c on

    Args:
        values: Per-stage values for stages i = 1, 2, ...
        n_c: First discounted stage
        gamma: Discount factor

    Returns:
        Discounted sum
    """
    values = np.asarray(values, dtype=float)
    stages = np.arange(1, len(values) + 1)
    weights = np.where(stages < n_c, 1.0, np.exp(-(stages - n_c) / gamma))
    return float(np.sum(weights * values))


def metric_goal(traj, ew: EvalWeights) -> float:
    """Discounted squared speed error to v_g over x_1..x_N"""
    states = _states_of(traj)
    return discounted_sum((states[1:, V] - ew.v_g) ** 2, ew.n_c, ew.gamma_g)


def metric_lateral(traj, lane_y: float, ew: EvalWeights) -> float:
    """Discounted squared offset to the candidate's lane centerline over x_1..x_N"""
    states = _states_of(traj)
    return discounted_sum((states[1:, PY] - lane_y) ** 2, ew.n_c, ew.gamma_l)


def metric_comfort(traj, ew: EvalWeights, Ts: float) -> float:
    """
    Discounted squared jerk of the planned accelerations

    Args:
        traj: Candidate trajectory, Solution or control array of shape (N, 2)
        ew: Evaluation weights
        Ts: Interval length (s)

    Returns:
        Sum over j_i = (a_{i+1} - a_i) / Ts for the N - 1 consecutive pairs
    """
    controls = _controls_of(traj)
    jerk = np.diff(controls[:, 0]) / Ts
    return discounted_sum(jerk ** 2, ew.n_c, ew.gamma_c)


def metric_consistency(spec: CandidateSpec, prev_target_y: float) -> float:
    return float((spec.target_y - prev_target_y) ** 2)


def normalize(raw) -> np.ndarray:
    """
    Min-max normalize one metric across candidates

    Args:
        raw: Non-empty list of raw metric values

    Returns:
        Values in [0, 1]; all zeros when every value is equal
    """
    raw = np.asarray(raw, dtype=float)
    if raw.size == 0:
        raise ValueError("normalize needs at least one value")
    low, high = raw.min(), raw.max()
    if high == low:
        return np.zeros_like(raw)
    return (raw - low) / (high - low)


def score(cands: Sequence[CandidateTrajectory], ew: EvalWeights, prev_target_y: float,
          Ts: float) -> List[ScoredCandidate]:
    """
    Raw, normalized and total scores of every feasible candidate

    Args:
        cands: Candidate trajectories (infeasible ones are skipped)
        ew: Evaluation weights
        prev_target_y: Target lane centerline chosen in the previous cycle (m)
        Ts: Interval length (s)

    Returns:
        One ScoredCandidate per feasible candidate, in input order
    """
    feasible = [c for c in cands if c.feasible]
    if not feasible:
        return []
    raw = np.array([
        [
            metric_goal(c, ew),
            metric_lateral(c, c.spec.target_y, ew),
            metric_comfort(c, ew, Ts),
            metric_consistency(c.spec, prev_target_y),
        ]
        for c in feasible
    ])
    normalized = np.column_stack([normalize(raw[:, m]) for m in range(raw.shape[1])])
    totals = normalized @ ew.vector
    return [
        ScoredCandidate(c.id, c.lane, raw[j], normalized[j], float(totals[j]))
        for j, c in enumerate(feasible)
    ]


def select(cands: Sequence[CandidateTrajectory], ew: EvalWeights, prev_lane: int,
           prev_target_y: float, Ts: float) -> Selection:
    """
    Pick the feasible candidate with the lowest weighted score

    Ties prefer the previous lane, then the lowest candidate id.

    Args:
        cands: Candidate trajectories with feasibility flags
        ew: Evaluation weights
        prev_lane: Lane selected in the previous cycle
        prev_target_y: Its centerline (m)
        Ts: Interval length (s)

    Returns:
        Selection of (lane, trajectory, scores)

    Raises:
        NoFeasibleCandidate: when no candidate passed the safety check
    """
    scores = score(cands, ew, prev_target_y, Ts)
    if not scores:
        raise NoFeasibleCandidate(f"All {len(cands)} candidates failed the safety check")
    best = min(scores, key=lambda s: (s.total, s.lane != prev_lane, s.candidate_id))
    trajectory = next(c for c in cands if c.id == best.candidate_id)
    logger.debug(f"Selected candidate {best.candidate_id} on lane {best.lane} with score {best.total:.3f}")
    return Selection(best.lane, trajectory, scores)


def _states_of(traj) -> np.ndarray:
    if isinstance(traj, CandidateTrajectory):
        return traj.solution.states
    if hasattr(traj, "states"):
        return np.asarray(traj.states, dtype=float)
    return np.asarray(traj, dtype=float)


def _controls_of(traj) -> np.ndarray:
    if isinstance(traj, CandidateTrajectory):
        return traj.solution.controls
    if hasattr(traj, "controls"):
        return np.asarray(traj.controls, dtype=float)
    return np.asarray(traj, dtype=float).reshape(-1, 2)
