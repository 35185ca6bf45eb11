import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

import config
from dynamics import PX, PY, V, SvState

# Configure logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LaneSet:
    """Ordered lane centerlines (m) and the common lane width (m)"""
    centerlines: Tuple[float, ...] = (-2.0, -6.0, -10.0)
    width: float = 4.0

    def __post_init__(self):
        if not self.centerlines:
            raise ValueError("LaneSet needs at least one lane")
        diffs = np.diff(self.centerlines)
        if len(diffs) and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError(f"Lane centerlines must be strictly monotone: {self.centerlines}")
        if self.width <= 0:
            raise ValueError(f"Lane width must be positive, got {self.width}")

    def __len__(self) -> int:
        return len(self.centerlines)

    def nearest(self, y: float) -> int:
        """Index of the lane whose centerline is closest to y (lower index on ties)"""
        return int(np.argmin(np.abs(np.asarray(self.centerlines) - y)))

    def y(self, lane: int) -> float:
        return self.centerlines[lane]


def lane_of(y: float, lanes: LaneSet) -> int:
    """
    Lane index a lateral position belongs to

    Args:
        y: Lateral position (m)
        lanes: Lane set

    Returns:
        Index of the nearest centerline
    """
    return lanes.nearest(y)


@dataclass(frozen=True)
class SvAgent:
    """
    Surrounding vehicle driven by the intelligent driver model

    The state is [ox, oy, ovx, ovy]; SVs never change lanes so oy and ovy
    stay at their initial values.
    """
    id: int
    state: SvState
    target_speed: float
    lane: int
    a_idm: float = 1.5
    b_idm: float = 2.0
    s0: float = 2.0
    t_headway: float = 1.5
    delta_exp: float = 4.0
    brake_max: float = 9.0

    def __post_init__(self):
        if self.target_speed <= 0:
            raise ValueError(f"SV {self.id}: target speed must be positive, got {self.target_speed}")
        for name in ("a_idm", "b_idm", "s0", "t_headway", "delta_exp", "brake_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SV {self.id}: {name} must be positive, got {getattr(self, name)}")


def idm_accel(v: float, dv: float, s: float, agent: SvAgent) -> float:
    """
    Intelligent driver model acceleration

    Args:
        v: Own speed (m/s)
        dv: Closing speed to the leader, own speed minus leader speed (m/s)
        s: Bumper-to-bumper gap (m); math.inf when there is no leader
        agent: IDM parameters

    Returns:
        Acceleration clamped to [-brake_max, a_idm]
    """
    free_road = 1.0 - (v / agent.target_speed) ** agent.delta_exp
    if math.isinf(s):
        interaction = 0.0
    else:
        s_star = agent.s0 + v * agent.t_headway + v * dv / (2.0 * math.sqrt(agent.a_idm * agent.b_idm))
        s_star = max(s_star, 0.0)
        interaction = (s_star / max(s, 0.1)) ** 2
    accel = agent.a_idm * (free_road - interaction)
    return float(np.clip(accel, -agent.brake_max, agent.a_idm))


def find_leader(agent: SvAgent, agents: Sequence[SvAgent], ev=None,
                lanes: Optional[LaneSet] = None) -> Tuple[float, float]:
    """
    Gap and speed of the nearest vehicle ahead in the agent's lane

    The EV counts as a leader when it is ahead and its nearest lane is the
    agent's lane.

    Returns:
        (gap, leader_speed); (inf, 0.0) when the lane ahead is free
    """
    ox = agent.state[0]
    best_dx = math.inf
    leader_speed = 0.0
    for other in agents:
        if other.id == agent.id or other.lane != agent.lane:
            continue
        dx = other.state[0] - ox
        if 0.0 < dx < best_dx:
            best_dx, leader_speed = dx, other.state[2]
    if ev is not None and lanes is not None:
        ev = np.asarray(ev, dtype=float)
        dx = float(ev[PX]) - ox
        if lanes.nearest(float(ev[PY])) == agent.lane and 0.0 < dx < best_dx:
            best_dx = dx
            leader_speed = float(ev[V] * math.cos(ev[2]))
    if math.isinf(best_dx):
        return math.inf, 0.0
    return best_dx - config.SV_LENGTH, leader_speed


def step_traffic(agents: Sequence[SvAgent], dt: float, ev=None,
                 lanes: Optional[LaneSet] = None) -> List[SvAgent]:
    """
    Advance every SV by one Euler step of the IDM

    All accelerations are computed from the current snapshot before any
    agent moves.

    Args:
        agents: Current agents
        dt: Step length (s)
        ev: Optional EV state acting as a leader for SVs behind it
        lanes: Lane set used to place the EV in a lane

    Returns:
        New list of agents in the same order
    """
    if dt <= 0:
        raise ValueError(f"step_traffic needs dt > 0, got {dt}")
    accels = []
    for agent in agents:
        gap, leader_speed = find_leader(agent, agents, ev, lanes)
        v = agent.state[2]
        accels.append(idm_accel(v, v - leader_speed, gap, agent))

    moved = []
    for agent, accel in zip(agents, accels):
        ox, oy, ovx, ovy = agent.state
        new_v = max(ovx + accel * dt, 0.0)
        moved.append(replace(agent, state=SvState(ox + ovx * dt, oy, new_v, ovy)))
    return moved


def perceive_nearest(ev, agents: Sequence[SvAgent], M: int) -> List[SvState]:
    """
    The M SVs closest to the EV

    Args:
        ev: EV state
        agents: All simulated SVs
        M: Number of perceived SVs

    Returns:
        Up to M SV states sorted by Euclidean distance, ties broken by agent order
    """
    if M < 0:
        raise ValueError(f"perceive_nearest needs M >= 0, got {M}")
    if M == 0 or not agents:
        return []
    ev = np.asarray(ev, dtype=float)
    distances = [math.hypot(a.state[0] - ev[PX], a.state[1] - ev[PY]) for a in agents]
    order = sorted(range(len(agents)), key=lambda i: (distances[i], i))
    return [SvState(*agents[i].state) for i in order[:M]]
