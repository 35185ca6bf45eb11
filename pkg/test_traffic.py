import logging
import math

import numpy as np
import pytest

import config
from dynamics import SvState
from traffic import LaneSet, SvAgent, find_leader, idm_accel, lane_of, perceive_nearest, step_traffic

# Configure logging
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=logging.DEBUG
)
logger = logging.getLogger(__name__)

LANES = LaneSet()

DENSE_SVS = [
    ((-10.0, -10.0, 9.5, 0.0), 10.0),
    ((25.0, -10.0, 8.5, 0.0), 8.0),
    ((60.0, -10.0, 9.0, 0.0), 12.0),
    ((70.0, -6.0, 8.0, 0.0), 9.5),
    ((85.0, -6.0, 8.5, 0.0), 8.5),
    ((100.0, -6.0, 9.2, 0.0), 9.0),
    ((130.0, -2.0, 10.0, 0.0), 8.0),
    ((110.0, -2.0, 8.0, 0.0), 8.5),
    ((160.0, -2.0, 12.0, 0.0), 9.2),
]


def _agent(agent_id, x, y, v, v0=10.0):
    return SvAgent(id=agent_id, state=SvState(x, y, v, 0.0), target_speed=v0, lane=LANES.nearest(y))


def _dense_agents():
    return [_agent(i, s[0], s[1], s[2], v0) for i, (s, v0) in enumerate(DENSE_SVS)]


def test_lane_set():
    """Test lane lookup and validation"""
    assert lane_of(-6.3, LANES) == 1
    assert lane_of(-1.0, LANES) == 0
    assert lane_of(-11.0, LANES) == 2
    assert LANES.y(2) == -10.0
    with pytest.raises(ValueError):
        LaneSet(centerlines=(-2.0, -6.0, -4.0))
    with pytest.raises(ValueError):
        LaneSet(width=0.0)
    logger.info("Lane set test passed!")


def test_idm_accel():
    """Test the IDM law at equilibrium, standstill and against the formula"""
    agent = _agent(0, 0.0, -6.0, 10.0)
    assert idm_accel(10.0, 0.0, math.inf, agent) == pytest.approx(0.0, abs=1e-12)
    assert idm_accel(0.0, 0.0, math.inf, agent) == pytest.approx(agent.a_idm)
    assert idm_accel(0.0, 0.0, agent.s0, agent) == pytest.approx(0.0, abs=1e-12)

    v, dv, s = 8.0, 2.0, 20.0
    s_star = agent.s0 + v * agent.t_headway + v * dv / (2.0 * math.sqrt(agent.a_idm * agent.b_idm))
    expected = agent.a_idm * (1.0 - (v / agent.target_speed) ** agent.delta_exp - (s_star / s) ** 2)
    assert idm_accel(v, dv, s, agent) == pytest.approx(expected, rel=1e-12)

    # Emergency braking is clamped
    assert idm_accel(20.0, 20.0, 1.0, agent) == pytest.approx(-agent.brake_max)
    with pytest.raises(ValueError):
        SvAgent(id=1, state=SvState(0, 0, 0, 0), target_speed=0.0, lane=0)
    logger.info("IDM acceleration test passed!")


def test_free_road_step():
    """Test that an unobstructed agent at its target speed moves at constant speed"""
    agent = _agent(0, 5.0, -6.0, 10.0)
    moved = step_traffic([agent], 0.1)[0]
    assert moved.state.ox == pytest.approx(6.0, abs=1e-9)
    assert moved.state.ovx == pytest.approx(10.0, abs=1e-9)
    assert moved.state.oy == agent.state.oy
    assert agent.state.ox == 5.0, "step_traffic must not mutate its input"
    with pytest.raises(ValueError):
        step_traffic([agent], 0.0)
    logger.info("Free road step test passed!")


def test_approach_stopped_leader():
    """Test that an agent approaching a stopped EV brakes without collision"""
    follower = _agent(0, 0.0, -2.0, 10.0)
    ev = np.array([60.0, -2.0, 0.0, 0.0, 0.0])
    agents = [follower]
    speeds = [follower.state.ovx]
    for _ in range(400):
        agents = step_traffic(agents, 0.1, ev, LANES)
        speeds.append(agents[0].state.ovx)
        gap = ev[0] - agents[0].state.ox - config.SV_LENGTH
        assert gap > 0.0, f"Follower ran into the stopped EV (gap {gap:.2f} m)"
    assert np.all(np.diff(speeds[:21]) <= 1e-12), "Follower must brake while closing in"
    assert speeds[-1] < 1.0, f"Follower still moving at {speeds[-1]:.2f} m/s"
    assert min(speeds) >= 0.0
    logger.info("Stopped leader test passed!")


def test_lanes_do_not_interact():
    """Test that agents in different lanes ignore each other"""
    a = _agent(0, 0.0, -2.0, 10.0)
    b = _agent(1, 3.0, -6.0, 10.0)
    assert find_leader(a, [a, b]) == (math.inf, 0.0)
    moved = step_traffic([a, b], 0.1)
    alone = step_traffic([a], 0.1)[0]
    assert moved[0].state == alone.state
    logger.info("Lane partition test passed!")


def test_ev_as_leader():
    """Test that an SV reacts to the EV ahead in its lane"""
    follower = _agent(0, 0.0, -6.0, 10.0)
    ev = np.array([15.0, -6.0, 0.0, 5.0, 0.0])
    gap, speed = find_leader(follower, [follower], ev, LANES)
    assert gap == pytest.approx(15.0 - config.SV_LENGTH)
    assert speed == pytest.approx(5.0)
    with_ev = step_traffic([follower], 0.1, ev, LANES)[0]
    without = step_traffic([follower], 0.1)[0]
    assert with_ev.state.ovx < without.state.ovx

    # An EV in another lane is ignored
    other_lane = np.array([15.0, -2.0, 0.0, 5.0, 0.0])
    assert find_leader(follower, [follower], other_lane, LANES) == (math.inf, 0.0)
    logger.info("EV leader test passed!")


def test_dense_traffic_invariants():
    """Test lateral positions, speed range and gaps over 20 s of the dense scenario"""
    agents = _dense_agents()
    initial = {a.id: a for a in agents}
    for _ in range(200):
        agents = step_traffic(agents, 0.1)
        for agent in agents:
            start = initial[agent.id]
            assert agent.state.oy == start.state.oy
            assert 0.0 <= agent.state.ovx <= max(start.state.ovx, agent.target_speed) + 1e-6
        by_id = {a.id: a for a in agents}
        for lane in range(len(LANES)):
            # Followers stay behind their initial leaders with a positive bumper gap
            order = sorted((a for a in initial.values() if a.lane == lane), key=lambda a: a.state.ox)
            for follower, leader in zip(order, order[1:]):
                gap = by_id[leader.id].state.ox - by_id[follower.id].state.ox - config.SV_LENGTH
                assert gap > 0.0, f"SV {follower.id} ran into SV {leader.id} (gap {gap:.2f} m)"
    logger.info("Dense traffic invariant test passed!")


def test_perceive_nearest():
    """Test perception ordering, truncation and ties"""
    agents = _dense_agents()
    ev = np.array([0.0, -6.0, 0.0, 15.0, 0.0])
    assert perceive_nearest(ev, agents, 0) == []
    assert len(perceive_nearest(ev, agents, 50)) == len(agents)
    nearest = perceive_nearest(ev, agents, 3)
    assert [s.ox for s in nearest] == [-10.0, 25.0, 60.0]

    tied = [_agent(0, 10.0, -2.0, 8.0), _agent(1, 10.0, -10.0, 8.0)]
    assert perceive_nearest(ev, tied, 1)[0].oy == -2.0, "Ties go to the lower agent index"
    logger.info("Perception test passed!")


if __name__ == "__main__":
    test_lane_set()
    test_idm_accel()
    test_free_road_step()
    test_approach_stopped_leader()
    test_lanes_do_not_interact()
    test_ev_as_leader()
    test_dense_traffic_invariants()
    test_perceive_nearest()
