import logging
import math

import numpy as np
import pytest

from costs import CostWeights, barrier_h
from dynamics import V, VehicleParams, predict_sv, rk4_step, rollout
from nlp import (
    DecisionVariables,
    Linearization,
    QPError,
    QPStep,
    ShootingProblem,
    Solution,
    SolveMode,
    SolveStatus,
    SqpSolver,
    cold_start,
    continuity_defect,
    initialize,
    qp_subproblem,
    shift_warm_start,
    solve_sqp,
    transcribe,
)
from scenario import load_scenario
from traffic import perceive_nearest

# Configure logging
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=logging.DEBUG
)
logger = logging.getLogger(__name__)

PARAMS = VehicleParams()
X0 = np.array([0.0, -6.0, 0.0, 15.0, 0.0])


def test_continuity_defect():
    """Test defects on consistent, straight-line and wrapped-heading cases"""
    u = np.array([0.4, -0.2])
    x = np.array([1.0, -6.0, 0.1, 12.0, 0.3])
    np.testing.assert_allclose(continuity_defect(x, u, rk4_step(x, u, 0.1), 0.1), np.zeros(5), atol=1e-15)
    np.testing.assert_allclose(continuity_defect(X0, np.zeros(2), [1.4, -6, 0, 15, 0], 0.1),
                               [0.1, 0, 0, 0, 0], atol=1e-12)

    # A node stored at +pi and an integrated end at -pi are the same heading
    xk = np.array([0.0, 0.0, math.pi, 0.0, 0.0])
    end = rk4_step(xk, np.zeros(2), 0.1)
    node = end.copy()
    node[2] = -math.pi
    assert abs(continuity_defect(xk, np.zeros(2), node, 0.1)[2]) < 1e-12
    logger.info("Continuity defect test passed!")


def test_transcribe():
    """Test the shooting problem layout"""
    svs = [[25.0, -10.0, 8.5, 0.0], [70.0, -6.0, 8.0, 0.0]]
    problem = transcribe(-2.0, 15.0, X0, svs, CostWeights(), PARAMS, 50, 0.1)
    assert problem.horizon == pytest.approx(5.0)
    assert problem.sv_predictions.shape == (2, 51, 4)
    np.testing.assert_allclose(problem.sv_predictions[0, 50], predict_sv(svs[0], 5.0))
    np.testing.assert_allclose(problem.terminal_ref, [0.0, -2.0, 0.0, 15.0, 0.0])
    assert problem.desired.shape == (50, 5)

    empty = transcribe(-6.0, 15.0, X0, [], CostWeights(), PARAMS, 50, 0.1)
    assert empty.sv_predictions.shape == (0, 51, 4)
    assert empty.num_svs == 0

    with pytest.raises(ValueError):
        transcribe(-6.0, 15.0, [0.0, np.nan, 0.0, 15.0, 0.0], [], CostWeights(), PARAMS, 50, 0.1)
    with pytest.raises(ValueError):
        transcribe(-6.0, 15.0, X0, [[0.0, np.inf, 0.0, 0.0]], CostWeights(), PARAMS, 50, 0.1)
    logger.info("Transcription test passed!")


def test_initialize_and_shift():
    """Test cold starts and warm-start shifting"""
    problem = transcribe(-6.0, 15.0, X0, [], CostWeights(), PARAMS, 3, 0.1)
    cold = initialize(problem)
    np.testing.assert_array_equal(cold.controls, np.zeros((3, 2)))
    np.testing.assert_allclose(cold.states[:, 0], [0.0, 1.5, 3.0, 4.5], atol=1e-12)

    controls = np.array([[0.1, 0.0], [0.2, 0.1], [0.3, -0.1]])
    prev = _solution(controls)
    shifted = shift_warm_start(prev, X0, 0.1)
    np.testing.assert_array_equal(shifted.controls, [[0.2, 0.1], [0.3, -0.1], [0.3, -0.1]])
    assert shifted.N == problem.N

    solver = SqpSolver(problem)
    np.testing.assert_allclose(solver.defects(shifted), np.zeros((3, 5)), atol=1e-12)

    warm = initialize(problem, prev)
    np.testing.assert_array_equal(warm.controls, shifted.controls)

    # The new initial state need not lie on prev's trajectory
    moved_x0 = X0 + np.array([0.0, 0.5, 0.0, -1.0, 0.0])
    moved = shift_warm_start(prev, moved_x0, 0.1)
    np.testing.assert_array_equal(moved.states[0], moved_x0)
    np.testing.assert_allclose(moved.states, rollout(moved_x0, moved.controls, 0.1), atol=1e-12)

    constant = np.tile([0.5, 0.0], (3, 1))
    np.testing.assert_array_equal(shift_warm_start(_solution(constant), X0, 0.1).controls, constant)

    # A previous solution with another horizon falls back to a cold start
    longer = _solution(np.zeros((5, 2)))
    np.testing.assert_array_equal(initialize(problem, longer).controls, np.zeros((3, 2)))
    logger.info("Initialization test passed!")


def test_cold_start_brakes_behind_slow_sv():
    """Test that a coasting guess into an SV is replaced by the mildest collision-free braking"""
    svs = [[40.0, -6.0, 5.0, 0.0]]
    problem = transcribe(-6.0, 15.0, X0, svs, CostWeights(), PARAMS, 50, 0.1)
    guess = cold_start(problem)
    # The gap closes at 10 m/s, so at least 1.04 m/s^2 of braking keeps 3 m at t = 5 s
    np.testing.assert_allclose(guess.controls[:, 0], -1.25)
    assert not guess.controls[:, 1].any()
    np.testing.assert_allclose(guess.states, rollout(X0, guess.controls, 0.1), atol=1e-12)
    assert barrier_h(guess.states[None, 1:], problem.sv_predictions[:, 1:], problem.weights).min() >= 0.0

    # Nothing to avoid: coast
    clear = transcribe(-6.0, 15.0, X0, [[40.0, -2.0, 5.0, 0.0]], CostWeights(), PARAMS, 50, 0.1)
    np.testing.assert_array_equal(cold_start(clear).controls, np.zeros((50, 2)))

    # Unavoidable: full braking, never below v_min
    stuck = transcribe(-6.0, 15.0, X0, [[8.0, -6.0, 0.0, 0.0]], CostWeights(), PARAMS, 50, 0.1)
    guess = cold_start(stuck)
    assert guess.controls[0, 0] == PARAMS.a_min
    assert guess.states[:, V].min() >= PARAMS.v_min - 1e-12
    logger.info("Braking cold start test passed!")


def _solution(controls):
    return Solution(
        variables=DecisionVariables(controls, rollout(X0, controls, 0.1)),
        objective=0.0, defects=np.zeros(len(controls)), iterations=0,
        status=SolveStatus.CONVERGED, solve_time=0.0,
    )


def _lin(N=1, gu=None):
    eye = np.eye(5)
    B = np.zeros((5, 2))
    B[3, 0] = 0.1
    B[4, 1] = 0.1
    return Linearization(
        A=np.tile(eye, (N, 1, 1)), B=np.tile(B, (N, 1, 1)), d=np.zeros((N, 5)),
        gx=np.zeros((N, 5)), gu=np.zeros((N, 2)) if gu is None else gu,
        Hxx=np.tile(np.eye(5), (N, 1, 1)), Hxu=np.zeros((N, 5, 2)), Huu=np.tile(np.eye(2), (N, 1, 1)),
        gN=np.zeros(5), HN=np.eye(5),
        du_lower=np.full((N, 2), -1.0), du_upper=np.full((N, 2), 1.0),
    )


def test_qp_subproblem():
    """Test the Riccati QP on the zero case, a dense KKT oracle and the box projection"""
    step = qp_subproblem(_lin(N=3))
    np.testing.assert_array_equal(step.du, np.zeros((3, 2)))
    np.testing.assert_array_equal(step.dx, np.zeros((4, 5)))

    # Single stage: minimize 0.5 du' Huu du + gu' du + 0.5 dx1' HN dx1 with dx1 = B du
    lin = _lin(N=1, gu=np.array([[0.3, -0.2]]))
    lin.gN = np.array([0.0, 0.0, 0.0, 0.5, 0.1])
    step = qp_subproblem(lin)
    B = lin.B[0]
    H = lin.Huu[0] + B.T @ lin.HN @ B
    g = lin.gu[0] + B.T @ lin.gN
    np.testing.assert_allclose(step.du[0], np.linalg.solve(H, -g), atol=1e-8)
    np.testing.assert_allclose(step.dx[1], B @ step.du[0], atol=1e-12)

    big = _lin(N=4, gu=np.tile([50.0, -80.0], (4, 1)))
    step = qp_subproblem(big)
    assert np.all(step.du >= big.du_lower - 1e-12) and np.all(step.du <= big.du_upper + 1e-12)
    np.testing.assert_allclose(step.du, np.tile([-1.0, 1.0], (4, 1)))

    bad = _lin(N=1)
    bad.Huu = np.array([[[-1.0, 0.0], [0.0, 1.0]]])
    with pytest.raises(QPError):
        qp_subproblem(bad)
    logger.info("QP subproblem test passed!")


def test_cruise_on_centerline():
    """Test that cruising at the target speed on the centerline is already optimal"""
    problem = transcribe(-6.0, 15.0, X0, [], CostWeights(), PARAMS, 50, 0.1)
    solution = solve_sqp(problem, initialize(problem), SolveMode.CONVERGE)
    assert solution.status == SolveStatus.CONVERGED, f"Expected convergence, got {solution.status}"
    assert solution.objective < 1e-6, f"Objective {solution.objective} not near zero"
    assert np.max(np.abs(solution.controls)) < 1e-4
    logger.info("Centerline cruise test passed!")


def test_single_interval_quadratic():
    """Test one shooting interval against the closed-form least-squares solution"""
    dt = 0.1
    q_theta, q_v, q_omega = 1e3, 1e3, 1e2
    r_a, r_w = 1.0, 1.0
    weights = CostWeights(
        q_terminal=(0.0, 0.0, q_theta, q_v, q_omega), iota_terminal=(0.0, 0.0, 1.0, 1.0, 1.0),
        q_goal=(0.0,) * 5, r=(r_a, r_w),
    )
    x0 = np.array([0.0, -6.0, 0.05, 10.0, 0.1])
    ref = np.array([0.0, 0.0, 0.0, 10.2, 0.0])
    problem = ShootingProblem(
        N=1, Ts=dt, x0=x0, sv_predictions=np.zeros((0, 2, 4)), desired=np.zeros((1, 5)),
        terminal_ref=ref, weights=weights, params=PARAMS,
    )
    solution = solve_sqp(problem, initialize(problem), SolveMode.CONVERGE)

    a_star = q_v * dt * (ref[3] - x0[3]) / (r_a + q_v * dt ** 2)
    c_theta = x0[2] + x0[4] * dt - ref[2]
    c_omega = x0[4] - ref[4]
    half = 0.5 * dt ** 2
    w_star = -(q_theta * half * c_theta + q_omega * dt * c_omega) / (r_w + q_theta * half ** 2 + q_omega * dt ** 2)

    assert solution.status == SolveStatus.CONVERGED, f"Expected convergence, got {solution.status}"
    np.testing.assert_allclose(solution.controls[0], [a_star, w_star], atol=1e-6)
    logger.info(f"Single-interval oracle matched: a={a_star:.6f}, omega_dot={w_star:.6f}")


def test_randomized_transcriptions():
    """Test convergence, box feasibility and defects of solved random problems"""
    rng = np.random.default_rng(3)
    weights = CostWeights()
    lower, upper = PARAMS.control_bounds()
    for trial in range(20):
        target_y = rng.choice([-2.0, -6.0, -10.0])
        py = float(np.clip(target_y + rng.uniform(-2.5, 2.5), -10.3, -1.7))
        x0 = np.array([0.0, py, rng.uniform(-0.1, 0.1), rng.uniform(8.0, 20.0), rng.uniform(-0.2, 0.2)])
        problem = transcribe(target_y, 15.0, x0, [], weights, PARAMS, 30, 0.1)
        solution = solve_sqp(problem, initialize(problem), SolveMode.CONVERGE)
        assert solution.status == SolveStatus.CONVERGED, \
            f"Problem {trial} (x0={x0}, target {target_y}) ended with {solution.status}"
        assert np.all(solution.controls >= lower) and np.all(solution.controls <= upper), \
            "Controls left the box"
        assert np.isfinite(solution.objective)
        assert solution.defects.shape == (30,)
        assert solution.defects.max() < 1e-6, f"Converged with defect {solution.defects.max()}"
    logger.info("Randomized transcription test passed!")


def test_rti_runs_fixed_iterations():
    """Test that real-time iteration mode stops after the configured count"""
    problem = transcribe(-2.0, 15.0, X0, [[40.0, -6.0, 8.0, 0.0]], CostWeights(), PARAMS, 50, 0.1)
    solution = solve_sqp(problem, initialize(problem), SolveMode.RTI)
    assert solution.iterations <= 3
    assert solution.status in (SolveStatus.CONVERGED, SolveStatus.MAX_ITER, SolveStatus.DEGRADED)
    assert solution.states.shape == (51, 5) and solution.controls.shape == (50, 2)
    logger.info(f"RTI solve finished with status {solution.status.value} in {solution.iterations} iterations")


def test_merit_penalty_update():
    """Test that the merit penalty only grows, to twice the descent bound"""
    problem = transcribe(-6.0, 15.0, X0, [], CostWeights(), PARAMS, 3, 0.1)
    solver = SqpSolver(problem)
    start = solver.penalty
    du, dx = np.zeros((3, 2)), np.zeros((4, 5))
    assert solver.update_penalty(QPStep(du, dx, gradient_dot=-5.0, curvature=1.0), 1.0) == start
    assert solver.update_penalty(QPStep(du, dx, gradient_dot=1e5, curvature=4.0), 1.0) == \
        pytest.approx(2.0 * (1e5 + 2.0) / 0.5)
    raised = solver.penalty
    assert solver.update_penalty(QPStep(du, dx, gradient_dot=1.0, curvature=0.0), 1.0) == raised
    # Feasible iterates leave the penalty alone
    assert solver.update_penalty(QPStep(du, dx, gradient_dot=1e9, curvature=0.0), 0.0) == raised
    logger.info("Merit penalty update test passed!")

def test_slow_sv_ahead_forces_braking():
    """Test that an SV closing in on the same lane is avoided by braking, not by entering its ellipse"""
    svs = [[40.0, -6.0, 5.0, 0.0]]
    problem = transcribe(-6.0, 15.0, X0, svs, CostWeights(), PARAMS, 50, 0.1)
    solution = solve_sqp(problem, initialize(problem), SolveMode.CONVERGE)
    assert solution.status == SolveStatus.CONVERGED, f"Expected convergence, got {solution.status}"
    h = barrier_h(solution.states[None, :, :], problem.sv_predictions, problem.weights)
    assert h.min() >= 0.0, f"Trajectory enters the SV ellipse (min barrier {h.min():.3f})"
    assert solution.states[-1, V] < 14.0, f"EV did not slow down (final speed {solution.states[-1, V]:.2f})"
    logger.info(f"Braking test passed: min barrier {h.min():.3f}, final speed {solution.states[-1, V]:.2f}")


def test_merit_never_increases():
    """Test that every accepted line-search step lowers the merit function"""
    problem = transcribe(-2.0, 15.0, X0, [[40.0, -6.0, 8.0, 0.0]], CostWeights(), PARAMS, 50, 0.1)
    solution = solve_sqp(problem, initialize(problem), SolveMode.CONVERGE)
    assert solution.merit_history, "No line-searched step was recorded"
    for i, (before, after) in enumerate(solution.merit_history):
        assert after <= before, f"Merit increased at step {i}: {before:.6e} -> {after:.6e}"
    logger.info(f"Merit decreased over {len(solution.merit_history)} steps")


def test_warm_start_converges_quickly():
    """Test that a shifted previous solution converges within five iterations one cycle later"""
    scenario = load_scenario("paper_s4")
    cfg = scenario.planner
    ev = np.asarray(scenario.ev_state, dtype=float)
    svs = np.asarray(perceive_nearest(ev, scenario.agents, 3), dtype=float)
    for target_y in (-6.0, -2.0):
        first = transcribe(target_y, cfg.target_speed, ev, svs, cfg.weights, cfg.params, cfg.N, cfg.Ts)
        prev = solve_sqp(first, initialize(first), SolveMode.CONVERGE)
        assert prev.status == SolveStatus.CONVERGED, f"First solve for lane {target_y} ended with {prev.status}"

        nxt = transcribe(target_y, cfg.target_speed, prev.states[1], predict_sv(svs, cfg.Ts),
                         cfg.weights, cfg.params, cfg.N, cfg.Ts)
        solution = solve_sqp(nxt, initialize(nxt, prev), SolveMode.CONVERGE)
        assert solution.status == SolveStatus.CONVERGED
        assert solution.iterations <= 5, f"Warm start for lane {target_y} took {solution.iterations} iterations"
    logger.info("Warm start iteration count test passed!")


def test_linear_quadratic_problem_in_one_iteration():
    """Test that a longitudinal-only problem, linear in v, is solved exactly by one SQP step"""
    N, dt = 10, 0.1
    q_v, q_vN, r_a = 1.0, 10.0, 1.0
    weights = CostWeights(
        q_terminal=(0.0, 0.0, 0.0, q_vN, 0.0), iota_terminal=(0.0, 0.0, 0.0, 1.0, 0.0),
        q_goal=(0.0, 0.0, 0.0, q_v, 0.0), iota_goal=(0.0, 0.0, 0.0, 1.0, 0.0), r=(r_a, 1.0),
    )
    x0 = np.array([0.0, -6.0, 0.0, 10.0, 0.0])
    problem = transcribe(-6.0, 11.0, x0, [], weights, PARAMS, N, dt)
    solution = solve_sqp(problem, initialize(problem), SolveMode.CONVERGE)

    # v_k = v_0 + dt * sum_{j<k} a_j, so the accelerations solve a dense least-squares problem
    L = np.tril(np.full((N + 1, N), dt), -1)
    W = np.diag([q_v] * N + [q_vN])
    offset = np.full(N + 1, x0[3] - 11.0)
    a_star = -np.linalg.solve(L.T @ W @ L + r_a * np.eye(N), L.T @ W @ offset)

    assert solution.status == SolveStatus.CONVERGED, f"Expected convergence, got {solution.status}"
    assert solution.iterations == 1, f"Expected one iteration, took {solution.iterations}"
    np.testing.assert_allclose(solution.controls[:, 0], a_star, atol=1e-6)
    np.testing.assert_allclose(solution.controls[:, 1], 0.0, atol=1e-9)
    logger.info("One-iteration exactness test passed!")


if __name__ == "__main__":
    test_continuity_defect()
    test_transcribe()
    test_initialize_and_shift()
    test_cold_start_brakes_behind_slow_sv()
    test_qp_subproblem()
    test_cruise_on_centerline()
    test_single_interval_quadratic()
    test_randomized_transcriptions()
    test_rti_runs_fixed_iterations()
    test_slow_sv_ahead_forces_braking()
    test_merit_penalty_update()
    test_merit_never_increases()
    test_warm_start_converges_quickly()
    test_linear_quadratic_problem_in_one_iteration()
