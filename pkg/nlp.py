import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

import config
from costs import (
    CostWeights,
    barrier_h,
    collision_penalty,
    running_cost,
    stage_derivatives_batch,
    state_penalty,
    terminal_cost,
    terminal_derivatives,
    weight_dominance_ok,
)
from dynamics import (
    CONTROL_DIM,
    STATE_DIM,
    THETA,
    V,
    VehicleParams,
    predict_sv,
    rk4_jacobians,
    rk4_step,
    rollout,
    state_diff,
    wrap_angle,
)

# Configure logging
logger = logging.getLogger(__name__)


class QPError(RuntimeError):
    """Raised when the QP subproblem receives curvature that is not positive semi-definite"""


class SolveMode(str, Enum):
    CONVERGE = "converge"
    RTI = "rti"


class SolveStatus(str, Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    DEGRADED = "degraded"


@dataclass
class ShootingProblem:
    """
    Multiple-shooting transcription of one candidate's optimal control problem

    sv_predictions has shape (M, N + 1, 4): SV i predicted at offset k * Ts.
    desired holds the per-stage desired state for k = 0..N-1 and
    terminal_ref the reference of the terminal cost.
    """
    N: int
    Ts: float
    x0: np.ndarray
    sv_predictions: np.ndarray
    desired: np.ndarray
    terminal_ref: np.ndarray
    weights: CostWeights
    params: VehicleParams

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"ShootingProblem needs N >= 1, got {self.N}")
        if self.Ts <= 0:
            raise ValueError(f"ShootingProblem needs Ts > 0, got {self.Ts}")
        if self.sv_predictions.shape[1:] != (self.N + 1, 4):
            raise ValueError(f"SV prediction grid has shape {self.sv_predictions.shape}, "
                             f"expected (M, {self.N + 1}, 4)")
        if self.desired.shape != (self.N, STATE_DIM):
            raise ValueError(f"Desired states have shape {self.desired.shape}, expected ({self.N}, 5)")

    @property
    def horizon(self) -> float:
        return self.N * self.Ts

    @property
    def num_svs(self) -> int:
        return self.sv_predictions.shape[0]

    @property
    def stage_times(self) -> np.ndarray:
        return np.arange(self.N) * self.Ts

    def stage_svs(self) -> np.ndarray:
        """SV predictions for stages 0..N-1 as (N, M, 4)"""
        return np.transpose(self.sv_predictions[:, :self.N], (1, 0, 2))


@dataclass
class DecisionVariables:
    """
    Controls u_0..u_{N-1} and states x_0..x_N

    states[0] always equals the problem's x0 and is not optimized.
    """
    controls: np.ndarray
    states: np.ndarray

    @property
    def N(self) -> int:
        return self.controls.shape[0]

    def copy(self) -> "DecisionVariables":
        return DecisionVariables(self.controls.copy(), self.states.copy())


@dataclass
class Solution:
    variables: DecisionVariables
    objective: float
    defects: np.ndarray
    iterations: int
    status: SolveStatus
    solve_time: float
    merit: float = 0.0
    kkt_residual: float = float("inf")
    # (merit before, merit after) of every line-searched step, under the penalty of that step
    merit_history: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def controls(self) -> np.ndarray:
        return self.variables.controls

    @property
    def states(self) -> np.ndarray:
        return self.variables.states


@dataclass
class Linearization:
    """
    Local quadratic model of the shooting NLP around one iterate

    Stage k (0..N-1) couples (dx_k, du_k) through the linearized dynamics
    dx_{k+1} = A_k dx_k + B_k du_k + d_k; the terminal block acts on dx_N.
    """
    A: np.ndarray
    B: np.ndarray
    d: np.ndarray
    gx: np.ndarray
    gu: np.ndarray
    Hxx: np.ndarray
    Hxu: np.ndarray
    Huu: np.ndarray
    gN: np.ndarray
    HN: np.ndarray
    du_lower: np.ndarray
    du_upper: np.ndarray

    @property
    def N(self) -> int:
        return self.A.shape[0]


@dataclass
class QPStep:
    du: np.ndarray
    dx: np.ndarray
    # First-order change of the objective along the step
    gradient_dot: float = 0.0
    # Curvature of the QP model along the step
    curvature: float = 0.0


def continuity_defect(xk, uk, xk1, Ts: float) -> np.ndarray:
    """
    Gap between the integrated end of a shooting interval and the next node

    Args:
        xk: State(s) at the interval start
        uk: Control(s) held over the interval
        xk1: State variable(s) at the next node
        Ts: Interval length in seconds

    Returns:
        rk4_step(xk, uk, Ts) minus xk1 on the state manifold
    """
    return state_diff(rk4_step(xk, uk, Ts), xk1)


def transcribe(target_y: float, target_speed: float, ev_state, svs: Sequence,
               weights: CostWeights, params: VehicleParams, N: int, Ts: float) -> ShootingProblem:
    """
    Build the shooting problem of one candidate

    Args:
        target_y: Lateral position of the target lane centerline (m)
        target_speed: Desired cruise speed of this candidate (m/s)
        ev_state: Current EV state
        svs: Perceived SV states
        weights: Cost weights
        params: Vehicle box limits
        N: Number of shooting intervals
        Ts: Interval length (s)

    Returns:
        ShootingProblem with the SV prediction grid and per-stage references installed
    """
    x0 = np.asarray(ev_state, dtype=float).reshape(STATE_DIM)
    sv_array = np.asarray(svs, dtype=float).reshape(-1, 4)
    if not np.all(np.isfinite(x0)):
        raise ValueError(f"transcribe received a non-finite EV state: {x0}")
    if not np.all(np.isfinite(sv_array)):
        raise ValueError("transcribe received non-finite SV states")
    if not (np.isfinite(target_y) and np.isfinite(target_speed)):
        raise ValueError(f"transcribe received a non-finite target ({target_y}, {target_speed})")

    offsets = np.arange(N + 1) * Ts
    if len(sv_array):
        grid = predict_sv(sv_array[:, None, :], offsets)
    else:
        grid = np.zeros((0, N + 1, 4))

    reference = np.array([0.0, target_y, 0.0, target_speed, 0.0])
    desired = np.tile(reference, (N, 1))
    return ShootingProblem(
        N=N, Ts=Ts, x0=x0, sv_predictions=grid, desired=desired,
        terminal_ref=reference.copy(), weights=weights, params=params,
    )


def shift_warm_start(prev: Solution, x0, Ts: float) -> DecisionVariables:
    """
    Shift a previous solution by one interval for warm starting

    prev only carries its own initial state, and a candidate that was not
    applied last cycle did not plan from the state the EV actually reached,
    so the new initial state and the interval length are passed in.

    Args:
        prev: Previous solution with N >= 2
        x0: Initial state of the new problem (the measured EV state)
        Ts: Interval length (s) used for the rollout of the shifted controls

    Returns:
        Controls [u_1, ..., u_{N-1}, u_{N-1}] with states rolled out from x0
    """
    controls = prev.controls
    if len(controls) < 2:
        raise ValueError("shift_warm_start needs a previous solution with N >= 2")
    shifted = np.vstack([controls[1:], controls[-1:]])
    return DecisionVariables(shifted, rollout(x0, shifted, Ts))


def _braking_rollout(problem: ShootingProblem, a: float) -> DecisionVariables:
    # Constant deceleration without driving the speed below v_min
    params = problem.params
    controls = np.zeros((problem.N, CONTROL_DIM))
    states = np.empty((problem.N + 1, STATE_DIM))
    states[0] = problem.x0
    for k in range(problem.N):
        needed = (params.v_min - states[k, V]) / problem.Ts
        controls[k, 0] = np.clip(max(a, needed), params.a_min, params.a_max)
        states[k + 1] = rk4_step(states[k], controls[k], problem.Ts)
    return DecisionVariables(controls, states)


def _min_barrier(problem: ShootingProblem, states: np.ndarray) -> float:
    if problem.num_svs == 0:
        return float("inf")
    # x_0 is given, only the planned nodes count
    h = barrier_h(states[None, 1:, :], problem.sv_predictions[:, 1:], problem.weights)
    return float(np.min(h))


def cold_start(problem: ShootingProblem) -> DecisionVariables:
    """
    Initial guess without a previous solution

    Coasts with zero controls. When the coasting rollout enters an SV
    ellipse, constant decelerations down to a_min are tried and the mildest
    one whose rollout stays outside every ellipse is used; if none does the
    hardest braking is returned.

    Args:
        problem: Shooting problem

    Returns:
        DecisionVariables with dynamically consistent states
    """
    controls = np.zeros((problem.N, CONTROL_DIM))
    coast = DecisionVariables(controls, rollout(problem.x0, controls, problem.Ts))
    if _min_barrier(problem, coast.states) >= 0.0:
        return coast
    levels = np.linspace(0.0, problem.params.a_min, config.COLD_START_BRAKE_LEVELS + 1)[1:]
    guess = coast
    for a in levels:
        guess = _braking_rollout(problem, float(a))
        if _min_barrier(problem, guess.states) >= 0.0:
            logger.debug(f"Cold start brakes at {a:.3f} m/s^2 to stay clear of the SVs")
            return guess
    logger.debug("Cold start found no collision-free braking level, using full braking")
    return guess


def initialize(problem: ShootingProblem, prev: Optional[Solution] = None) -> DecisionVariables:
    """
    Initial guess for the SQP iterations

    Args:
        problem: Shooting problem
        prev: Previous solution of the same candidate, if any

    Returns:
        Warm start from prev when its horizon matches, otherwise cold_start(problem)
    """
    if prev is not None:
        if prev.variables.N == problem.N and problem.N >= 2:
            return shift_warm_start(prev, problem.x0, problem.Ts)
        logger.debug(f"Ignoring warm start with N={prev.variables.N} for problem with N={problem.N}")
    return cold_start(problem)


def _clamped_feedforward(Quu: np.ndarray, qu: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                         unconstrained: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # Unconstrained minimizer already feasible: nothing to do
    if np.all(unconstrained >= lo) and np.all(unconstrained <= hi):
        return np.ones(CONTROL_DIM, dtype=bool), unconstrained
    best_value = np.inf
    best_free = np.zeros(CONTROL_DIM, dtype=bool)
    best_step = np.clip(unconstrained, lo, hi)
    # Enumerate the active sets of the two-dimensional box
    for pattern in np.ndindex(3, 3):
        step = np.zeros(CONTROL_DIM)
        free = np.array([p == 0 for p in pattern])
        for i, p in enumerate(pattern):
            if p == 1:
                step[i] = lo[i]
            elif p == 2:
                step[i] = hi[i]
        if free.any():
            fixed = ~free
            rhs = -(qu[free] + Quu[np.ix_(free, fixed)] @ step[fixed])
            step[free] = np.linalg.solve(Quu[np.ix_(free, free)], rhs)
            if np.any(step < lo - 1e-12) or np.any(step > hi + 1e-12):
                continue
        value = 0.5 * step @ Quu @ step + qu @ step
        if value < best_value:
            best_value, best_free, best_step = value, free, step
    return best_free, best_step


def _check_psd(lin: Linearization) -> None:
    stage = np.zeros((lin.N, STATE_DIM + CONTROL_DIM, STATE_DIM + CONTROL_DIM))
    stage[:, :STATE_DIM, :STATE_DIM] = lin.Hxx
    stage[:, :STATE_DIM, STATE_DIM:] = lin.Hxu
    stage[:, STATE_DIM:, :STATE_DIM] = np.transpose(lin.Hxu, (0, 2, 1))
    stage[:, STATE_DIM:, STATE_DIM:] = lin.Huu
    scale = max(1.0, float(np.max(np.abs(stage))), float(np.max(np.abs(lin.HN))))
    min_eig = min(float(np.min(np.linalg.eigvalsh(stage))), float(np.min(np.linalg.eigvalsh(lin.HN))))
    if min_eig < -1e-9 * scale:
        raise QPError(f"QP Hessian is not positive semi-definite (min eigenvalue {min_eig:.3e})")


def qp_subproblem(lin: Linearization) -> QPStep:
    """
    Solve the equality-constrained QP of one SQP iteration by a Riccati sweep

    Control bounds are handled on the feedforward term with a clamped active
    set (feedback rows of clamped inputs are zeroed) and the forward pass
    projects every step back into the box.

    Args:
        lin: Linearization with PSD Hessian blocks

    Returns:
        QPStep with du of shape (N, 2) and dx of shape (N + 1, 5), dx[0] = 0
    """
    _check_psd(lin)
    N = lin.N
    reg = config.RICCATI_REGULARIZATION * np.eye(CONTROL_DIM)
    k_ff = np.zeros((N, CONTROL_DIM))
    K_fb = np.zeros((N, CONTROL_DIM, STATE_DIM))

    P = lin.HN.copy()
    p = lin.gN.copy()
    for k in range(N - 1, -1, -1):
        A, B, d = lin.A[k], lin.B[k], lin.d[k]
        pd = p + P @ d
        PA = P @ A
        PB = P @ B
        Qxx = lin.Hxx[k] + A.T @ PA
        Quu = lin.Huu[k] + B.T @ PB + reg
        Qux = lin.Hxu[k].T + B.T @ PA
        qx = lin.gx[k] + A.T @ pd
        qu = lin.gu[k] + B.T @ pd
        try:
            factor = cho_factor(Quu)
        except LinAlgError as e:
            raise QPError(f"Control Hessian not positive definite at stage {k}: {e}") from e
        ff = -cho_solve(factor, qu)
        K = -cho_solve(factor, Qux)
        free, ff = _clamped_feedforward(Quu, qu, lin.du_lower[k], lin.du_upper[k], ff)
        if not free.all():
            K = np.zeros((CONTROL_DIM, STATE_DIM))
            if free.any():
                K[free] = -np.linalg.solve(Quu[np.ix_(free, free)], Qux[free])
        k_ff[k] = ff
        K_fb[k] = K
        P = Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K
        P = 0.5 * (P + P.T)
        p = qx + K.T @ Quu @ ff + K.T @ qu + Qux.T @ ff

    du = np.zeros((N, CONTROL_DIM))
    dx = np.zeros((N + 1, STATE_DIM))
    for k in range(N):
        du[k] = np.clip(k_ff[k] + K_fb[k] @ dx[k], lin.du_lower[k], lin.du_upper[k])
        dx[k + 1] = lin.A[k] @ dx[k] + lin.B[k] @ du[k] + lin.d[k]

    gradient_dot = float(np.sum(lin.gx * dx[:N]) + np.sum(lin.gu * du) + lin.gN @ dx[N])
    curvature = float(np.einsum("ki,kij,kj->", dx[:N], lin.Hxx, dx[:N])
                      + 2.0 * np.einsum("ki,kij,kj->", dx[:N], lin.Hxu, du)
                      + np.einsum("ki,kij,kj->", du, lin.Huu, du)
                      + dx[N] @ lin.HN @ dx[N])
    return QPStep(du=du, dx=dx, gradient_dot=gradient_dot, curvature=curvature)


class SqpSolver:
    """
    Gauss-Newton SQP for one shooting problem

    Each instance owns its workspace; separate instances share nothing and
    can run on separate threads.
    """

    def __init__(self, problem: ShootingProblem):
        self.problem = problem
        self.u_lower, self.u_upper = problem.params.control_bounds()
        self.x_lower, self.x_upper = problem.params.state_bounds()
        self._stage_svs = problem.stage_svs()
        self._stage_times = problem.stage_times
        # x_1..x_N against the SVs predicted at the same instants
        self._node_svs = np.transpose(problem.sv_predictions[:, 1:], (1, 0, 2))
        self._node_times = np.arange(1, problem.N + 1) * problem.Ts
        self.penalty = config.MERIT_MU

    def defects(self, v: DecisionVariables) -> np.ndarray:
        """Continuity defects of all N intervals, shape (N, 5)"""
        return continuity_defect(v.states[:-1], v.controls, v.states[1:], self.problem.Ts)

    def running_total(self, v: DecisionVariables) -> float:
        pr = self.problem
        stage = running_cost(v.states[:-1], v.controls, pr.desired, self._stage_svs, self._stage_times, pr.weights)
        return float(np.sum(stage))

    def objective(self, v: DecisionVariables) -> float:
        """Running + terminal cost plus the state-box and collision penalties on x_1..x_N"""
        pr = self.problem
        box, _, _ = state_penalty(v.states[1:], self.x_lower, self.x_upper, config.STATE_PENALTY)
        collision, _, _ = collision_penalty(v.states[1:], self._node_svs, self._node_times, pr.weights)
        return (self.running_total(v)
                + terminal_cost(v.states[-1], pr.terminal_ref, pr.weights)
                + float(np.sum(box))
                + float(np.sum(collision)))

    def merit(self, v: DecisionVariables) -> float:
        return self.objective(v) + self.penalty * float(np.sum(np.abs(self.defects(v))))

    def linearize(self, v: DecisionVariables) -> Linearization:
        """Gauss-Newton model of the NLP around v"""
        pr = self.problem
        N = pr.N
        nxt, Fx, Fu = rk4_jacobians(v.states[:-1], v.controls, pr.Ts)
        d = state_diff(nxt, v.states[1:])

        grad, hess = stage_derivatives_batch(
            v.states[:-1], v.controls, pr.desired, self._stage_svs, self._stage_times, pr.weights)
        gx = grad[:, :STATE_DIM].copy()
        gu = grad[:, STATE_DIM:].copy()
        Hxx = hess[:, :STATE_DIM, :STATE_DIM].copy()
        Hxu = hess[:, :STATE_DIM, STATE_DIM:].copy()
        Huu = hess[:, STATE_DIM:, STATE_DIM:].copy()

        _, pen_grad, pen_hess = state_penalty(v.states[1:], self.x_lower, self.x_upper, config.STATE_PENALTY)
        _, col_grad, col_hess = collision_penalty(v.states[1:], self._node_svs, self._node_times, pr.weights)
        idx = np.arange(STATE_DIM)
        # x_1..x_{N-1} belong to stages 1..N-1, x_N to the terminal block
        gx[1:] += pen_grad[:-1] + col_grad[:-1]
        Hxx[1:, idx, idx] += pen_hess[:-1]
        Hxx[1:] += col_hess[:-1]
        # x_0 is fixed
        gx[0] = 0.0
        Hxx[0] = 0.0
        Hxu[0] = 0.0

        gN, HN = terminal_derivatives(v.states[-1], pr.terminal_ref, pr.weights)
        gN = gN + pen_grad[-1] + col_grad[-1]
        HN = HN + np.diag(pen_hess[-1]) + col_hess[-1]

        return Linearization(
            A=Fx, B=Fu, d=d, gx=gx, gu=gu, Hxx=Hxx, Hxu=Hxu, Huu=Huu, gN=gN, HN=HN,
            du_lower=np.broadcast_to(self.u_lower, (N, CONTROL_DIM)) - v.controls,
            du_upper=np.broadcast_to(self.u_upper, (N, CONTROL_DIM)) - v.controls,
        )

    def kkt_residual(self, lin: Linearization, v: DecisionVariables) -> float:
        """
        Larger of the defect infinity norm and the relative stationarity error

        The reduced control gradient gu_k + B_k^T lambda_{k+1} comes from an
        adjoint sweep through the linearized dynamics. Its projected infinity
        norm is divided by max(1, |gu|, |B^T lambda|), so cost weights of
        order 1e9 do not make the tolerance unreachable.
        """
        N = lin.N
        lam = lin.gN
        reduced = np.zeros((N, CONTROL_DIM))
        adjoint = np.zeros((N, CONTROL_DIM))
        for k in range(N - 1, -1, -1):
            adjoint[k] = lin.B[k].T @ lam
            reduced[k] = lin.gu[k] + adjoint[k]
            lam = lin.gx[k] + lin.A[k].T @ lam
        at_lower = v.controls <= self.u_lower + 1e-12
        at_upper = v.controls >= self.u_upper - 1e-12
        reduced = np.where(at_lower & (reduced > 0), 0.0, reduced)
        reduced = np.where(at_upper & (reduced < 0), 0.0, reduced)
        scale = max(1.0, float(np.max(np.abs(lin.gu))), float(np.max(np.abs(adjoint))))
        return max(float(np.max(np.abs(reduced))) / scale, float(np.max(np.abs(lin.d))))

    def update_penalty(self, step: QPStep, infeasibility: float) -> float:
        """
        Raise the merit penalty until the step is a descent direction

        The penalty must satisfy
        penalty >= (gradient_dot + curvature / 2) / ((1 - MERIT_RHO) * infeasibility);
        when it does not, it is set to twice that bound. The penalty never
        decreases within a solve.

        Args:
            step: QP step with its gradient and curvature terms
            infeasibility: l1 norm of the current defects

        Returns:
            The penalty in use
        """
        if infeasibility > 0.0:
            required = ((step.gradient_dot + 0.5 * max(step.curvature, 0.0))
                        / ((1.0 - config.MERIT_RHO) * infeasibility))
            if required > self.penalty:
                logger.debug(f"Raising merit penalty from {self.penalty:.3e} to {2.0 * required:.3e}")
                self.penalty = 2.0 * required
        return self.penalty

    def _apply(self, v: DecisionVariables, step: QPStep, alpha: float) -> DecisionVariables:
        controls = np.clip(v.controls + alpha * step.du, self.u_lower, self.u_upper)
        states = v.states + alpha * step.dx
        states[:, THETA] = wrap_angle(states[:, THETA])
        states[0] = self.problem.x0
        return DecisionVariables(controls, states)

    def solve(self, init: DecisionVariables, mode: SolveMode = SolveMode.CONVERGE) -> Solution:
        """
        Run SQP iterations from init

        Args:
            init: Initial guess; shapes must match the problem
            mode: CONVERGE iterates to tolerance, RTI runs a fixed iteration count

        Returns:
            Solution; DEGRADED when the line search fails away from a
            stationary point (best iterate returned)
        """
        start = time.perf_counter()
        pr = self.problem
        if init.controls.shape != (pr.N, CONTROL_DIM) or init.states.shape != (pr.N + 1, STATE_DIM):
            raise ValueError(f"Initial guess shapes {init.controls.shape}/{init.states.shape} "
                             f"do not match N={pr.N}")
        v = init.copy()
        v.controls = np.clip(v.controls, self.u_lower, self.u_upper)
        v.states[0] = pr.x0
        self.penalty = config.MERIT_MU
        merit = self.merit(v)
        history = []

        max_iter = config.RTI_ITERATIONS if mode == SolveMode.RTI else config.SQP_MAX_ITER
        status = SolveStatus.MAX_ITER
        iterations = 0
        kkt = float("inf")
        small_step = False
        stalled = False
        lin = None
        for _ in range(max_iter):
            lin = self.linearize(v)
            kkt = self.kkt_residual(lin, v)
            if mode == SolveMode.CONVERGE and self._converged(kkt, lin):
                break

            step = qp_subproblem(lin)
            step_norm = max(float(np.max(np.abs(step.du))), float(np.max(np.abs(step.dx))))
            if step_norm < config.STEP_TOLERANCE:
                # Negligible step: take it without a line search
                v = self._apply(v, step, 1.0)
                merit = self.merit(v)
                iterations += 1
                lin = None
                small_step = True
                if mode == SolveMode.CONVERGE:
                    break
                continue
            small_step = False

            infeasibility = float(np.sum(np.abs(lin.d)))
            penalty = self.update_penalty(step, infeasibility)
            merit = self.merit(v)
            descent = step.gradient_dot - penalty * infeasibility
            alpha = 1.0
            accepted = None
            for _ in range(config.LINE_SEARCH_MAX_BACKTRACKS + 1):
                trial = self._apply(v, step, alpha)
                trial_merit = self.merit(trial)
                if np.isfinite(trial_merit) and \
                        trial_merit <= merit + config.LINE_SEARCH_C1 * alpha * min(descent, 0.0):
                    accepted = trial
                    break
                alpha *= config.LINE_SEARCH_FACTOR
            if accepted is None:
                if abs(descent) <= config.MERIT_STALL_TOLERANCE * max(1.0, abs(merit)):
                    # Predicted decrease is below round-off of the merit
                    logger.debug(f"Line search stalled at merit {merit:.6e} (descent {descent:.3e})")
                    stalled = True
                    lin = None
                    break
                logger.debug(f"Line search failed after {config.LINE_SEARCH_MAX_BACKTRACKS} backtracks "
                             f"(merit {merit:.6e}, descent {descent:.3e})")
                status = SolveStatus.DEGRADED
                lin = None
                break
            history.append((merit, trial_merit))
            v = accepted
            merit = trial_merit
            iterations += 1
            lin = None
            logger.debug(f"SQP iteration {iterations}: merit {merit:.6e}, step {step_norm:.3e}, alpha {alpha:.3g}")

        defects = self.defects(v)
        if status != SolveStatus.DEGRADED:
            if lin is None:
                lin = self.linearize(v)
                kkt = self.kkt_residual(lin, v)
            small_defects = float(np.max(np.abs(defects))) < config.DEFECT_TOLERANCE
            if self._converged(kkt, lin) or ((small_step or stalled) and small_defects):
                status = SolveStatus.CONVERGED
            elif stalled:
                status = SolveStatus.DEGRADED
            else:
                status = SolveStatus.MAX_ITER

        objective = self.objective(v)
        if status == SolveStatus.CONVERGED:
            weight_dominance_ok(self.running_total(v), pr.weights)
        return Solution(
            variables=v,
            objective=objective,
            defects=np.linalg.norm(defects, axis=1),
            iterations=iterations,
            status=status,
            solve_time=time.perf_counter() - start,
            merit=merit,
            kkt_residual=kkt,
            merit_history=history,
        )

    @staticmethod
    def _converged(kkt: float, lin: Linearization) -> bool:
        return kkt < config.KKT_TOLERANCE and float(np.max(np.abs(lin.d))) < config.DEFECT_TOLERANCE


def solve_sqp(problem: ShootingProblem, init: DecisionVariables,
              mode: SolveMode = SolveMode.CONVERGE) -> Solution:
    """
    Solve a shooting problem with a fresh solver instance

    Args:
        problem: Shooting problem
        init: Initial guess (see initialize)
        mode: CONVERGE or RTI

    Returns:
        Solution
    """
    return SqpSolver(problem).solve(init, mode)
