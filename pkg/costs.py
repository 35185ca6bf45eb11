import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

import config
from dynamics import CONTROL_DIM, PX, PY, STATE_DIM, state_diff

# Configure logging
logger = logging.getLogger(__name__)

STAGE_DIM = STATE_DIM + CONTROL_DIM


@dataclass(frozen=True)
class CostWeights:
    """
    Weights and shape constants of the optimal control objective

    Diagonal matrices are stored as their diagonals. Defaults reproduce the
    cruise task of the congested three-lane scenario.
    """
    q_terminal: Tuple[float, ...] = (0.0, 1e9, 1e9, 0.0, 1e6)
    iota_terminal: Tuple[float, ...] = (0.0, 1.0, 1.0, 0.0, 1.0)
    q_goal: Tuple[float, ...] = (0.0, 1e3, 0.0, 1e5, 0.0)
    iota_goal: Tuple[float, ...] = (0.0, 1.0, 0.0, 1.0, 0.0)
    r: Tuple[float, ...] = (2e4, 1e6)
    # Per-SV safety weights; SVs beyond the list reuse the last entry
    lambdas: Tuple[float, ...] = (5.0, 5.0, 5.0)
    # Common multiplier on every lambda
    safety_gain: float = 1.0
    # Soft constraint h >= margin on every SV ellipse, applied to x_1..x_N
    collision_weight: float = 1e8
    collision_margin: float = 0.5
    gamma: float = 50.0
    eta: float = 1.0
    epsilon: float = 1e-5
    c: float = 8.0
    a_ell: float = 3.0
    b_ell: float = 2.0

    def __post_init__(self):
        for name, size in (("q_terminal", STATE_DIM), ("iota_terminal", STATE_DIM),
                           ("q_goal", STATE_DIM), ("iota_goal", STATE_DIM), ("r", CONTROL_DIM)):
            values = getattr(self, name)
            if len(values) != size:
                raise ValueError(f"CostWeights.{name} needs {size} entries, got {len(values)}")
            if any(v < 0 for v in values):
                raise ValueError(f"CostWeights.{name} entries must be >= 0")
        if not self.lambdas:
            raise ValueError("CostWeights.lambdas must not be empty")
        if any(v < 0 for v in self.lambdas) or self.safety_gain < 0 or self.collision_weight < 0:
            raise ValueError("CostWeights safety weights must be >= 0")
        for name in ("gamma", "eta", "epsilon", "a_ell", "b_ell"):
            if getattr(self, name) <= 0:
                raise ValueError(f"CostWeights.{name} must be positive, got {getattr(self, name)}")
        if self.collision_margin < 0:
            raise ValueError(f"CostWeights.collision_margin must be >= 0, got {self.collision_margin}")

    @property
    def terminal_diag(self) -> np.ndarray:
        return np.asarray(self.q_terminal) * np.asarray(self.iota_terminal) ** 2

    @property
    def goal_diag(self) -> np.ndarray:
        return np.asarray(self.q_goal) * np.asarray(self.iota_goal) ** 2

    @property
    def r_diag(self) -> np.ndarray:
        return np.asarray(self.r, dtype=float)

    def lambda_for(self, i: int) -> float:
        return self.lambdas[min(i, len(self.lambdas) - 1)]


@dataclass
class StageDerivatives:
    """Gradient and Gauss-Newton Hessian of the running cost over z = (x, u)"""
    gradient: np.ndarray = field(default_factory=lambda: np.zeros(STAGE_DIM))
    hessian: np.ndarray = field(default_factory=lambda: np.zeros((STAGE_DIM, STAGE_DIM)))


def terminal_cost(xN, x_ref, w: CostWeights) -> float:
    """
    Terminal cost pulling the selected final state components to the reference

    Args:
        xN: Terminal state
        x_ref: Terminal reference (target-lane py, zero heading, zero yaw rate)
        w: Cost weights

    Returns:
        (iota_T d)^T Q_T (iota_T d) with d = xN - x_ref on the manifold
    """
    d = state_diff(xN, x_ref)
    return float(np.sum(w.terminal_diag * d ** 2, axis=-1))


def terminal_derivatives(xN, x_ref, w: CostWeights) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradient and Hessian of terminal_cost w.r.t. the terminal state

    Returns:
        (gradient (5,), hessian (5, 5))
    """
    d = state_diff(xN, x_ref)
    q = w.terminal_diag
    return 2.0 * q * d, np.diag(2.0 * q)


def goal_cost(x, xd, w: CostWeights):
    """
    Goal-tracking cost of one or many stages

    Args:
        x: State(s), last axis 5
        xd: Desired state(s), last axis 5
        w: Cost weights

    Returns:
        (iota_m e)^T Q_m (iota_m e) per stage
    """
    e = state_diff(x, xd)
    return np.sum(w.goal_diag * e ** 2, axis=-1)


def energy_cost(u, w: CostWeights):
    """u^T R u per stage"""
    u = np.asarray(u, dtype=float)
    return np.sum(w.r_diag * u ** 2, axis=-1)


def barrier_h(p, o, w: CostWeights):
    """
    Ellipse barrier between the EV position and a surrounding vehicle

    Args:
        p: EV position(s) (px, py); a full state is accepted too
        o: SV state(s) [ox, oy, ovx, ovy]
        w: Cost weights (ellipse semi-axes)

    Returns:
        (px - ox)^2 / a^2 + (py - oy)^2 / b^2 - 1, zero on the ellipse
    """
    p = np.asarray(p, dtype=float)
    o = np.asarray(o, dtype=float)
    dx = p[..., PX] - o[..., 0]
    dy = p[..., PY] - o[..., 1]
    return dx ** 2 / w.a_ell ** 2 + dy ** 2 / w.b_ell ** 2 - 1.0


def _prefactor(h, w: CostWeights) -> Tuple[np.ndarray, np.ndarray]:
    # 1 / (eta + h) and its slope; below the floor the tangent line at the
    # floor takes over, so the value stays finite and the slope negative
    floor = config.SAFETY_DENOMINATOR_FLOOR
    raw = w.eta + h
    clamped = raw < floor
    inv = 1.0 / np.maximum(raw, floor)
    g = np.where(clamped, 2.0 / floor - raw / floor ** 2, inv)
    dg = np.where(clamped, -1.0 / floor ** 2, -inv ** 2)
    return g, dg


def safety_H(h, w: CostWeights):
    """
    Safety measurement built on the barrier value

    The prefactor 1 / (eta + h) is continued linearly below
    eta + h = SAFETY_DENOMINATOR_FLOOR, so the measurement stays finite deep
    inside an SV ellipse and keeps decreasing in h there.

    Args:
        h: Barrier value(s)
        w: Cost weights (eta, epsilon, c)

    Returns:
        H(h) >= 0
    """
    h = np.asarray(h, dtype=float)
    s = h - w.c
    g, _ = _prefactor(h, w)
    return g * (1.0 - s / (w.epsilon + np.abs(s)))


def safety_H_grad(h, w: CostWeights):
    """Derivative dH/dh of safety_H"""
    h = np.asarray(h, dtype=float)
    s = h - w.c
    g, dg = _prefactor(h, w)
    bracket = 1.0 - s / (w.epsilon + np.abs(s))
    dbracket = -w.epsilon / (w.epsilon + np.abs(s)) ** 2
    return dg * bracket + g * dbracket


def discount_weight(i: int, t, w: CostWeights):
    """
    Time-varying safety weight of the i-th perceived SV

    Args:
        i: SV index (0-based)
        t: Prediction offset(s) in seconds, t >= 0
        w: Cost weights

    Returns:
        safety_gain * lambda_i * exp(-t / gamma)
    """
    t = np.asarray(t, dtype=float)
    return w.safety_gain * w.lambda_for(i) * np.exp(-t / w.gamma)


def _weights_grid(m: int, t, w: CostWeights) -> np.ndarray:
    # shape t.shape + (m,)
    t = np.asarray(t, dtype=float)
    lam = np.array([w.lambda_for(i) for i in range(m)])
    return w.safety_gain * lam * np.asarray(np.exp(-t / w.gamma))[..., None]


def safety_cost(x, svs, t, w: CostWeights):
    """
    Spatiotemporal safety cost against SVs predicted at offset t

    Args:
        x: EV state(s), shape (..., 5)
        svs: SV states, shape (..., M, 4) aligned with x's leading axes
        t: Offset(s) in seconds
        w: Cost weights

    Returns:
        sum_i w_i(t) H(h(x, O_i))
    """
    svs = np.asarray(svs, dtype=float)
    x = np.asarray(x, dtype=float)
    m = svs.shape[-2] if svs.ndim >= 2 else 0
    if m == 0:
        return np.zeros(x.shape[:-1]) if x.ndim > 1 else 0.0
    h = barrier_h(x[..., None, :], svs, w)
    total = np.sum(_weights_grid(m, t, w) * safety_H(h, w), axis=-1)
    return total if np.ndim(total) else float(total)


def running_cost(x, u, xd, svs, t, w: CostWeights):
    """
    Running cost: goal tracking + spatiotemporal safety + control energy

    Args:
        x: EV state(s)
        u: Control(s)
        xd: Desired state(s)
        svs: SV predictions aligned with x, shape (..., M, 4)
        t: Offset(s) in seconds
        w: Cost weights

    Returns:
        Stage cost(s)
    """
    return goal_cost(x, xd, w) + safety_cost(x, svs, t, w) + energy_cost(u, w)


def stage_derivatives_batch(xs, us, xds, svs, ts, w: CostWeights) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradient and PSD Hessian approximation of the running cost for K stages

    Goal and energy terms contribute their exact Hessians. Each safety term
    w_i H_i is treated as the squared residual sqrt(w_i H_i), giving the
    Gauss-Newton curvature w_i (dH/dh)^2 / (2 H_i) grad(h) grad(h)^T.

    Args:
        xs: States, shape (K, 5)
        us: Controls, shape (K, 2)
        xds: Desired states, shape (K, 5)
        svs: SV predictions, shape (K, M, 4)
        ts: Stage offsets, shape (K,)
        w: Cost weights

    Returns:
        (gradients (K, 7), hessians (K, 7, 7))
    """
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    svs = np.asarray(svs, dtype=float)
    K = xs.shape[0]
    grad = np.zeros((K, STAGE_DIM))
    hess = np.zeros((K, STAGE_DIM, STAGE_DIM))

    e = state_diff(xs, xds)
    q = w.goal_diag
    r = w.r_diag
    grad[:, :STATE_DIM] = 2.0 * q * e
    grad[:, STATE_DIM:] = 2.0 * r * us
    idx_x = np.arange(STATE_DIM)
    idx_u = np.arange(STATE_DIM, STAGE_DIM)
    hess[:, idx_x, idx_x] = 2.0 * q
    hess[:, idx_u, idx_u] = 2.0 * r

    m = svs.shape[1] if svs.ndim == 3 else 0
    if m:
        wgt = _weights_grid(m, ts, w)                      # (K, M)
        dx = xs[:, None, PX] - svs[..., 0]
        dy = xs[:, None, PY] - svs[..., 1]
        h = dx ** 2 / w.a_ell ** 2 + dy ** 2 / w.b_ell ** 2 - 1.0
        H = safety_H(h, w)
        dH = safety_H_grad(h, w)
        gh = np.stack([2.0 * dx / w.a_ell ** 2, 2.0 * dy / w.b_ell ** 2], axis=-1)   # (K, M, 2)
        grad[:, [PX, PY]] += np.sum((wgt * dH)[..., None] * gh, axis=1)
        curvature = np.where(H > 1e-300, wgt * dH ** 2 / (2.0 * np.maximum(H, 1e-300)), 0.0)
        block = np.einsum("km,kmi,kmj->kij", curvature, gh, gh)
        hess[:, PX:PY + 1, PX:PY + 1] += block
    return grad, hess


def stage_derivatives(x, u, xd, svs, t, w: CostWeights) -> StageDerivatives:
    """
    Gradient and Gauss-Newton Hessian of running_cost at a single stage

    Args:
        x: EV state
        u: Control
        xd: Desired state
        svs: SV predictions at offset t, shape (M, 4)
        t: Offset in seconds
        w: Cost weights

    Returns:
        StageDerivatives over the 7-vector (x, u)
    """
    svs = np.asarray(svs, dtype=float).reshape(1, -1, 4)
    grad, hess = stage_derivatives_batch(
        np.asarray(x, dtype=float)[None], np.asarray(u, dtype=float)[None],
        np.asarray(xd, dtype=float)[None], svs, np.array([t], dtype=float), w,
    )
    return StageDerivatives(gradient=grad[0], hessian=hess[0])


def state_penalty(xs, lower, upper, rho: float):
    """
    Quadratic penalty on state box violations

    Args:
        xs: States, shape (..., 5)
        lower: Lower bounds (5,), -inf for unbounded components
        upper: Upper bounds (5,), +inf for unbounded components
        rho: Penalty weight

    Returns:
        (value per state, gradient, Hessian diagonal)
    """
    xs = np.asarray(xs, dtype=float)
    over = np.maximum(xs - upper, 0.0)
    under = np.maximum(lower - xs, 0.0)
    viol = over - under
    value = rho * np.sum(viol ** 2, axis=-1)
    grad = 2.0 * rho * viol
    hess_diag = np.where((over > 0) | (under > 0), 2.0 * rho, 0.0)
    return value, grad, hess_diag


def collision_penalty(xs, svs, ts, w: CostWeights):
    """
    Soft constraint keeping states outside the SV safety ellipses

    Each pair of state and SV adds collision_weight * exp(-t / gamma) *
    max(collision_margin - h, 0)^2, so the penalty starts just outside the
    ellipse and grows with the penetration. The Hessian is the Gauss-Newton
    term of the active pairs.

    Args:
        xs: States, shape (K, 5)
        svs: SV predictions aligned with xs, shape (K, M, 4)
        ts: Prediction offsets of the states (s), shape (K,)
        w: Cost weights

    Returns:
        (value per state (K,), gradient (K, 5), hessian (K, 5, 5))
    """
    xs = np.asarray(xs, dtype=float)
    svs = np.asarray(svs, dtype=float)
    K = xs.shape[0]
    value = np.zeros(K)
    grad = np.zeros((K, STATE_DIM))
    hess = np.zeros((K, STATE_DIM, STATE_DIM))
    if svs.ndim != 3 or svs.shape[1] == 0 or w.collision_weight == 0.0:
        return value, grad, hess

    dx = xs[:, None, PX] - svs[..., 0]
    dy = xs[:, None, PY] - svs[..., 1]
    h = dx ** 2 / w.a_ell ** 2 + dy ** 2 / w.b_ell ** 2 - 1.0
    weight = w.collision_weight * np.exp(-np.asarray(ts, dtype=float) / w.gamma)[:, None]
    depth = np.maximum(w.collision_margin - h, 0.0)
    value = np.sum(weight * depth ** 2, axis=1)

    gh = np.stack([2.0 * dx / w.a_ell ** 2, 2.0 * dy / w.b_ell ** 2], axis=-1)
    grad[:, [PX, PY]] = np.sum((-2.0 * weight * depth)[..., None] * gh, axis=1)
    active = np.where(depth > 0.0, 2.0 * weight, 0.0)
    hess[:, PX:PY + 1, PX:PY + 1] = np.einsum("km,kmi,kmj->kij", active, gh, gh)
    return value, grad, hess


def weight_dominance_ok(running_total: float, w: CostWeights) -> bool:
    """
    Check that the terminal cost of a unit terminal deviation exceeds the running cost

    Args:
        running_total: Summed running cost of an accepted solution
        w: Cost weights

    Returns:
        True when the terminal weights dominate; a warning is logged otherwise
    """
    unit_terminal = float(np.sum(w.terminal_diag))
    ok = unit_terminal > running_total
    if not ok:
        logger.warning(f"Terminal weight dominance violated: unit terminal cost {unit_terminal:.3e} "
                       f"<= summed running cost {running_total:.3e}")
    return ok
