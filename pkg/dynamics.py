import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import numpy as np

import config

# Configure logging
logger = logging.getLogger(__name__)

# State layout: px, py, theta, v, omega
PX, PY, THETA, V, OMEGA = range(5)
STATE_DIM = 5
CONTROL_DIM = 2


class EvState(NamedTuple):
    """Ego vehicle state: positions (m), heading (rad), speed (m/s), yaw rate (rad/s)"""
    px: float
    py: float
    theta: float
    v: float
    omega: float


class ControlInput(NamedTuple):
    """Ego vehicle input: acceleration (m/s^2) and yaw-rate derivative (rad/s^2)"""
    a: float
    omega_dot: float


class SvState(NamedTuple):
    """Surrounding vehicle position (m) and velocity (m/s)"""
    ox: float
    oy: float
    ovx: float
    ovy: float


@dataclass(frozen=True)
class VehicleParams:
    """
    Wheelbase and box limits of the ego vehicle

    Defaults are the limits of the simulated vehicle with the lateral
    bounds of the three-lane road.
    """
    wheelbase: float = 2.7
    v_min: float = 0.0
    v_max: float = 24.0
    theta_min: float = -0.227
    theta_max: float = 0.227
    omega_min: float = -5.0
    omega_max: float = 5.0
    a_min: float = -1.5
    a_max: float = 3.0
    omega_dot_min: float = -2.0
    omega_dot_max: float = 2.0
    py_min: float = -10.5
    py_max: float = -1.5

    def __post_init__(self):
        pairs = [
            ("v", self.v_min, self.v_max),
            ("theta", self.theta_min, self.theta_max),
            ("omega", self.omega_min, self.omega_max),
            ("a", self.a_min, self.a_max),
            ("omega_dot", self.omega_dot_min, self.omega_dot_max),
            ("py", self.py_min, self.py_max),
        ]
        for name, lo, hi in pairs:
            if not lo < hi:
                raise ValueError(f"VehicleParams: {name}_min ({lo}) must be below {name}_max ({hi})")
        if self.wheelbase <= 0:
            raise ValueError(f"VehicleParams: wheelbase must be positive, got {self.wheelbase}")

    def state_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Get the state box as two 5-vectors (px is unbounded)

        Returns:
            (lower, upper) arrays
        """
        lower = np.array([-np.inf, self.py_min, self.theta_min, self.v_min, self.omega_min])
        upper = np.array([np.inf, self.py_max, self.theta_max, self.v_max, self.omega_max])
        return lower, upper

    def control_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Get the control box as two 2-vectors

        Returns:
            (lower, upper) arrays
        """
        return (np.array([self.a_min, self.omega_dot_min]),
                np.array([self.a_max, self.omega_dot_max]))


def wrap_angle(angle):
    """
    Wrap an angle (or array of angles) to (-pi, pi]; -pi maps to +pi

    Args:
        angle: Angle in radians, scalar or array

    Returns:
        Wrapped angle with the same shape
    """
    return math.pi - np.mod(math.pi - np.asarray(angle, dtype=float), 2.0 * math.pi)


def bicycle_ode(x, u) -> np.ndarray:
    """
    Time derivative of the kinematic bicycle model

    Args:
        x: State(s), last axis of length 5
        u: Control(s), last axis of length 2

    Returns:
        [v cos(theta), v sin(theta), omega, a, omega_dot] with the broadcast shape
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    theta = x[..., THETA]
    v = x[..., V]
    return np.stack([
        v * np.cos(theta),
        v * np.sin(theta),
        x[..., OMEGA],
        u[..., 0],
        u[..., 1],
    ], axis=-1)


def _ode_jacobians(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # A = df/dx, B = df/du; B is constant
    theta = x[..., THETA]
    v = x[..., V]
    A = np.zeros(x.shape[:-1] + (STATE_DIM, STATE_DIM))
    A[..., PX, THETA] = -v * np.sin(theta)
    A[..., PX, V] = np.cos(theta)
    A[..., PY, THETA] = v * np.cos(theta)
    A[..., PY, V] = np.sin(theta)
    A[..., THETA, OMEGA] = 1.0
    B = np.zeros((STATE_DIM, CONTROL_DIM))
    B[V, 0] = 1.0
    B[OMEGA, 1] = 1.0
    return A, B


def _rk4_raw(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    k1 = bicycle_ode(x, u)
    k2 = bicycle_ode(x + 0.5 * dt * k1, u)
    k3 = bicycle_ode(x + 0.5 * dt * k2, u)
    k4 = bicycle_ode(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(x, u, dt: float) -> np.ndarray:
    """
    One classic Runge-Kutta 4 step with the control held constant over the step

    Args:
        x: State(s), last axis of length 5
        u: Control(s), last axis of length 2
        dt: Step length in seconds

    Returns:
        Next state(s) with the heading wrapped to (-pi, pi]
    """
    if dt <= 0:
        raise ValueError(f"rk4_step needs dt > 0, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    nxt = _rk4_raw(x, u, dt)
    nxt[..., THETA] = wrap_angle(nxt[..., THETA])
    return nxt


def rk4_jacobians(x, u, dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    RK4 step together with its exact Jacobians

    The sensitivities are propagated through the four stages, so the
    Jacobians are those of the discrete map, not of the continuous flow.

    Args:
        x: State(s), shape (..., 5)
        u: Control(s), shape (..., 2)
        dt: Step length in seconds

    Returns:
        (next_state, dF/dx of shape (..., 5, 5), dF/du of shape (..., 5, 2))
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, batch + (STATE_DIM,))
    u = np.broadcast_to(u, batch + (CONTROL_DIM,))
    eye = np.broadcast_to(np.eye(STATE_DIM), batch + (STATE_DIM, STATE_DIM))

    A1, B = _ode_jacobians(x)
    k1 = bicycle_ode(x, u)
    dk1_dx = A1
    dk1_du = np.broadcast_to(B, batch + B.shape)

    x2 = x + 0.5 * dt * k1
    A2, _ = _ode_jacobians(x2)
    k2 = bicycle_ode(x2, u)
    dk2_dx = A2 @ (eye + 0.5 * dt * dk1_dx)
    dk2_du = A2 @ (0.5 * dt * dk1_du) + B

    x3 = x + 0.5 * dt * k2
    A3, _ = _ode_jacobians(x3)
    k3 = bicycle_ode(x3, u)
    dk3_dx = A3 @ (eye + 0.5 * dt * dk2_dx)
    dk3_du = A3 @ (0.5 * dt * dk2_du) + B

    x4 = x + dt * k3
    A4, _ = _ode_jacobians(x4)
    k4 = bicycle_ode(x4, u)
    dk4_dx = A4 @ (eye + dt * dk3_dx)
    dk4_du = A4 @ (dt * dk3_du) + B

    nxt = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    nxt[..., THETA] = wrap_angle(nxt[..., THETA])
    Fx = eye + dt / 6.0 * (dk1_dx + 2.0 * dk2_dx + 2.0 * dk3_dx + dk4_dx)
    Fu = dt / 6.0 * (dk1_du + 2.0 * dk2_du + 2.0 * dk3_du + dk4_du)
    return nxt, Fx, Fu


def state_diff(a, b) -> np.ndarray:
    """
    Difference a - b on the state manifold (heading component wrapped)

    Args:
        a: State(s), last axis of length 5
        b: State(s), last axis of length 5

    Returns:
        Tangent vector(s) with the heading component in (-pi, pi]
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d[..., THETA] = wrap_angle(d[..., THETA])
    return d


def predict_sv(o, t) -> np.ndarray:
    """
    Constant-velocity prediction of a surrounding vehicle

    Args:
        o: SV state(s) [ox, oy, ovx, ovy]
        t: Prediction offset(s) in seconds, broadcast against o's leading axes

    Returns:
        Predicted SV state(s); velocity unchanged
    """
    o = np.asarray(o, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("predict_sv needs t >= 0")
    out = np.array(np.broadcast_to(o, np.broadcast_shapes(o.shape, t.shape + (4,))), dtype=float)
    out[..., 0] = o[..., 0] + o[..., 2] * t
    out[..., 1] = o[..., 1] + o[..., 3] * t
    return out


def rollout(x0, controls: Sequence, dt: float) -> np.ndarray:
    """
    Integrate a control sequence from x0

    Args:
        x0: Initial state
        controls: N controls, shape (N, 2)
        dt: Step length in seconds

    Returns:
        States of shape (N + 1, 5) with states[0] = x0
    """
    controls = np.asarray(controls, dtype=float).reshape(-1, CONTROL_DIM)
    if len(controls) < 1:
        raise ValueError("rollout needs at least one control")
    states = np.empty((len(controls) + 1, STATE_DIM))
    states[0] = np.asarray(x0, dtype=float)
    for k, u in enumerate(controls):
        states[k + 1] = rk4_step(states[k], u, dt)
    return states


def steering_angle(x, params: VehicleParams) -> float:
    """
    Reconstruct the front-wheel steering angle from the yaw rate (logging only)

    Args:
        x: EV state
        params: Vehicle parameters (wheelbase)

    Returns:
        delta = atan(omega * L / v) with v floored at the configured minimum speed
    """
    x = np.asarray(x, dtype=float)
    v = max(float(x[V]), config.STEERING_SPEED_FLOOR)
    return math.atan(float(x[OMEGA]) * params.wheelbase / v)
