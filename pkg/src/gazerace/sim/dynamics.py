"""Point-mass-with-attitude quadrotor model and RK4 integration."""

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from gazerace.sim.rotations import quat_mul


class SimulationError(ValueError):
    """Raised on invalid simulator input (non-finite state, bad step size)."""


@dataclass(frozen=True)
class QuadParams:
    mass: float = 1.0  # kg
    arm_length: float = 0.17  # m, documentation only
    c_max: float = 21.7  # N, maximum collective thrust
    w_max: float = 6.0  # rad/s
    g: float = 9.81
    rate_lag_tau: float = 0.0  # s, 0 = body rates tracked instantaneously

    def __post_init__(self):
        for name in ("mass", "arm_length", "c_max", "w_max", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"QuadParams.{name} must be positive")
        if not self.rate_lag_tau >= 0:
            raise ValueError("QuadParams.rate_lag_tau must be >= 0")

    @property
    def thrust_max(self) -> float:
        """Mass-normalized thrust limit, m/s^2."""
        return self.c_max / self.mass


@dataclass
class QuadState:
    t: float = 0.0
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.t = float(self.t)
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.q = np.asarray(self.q, dtype=float).reshape(4)
        self.w = np.asarray(self.w, dtype=float).reshape(3)

    def to_array(self) -> np.ndarray:
        """Packed [p, v, q, w] (13 values)."""
        return np.concatenate([self.p, self.v, self.q, self.w])

    @classmethod
    def from_array(cls, t, x):
        x = np.asarray(x, dtype=float)
        return cls(t, x[0:3].copy(), x[3:6].copy(), x[6:10].copy(), x[10:13].copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.t) and np.all(np.isfinite(self.to_array())))

    def copy(self):
        return QuadState(self.t, self.p.copy(), self.v.copy(), self.q.copy(), self.w.copy())


@dataclass(frozen=True)
class Command:
    """Mass-normalized collective thrust (m/s^2) and body-rate setpoints (rad/s)."""

    c: float
    wx: float = 0.0
    wy: float = 0.0
    wz: float = 0.0
    flagged: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.c, self.wx, self.wy, self.wz], dtype=float)

    @classmethod
    def from_array(cls, u, flagged=False):
        return cls(float(u[0]), float(u[1]), float(u[2]), float(u[3]), flagged)

    @classmethod
    def hover(cls, params=None):
        return cls((params or QuadParams()).g)


def clamp_command(u: Command, params: QuadParams) -> Command:
    """Clip thrust to [0, c_max/mass] and rates to [-w_max, w_max].

    Non-finite entries fall back to hover thrust / zero rate and set ``flagged``.
    """
    raw = u.as_array()
    flagged = u.flagged
    if not np.all(np.isfinite(raw)):
        flagged = True
        raw = np.where(np.isfinite(raw), raw, [params.g, 0.0, 0.0, 0.0])
    c = min(max(raw[0], 0.0), params.thrust_max)
    rates = np.clip(raw[1:], -params.w_max, params.w_max)
    return Command(float(c), float(rates[0]), float(rates[1]), float(rates[2]), flagged)


@njit(cache=True)
def _derivative(x, u, g, tau):
    dx = np.zeros(13)
    q = x[6:10]
    if tau > 0.0:
        w = x[10:13]
        dx[10:13] = (u[1:4] - w) / tau
    else:
        w = u[1:4]
    c = u[0]
    dx[0:3] = x[3:6]
    # third column of R(q), thrust along body z
    dx[3] = c * 2.0 * (q[1] * q[3] + q[0] * q[2])
    dx[4] = c * 2.0 * (q[2] * q[3] - q[0] * q[1])
    dx[5] = c * (q[0] * q[0] - q[1] * q[1] - q[2] * q[2] + q[3] * q[3]) - g
    wq = np.zeros(4)
    wq[1:4] = w
    dx[6:10] = 0.5 * quat_mul(q, wq)
    return dx


@njit(cache=True)
def rk4_step(x, u, g, tau, dt):
    k1 = _derivative(x, u, g, tau)
    k2 = _derivative(x + 0.5 * dt * k1, u, g, tau)
    k3 = _derivative(x + 0.5 * dt * k2, u, g, tau)
    k4 = _derivative(x + dt * k3, u, g, tau)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    n = np.sqrt(np.sum(out[6:10] ** 2))
    out[6:10] = out[6:10] / n
    if tau <= 0.0:
        out[10:13] = u[1:4]
    return out


def step_dynamics(s: QuadState, u: Command, params: QuadParams, dt: float) -> QuadState:
    """Advance the state by one RK4 step of length ``dt`` under command ``u``.

    The command is expected to be clamped already. Raises SimulationError on
    non-finite input or a step size outside (0, 0.05].
    """
    if not (0.0 < dt <= 0.05):
        raise SimulationError(f"dt={dt} outside (0, 0.05]")
    x = s.to_array()
    if not (np.isfinite(s.t) and np.all(np.isfinite(x))):
        bad = [n for n, a in (("p", s.p), ("v", s.v), ("q", s.q), ("w", s.w)) if not np.all(np.isfinite(a))]
        raise SimulationError(f"non-finite state at t={s.t}: fields {bad or ['t']}")
    ua = u.as_array()
    if not np.all(np.isfinite(ua)):
        raise SimulationError(f"non-finite command {ua}")
    return QuadState.from_array(s.t + dt, rk4_step(x, ua, params.g, params.rate_lag_tau, dt))
