"""Receding-horizon iLQR expert on the point-mass-with-attitude model."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from gazerace.sim.dynamics import Command, QuadParams, QuadState
from gazerace.sim.rollout import ControlOutput
from gazerace.sim.rotations import quat_mul

log = logging.getLogger(__name__)

NX = 10
NU = 4
LINE_SEARCH = (1.0, 0.5, 0.25)


@dataclass(frozen=True)
class MpcConfig:
    horizon: float = 1.0  # s
    nodes: int = 20
    w_p: float = 50.0
    w_v: float = 10.0
    w_q: float = 5.0
    w_u: float = 1.0
    max_iterations: int = 30
    tol: float = 1e-4  # relative cost decrease

    def __post_init__(self):
        if self.nodes < 2:
            raise ValueError("MpcConfig.nodes must be >= 2")
        if min(self.w_p, self.w_v, self.w_q, self.w_u) < 0:
            raise ValueError("MpcConfig weights must be >= 0")
        if self.horizon <= 0 or self.max_iterations < 1:
            raise ValueError("MpcConfig.horizon and max_iterations must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.nodes


@njit(cache=True)
def _deriv_into(x, u, g, out):
    q0, q1, q2, q3 = x[6], x[7], x[8], x[9]
    c, wx, wy, wz = u[0], u[1], u[2], u[3]
    out[0] = x[3]
    out[1] = x[4]
    out[2] = x[5]
    out[3] = c * 2.0 * (q1 * q3 + q0 * q2)
    out[4] = c * 2.0 * (q2 * q3 - q0 * q1)
    out[5] = c * (q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3) - g
    # 0.5 * q (x) (0, w)
    out[6] = 0.5 * (-q1 * wx - q2 * wy - q3 * wz)
    out[7] = 0.5 * (q0 * wx + q2 * wz - q3 * wy)
    out[8] = 0.5 * (q0 * wy - q1 * wz + q3 * wx)
    out[9] = 0.5 * (q0 * wz + q1 * wy - q2 * wx)


@njit(cache=True)
def _f_into(x, u, g, dt, out, work):
    k1 = work[0]
    k2 = work[1]
    k3 = work[2]
    k4 = work[3]
    tmp = work[4]
    _deriv_into(x, u, g, k1)
    for i in range(NX):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    _deriv_into(tmp, u, g, k2)
    for i in range(NX):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    _deriv_into(tmp, u, g, k3)
    for i in range(NX):
        tmp[i] = x[i] + dt * k3[i]
    _deriv_into(tmp, u, g, k4)
    for i in range(NX):
        out[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    n = np.sqrt(out[6] ** 2 + out[7] ** 2 + out[8] ** 2 + out[9] ** 2)
    for i in range(6, 10):
        out[i] /= n


@njit(cache=True)
def _f(x, u, g, dt):
    out = np.empty(NX)
    _f_into(x, u, g, dt, out, np.empty((5, NX)))
    return out


@njit(cache=True)
def _att_error(q, qr):
    """Residual 2*vec(qr^-1 q) (hemisphere aligned) and its Jacobian w.r.t. q."""
    # left-multiplication matrix of conj(qr)
    a, b, c, d = qr[0], -qr[1], -qr[2], -qr[3]
    m = np.array([[a, -b, -c, -d], [b, a, -d, c], [c, d, a, -b], [d, -c, b, a]])
    e4 = m @ q
    s = 1.0 if e4[0] >= 0.0 else -1.0
    return 2.0 * s * e4[1:4], 2.0 * s * m[1:4, :], abs(e4[0])


@njit(cache=True)
def _cost(X, U, P, V, Q, w, uh):
    """Exact tracking cost: states at nodes 1..N, inputs at 0..N-1, geodesic attitude distance."""
    n = U.shape[0]
    total = 0.0
    for k in range(n):
        du = U[k] - uh
        total += w[3] * np.sum(du * du)
        x = X[k + 1]
        dp = x[0:3] - P[k + 1]
        dv = x[3:6] - V[k + 1]
        cosh = abs(np.sum(x[6:10] * Q[k + 1]))
        ang = 2.0 * np.arccos(min(1.0, cosh))
        total += w[0] * np.sum(dp * dp) + w[1] * np.sum(dv * dv) + w[2] * ang * ang
    return total


@njit(cache=True)
def _rollout(x0, U, g, dt):
    n = U.shape[0]
    X = np.empty((n + 1, NX))
    X[0] = x0
    work = np.empty((5, NX))
    for k in range(n):
        _f_into(X[k], U[k], g, dt, X[k + 1], work)
    return X


@njit(cache=True)
def _mm(a, b, out):
    """out = a @ b for small dense matrices without BLAS dispatch."""
    n, m = a.shape
    p = b.shape[1]
    for i in range(n):
        for j in range(p):
            s = 0.0
            for k in range(m):
                s += a[i, k] * b[k, j]
            out[i, j] = s


@njit(cache=True)
def _mtm(a, b, out):
    """out = a.T @ b."""
    m, n = a.shape
    p = b.shape[1]
    for i in range(n):
        for j in range(p):
            s = 0.0
            for k in range(m):
                s += a[k, i] * b[k, j]
            out[i, j] = s


@njit(cache=True)
def _backward(X, U, A, B, P, V, Q, w, uh, mu, Kk, kk, bw):
    """Riccati recursion with Gauss-Newton stage Hessians; fills gains Kk, kk."""
    Vx, Vxx, VA, Qux, Qxx, tmp = bw
    n = U.shape[0]
    VB = np.empty((NX, NU))
    Quu = np.empty((NU, NU))
    Qu = np.empty(NU)
    Qx = np.empty(NX)
    rhs = np.empty((NU, NX + 1))
    for i in range(NX):
        Vx[i] = 0.0
        for j in range(NX):
            Vxx[i, j] = 0.0
    for k in range(n - 1, -1, -1):
        x = X[k + 1]
        for i in range(3):
            Vx[i] += 2 * w[0] * (x[i] - P[k + 1, i])
            Vxx[i, i] += 2 * w[0]
            Vx[3 + i] += 2 * w[1] * (x[3 + i] - V[k + 1, i])
            Vxx[3 + i, 3 + i] += 2 * w[1]
        e, Je, _ = _att_error(x[6:10], Q[k + 1])
        for i in range(4):
            s = 0.0
            for r in range(3):
                s += Je[r, i] * e[r]
            Vx[6 + i] += 2 * w[2] * s
            for j in range(4):
                s = 0.0
                for r in range(3):
                    s += Je[r, i] * Je[r, j]
                Vxx[6 + i, 6 + j] += 2 * w[2] * s
        Ak = A[k]
        Bk = B[k]
        _mm(Vxx, Ak, VA)
        _mm(Vxx, Bk, VB)
        _mtm(Ak, VA, Qxx)
        _mtm(Bk, VB, Quu)
        _mtm(Bk, VA, Qux)
        for i in range(NX):
            s = 0.0
            for r in range(NX):
                s += Ak[r, i] * Vx[r]
            Qx[i] = s
        for i in range(NU):
            s = 0.0
            for r in range(NX):
                s += Bk[r, i] * Vx[r]
            Qu[i] = s + 2 * w[3] * (U[k, i] - uh[i])
            Quu[i, i] += 2 * w[3] + mu
        for i in range(NU):
            for j in range(NX):
                rhs[i, j] = Qux[i, j]
            rhs[i, NX] = Qu[i]
        sol = np.linalg.solve(Quu, rhs)
        if not np.all(np.isfinite(sol)):
            return False
        for i in range(NU):
            for j in range(NX):
                Kk[k, i, j] = -sol[i, j]
            kk[k, i] = -sol[i, NX]
        K = Kk[k]
        kf = kk[k]
        # Vx = Qx + K'Quu k + K'Qu + Qux'k ; Vxx = Qxx + K'Quu K + K'Qux + Qux'K
        for i in range(NX):
            s = Qx[i]
            for a in range(NU):
                t = Qu[a]
                for b in range(NU):
                    t += Quu[a, b] * kf[b]
                s += K[a, i] * t + Qux[a, i] * kf[a]
            Vx[i] = s
        QK = np.empty((NU, NX))
        for a in range(NU):
            for j in range(NX):
                t = Qux[a, j]
                for b in range(NU):
                    t += Quu[a, b] * K[b, j]
                QK[a, j] = t
        for i in range(NX):
            for j in range(NX):
                s = Qxx[i, j]
                for a in range(NU):
                    s += K[a, i] * QK[a, j] + Qux[a, i] * K[a, j]
                tmp[i, j] = s
        for i in range(NX):
            for j in range(NX):
                Vxx[i, j] = 0.5 * (tmp[i, j] + tmp[j, i])
    return True


@njit(cache=True)
def _ilqr(x0, U0, P, V, Q, w, uh, umin, umax, g, dt, max_iter, tol):
    n = U0.shape[0]
    U = U0.copy()
    for k in range(n):
        U[k] = np.minimum(np.maximum(U[k], umin), umax)
    X = _rollout(x0, U, g, dt)
    J = _cost(X, U, P, V, Q, w, uh)
    costs = np.empty(max_iter + 1)
    costs[0] = J
    n_acc = 0
    status = 0  # 0 converged, 1 max-iter, 2 no progress, 3 non-finite
    if not np.isfinite(J):
        return U, X, costs[:1], 0, 3
    if J <= 1e-14:
        return U, X, costs[:1], 0, 0
    A = np.empty((n, NX, NX))
    B = np.empty((n, NX, NU))
    eps = 1e-6
    mu = 1e-6
    work = np.empty((5, NX))
    fp = np.empty(NX)
    fm = np.empty(NX)
    bw = (np.empty(NX), np.empty((NX, NX)), np.empty((NX, NX)), np.empty((NU, NX)), np.empty((NX, NX)), np.empty((NX, NX)))
    Kk = np.zeros((n, NU, NX))
    kk = np.zeros((n, NU))
    it = 0
    status = 1
    while it < max_iter:
        it += 1
        for k in range(n):
            xs = X[k].copy()
            for j in range(NX):
                xs[j] = X[k, j] + eps
                _f_into(xs, U[k], g, dt, fp, work)
                xs[j] = X[k, j] - eps
                _f_into(xs, U[k], g, dt, fm, work)
                xs[j] = X[k, j]
                for i in range(NX):
                    A[k, i, j] = (fp[i] - fm[i]) / (2 * eps)
            us = U[k].copy()
            for j in range(NU):
                us[j] = U[k, j] + eps
                _f_into(X[k], us, g, dt, fp, work)
                us[j] = U[k, j] - eps
                _f_into(X[k], us, g, dt, fm, work)
                us[j] = U[k, j]
                for i in range(NX):
                    B[k, i, j] = (fp[i] - fm[i]) / (2 * eps)
        accepted = False
        for attempt in range(6):
            ok = _backward(X, U, A, B, P, V, Q, w, uh, mu, Kk, kk, bw)
            if not ok:
                mu = max(mu * 10.0, 1e-4)
                continue
            for alpha in LINE_SEARCH:
                Xn = np.empty((n + 1, NX))
                Un = np.empty((n, NU))
                Xn[0] = x0
                for k in range(n):
                    u = U[k] + alpha * kk[k] + Kk[k] @ (Xn[k] - X[k])
                    Un[k] = np.minimum(np.maximum(u, umin), umax)
                    _f_into(Xn[k], Un[k], g, dt, Xn[k + 1], work)
                Jn = _cost(Xn, Un, P, V, Q, w, uh)
                if np.isfinite(Jn) and Jn < J:
                    accepted = True
                    break
            if accepted:
                break
            mu = max(mu * 10.0, 1e-4)
        if not accepted:
            status = 2 if n_acc > 0 else 2
            break
        n_acc += 1
        rel = (J - Jn) / J
        X = Xn
        U = Un
        J = Jn
        costs[n_acc] = J
        mu = max(mu / 10.0, 1e-9)
        if rel < tol:
            status = 0
            break
    return U, X, costs[: n_acc + 1], it, status


@dataclass
class MpcSolution:
    commands: np.ndarray  # (nodes, 4)
    states: np.ndarray  # (nodes + 1, 10)
    cost_trace: np.ndarray  # accepted-iteration costs
    iterations: int
    status: str
    flagged: bool = False

    @property
    def first(self) -> Command:
        return Command.from_array(self.commands[0], self.flagged)

    @property
    def warm_start(self) -> np.ndarray:
        return self.commands


_STATUS = {0: "converged", 1: "max-iterations", 2: "no-progress", 3: "non-finite"}


def reference_window(reference, t0: float, cfg: MpcConfig):
    """Reference (p, v, q) at the solver nodes t0 + k*dt, k = 0..nodes."""
    times = t0 + cfg.dt * np.arange(cfg.nodes + 1)
    p, v, q, _ = reference.sample(times)
    return p, v, q


def solve_mpc(s: QuadState, ref_window, cfg: MpcConfig = MpcConfig(), warm_start=None, params: QuadParams = QuadParams()) -> MpcSolution:
    """One receding-horizon solve from state ``s`` against ``ref_window`` = (p, v, q) at nodes 0..N."""
    P, V, Q = (np.ascontiguousarray(a, dtype=float) for a in ref_window)
    if len(P) < cfg.nodes + 1:
        raise ValueError(f"reference window has {len(P)} samples, need {cfg.nodes + 1}")
    uh = np.array([params.g, 0.0, 0.0, 0.0])
    U0 = np.tile(uh, (cfg.nodes, 1)) if warm_start is None else np.array(warm_start, dtype=float)
    x0 = np.concatenate([s.p, s.v, s.q])
    weights = np.array([cfg.w_p, cfg.w_v, cfg.w_q, cfg.w_u])
    umin = np.array([0.0, -params.w_max, -params.w_max, -params.w_max])
    umax = np.array([params.thrust_max, params.w_max, params.w_max, params.w_max])
    if not np.all(np.isfinite(x0)):
        return MpcSolution(np.tile(uh, (cfg.nodes, 1)), np.tile(np.nan, (cfg.nodes + 1, NX)), np.array([np.nan]), 0, "non-finite", True)
    U, X, costs, it, status = _ilqr(x0, U0, P, V, Q, weights, uh, umin, umax, params.g, cfg.dt, cfg.max_iterations, cfg.tol)
    if status == 3 or not np.all(np.isfinite(U)):
        log.warning("MPC cost not finite; falling back to hover")
        return MpcSolution(np.tile(uh, (cfg.nodes, 1)), X, costs, it, "non-finite", True)
    return MpcSolution(U, X, costs, it, _STATUS[status])


def horizon_cost(s: QuadState, U, ref_window, cfg: MpcConfig = MpcConfig(), params: QuadParams = QuadParams()) -> float:
    """Cost of applying the command sequence ``U`` from ``s`` (used for optimality checks)."""
    P, V, Q = (np.ascontiguousarray(a, dtype=float) for a in ref_window)
    x0 = np.concatenate([s.p, s.v, s.q])
    X = _rollout(x0, np.asarray(U, dtype=float), params.g, cfg.dt)
    uh = np.array([params.g, 0.0, 0.0, 0.0])
    return float(_cost(X, np.asarray(U, dtype=float), P, V, Q, np.array([cfg.w_p, cfg.w_v, cfg.w_q, cfg.w_u]), uh))


def shift_warm_start(U, shift: float, cfg: MpcConfig):
    """Advance a node-spaced command sequence by ``shift`` seconds (hold the last command)."""
    U = np.asarray(U)
    f = np.minimum(np.arange(len(U)) + shift / cfg.dt, len(U) - 1)
    i0 = np.floor(f).astype(int)
    i1 = np.minimum(i0 + 1, len(U) - 1)
    a = (f - i0)[:, None]
    return (1 - a) * U[i0] + a * U[i1]


@dataclass
class MpcExpert:
    """Stateful expert for one rollout: keeps the warm start between control ticks."""

    reference: object
    cfg: MpcConfig = field(default_factory=MpcConfig)
    params: QuadParams = field(default_factory=QuadParams)
    control_dt: float = 0.02
    last: Optional[MpcSolution] = None
    iteration_log: list = field(default_factory=list)
    max_error: float = 0.0

    def reset(self):
        self.last = None
        self.iteration_log = []
        self.max_error = 0.0

    def solve(self, s: QuadState) -> MpcSolution:
        warm = None if self.last is None else shift_warm_start(self.last.commands, self.control_dt, self.cfg)
        window = reference_window(self.reference, s.t, self.cfg)
        sol = solve_mpc(s, window, self.cfg, warm, self.params)
        self.last = sol
        self.iteration_log.append(sol.iterations)
        self.max_error = max(self.max_error, float(np.linalg.norm(s.p - window[0][0])))
        return sol

    def command(self, s: QuadState) -> Command:
        return self.solve(s).first

    def __call__(self, ctx) -> ControlOutput:
        u = self.command(ctx.state)
        return ControlOutput(u, expert=u, source="expert")
