"""Reference trajectories through the gates: closed Catmull-Rom spline at constant speed."""

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from gazerace.sim.dynamics import QuadState
from gazerace.sim.rotations import quat_conj, quat_log, quat_mul, rot_to_quat
from gazerace.sim.track import Track

REF_HZ = 50
CSV_HEADER = "ts,px,py,pz,qw,qx,qy,qz,vx,vy,vz,wx,wy,wz".split(",")


class ReferenceError(ValueError):
    pass


@dataclass
class ReferenceTrajectory:
    t: np.ndarray  # (N,)
    p: np.ndarray  # (N, 3)
    q: np.ndarray  # (N, 4)
    v: np.ndarray  # (N, 3)
    w: np.ndarray  # (N, 3) body rates
    periodic: bool = True
    name: str = "ref"
    g: float = 9.81

    def __post_init__(self):
        self._a = None
        self._rot = None
        self._packed = None

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) + (1.0 / REF_HZ if self.periodic else 0.0)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def __len__(self):
        return len(self.t)

    def initial_state(self) -> QuadState:
        return QuadState(0.0, self.p[0].copy(), self.v[0].copy(), self.q[0].copy(), self.w[0].copy())

    @property
    def acc(self) -> np.ndarray:
        """World-frame acceleration by central differences of velocity."""
        if self._a is None:
            if self.periodic:
                self._a = (np.roll(self.v, -1, axis=0) - np.roll(self.v, 1, axis=0)) / (2 * self.dt)
            else:
                self._a = np.gradient(self.v, self.dt, axis=0)
        return self._a

    def rotation_matrices(self) -> np.ndarray:
        if self._rot is None:
            from gazerace.sim.rotations import quat_to_rot

            self._rot = np.stack([quat_to_rot(q) for q in self.q])
        return self._rot

    def sample(self, times):
        """Interpolated (p, v, q, w) at ``times``; quaternions by normalized lerp.

        Periodic references wrap around the lap, others hold their end samples.
        """
        if self._packed is None:
            self._packed = np.ascontiguousarray(np.concatenate([self.p, self.v, self.q, self.w], axis=1))
        times = np.atleast_1d(np.asarray(times, dtype=float))
        out = _sample_packed(self._packed, times, float(self.t[0]), REF_HZ, self.periodic)
        return out[:, 0:3], out[:, 3:6], out[:, 6:10], out[:, 10:13]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for i in range(len(self.t)):
            wr.writerow([repr(float(x)) for x in np.concatenate([[self.t[i]], self.p[i], self.q[i], self.v[i], self.w[i]])])
        return buf.getvalue()

    def save_csv(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def load_csv(cls, path, periodic=False, name=None):
        """Load the 50 Hz CSV schema; external trajectories are resampled onto a 20 ms grid."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ReferenceError(f"{path}: empty reference")
        missing = set(CSV_HEADER) - set(rows[0])
        if missing:
            raise ReferenceError(f"{path}: missing columns {sorted(missing)}")
        a = np.array([[float(r[k]) for k in CSV_HEADER] for r in rows])
        ts = a[:, 0] - a[0, 0]
        grid = np.arange(0.0, ts[-1] + 1e-9, 1.0 / REF_HZ)
        cols = [np.interp(grid, ts, a[:, j]) for j in range(1, 14)]
        m = np.stack(cols, axis=1)
        q = m[:, 3:7] / np.linalg.norm(m[:, 3:7], axis=1, keepdims=True)
        return cls(grid, m[:, 0:3], q, m[:, 7:10], m[:, 10:13], periodic=periodic, name=name or Path(path).stem)


@njit(cache=True)
def _sample_packed(packed, times, t0, hz, periodic):
    n = packed.shape[0]
    out = np.empty((times.shape[0], 13))
    for k in range(times.shape[0]):
        f = (times[k] - t0) * hz
        if periodic:
            f = f % n
            i0 = int(np.floor(f)) % n
            i1 = (i0 + 1) % n
        else:
            f = min(max(f, 0.0), n - 1.0)
            i0 = min(int(np.floor(f)), n - 1)
            i1 = min(i0 + 1, n - 1)
        a = f - np.floor(f)
        for j in range(6):
            out[k, j] = (1 - a) * packed[i0, j] + a * packed[i1, j]
        for j in range(10, 13):
            out[k, j] = (1 - a) * packed[i0, j] + a * packed[i1, j]
        dot = 0.0
        for j in range(6, 10):
            dot += packed[i0, j] * packed[i1, j]
        sgn = 1.0 if dot >= 0.0 else -1.0
        nrm = 0.0
        for j in range(6, 10):
            out[k, j] = (1 - a) * packed[i0, j] + a * sgn * packed[i1, j]
            nrm += out[k, j] ** 2
        nrm = np.sqrt(nrm)
        for j in range(6, 10):
            out[k, j] /= nrm
    return out


def _catmull_rom(points, u):
    """Closed uniform Catmull-Rom: position and first/second derivatives at parameters ``u``."""
    n = len(points)
    seg = np.floor(u).astype(int) % n
    s = (u - np.floor(u))[:, None]
    p0, p1, p2, p3 = (points[(seg + k) % n] for k in (-1, 0, 1, 2))
    c1 = -p0 + p2
    c2 = 2 * p0 - 5 * p1 + 4 * p2 - p3
    c3 = -p0 + 3 * p1 - 3 * p2 + p3
    pos = 0.5 * (2 * p1 + c1 * s + c2 * s**2 + c3 * s**3)
    d1 = 0.5 * (c1 + 2 * c2 * s + 3 * c3 * s**2)
    d2 = 0.5 * (2 * c2 + 6 * c3 * s)
    return pos, d1, d2


def _attitude(acc, tangent, g):
    """Thrust-aligned attitude with yaw along the direction of travel."""
    z_b = acc + np.array([0.0, 0.0, g])
    z_b /= np.linalg.norm(z_b, axis=1, keepdims=True)
    x_c = np.stack([tangent[:, 0], tangent[:, 1], np.zeros(len(tangent))], axis=1)
    x_c /= np.linalg.norm(x_c, axis=1, keepdims=True)
    y_b = np.cross(z_b, x_c)
    y_b /= np.linalg.norm(y_b, axis=1, keepdims=True)
    x_b = np.cross(y_b, z_b)
    q = np.empty((len(acc), 4))
    prev = None
    for i in range(len(acc)):
        qi = rot_to_quat(np.stack([x_b[i], y_b[i], z_b[i]], axis=1))
        if prev is not None and qi @ prev < 0:
            qi = -qi
        q[i] = prev = qi
    return q


def _check_frames(track, poly):
    """Reject splines that cross any gate plane inside the frame band."""
    for gate in track.gates:
        d = (poly - gate.center) @ gate.normal
        idx = np.nonzero(np.sign(d[:-1]) != np.sign(d[1:]))[0]
        for i in idx:
            frac = d[i] / (d[i] - d[i + 1])
            hit = poly[i] + frac * (poly[i + 1] - poly[i]) - gate.center
            a, b = abs(hit @ gate.lateral), abs(hit @ gate.up)
            inside = a <= gate.inner_w / 2 and b <= gate.inner_h / 2
            band = a <= gate.inner_w / 2 + gate.frame_thickness and b <= gate.inner_h / 2 + gate.frame_thickness
            if band and not inside:
                raise ReferenceError(f"spline crosses the frame of gate {gate.index}")


def _speed_profile(t, speed, ramp_time):
    """Arc length, speed and tangential acceleration of a standing start.

    Speed follows a half-cosine from 0 to ``speed`` over ``ramp_time`` (continuous
    acceleration), then stays constant.
    """
    t = np.asarray(t, dtype=float)
    if ramp_time <= 0:
        return speed * t, np.full_like(t, speed), np.zeros_like(t)
    r = np.minimum(t, ramp_time)
    arc = speed * (r / 2 - ramp_time / (2 * np.pi) * np.sin(np.pi * r / ramp_time)) + speed * (t - r)
    ramp = t < ramp_time
    vel = np.where(ramp, speed * (1 - np.cos(np.pi * r / ramp_time)) / 2, speed)
    acc = np.where(ramp, speed * np.pi / (2 * ramp_time) * np.sin(np.pi * r / ramp_time), 0.0)
    return arc, vel, acc


def generate_reference(track: Track, speed: float, offsets=None, g: float = 9.81, name: str = None,
                       ramp_time: float = 1.2) -> ReferenceTrajectory:
    """Reference through the gate centers (plus optional in-plane offsets) from a standing start.

    The path starts midway between the last and the first gate, accelerates to ``speed``
    over ``ramp_time`` seconds and runs one segment past the lap (through the first gate
    again), so a receding horizon stays on the path after the final gate.
    """
    if not (0.5 < speed <= 10.0):
        raise ReferenceError(f"speed {speed} outside (0.5, 10] m/s")
    if ramp_time < 0:
        raise ReferenceError(f"ramp_time {ramp_time} is negative")
    pts = np.array([gt.center for gt in track.gates], dtype=float)
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=float)
        pts = pts + np.array([o[0] * gt.lateral + o[1] * gt.up for o, gt in zip(offsets, track.gates)])
    n = len(pts)
    if n < 2:
        raise ReferenceError("need at least two gates for a closed reference")
    per_seg = 400
    u = -0.5 + np.arange((n + 1) * per_seg + 1) / per_seg
    pos, _, _ = _catmull_rom(pts, u)
    _check_frames(track, pos)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])
    total = s[-1]
    ramp_len = speed * ramp_time / 2
    duration = (ramp_time + (total - ramp_len) / speed) if total > ramp_len else ramp_time
    t = np.arange(int(np.floor(duration * REF_HZ + 1e-9)) + 1) / REF_HZ
    arc, sdot, sddot = _speed_profile(t, speed, ramp_time)
    u_t = np.interp(np.minimum(arc, total), s, u)
    p, d1, d2 = _catmull_rom(pts, u_t)
    speed_u = np.linalg.norm(d1, axis=1, keepdims=True)
    tangent = d1 / speed_u
    curv = (d2 - np.sum(d2 * tangent, axis=1, keepdims=True) * tangent) / speed_u**2
    v = sdot[:, None] * tangent
    acc = sddot[:, None] * tangent + sdot[:, None] ** 2 * curv
    q = _attitude(acc, tangent, g)
    m = len(t)
    w = np.empty((m, 3))
    for i in range(m):
        ia, ib = max(i - 1, 0), min(i + 1, m - 1)
        w[i] = quat_log(quat_mul(quat_conj(q[ia]), q[ib])) * REF_HZ / (ib - ia)
    ref = ReferenceTrajectory(t, p, q, v, w, periodic=False, name=name or f"{track.name}@{speed:g}", g=g)
    ref.length = total
    return ref


def jittered_references(track: Track, count: int, seed: int, offset: float = 0.3, speed_range=(4.0, 6.0), prefix="ref"):
    """``count`` references with uniform +-``offset`` gate-passage offsets and speeds in ``speed_range``."""
    rng = np.random.default_rng(seed)
    refs = []
    while len(refs) < count:
        offs = rng.uniform(-offset, offset, size=(len(track.gates), 2))
        speed = float(rng.uniform(*speed_range))
        try:
            refs.append(generate_reference(track, speed, offs, name=f"{prefix}{len(refs):02d}"))
        except ReferenceError:
            continue
    return refs
