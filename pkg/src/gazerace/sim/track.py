"""Race-track geometry, gate crossing and termination checks."""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from numba import njit

from gazerace.sim.dynamics import QuadState
from gazerace.sim.rotations import quat_from_euler

DATA_DIR = Path(__file__).resolve().parent.parent / "data"

DEFAULT_BOUNDS = (np.array([-15.0, -7.5, 0.0]), np.array([15.0, 7.5, 8.0]))


@dataclass
class Gate:
    center: np.ndarray
    normal: np.ndarray
    up: np.ndarray
    inner_w: float = 1.5
    inner_h: float = 1.5
    frame_thickness: float = 0.2
    index: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.normal = np.asarray(self.normal, dtype=float)
        self.up = np.asarray(self.up, dtype=float)
        self.normal = self.normal / np.linalg.norm(self.normal)
        self.up = self.up / np.linalg.norm(self.up)
        if abs(float(self.normal @ self.up)) > 1e-6:
            raise ValueError(f"gate {self.index}: normal and up are not orthogonal")
        if self.inner_w <= 0 or self.inner_h <= 0 or self.frame_thickness < 0:
            raise ValueError(f"gate {self.index}: non-positive aperture")

    @property
    def lateral(self) -> np.ndarray:
        """In-plane axis completing (lateral, up, normal) as a right-handed frame."""
        return np.cross(self.up, self.normal)

    def to_dict(self):
        return {
            "index": self.index,
            "center": self.center.tolist(),
            "normal": self.normal.tolist(),
            "up": self.up.tolist(),
            "inner_w": self.inner_w,
            "inner_h": self.inner_h,
            "frame_thickness": self.frame_thickness,
        }


@dataclass
class Track:
    gates: list
    start_pose: QuadState
    bounds: tuple = field(default_factory=lambda: (DEFAULT_BOUNDS[0].copy(), DEFAULT_BOUNDS[1].copy()))
    name: str = "custom"
    floor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))  # checkerboard origin, floor height

    def __post_init__(self):
        self.floor_origin = np.asarray(self.floor_origin, dtype=float).reshape(3)
        if not self.gates:
            raise ValueError("track needs at least one gate")
        self.bounds = (np.asarray(self.bounds[0], dtype=float), np.asarray(self.bounds[1], dtype=float))
        if not inside_bounds(self.start_pose.p, self.bounds):
            raise ValueError("start pose outside track bounds")

    def to_dict(self):
        s = self.start_pose
        return {
            "name": self.name,
            "note": "approximate layout; gate dimensions and coordinates are not published",
            "bounds": {"min": self.bounds[0].tolist(), "max": self.bounds[1].tolist()},
            "floor_origin": self.floor_origin.tolist(),
            "start_pose": {"p": s.p.tolist(), "v": s.v.tolist(), "q": s.q.tolist(), "w": s.w.tolist()},
            "gates": [g.to_dict() for g in self.gates],
        }

    @classmethod
    def from_dict(cls, d):
        gates = [
            Gate(g["center"], g["normal"], g["up"], g["inner_w"], g["inner_h"], g["frame_thickness"], g.get("index", i))
            for i, g in enumerate(d["gates"])
        ]
        sp = d["start_pose"]
        start = QuadState(0.0, sp["p"], sp.get("v", [0, 0, 0]), sp.get("q", [1, 0, 0, 0]), sp.get("w", [0, 0, 0]))
        b = d.get("bounds")
        bounds = (b["min"], b["max"]) if b else DEFAULT_BOUNDS
        return cls(gates, start, bounds, d.get("name", "custom"), d.get("floor_origin", [0.0, 0.0, 0.0]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def translated(self, offset):
        """Copy of the track with every element (gates, floor, bounds) shifted by ``offset``."""
        offset = np.asarray(offset, dtype=float)
        gates = [Gate(g.center + offset, g.normal, g.up, g.inner_w, g.inner_h, g.frame_thickness, g.index) for g in self.gates]
        s = self.start_pose.copy()
        s.p = s.p + offset
        bounds = (self.bounds[0] + offset, self.bounds[1] + offset)
        return Track(gates, s, bounds, self.name, self.floor_origin + offset)

    @property
    def floor_z(self) -> float:
        return float(self.floor_origin[2])


def inside_bounds(p, bounds) -> bool:
    return bool(np.all(p >= bounds[0]) and np.all(p <= bounds[1]))


class GateEvent(Enum):
    NONE = "none"
    PASS = "pass"
    FRAME_HIT = "frame-hit"


_EVENTS = (GateEvent.NONE, GateEvent.PASS, GateEvent.FRAME_HIT)


@njit(cache=True)
def segment_gate_events(p0, p1, gates):
    """Event code per gate (0 none, 1 pass, 2 frame hit) for the segment p0 -> p1.

    ``gates`` rows: center(3), normal(3), lateral(3), up(3), half_w, half_h, frame_thickness.
    """
    n = gates.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        g = gates[i]
        d0 = 0.0
        d1 = 0.0
        for j in range(3):
            d0 += (p0[j] - g[j]) * g[3 + j]
            d1 += (p1[j] - g[j]) * g[3 + j]
        if not ((d0 <= 0.0 and d1 > 0.0) or (d1 <= 0.0 and d0 > 0.0)):
            continue
        frac = d0 / (d0 - d1)
        a = 0.0
        b = 0.0
        for j in range(3):
            h = p0[j] + frac * (p1[j] - p0[j]) - g[j]
            a += h * g[6 + j]
            b += h * g[9 + j]
        a = abs(a)
        b = abs(b)
        if a <= g[12] and b <= g[13]:
            out[i] = 1 if d0 < d1 else 0
        elif a <= g[12] + g[14] and b <= g[13] + g[14]:
            out[i] = 2
    return out


def gate_array(gates) -> np.ndarray:
    return np.array(
        [
            np.concatenate([g.center, g.normal, g.lateral, g.up, [g.inner_w / 2, g.inner_h / 2, g.frame_thickness]])
            for g in gates
        ]
    )


def check_gate_pass(s_prev: QuadState, s_next: QuadState, gate: Gate) -> GateEvent:
    """Classify the straight segment between two consecutive positions against ``gate``.

    PASS requires crossing the gate plane along the normal inside the aperture.
    A crossing in either direction through the frame band is a FRAME_HIT.
    """
    code = segment_gate_events(s_prev.p, s_next.p, gate_array([gate]))[0]
    return _EVENTS[code]


RUNNING = "running"
COMPLETED = "completed"


def check_termination(s: QuadState, track: Track, next_gate: int, frame_hit: bool = False) -> str:
    """Return ``running``, ``completed`` or a crash cause string."""
    if s.p[2] <= track.floor_z:
        return "ground"
    if not inside_bounds(s.p, track.bounds):
        return "out-of-bounds"
    if frame_hit:
        return "gate-frame"
    if next_gate >= len(track.gates):
        return COMPLETED
    return RUNNING


def is_crash(cause: str) -> bool:
    return cause not in (RUNNING, COMPLETED)


def _figure8_centerline(theta, a=11.0, b=11.0):
    x = a * np.sin(theta)
    y = 0.5 * b * np.sin(2 * theta)
    z = 2.5 + 0.5 * np.cos(theta)
    return np.stack([x, y, z], axis=-1)


def _oval_centerline(theta, a=9.0, b=4.5):
    return np.stack([a * np.cos(theta), b * np.sin(theta), np.full_like(theta, 2.0)], axis=-1)


def _build(name, curve, n_gates, start_theta):
    thetas = 2 * np.pi * (np.arange(n_gates) + 0.5) / n_gates
    eps = 1e-4
    gates = []
    for i, th in enumerate(thetas):
        c = curve(np.array([th]))[0]
        tangent = curve(np.array([th + eps]))[0] - curve(np.array([th - eps]))[0]
        n = np.array([tangent[0], tangent[1], 0.0])
        gates.append(Gate(c, n / np.linalg.norm(n), [0.0, 0.0, 1.0], index=i))
    p0 = curve(np.array([start_theta]))[0]
    d = curve(np.array([start_theta + eps]))[0] - p0
    start = QuadState(0.0, p0, np.zeros(3), quat_from_euler(0.0, 0.0, np.arctan2(d[1], d[0])), np.zeros(3))
    return Track(gates, start, name=name)


TRACK_NAMES = ("figure8", "oval")


def generate_track(name: str) -> Track:
    """Build one of the bundled layouts.

    figure8: 10 gates on a lemniscate of Gerono spanning 22 x 11 m, centers between
    2.0 and 3.0 m high (the two branches cross the center 1 m apart vertically).
    oval: 6 gates on an 18 x 9 m ellipse at 2 m height.
    """
    if name == "figure8":
        return _build(name, _figure8_centerline, 10, 0.0)
    if name == "oval":
        return _build(name, _oval_centerline, 6, 0.0)
    raise ValueError(f"unknown track {name!r}; expected one of {TRACK_NAMES}")


def load_track(name_or_path) -> Track:
    """Load a bundled track by name or a track JSON file by path."""
    if name_or_path in TRACK_NAMES:
        bundled = DATA_DIR / f"{name_or_path}.json"
        if bundled.exists():
            return Track.load(bundled)
        return generate_track(name_or_path)
    return Track.load(name_or_path)
