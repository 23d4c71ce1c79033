"""Deterministic pinhole-camera software rasterizer for FPV frames of the track."""

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from gazerace.sim.dynamics import QuadState
from gazerace.sim.rotations import quat_to_rot

NEAR = 0.05
PACK_MAGIC = b"FRM1"


@dataclass(frozen=True)
class CameraModel:
    width: int = 128
    height: int = 96
    hfov: float = 80.0  # degrees
    uptilt: float = 25.0  # degrees
    cx: float = None
    cy: float = None

    def __post_init__(self):
        if not (0.0 < self.hfov < 180.0):
            raise ValueError("hfov must be in (0, 180) degrees")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")
        if self.cx is None:
            object.__setattr__(self, "cx", (self.width - 1) / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", (self.height - 1) / 2.0)

    @property
    def focal(self) -> float:
        """Focal length in pixels; the image border pixel centers sit at +-hfov/2."""
        return ((self.width - 1) / 2.0) / np.tan(np.radians(self.hfov) / 2.0)

    @property
    def vfov(self) -> float:
        """Vertical field of view (degrees) implied by hfov and the aspect ratio."""
        return float(np.degrees(2.0 * np.arctan(((self.height - 1) / 2.0) / self.focal)))

    def body_to_camera(self) -> np.ndarray:
        """Rows are the camera axes (right, down, optical) expressed in the body frame (FLU)."""
        a = np.radians(self.uptilt)
        return np.array(
            [
                [0.0, -1.0, 0.0],
                [np.sin(a), 0.0, -np.cos(a)],
                [np.cos(a), 0.0, np.sin(a)],
            ]
        )

    def world_to_camera(self, q) -> np.ndarray:
        return self.body_to_camera() @ quat_to_rot(np.asarray(q, dtype=float)).T

    def scaled(self, width, height):
        return CameraModel(width, height, self.hfov, self.uptilt)


@dataclass
class Frame:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8, row-major RGB
    frame_id: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ValueError(f"frame pixels must be uint8 of shape {(self.height, self.width, 3)}")

    def gray(self) -> np.ndarray:
        """Luma in [0, 255] as float64."""
        p = self.pixels.astype(np.float64)
        return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]

    def to_ppm(self) -> bytes:
        return f"P6\n{self.width} {self.height}\n255\n".encode("ascii") + self.pixels.tobytes()

    def save_ppm(self, path):
        Path(path).write_bytes(self.to_ppm())


def gate_color(index: int, n_gates: int) -> tuple:
    r, g, b = colorsys.hsv_to_rgb((index / max(n_gates, 1)) % 1.0, 0.9, 0.95)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


@dataclass(frozen=True)
class RenderStyle:
    sky: tuple = (135, 185, 235)
    floor_dark: tuple = (60, 60, 60)
    floor_light: tuple = (170, 170, 170)
    floor_far: tuple = (115, 115, 115)
    far_distance: float = 30.0  # m, checker cells beyond this collapse to floor_far
    cell: float = 1.0  # m

    def floor_colors(self):
        return {self.floor_dark, self.floor_light, self.floor_far}


def project_point(p_world, s: QuadState, cam: CameraModel):
    """Pixel coordinates (u, v) of a world point and whether it lies in front of the camera."""
    pc = cam.world_to_camera(s.q) @ (np.asarray(p_world, dtype=float) - s.p)
    in_front = bool(pc[2] > NEAR)
    z = pc[2] if abs(pc[2]) > 1e-12 else 1e-12
    return np.array([cam.cx + cam.focal * pc[0] / z, cam.cy + cam.focal * pc[1] / z]), in_front


@njit(cache=True)
def _floor(img, depth, rays, cam_rel, far, cell, dark, light, farc, sky):
    h, w = depth.shape
    for i in range(h):
        for j in range(w):
            dx, dy, dz = rays[i, j, 0], rays[i, j, 1], rays[i, j, 2]
            t = -1.0
            if dz < -1e-9:
                t = -cam_rel[2] / dz
            if t > 0.0:
                depth[i, j] = t
                dist2 = t * t * (dx * dx + dy * dy + dz * dz)
                if dist2 > far * far:
                    col = farc
                else:
                    fx = np.floor((cam_rel[0] + t * dx) / cell)
                    fy = np.floor((cam_rel[1] + t * dy) / cell)
                    col = dark if (int(fx) + int(fy)) % 2 == 0 else light
            else:
                depth[i, j] = np.inf
                col = sky
            img[i, j, 0] = col[0]
            img[i, j, 1] = col[1]
            img[i, j, 2] = col[2]


@njit(cache=True)
def _raster_triangle(img, depth, sx, sy, invz, color):
    """Fill one screen-space triangle with depth test on perspective-correct 1/z."""
    h, w = depth.shape
    x0 = max(int(np.ceil(min(sx[0], sx[1], sx[2]))), 0)
    x1 = min(int(np.floor(max(sx[0], sx[1], sx[2]))), w - 1)
    y0 = max(int(np.ceil(min(sy[0], sy[1], sy[2]))), 0)
    y1 = min(int(np.floor(max(sy[0], sy[1], sy[2]))), h - 1)
    area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sx[2] - sx[0]) * (sy[1] - sy[0])
    if abs(area) < 1e-12:
        return
    for y in range(y0, y1 + 1):
        for x in range(x0, x1 + 1):
            w0 = ((sx[1] - x) * (sy[2] - y) - (sx[2] - x) * (sy[1] - y)) / area
            w1 = ((sx[2] - x) * (sy[0] - y) - (sx[0] - x) * (sy[2] - y)) / area
            w2 = 1.0 - w0 - w1
            if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                continue
            iz = w0 * invz[0] + w1 * invz[1] + w2 * invz[2]
            if iz <= 0.0:
                continue
            z = 1.0 / iz
            if z < depth[y, x]:
                depth[y, x] = z
                img[y, x, 0] = color[0]
                img[y, x, 1] = color[1]
                img[y, x, 2] = color[2]


def _clip_near(poly):
    """Sutherland-Hodgman clip of a camera-space polygon against z >= NEAR."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ina, inb = a[2] >= NEAR, b[2] >= NEAR
        if ina:
            out.append(a)
        if ina != inb:
            t = (NEAR - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return out


def _gate_quads(gate):
    """Four frame bars as (4, 3) corner arrays in gate-local (lateral, up) offsets."""
    hw, hh, ft = gate.inner_w / 2, gate.inner_h / 2, gate.frame_thickness
    ow, oh = hw + ft, hh + ft
    return [
        ((-ow, hh), (ow, hh), (ow, oh), (-ow, oh)),  # top
        ((-ow, -oh), (ow, -oh), (ow, -hh), (-ow, -hh)),  # bottom
        ((-ow, -hh), (-hw, -hh), (-hw, hh), (-ow, hh)),  # left
        ((hw, -hh), (ow, -hh), (ow, hh), (hw, hh)),  # right
    ]


_RAY_CACHE = {}


def _camera_rays(cam: CameraModel):
    key = (cam.width, cam.height, cam.hfov, cam.cx, cam.cy)
    if key not in _RAY_CACHE:
        u, v = np.meshgrid(np.arange(cam.width, dtype=float), np.arange(cam.height, dtype=float))
        _RAY_CACHE[key] = np.stack([(u - cam.cx) / cam.focal, (v - cam.cy) / cam.focal, np.ones_like(u)], axis=-1)
    return _RAY_CACHE[key]


def render_frame(s: QuadState, track, cam: CameraModel = CameraModel(), style: RenderStyle = RenderStyle(), frame_id: int = 0) -> Frame:
    """Depth-buffered flat-shaded render: sky, checkerboard floor, gate frames (two triangles per bar)."""
    r_wc = cam.world_to_camera(s.q)
    rays_w = _camera_rays(cam) @ r_wc  # camera ray directions in world axes, z-depth normalized
    img = np.empty((cam.height, cam.width, 3), dtype=np.uint8)
    depth = np.empty((cam.height, cam.width))
    cam_rel = s.p - track.floor_origin
    _floor(
        img,
        depth,
        np.ascontiguousarray(rays_w),
        cam_rel,
        style.far_distance,
        style.cell,
        np.array(style.floor_dark, dtype=np.uint8),
        np.array(style.floor_light, dtype=np.uint8),
        np.array(style.floor_far, dtype=np.uint8),
        np.array(style.sky, dtype=np.uint8),
    )
    n = len(track.gates)
    f = cam.focal
    for gate in track.gates:
        rel = gate.center - s.p
        lat, up = gate.lateral, gate.up
        color = np.array(gate_color(gate.index, n), dtype=np.uint8)
        for quad in _gate_quads(gate):
            corners = [r_wc @ (rel + a * lat + b * up) for a, b in quad]
            if all(c[2] < NEAR for c in corners):
                continue
            poly = _clip_near(corners)
            if len(poly) < 3:
                continue
            pts = np.array(poly)
            sx = cam.cx + f * pts[:, 0] / pts[:, 2]
            sy = cam.cy + f * pts[:, 1] / pts[:, 2]
            if sx.max() < 0 or sx.min() > cam.width - 1 or sy.max() < 0 or sy.min() > cam.height - 1:
                continue
            invz = 1.0 / pts[:, 2]
            for k in range(1, len(pts) - 1):
                idx = [0, k, k + 1]
                _raster_triangle(img, depth, sx[idx], sy[idx], invz[idx], color)
    return Frame(cam.width, cam.height, img, frame_id, s.t)


def make_renderer(track, cam: CameraModel = CameraModel(), style: RenderStyle = RenderStyle()):
    """Callable (state, frame_id) -> Frame for the rollout driver."""
    return lambda s, frame_id: render_frame(s, track, cam, style, frame_id)


def write_packed(path, frames):
    """Packed dataset: magic, u32 count, u32 width, u32 height, then raw RGB frames (little-endian header)."""
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to pack")
    w, h = frames[0].width, frames[0].height
    with open(path, "wb") as fh:
        fh.write(PACK_MAGIC + struct.pack("<III", len(frames), w, h))
        for fr in frames:
            if (fr.width, fr.height) != (w, h):
                raise ValueError("all packed frames must share one resolution")
            fh.write(fr.pixels.tobytes())


def read_packed(path) -> np.ndarray:
    """Frames of a packed file as a (count, height, width, 3) uint8 array."""
    data = Path(path).read_bytes()
    if data[:4] != PACK_MAGIC:
        raise ValueError(f"{path}: not a packed frame file")
    count, w, h = struct.unpack("<III", data[4:16])
    expected = 16 + count * w * h * 3
    if len(data) != expected:
        raise ValueError(f"{path}: size {len(data)} does not match header ({expected})")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, h, w, 3)
