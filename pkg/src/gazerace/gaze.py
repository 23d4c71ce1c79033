"""Gaze-derived attention maps, saliency metrics, baselines and synthetic gaze."""

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gazerace.render import CameraModel, project_point

ATTM_MAGIC = b"ATTM"
SOURCE_RESOLUTION = (800, 600)
SOURCE_VARIANCE = (200.0, 200.0)  # pixels^2 at SOURCE_RESOLUTION
HALF_WINDOW = 12


@dataclass
class GazeRecord:
    timestamp: float
    frame: int
    x: float
    y: float
    clamped: bool = False  # gaze was outside the image before clamping


@dataclass
class FixationWindow:
    """Fixations (source-resolution pixels) for frames t-12..t+12 and the source resolution."""

    fixations: np.ndarray  # (n, 2) x, y
    source_size: tuple = SOURCE_RESOLUTION
    variance: tuple = SOURCE_VARIANCE  # diagonal, pixels^2 at SOURCE_RESOLUTION

    def __post_init__(self):
        self.fixations = np.asarray(self.fixations, dtype=float).reshape(-1, 2)
        if len(self.fixations) > 2 * HALF_WINDOW + 1:
            raise ValueError(f"window holds {len(self.fixations)} fixations, max {2 * HALF_WINDOW + 1}")
        if min(self.variance) <= 0:
            raise ValueError("variance must be positive")


@dataclass
class AttentionMap:
    values: np.ndarray  # (height, width), sums to 1

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"attention map must be 2-D, got shape {v.shape}")
        if np.any(v < 0) or abs(float(np.sum(v, dtype=np.float64)) - 1.0) > 1e-6:
            raise ValueError("attention map must be non-negative and sum to 1")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def argmax(self):
        """(x, y) pixel of the maximum."""
        iy, ix = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(ix), int(iy)

    def to_bytes(self) -> bytes:
        v = np.ascontiguousarray(self.values, dtype="<f4")
        return ATTM_MAGIC + struct.pack("<II", self.width, self.height) + v.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes):
        if data[:4] != ATTM_MAGIC:
            raise ValueError("not an ATTM attention map")
        w, h = struct.unpack("<II", data[4:12])
        if len(data) != 12 + 4 * w * h:
            raise ValueError("ATTM payload size mismatch")
        return cls(np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).astype(np.float64))

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def scaled_window(win: FixationWindow, out_size):
    """Fixation centers (pixel-center convention) and diagonal variance at ``out_size``."""
    sw, sh = win.source_size
    rx, ry = out_size[0] / sw, out_size[1] / sh
    centers = np.column_stack([(win.fixations[:, 0] + 0.5) * rx - 0.5, (win.fixations[:, 1] + 0.5) * ry - 0.5])
    vx = win.variance[0] * (out_size[0] / SOURCE_RESOLUTION[0]) ** 2
    vy = win.variance[1] * (out_size[1] / SOURCE_RESOLUTION[1]) ** 2
    return centers, (vx, vy)


def build_attention_map(win: FixationWindow, out_size) -> AttentionMap:
    """Per-pixel maximum over the fixation Gaussians, normalized to sum to one.

    Evaluated in the log domain so the normalization survives fixations far
    outside the image; the result is identical to max-of-densities / sum.
    """
    if len(win.fixations) == 0:
        raise ValueError("empty fixation window")
    w, h = out_size
    centers, (vx, vy) = scaled_window(win, out_size)
    xs = np.arange(w, dtype=float)
    ys = np.arange(h, dtype=float)
    # Gaussian is separable: log N = lx(x) + ly(y) + const
    lx = -0.5 * (xs[None, :] - centers[:, 0:1]) ** 2 / vx  # (n, w)
    ly = -0.5 * (ys[None, :] - centers[:, 1:2]) ** 2 / vy  # (n, h)
    logmap = np.max(ly[:, :, None] + lx[:, None, :], axis=0)
    logmap -= logmap.max()
    a = np.exp(logmap)
    return AttentionMap(a / a.sum())


def gaussian_density(x, y, mean, var) -> float:
    """Bivariate normal density with diagonal covariance (reference formula)."""
    vx, vy = var
    return float(np.exp(-0.5 * ((x - mean[0]) ** 2 / vx + (y - mean[1]) ** 2 / vy)) / (2 * np.pi * np.sqrt(vx * vy)))


def kl_divergence(a: AttentionMap, a_hat: AttentionMap) -> float:
    """D_KL(A || A_hat) with the natural log; +inf if A_hat vanishes where A does not."""
    p, q = _values(a), _values(a_hat)
    if p.shape != q.shape:
        raise ValueError(f"resolution mismatch {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def pearson_cc(a: AttentionMap, a_hat: AttentionMap) -> float:
    """Pearson correlation of the flattened maps; NaN when either map is constant."""
    p, q = _values(a), _values(a_hat)
    if p.shape != q.shape:
        raise ValueError(f"resolution mismatch {p.shape} vs {q.shape}")
    p, q = p.ravel(), q.ravel()
    dp, dq = p - p.mean(), q - q.mean()
    denom = np.sqrt(np.sum(dp * dp) * np.sum(dq * dq))
    if denom == 0:
        return float("nan")
    return float(np.clip(np.sum(dp * dq) / denom, -1.0, 1.0))


def _values(m):
    return np.asarray(m.values if isinstance(m, AttentionMap) else m, dtype=np.float64)


def baseline_mean_map(maps) -> AttentionMap:
    maps = [_values(m) for m in maps]
    if not maps:
        raise ValueError("mean map needs at least one map")
    mean = np.mean(np.stack(maps), axis=0)
    return AttentionMap(mean / mean.sum())


def baseline_shuffle(n_items: int, lap_boundaries, seed: int) -> np.ndarray:
    """Permutation that reorders items only within laps, preferring derangements.

    ``lap_boundaries`` are the start indices of each lap (0 first). Returns
    ``perm`` such that item i is paired with ground truth ``perm[i]``.
    """
    if n_items <= 0:
        raise ValueError("shuffle needs at least one item")
    starts = sorted(set(int(b) for b in lap_boundaries) | {0})
    if starts[-1] >= n_items or starts[0] < 0:
        raise ValueError("lap boundaries outside the sequence")
    ends = starts[1:] + [n_items]
    rng = np.random.default_rng(seed)
    perm = np.arange(n_items)
    for s, e in zip(starts, ends):
        idx = np.arange(s, e)
        if len(idx) < 2:
            continue
        for _ in range(100):
            p = rng.permutation(idx)
            if not np.any(p == idx):
                break
        perm[s:e] = p
    return perm


def synth_gaze_oracle(s, track, next_gate: int, cam: CameraModel, frame: int = 0) -> GazeRecord:
    """Gaze on the projected center of the upcoming gate.

    When that gate is behind the camera or already out of view (the last
    metre before passing it, with the camera tilted up), gaze moves on to the
    following gate, as a pilot's does. If no gate projects inside the image the
    first one in front of the camera is used and the point is clamped.
    """
    n = len(track.gates)
    if not (0 <= next_gate <= n):
        raise ValueError(f"next_gate {next_gate} outside [0, {n}]")
    fallback = None
    for k in range(n):
        gate = track.gates[(next_gate + k) % n]
        xy, front = project_point(gate.center, s, cam)
        if not front:
            continue
        x, y = float(xy[0]), float(xy[1])
        if 0 <= x <= cam.width - 1 and 0 <= y <= cam.height - 1:
            return GazeRecord(s.t, frame, x, y, False)
        if fallback is None:
            fallback = (x, y)
    if fallback is None:  # nothing in front of the camera: look at the image center
        fallback = (cam.cx, cam.cy)
    x, y = fallback
    return GazeRecord(s.t, frame, float(np.clip(x, 0, cam.width - 1)), float(np.clip(y, 0, cam.height - 1)), True)


def fixation_windows(gaze, source_size, half=HALF_WINDOW, lap_ids=None):
    """One window per frame: fixations of frames t-half..t+half, truncated at sequence (or lap) ends."""
    xy = np.array([[g.x, g.y] for g in gaze], dtype=float)
    n = len(xy)
    laps = np.zeros(n, dtype=int) if lap_ids is None else np.asarray(lap_ids)
    out = []
    for t in range(n):
        lo, hi = max(0, t - half), min(n, t + half + 1)
        sel = np.arange(lo, hi)
        sel = sel[laps[sel] == laps[t]]
        out.append(FixationWindow(xy[sel], source_size))
    return out


GAZE_HEADER = ["ts", "frame", "gaze_x", "gaze_y"]


def write_gaze_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GAZE_HEADER)
        for r in records:
            w.writerow([repr(float(r.timestamp)), int(r.frame), repr(float(r.x)), repr(float(r.y))])


def load_gaze_csv(path, column_map=None, size=None):
    """Load a gaze log; ``column_map`` (dict or JSON file path) renames source columns onto
    ``ts,frame,gaze_x,gaze_y``. Gaze given in normalized [0,1] units can be scaled by ``size``."""
    if isinstance(column_map, (str, Path)):
        column_map = json.loads(Path(column_map).read_text(encoding="utf-8"))
    column_map = column_map or {}
    inverse = {ours: theirs for ours, theirs in column_map.items()}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        get = lambda k: row[inverse.get(k, k)]
        x, y = float(get("gaze_x")), float(get("gaze_y"))
        if size is not None:
            x, y = x * size[0], y * size[1]
        out.append(GazeRecord(float(get("ts")), int(float(get("frame"))), x, y))
    for a, b in zip(out, out[1:]):
        if b.timestamp < a.timestamp:
            raise ValueError(f"{path}: timestamps decrease at frame {b.frame}")
    if size is not None:
        for r in out:
            r.clamped = not (0 <= r.x <= size[0] - 1 and 0 <= r.y <= size[1] - 1)
            r.x = float(np.clip(r.x, 0, size[0] - 1))
            r.y = float(np.clip(r.y, 0, size[1] - 1))
    return out


def area_downsample(values, out_size) -> np.ndarray:
    """Exact area-weighted resampling of a (H, W) grid to ``out_size`` = (w, h)."""
    values = np.asarray(values, dtype=float)
    h_in, w_in = values.shape
    dx = _overlap_matrix(w_in, out_size[0])
    dy = _overlap_matrix(h_in, out_size[1])
    return dy @ values @ dx.T


def _overlap_matrix(n_in, n_out):
    edges_in = np.arange(n_in + 1, dtype=float)
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges_out[i], edges_out[i + 1]
        m[i] = np.clip(np.minimum(edges_in[1:], hi) - np.maximum(edges_in[:-1], lo), 0.0, None)
    return m


def summarize_metric(values):
    """Mean over finite values plus the count of infinities (reported separately)."""
    v = np.asarray(values, dtype=float)
    finite = v[np.isfinite(v)]
    return {
        "mean": float(finite.mean()) if finite.size else float("nan"),
        "n": int(v.size),
        "n_inf": int(np.sum(np.isinf(v))),
        "n_undefined": int(np.sum(np.isnan(v))),
    }
