"""Harris corners, pyramidal Lucas-Kanade tracking, epipolar RANSAC and the 40-track descriptor."""

import csv
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

N_TRACKS = 40
MAX_AGE = 255


def to_gray(pixels) -> np.ndarray:
    """Luma of an RGB uint8 image as float64 in [0, 1]; 2-D input passes through (scaled if integer)."""
    px = np.asarray(pixels)
    if px.ndim == 2:
        return px.astype(np.float64) / (255.0 if px.dtype == np.uint8 else 1.0)
    return (px[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])) / 255.0


def harris_response(gray, k=0.04, sigma=1.0):
    g = np.asarray(gray, dtype=np.float64)
    ix = ndimage.sobel(g, axis=1, mode="nearest") / 8.0
    iy = ndimage.sobel(g, axis=0, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(ix * ix, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def harris_corners(gray, max_n=200, quality=0.01, min_distance=8.0, k=0.04, mask=None, border=2):
    """Corners as an (n, 2) array of (x, y) pixels, strongest first.

    Keeps 3×3 local maxima with response ≥ quality·max, then greedily drops
    any corner closer than ``min_distance`` to a stronger accepted one.
    ``mask`` (bool, same shape) marks pixels where new corners are allowed.
    """
    r = harris_response(gray, k)
    rmax = r.max()
    if not rmax > 1e-12:
        return np.zeros((0, 2))
    peaks = (r == ndimage.maximum_filter(r, size=3, mode="nearest")) & (r >= quality * rmax) & (r > 0)
    if border:
        peaks[:border] = peaks[-border:] = False
        peaks[:, :border] = peaks[:, -border:] = False
    if mask is not None:
        peaks &= mask
    ys, xs = np.nonzero(peaks)
    order = np.lexsort((xs, ys, -r[ys, xs]))  # strongest first, ties broken by raster order
    pts = np.column_stack([xs[order], ys[order]]).astype(np.float64)
    return pts[_greedy_nms(pts, float(min_distance), int(max_n))]


@njit(cache=True)
def _greedy_nms(pts, min_dist, max_n):
    keep = np.empty(len(pts), dtype=np.int64)
    m = 0
    d2 = min_dist * min_dist
    for i in range(len(pts)):
        ok = True
        for j in range(m):
            dx = pts[i, 0] - pts[keep[j], 0]
            dy = pts[i, 1] - pts[keep[j], 1]
            if dx * dx + dy * dy < d2:
                ok = False
                break
        if ok:
            keep[m] = i
            m += 1
            if m >= max_n:
                break
    return keep[:m]


def build_pyramid(gray, levels):
    pyr = [np.ascontiguousarray(gray, dtype=np.float64)]
    for _ in range(levels - 1):
        g = ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")
        pyr.append(np.ascontiguousarray(g[::2, ::2]))
    return pyr


@njit(cache=True)
def _bilinear(img, x, y):
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = min(int(x), w - 2)
    y0 = min(int(y), h - 2)
    fx = x - x0
    fy = y - y0
    return (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x0 + 1] * fx * (1 - fy)
            + img[y0 + 1, x0] * (1 - fx) * fy + img[y0 + 1, x0 + 1] * fx * fy)


@njit(cache=True)
def _lk_level(prev, nxt, px, py, gx, gy, half, max_iter, eps, min_eig):
    """Iterative LK at one pyramid level; returns (gx, gy, ok, mean |residual|)."""
    n = 2 * half + 1
    ix = np.empty((n, n))
    iy = np.empty((n, n))
    it = np.empty((n, n))
    gxx = 0.0
    gyy = 0.0
    gxy = 0.0
    for a in range(n):
        for b in range(n):
            x = px + b - half
            y = py + a - half
            ix[a, b] = 0.5 * (_bilinear(prev, x + 1, y) - _bilinear(prev, x - 1, y))
            iy[a, b] = 0.5 * (_bilinear(prev, x, y + 1) - _bilinear(prev, x, y - 1))
            it[a, b] = _bilinear(prev, x, y)
            gxx += ix[a, b] * ix[a, b]
            gyy += iy[a, b] * iy[a, b]
            gxy += ix[a, b] * iy[a, b]
    tr = gxx + gyy
    det = gxx * gyy - gxy * gxy
    lam = 0.5 * (tr - np.sqrt(max(tr * tr - 4 * det, 0.0)))
    if lam / (n * n) < min_eig:
        return gx, gy, False, np.inf
    vx = 0.0
    vy = 0.0
    for _ in range(max_iter):
        bx = 0.0
        by = 0.0
        res = 0.0
        for a in range(n):
            for b in range(n):
                d = it[a, b] - _bilinear(nxt, px + b - half + gx + vx, py + a - half + gy + vy)
                bx += d * ix[a, b]
                by += d * iy[a, b]
                res += abs(d)
        sx = (gyy * bx - gxy * by) / det
        sy = (gxx * by - gxy * bx) / det
        vx += sx
        vy += sy
        if sx * sx + sy * sy < eps * eps:
            return gx + vx, gy + vy, True, res / (n * n)
    return gx + vx, gy + vy, False, np.inf


@njit(cache=True)
def _lk_points(pyr_prev, pyr_next, pts, half, max_iter, eps, min_eig, max_residual):
    levels = len(pyr_prev)
    n = pts.shape[0]
    flow = np.zeros((n, 2))
    ok = np.zeros(n, dtype=np.bool_)
    h0, w0 = pyr_prev[0].shape
    for i in range(n):
        gx = 0.0
        gy = 0.0
        good = True
        for lev in range(levels - 1, -1, -1):
            s = 2.0**lev
            gx, gy, conv, res = _lk_level(pyr_prev[lev], pyr_next[lev], pts[i, 0] / s, pts[i, 1] / s, gx, gy, half, max_iter, eps, min_eig)
            if lev == 0:
                good = conv and res <= max_residual
            elif not conv and not (np.isfinite(gx) and np.isfinite(gy)):
                good = False
                break
            if lev > 0:
                gx *= 2.0
                gy *= 2.0
        x1 = pts[i, 0] + gx
        y1 = pts[i, 1] + gy
        # a 1 px margin: at the very edge border clamping can fake a stationary match
        inside = 1.0 <= x1 <= w0 - 2.0 and 1.0 <= y1 <= h0 - 2.0
        flow[i, 0] = gx
        flow[i, 1] = gy
        ok[i] = good and inside and np.isfinite(gx) and np.isfinite(gy)
    return flow, ok


def lk_track(prev, nxt, points, levels=3, window=7, max_iter=30, eps=0.01, min_eig=1e-4, max_residual=0.2):
    """Pyramidal Lucas-Kanade; returns (flow (n,2), tracked flags (n,)).

    A point is not tracked when its window is textureless (small minimum
    eigenvalue), the finest level does not converge, the converged window
    still differs by more than ``max_residual`` mean absolute gray level
    (a false match), or the window leaves the image.
    """
    a, b = to_gray(prev), to_gray(nxt)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    pa, pb = tuple(build_pyramid(a, levels)), tuple(build_pyramid(b, levels))
    return _lk_points(pa, pb, pts, window // 2, max_iter, eps, min_eig, max_residual)


def _normalize(pts):
    """Hartley normalization of (..., n, 2) points; returns homogeneous points and transforms."""
    c = pts.mean(axis=-2, keepdims=True)
    d = np.sqrt(((pts - c) ** 2).sum(axis=-1)).mean(axis=-1)
    s = np.where(d > 0, np.sqrt(2) / np.where(d > 0, d, 1.0), 1.0)
    t = np.zeros(pts.shape[:-2] + (3, 3))
    t[..., 0, 0] = t[..., 1, 1] = s
    t[..., 0, 2] = -s * c[..., 0, 0]
    t[..., 1, 2] = -s * c[..., 0, 1]
    t[..., 2, 2] = 1.0
    h = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1) @ np.swapaxes(t, -1, -2)
    return h, t


def eight_point(p1, p2):
    """Normalized 8-point fundamental matrix with rank-2 enforcement (x2^T F x1 = 0).

    Accepts (n, 2) arrays or stacked (k, n, 2) batches, returning (3, 3) or (k, 3, 3).
    """
    h1, t1 = _normalize(np.asarray(p1, dtype=np.float64))
    h2, t2 = _normalize(np.asarray(p2, dtype=np.float64))
    a = np.concatenate([h2[..., [0]] * h1, h2[..., [1]] * h1, h1], axis=-1)
    _, _, vt = np.linalg.svd(a)
    f = vt[..., -1, :].reshape(a.shape[:-2] + (3, 3))
    u, sv, vt = np.linalg.svd(f)
    sv[..., 2] = 0.0
    f = (u * sv[..., None, :]) @ vt
    f = np.swapaxes(t2, -1, -2) @ f @ t1
    n = np.linalg.norm(f, axis=(-2, -1), keepdims=True)
    return f / np.where(n > 0, n, 1.0)


def epipolar_distances(f, p1, p2):
    """Point-to-epipolar-line distance in each image, the larger of the two per pair.

    ``f`` may be a single (3, 3) matrix or a (k, 3, 3) stack (result (k, n)).
    """
    h1 = np.column_stack([p1, np.ones(len(p1))])
    h2 = np.column_stack([p2, np.ones(len(p2))])
    l2 = h1 @ np.swapaxes(f, -1, -2)  # epipolar lines in image 2
    l1 = h2 @ f  # epipolar lines in image 1
    r = np.sum(h2 * l2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.abs(r) / np.hypot(l2[..., 0], l2[..., 1])
        d1 = np.abs(r) / np.hypot(l1[..., 0], l1[..., 1])
    d = np.maximum(d1, d2)
    return np.where(np.isfinite(d), d, np.inf)


def homographies(p1, p2):
    """Normalized DLT homographies mapping p1 -> p2 for (n, 2) or stacked (k, n, 2) correspondences."""
    h1, t1 = _normalize(np.asarray(p1, dtype=np.float64))
    h2, t2 = _normalize(np.asarray(p2, dtype=np.float64))
    z = np.zeros_like(h1)
    rows_a = np.concatenate([z, -h1, h2[..., [1]] * h1], axis=-1)
    rows_b = np.concatenate([h1, z, -h2[..., [0]] * h1], axis=-1)
    a = np.concatenate([rows_a, rows_b], axis=-2)
    _, _, vt = np.linalg.svd(a)
    h = vt[..., -1, :].reshape(a.shape[:-2] + (3, 3))
    return np.linalg.pinv(t2) @ h @ t1


def transfer_distances(h, p1, p2):
    """Distance between H·p1 and p2 in pixels; ``h`` may be a (k, 3, 3) stack."""
    q = np.column_stack([p1, np.ones(len(p1))]) @ np.swapaxes(h, -1, -2)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.hypot(q[..., 0] / q[..., 2] - p2[:, 0], q[..., 1] / q[..., 2] - p2[:, 1])
    return np.where(np.isfinite(d), d, np.inf)


def _ransac(fit, dist, p1, p2, rng, sample, iterations, threshold):
    """Best inlier set over seeded minimal samples, refit once on the winners."""
    n = len(p1)
    # all hypotheses are drawn and scored at once; ties go to the earliest sample
    idx = np.argsort(rng.random((iterations, n)), axis=1)[:, :sample]
    inliers = dist(fit(p1[idx], p2[idx]), p1, p2) <= threshold
    best = inliers[int(np.argmax(inliers.sum(axis=1)))]
    if best.sum() >= sample:
        refit = dist(fit(p1[best], p2[best]), p1, p2) <= threshold
        if refit.sum() >= best.sum():
            best = refit
    return best


def epipolar_reject(p1, p2, seed=0, threshold=1.0, iterations=200, degenerate_ratio=0.95):
    """RANSAC over 8-point fundamental matrices; returns (inlier flags, confident).

    With fewer than 8 pairs nothing is rejected and ``confident`` is False.
    Pairs that barely move (every flow below 0.1 px) are kept: a static
    camera gives no epipolar constraint. When a homography explains at least
    ``degenerate_ratio`` of the epipolar inliers (pure rotation, or a scene
    that is one plane) the epipole is unconstrained and any F can absorb
    outliers, so the homography's inliers are used instead.
    """
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 2)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1, 2)
    n = len(p1)
    if n < 8:
        return np.ones(n, dtype=bool), False
    if np.max(np.abs(p2 - p1)) < 0.1:
        return np.ones(n, dtype=bool), True
    rng = np.random.default_rng(seed)
    best = _ransac(eight_point, epipolar_distances, p1, p2, rng, 8, iterations, threshold)
    planar = _ransac(homographies, transfer_distances, p1, p2, rng, 4, iterations, threshold)
    if planar.sum() >= 8 and planar.sum() >= degenerate_ratio * best.sum():
        best = planar
    return best, True


@dataclass
class FeatureTrackSet:
    """Exactly 40 rows of (x, y, vx, vy, age): normalized coords in [-1, 1], velocity per control tick."""

    values: np.ndarray
    n_active: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_TRACKS, 5):
            raise ValueError(f"feature track set must be {N_TRACKS}x5, got {self.values.shape}")

    @classmethod
    def empty(cls):
        v = np.zeros((N_TRACKS, 5))
        v[:, 4] = 1.0
        return cls(v, 0)


def normalize_points(px, width, height):
    return np.column_stack([2.0 * px[:, 0] / (width - 1) - 1.0, 2.0 * px[:, 1] / (height - 1) - 1.0])


def sample_tracks(active: np.ndarray, seed) -> FeatureTrackSet:
    """Pick exactly 40 rows from ``active`` (n, 5): without replacement above 40, with replacement below."""
    active = np.asarray(active, dtype=np.float64).reshape(-1, 5)
    n = len(active)
    if n == 0:
        raise ValueError("sample_tracks needs at least one active track")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n == N_TRACKS:
        idx = np.arange(n)
    elif n > N_TRACKS:
        idx = np.sort(rng.choice(n, N_TRACKS, replace=False))
    else:
        idx = np.concatenate([np.arange(n), rng.choice(n, N_TRACKS - n, replace=True)])
    return FeatureTrackSet(active[idx], n)


class FeatureTracker:
    """Stateful per-rollout tracker: LK + epipolar filtering, Harris top-up, exact-40 sampling."""

    def __init__(self, width, height, seed=0, redetect_every=5, min_active=60, max_tracks=150,
                 quality=0.001, levels=3, window=7):
        self.width, self.height = width, height
        scale = width / 128.0
        # the floor only fills the bottom rows of an up-tilted camera, so corners are packed densely
        self.min_distance = 3.0 * scale
        self.quality = quality
        self.redetect_every, self.min_active, self.max_tracks = redetect_every, min_active, max_tracks
        self.levels, self.window = levels, window
        self.rng = np.random.default_rng(seed)
        self.reset()

    def reset(self):
        self.prev = None
        self.pos = np.zeros((0, 2))
        self.vel = np.zeros((0, 2))
        self.age = np.zeros(0, dtype=np.int64)
        self.updates = 0
        self.lifetimes = []
        self.last_confident = True

    @property
    def n_active(self):
        return len(self.pos)

    def update(self, pixels, ticks=1) -> FeatureTrackSet:
        """Advance on a new frame that arrives ``ticks`` control ticks after the previous one."""
        gray = to_gray(pixels)
        if self.prev is not None and len(self.pos):
            flow, ok = lk_track(self.prev, gray, self.pos, self.levels, self.window)
            new = self.pos + flow
            keep = ok.copy()
            if ok.sum() >= 8:
                inl, self.last_confident = epipolar_reject(self.pos[ok], new[ok], int(self.rng.integers(2**31)))
                keep[np.where(ok)[0][~inl]] = False
            self.lifetimes.extend(self.age[~keep].tolist())
            self.vel = flow[keep] / max(ticks, 1)
            self.pos = new[keep]
            self.age = np.minimum(self.age[keep] + ticks, MAX_AGE)
        self.updates += 1
        if (self.updates - 1) % self.redetect_every == 0 or len(self.pos) < self.min_active:
            self._detect(gray)
        self.prev = gray
        return self.current()

    def _detect(self, gray):
        room = self.max_tracks - len(self.pos)
        if room <= 0:
            return
        mask = np.ones(gray.shape, dtype=bool)
        r = int(np.ceil(self.min_distance))
        for x, y in self.pos:
            xi, yi = int(round(x)), int(round(y))
            mask[max(0, yi - r) : yi + r + 1, max(0, xi - r) : xi + r + 1] = False
        pts = harris_corners(gray, room, self.quality, self.min_distance, mask=mask)
        if len(pts):
            self.pos = np.vstack([self.pos, pts])
            self.vel = np.vstack([self.vel, np.zeros((len(pts), 2))])
            self.age = np.concatenate([self.age, np.ones(len(pts), dtype=np.int64)])

    def active_array(self):
        xy = normalize_points(self.pos, self.width, self.height)
        v = np.column_stack([2.0 * self.vel[:, 0] / (self.width - 1), 2.0 * self.vel[:, 1] / (self.height - 1)])
        return np.column_stack([np.clip(xy, -1.0, 1.0), v, self.age.astype(np.float64)])

    def current(self) -> FeatureTrackSet:
        if len(self.pos) == 0:
            return FeatureTrackSet.empty()
        return sample_tracks(self.active_array(), self.rng)

    def mean_lifetime(self):
        ages = self.lifetimes + self.age.tolist()
        return float(np.mean(ages)) if ages else 0.0


TRACK_CSV_HEADER = ["tick", "slot", "x", "y", "vx", "vy", "age"]


def write_track_dump(path, sets):
    """One row per (tick, slot) for a sequence of FeatureTrackSets."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_CSV_HEADER)
        for tick, fs in enumerate(sets):
            for slot, row in enumerate(fs.values):
                w.writerow([tick, slot] + [repr(float(v)) for v in row[:4]] + [int(row[4])])
