import csv

import numpy as np
import pytest
from scipy import ndimage

from gazerace.render import RenderStyle, make_renderer, render_frame
from gazerace.sim import QuadState
from gazerace.sim.rotations import quat_from_euler, quat_to_rot
from gazerace.tracks import (
    N_TRACKS,
    FeatureTracker,
    FeatureTrackSet,
    epipolar_reject,
    homographies,
    harris_corners,
    harris_response,
    lk_track,
    sample_tracks,
    to_gray,
    transfer_distances,
    write_track_dump,
)


def square_image(x0=40, y0=30, size=30, shape=(96, 128)):
    img = np.zeros(shape)
    img[y0 : y0 + size, x0 : x0 + size] = 1.0
    return img


def texture(seed=0, shape=(96, 128)):
    noise = np.random.default_rng(seed).random((shape[0] + 20, shape[1] + 20))
    return ndimage.gaussian_filter(noise, 2.0)


def brute_harris(g, x, y, k=0.04, sigma=1.0):
    """Structure tensor at one pixel from explicit Sobel taps and a truncated Gaussian window."""
    h, w = g.shape

    def px(i, j):
        return g[min(max(i, 0), h - 1), min(max(j, 0), w - 1)]

    def grads(i, j):
        ix = sum((px(i + di, j + 1) - px(i + di, j - 1)) * (2 if di == 0 else 1) for di in (-1, 0, 1)) / 8
        iy = sum((px(i + 1, j + dj) - px(i - 1, j + dj)) * (2 if dj == 0 else 1) for dj in (-1, 0, 1)) / 8
        return ix, iy

    r = int(4 * sigma + 0.5)
    wts = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    wts /= wts.sum()
    sxx = syy = sxy = 0.0
    for a in range(-r, r + 1):
        for b in range(-r, r + 1):
            i, j = min(max(y + a, 0), h - 1), min(max(x + b, 0), w - 1)
            ix, iy = grads(i, j)
            wt = wts[a + r] * wts[b + r]
            sxx += wt * ix * ix
            syy += wt * iy * iy
            sxy += wt * ix * iy
    return sxx * syy - sxy**2 - k * (sxx + syy) ** 2


def test_uniform_image_has_no_corners():
    assert len(harris_corners(np.full((96, 128), 0.4))) == 0


def test_response_matches_structure_tensor_oracle():
    g = texture(3)[:40, :50]
    r = harris_response(g)
    for y, x in [(0, 0), (5, 7), (20, 30), (39, 49), (12, 2)]:
        assert r[y, x] == pytest.approx(brute_harris(g, x, y), rel=1e-9, abs=1e-15)


def test_square_gives_its_four_corners():
    pts = harris_corners(square_image(), max_n=10, min_distance=5)
    assert len(pts) == 4
    truth = np.array([[39.5, 29.5], [69.5, 29.5], [39.5, 59.5], [69.5, 59.5]])
    for t in truth:
        assert np.min(np.linalg.norm(pts - t, axis=1)) <= 1.0


def test_corners_are_shift_equivariant():
    a = harris_corners(square_image(), max_n=10, min_distance=5)
    b = harris_corners(square_image(x0=43), max_n=10, min_distance=5)
    key = lambda p: p[np.lexsort((p[:, 0], p[:, 1]))]
    assert np.allclose(key(b), key(a) + [3, 0], atol=0.5)


def test_corners_respect_spacing_and_order():
    g = texture(1)
    pts = harris_corners(g, max_n=60, min_distance=6)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(len(pts)) * 99
    assert d.min() >= 6
    r = harris_response(g)[pts[:, 1].astype(int), pts[:, 0].astype(int)]
    assert np.all(np.diff(r) <= 0)


def test_lk_identical_frames_give_zero_flow():
    g = texture()[:96, :128]
    pts = harris_corners(g, 30, border=4)
    flow, ok = lk_track(g, g, pts)
    assert ok.all() and np.abs(flow).max() < 1e-6


def test_lk_recovers_a_two_pixel_shift():
    big = texture(5)
    a, b = big[10:106, 10:138], big[10:106, 8:136]  # content moves +2 px in x
    pts = harris_corners(a, 40, border=12)
    flow, ok = lk_track(a, b, pts)
    assert ok.mean() > 0.9
    assert np.allclose(flow[ok], [2.0, 0.0], atol=0.25)


def test_lk_flags_textureless_and_exiting_points():
    g = np.zeros((96, 128))
    g[:, 64:] = texture()[:96, 64:128]
    corner = harris_corners(g, 1, border=8)[0]
    _, ok = lk_track(g, g, np.array([[20.0, 40.0], corner]))
    assert list(ok) == [False, True]
    big = texture(6)
    a, b = big[10:106, 10:138], big[10:106, 0:128]  # +10 px shift pushes the right edge out
    _, ok = lk_track(a, b, np.array([[126.0, 50.0]]))
    assert not ok[0]


def projective_pairs(rng, n, rotate_only):
    f, c = 76.0, np.array([63.5, 47.5])
    pts = rng.uniform([-4, -3, 5], [4, 3, 15], size=(n, 3))
    rot = quat_to_rot(quat_from_euler(0.02, -0.03, 0.05))
    t = np.zeros(3) if rotate_only else np.array([0.4, 0.1, 0.2])
    p2c = pts @ rot.T + t
    return f * pts[:, :2] / pts[:, 2:] + c, f * p2c[:, :2] / p2c[:, 2:] + c


def test_epipolar_rejects_gross_outlier_under_rotation(rng):
    p1, p2 = projective_pairs(rng, 30, rotate_only=True)
    p2[7] += [0.0, 20.0]
    inl, confident = epipolar_reject(p1, p2, seed=0)
    assert confident and not inl[7]


def test_epipolar_keeps_rigid_scene(rng):
    p1, p2 = projective_pairs(rng, 50, rotate_only=False)
    inl, _ = epipolar_reject(p1, p2, seed=0)
    assert inl.mean() >= 0.95


def test_epipolar_needs_eight_pairs(rng):
    p1, p2 = projective_pairs(rng, 7, rotate_only=False)
    inl, confident = epipolar_reject(p1, p2 + 30, seed=0)
    assert inl.all() and not confident


def test_homography_fit_is_exact(rng):
    p1, p2 = projective_pairs(rng, 12, rotate_only=True)
    assert np.max(transfer_distances(homographies(p1, p2), p1, p2)) < 1e-6


def test_epipolar_is_seeded(rng):
    p1, p2 = projective_pairs(rng, 40, rotate_only=False)
    p2[:5] += rng.normal(0, 5, (5, 2))
    assert np.array_equal(epipolar_reject(p1, p2, seed=9)[0], epipolar_reject(p1, p2, seed=9)[0])


def active_rows(n, rng):
    rows = rng.uniform(-1, 1, (n, 5))
    rows[:, 4] = np.arange(1, n + 1)
    return rows


def test_sampling_more_than_forty_is_distinct(rng):
    fs = sample_tracks(active_rows(100, rng), seed=3)
    assert fs.values.shape == (N_TRACKS, 5)
    assert len(np.unique(fs.values[:, 4])) == N_TRACKS


def test_sampling_exactly_forty_is_identity(rng):
    rows = active_rows(40, rng)
    assert np.array_equal(sample_tracks(rows, seed=0).values, rows)


def test_sampling_fewer_pads_from_existing(rng):
    rows = active_rows(10, rng)
    seen_all, extras = 0, np.zeros(10)
    for seed in range(200):
        ids = sample_tracks(rows, seed).values[:, 4].astype(int) - 1
        seen_all += len(set(ids)) == 10
        extras += np.bincount(ids, minlength=10) - 1
    assert seen_all == 200
    # the 30 padding draws are uniform over the 10 originals: 600 expected each
    assert np.all(np.abs(extras - 600) < 120)


def test_empty_sampling_rejected():
    with pytest.raises(ValueError):
        sample_tracks(np.zeros((0, 5)), 0)


def test_track_set_shape_enforced():
    with pytest.raises(ValueError):
        FeatureTrackSet(np.zeros((39, 5)))
    assert np.all(FeatureTrackSet.empty().values[:, 4] >= 1)


def test_tracker_velocity_is_per_control_tick():
    big = texture(8)
    tracker = FeatureTracker(128, 96, seed=0)
    tracker.update(np.repeat((big[10:106, 10:138] * 255).astype(np.uint8)[..., None], 3, axis=-1))
    fs = tracker.update(np.repeat((big[10:106, 8:136] * 255).astype(np.uint8)[..., None], 3, axis=-1), ticks=2)
    moved = fs.values[fs.values[:, 4] > 1]
    assert len(moved) > 10
    # 2 px over 2 ticks is 1 px/tick, i.e. 2/127 in normalized units
    assert np.median(moved[:, 2]) == pytest.approx(2 / 127, abs=0.002)
    assert np.all(np.abs(fs.values[:, :2]) <= 1) and np.all(fs.values[:, 4] >= 1)


def test_tracker_is_deterministic(figure8, expert_lap):
    render = make_renderer(figure8)

    def run():
        tr = FeatureTracker(128, 96, seed=4)
        out = []
        for i in range(0, 40, 2):
            s = expert_lap.states[i]
            out.append(tr.update(render(QuadState(0, s[:3], s[3:6], s[6:10], s[10:]), i).pixels, 2).values)
        return np.stack(out)

    assert np.array_equal(run(), run())


def test_checkerboard_supplies_corners_when_floor_is_visible(figure8):
    style = RenderStyle()
    floor = np.array([style.floor_dark, style.floor_light])
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(100):
        p = [rng.uniform(-10, 10), rng.uniform(-5, 5), rng.uniform(1, 3)]
        s = QuadState(0, p, np.zeros(3), quat_from_euler(0, rng.uniform(0.3, 0.9), rng.uniform(-np.pi, np.pi)))
        px = render_frame(s, figure8).pixels
        if np.any(np.all(px[:, :, None] == floor, axis=-1), axis=-1).mean() < 0.25:
            continue
        checked += 1
        assert len(harris_corners(to_gray(px), 200, 0.001, 3.0)) >= 40
    assert checked >= 50


def test_expert_lap_track_statistics(figure8, expert_lap):
    """Tracker health over a rendered expert lap at the 25 Hz vision rate."""
    render = make_renderer(figure8)
    tracker = FeatureTracker(128, 96, seed=0)
    active = []
    for i in range(0, len(expert_lap.t), 2):
        s = expert_lap.states[i]
        tracker.update(render(QuadState(0, s[:3], s[3:6], s[6:10], s[10:]), i).pixels, 2 if i else 1)
        active.append(tracker.n_active)
    assert tracker.mean_lifetime() >= 5
    assert np.mean(np.array(active) >= 40) >= 0.95


def test_track_dump(tmp_path, rng):
    sets = [sample_tracks(active_rows(50, rng), s) for s in range(3)]
    write_track_dump(tmp_path / "t.csv", sets)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["tick", "slot", "x", "y", "vx", "vy", "age"]
    assert len(rows) == 1 + 3 * N_TRACKS
    assert float(rows[41][2]) == sets[1].values[0, 0]
