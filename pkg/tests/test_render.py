import numpy as np
import pytest

from gazerace.render import (
    CameraModel,
    Frame,
    RenderStyle,
    gate_color,
    project_point,
    read_packed,
    render_frame,
    write_packed,
)
from gazerace.sim import Gate, QuadState, Track
from gazerace.sim.rotations import quat_from_euler

CAM = CameraModel()


def facing(yaw, p=(0.0, 0.0, 2.0), pitch=0.0):
    return QuadState(0.0, p, np.zeros(3), quat_from_euler(0.0, pitch, yaw))


def optical_axis(s, cam=CAM):
    """World direction of the optical axis (body forward tilted up by the uptilt)."""
    a = np.radians(cam.uptilt)
    fwd = np.array([np.cos(a), 0.0, np.sin(a)])
    from gazerace.sim.rotations import quat_to_rot

    return quat_to_rot(s.q) @ fwd


def test_camera_defaults():
    assert (CAM.width, CAM.height, CAM.hfov, CAM.uptilt) == (128, 96, 80.0, 25.0)
    with pytest.raises(ValueError):
        CameraModel(hfov=180.0)
    with pytest.raises(ValueError):
        CameraModel(width=0)


def test_vertical_fov_from_aspect():
    expected = 2 * np.degrees(np.arctan(np.tan(np.radians(40)) * (96 - 1) / (128 - 1)))
    assert CAM.vfov == pytest.approx(expected)


def test_point_on_optical_axis_hits_principal_point():
    s = facing(0.3)
    uv, front = project_point(s.p + 7.0 * optical_axis(s), s, CAM)
    assert front
    assert uv == pytest.approx([CAM.cx, CAM.cy], abs=1e-9)


@pytest.mark.parametrize("sign, edge", [(1, 0.0), (-1, 127.0)])
def test_half_hfov_off_axis_lands_on_border(sign, edge):
    # a point 40 deg to the left (+y body) lands on column 0, to the right on column width-1
    s = facing(0.0)
    a = np.radians(CAM.uptilt)
    axis = np.array([np.cos(a), 0.0, np.sin(a)])
    side = np.array([0.0, 1.0, 0.0])
    d = np.cos(np.radians(40)) * axis + sign * np.sin(np.radians(40)) * side
    uv, front = project_point(s.p + 5 * d, s, CAM)
    assert front
    assert uv[0] == pytest.approx(edge, abs=1e-9)


def test_uptilt_puts_25_degrees_above_horizon_on_center_row():
    s = facing(0.0)
    d = np.array([np.cos(np.radians(25)), 0.0, np.sin(np.radians(25))])
    uv, _ = project_point(s.p + 10 * d, s, CAM)
    assert uv[1] == pytest.approx(CAM.cy, abs=1e-9)
    horizon, _ = project_point(s.p + np.array([10.0, 0, 0]), s, CAM)
    assert horizon[1] > CAM.cy  # the horizon sits below the image center


def test_point_behind_camera_is_flagged():
    s = facing(0.0)
    _, front = project_point(s.p - np.array([5.0, 0, 0]), s, CAM)
    assert not front


def test_facing_away_shows_only_floor_and_sky(figure8):
    # above the track center looking straight up: no gate can be in view
    s = facing(0.0, p=(0.0, 0.0, 4.0), pitch=-np.pi / 2 + 0.2)
    px = render_frame(s, figure8, CAM).pixels.reshape(-1, 3)
    allowed = {RenderStyle().sky} | RenderStyle().floor_colors()
    assert {tuple(int(c) for c in row) for row in np.unique(px, axis=0)} <= allowed


def gate_scene(distance=5.0):
    gate = Gate([distance, 0.0, 2.0], [-1, 0, 0], [0, 0, 1], index=0)
    return Track([gate], facing(0.0), name="one-gate")


def test_gate_bbox_centered_on_projection():
    track = gate_scene()
    s = facing(0.0)
    img = render_frame(s, track, CAM).pixels
    mask = np.all(img == np.array(gate_color(0, 1), dtype=np.uint8), axis=-1)
    assert mask.sum() > 50
    rows, cols = np.nonzero(mask)
    center = np.array([(cols.min() + cols.max()) / 2, (rows.min() + rows.max()) / 2])
    uv, _ = project_point(track.gates[0].center, s, CAM)
    assert np.linalg.norm(center - uv) <= 3.0


def test_nearer_gate_occludes_farther_gate():
    near = Gate([4.0, 0.0, 2.0], [-1, 0, 0], [0, 0, 1], inner_w=1.5, inner_h=1.5, frame_thickness=0.2, index=0)
    far = Gate([8.0, 0.0, 2.0], [-1, 0, 0], [0, 0, 1], inner_w=2.8, inner_h=2.8, frame_thickness=0.4, index=1)
    track = Track([near, far], facing(0.0))
    s = facing(0.0)
    img = render_frame(s, track, CAM).pixels
    # the near gate's left bar: the far gate's left bar projects partly behind it
    uv, _ = project_point(near.center - 0.85 * near.lateral, s, CAM)
    c = img[int(round(uv[1])), int(round(uv[0]))]
    assert tuple(c) == gate_color(0, 2)
    # rendering the far gate alone puts its color at that pixel region's neighbours, so the test is meaningful
    alone = render_frame(s, Track([far], facing(0.0)), CAM).pixels
    far_mask = np.all(alone == np.array(gate_color(0, 1), dtype=np.uint8), axis=-1)
    near_mask = np.all(img == np.array(gate_color(0, 2), dtype=np.uint8), axis=-1)
    overlap = far_mask & near_mask
    assert overlap.any()


def test_render_is_deterministic(figure8):
    s = facing(0.7, p=(-3.0, 1.0, 2.5))
    a = render_frame(s, figure8, CAM).pixels
    b = render_frame(s, figure8, CAM).pixels
    assert a.tobytes() == b.tobytes()


def test_translation_consistency(figure8):
    offset = np.array([2.0, -1.0, 0.5])  # dyadic values keep every subtraction exact
    s = facing(0.7, p=(-3.0, 1.0, 2.5))
    moved = s.copy()
    moved.p = s.p + offset
    a = render_frame(s, figure8, CAM).pixels
    b = render_frame(moved, figure8.translated(offset), CAM).pixels
    assert a.tobytes() == b.tobytes()


def test_frame_size_invariant():
    with pytest.raises(ValueError):
        Frame(4, 3, np.zeros((3, 4, 2), dtype=np.uint8))


def test_ppm_header():
    fr = Frame(4, 3, np.zeros((3, 4, 3), dtype=np.uint8))
    data = fr.to_ppm()
    assert data.startswith(b"P6\n4 3\n255\n")
    assert len(data) == len(b"P6\n4 3\n255\n") + 36


def test_packed_round_trip(tmp_path, figure8):
    frames = [render_frame(facing(y, p=(0, 0, 2)), figure8, CAM, frame_id=i) for i, y in enumerate((0.0, 1.0, 2.0))]
    write_packed(tmp_path / "f.pack", frames)
    data = (tmp_path / "f.pack").read_bytes()
    assert int.from_bytes(data[4:8], "little") == 3
    back = read_packed(tmp_path / "f.pack")
    assert back.shape == (3, 96, 128, 3)
    assert all(np.array_equal(back[i], f.pixels) for i, f in enumerate(frames))


def test_resolution_is_a_parameter(figure8):
    cam = CAM.scaled(400, 300)
    fr = render_frame(facing(0.0), figure8, cam)
    assert fr.pixels.shape == (300, 400, 3)
    assert cam.hfov == CAM.hfov and cam.uptilt == CAM.uptilt
