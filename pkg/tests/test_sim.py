import json

import numpy as np
import pytest

from gazerace.sim import (
    Command,
    Gate,
    GateEvent,
    QuadParams,
    QuadState,
    SimulationError,
    Track,
    check_gate_pass,
    check_termination,
    clamp_command,
    generate_track,
    load_track,
    run_rollout,
    step_dynamics,
)
from gazerace.sim.rotations import quat_exp, quat_from_euler, quat_mul, yaw_of
from gazerace.sim.track import DATA_DIR, inside_bounds

P = QuadParams()


def level(p=(0.0, 0.0, 2.0), v=(0.0, 0.0, 0.0)):
    return QuadState(0.0, p, v)


def integrate(s, u, dt, total):
    for _ in range(int(round(total / dt))):
        s = step_dynamics(s, u, P, dt)
    return s


# ---- dynamics


def test_hover_keeps_position_and_velocity():
    s = step_dynamics(level(), Command(9.81), P, 0.01)
    assert np.allclose(s.p, [0, 0, 2], atol=1e-9)
    assert np.allclose(s.v, 0, atol=1e-9)


def test_free_fall_velocity_change_is_g_dt():
    s = step_dynamics(level(), Command(0.0), P, 0.01)
    assert s.v[2] == pytest.approx(-9.81 * 0.01, abs=1e-12)
    assert s.p[2] == pytest.approx(2 - 0.5 * 9.81 * 0.01**2, abs=1e-12)


def test_constant_yaw_rate_matches_quaternion_exponential():
    s = integrate(level(), Command(9.81, 0, 0, np.pi), 0.01, 1.0)
    expected = quat_exp(np.array([0.0, 0.0, np.pi]))
    assert abs(abs(float(s.q @ expected)) - 1) < 1e-12
    assert abs(abs(yaw_of(s.q)) - np.pi) < 1e-6


def test_body_rates_compose_in_body_frame():
    q0 = quat_from_euler(0.3, -0.2, 1.1)
    w = np.array([0.4, -0.7, 0.2])
    s = integrate(QuadState(0, [0, 0, 2], [0, 0, 0], q0), Command(9.81, *w), 0.01, 0.5)
    assert np.allclose(s.q, quat_mul(q0, quat_exp(w * 0.5)), atol=1e-10)


def test_quaternion_norm_preserved_under_random_commands(rng):
    s = level(p=(0, 0, 1000.0))
    for _ in range(10_000):
        u = clamp_command(Command(rng.uniform(0, 25), *rng.uniform(-8, 8, 3)), P)
        s = step_dynamics(s, u, P, 0.01)
        assert abs(np.linalg.norm(s.q) - 1) < 1e-9
    assert s.is_finite()


def test_rk4_error_shrinks_sixteenfold_when_halving_dt():
    s0 = QuadState(0, [0, 0, 2], [1, 0, 0], quat_from_euler(0.2, 0.1, 0))
    u = Command(14.0, 1.5, -2.0, 0.8)
    truth = integrate(s0, u, 1e-4, 1.0).to_array()
    e1 = np.linalg.norm(integrate(s0, u, 0.04, 1.0).to_array() - truth)
    e2 = np.linalg.norm(integrate(s0, u, 0.02, 1.0).to_array() - truth)
    assert 8 <= e1 / e2 <= 32


def test_free_fall_conserves_energy():
    s0 = level(p=(0, 0, 50.0), v=(3.0, -1.0, 2.0))
    s = integrate(s0, Command(0.0), 0.01, 1.0)
    energy = lambda st: 0.5 * st.v @ st.v + 9.81 * st.p[2]
    assert energy(s) == pytest.approx(energy(s0), rel=1e-6)


def test_rate_lag_tracks_command_exponentially():
    lagged = QuadParams(rate_lag_tau=0.05)
    s = level()
    for _ in range(10):
        s = step_dynamics(s, Command(9.81, 1.0, 0, 0), lagged, 0.01)
    # RK4 on w' = (1 - w) / tau applies the degree-4 Taylor polynomial of exp(-h / tau) per step
    z = -0.01 / 0.05
    per_step = 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24
    assert s.w[0] == pytest.approx(1 - per_step**10, abs=1e-12)
    assert s.w[0] == pytest.approx(1 - np.exp(-0.1 / 0.05), abs=1e-5)


def test_step_is_deterministic():
    s = QuadState(0, [1, 2, 3], [0.1, 0.2, 0.3], quat_from_euler(0.1, 0.2, 0.3), [0.1, 0, 0])
    a = step_dynamics(s, Command(12, 1, 2, 3), P, 0.01).to_array()
    b = step_dynamics(s, Command(12, 1, 2, 3), P, 0.01).to_array()
    assert a.tobytes() == b.tobytes()


def test_non_finite_state_is_rejected_with_field_name():
    s = level()
    s.v[1] = np.nan
    with pytest.raises(SimulationError, match="v"):
        step_dynamics(s, Command(9.81), P, 0.01)
    with pytest.raises(SimulationError):
        step_dynamics(level(), Command(9.81), P, 0.1)


# ---- command clamping


def test_clamp_limits():
    assert clamp_command(Command(30.0), P).c == pytest.approx(21.7)
    assert clamp_command(Command(5.0, 0, 0, -8.0), P).wz == -6.0
    assert clamp_command(Command(-1.0), P).c == 0.0
    u = Command(10.0, 1.0, -2.0, 3.0)
    assert clamp_command(u, P) == u


def test_clamp_replaces_nan_with_hover_and_flags():
    out = clamp_command(Command(np.nan, 1.0, np.nan, 0.0), P)
    assert out.flagged
    assert out.as_array() == pytest.approx([9.81, 1.0, 0.0, 0.0])


# ---- gates and termination


def unit_gate(center=(0.0, 0.0, 2.0)):
    return Gate(center, [1, 0, 0], [0, 0, 1], 1.5, 1.5, 0.2)


def test_gate_pass_through_center():
    g = unit_gate()
    assert check_gate_pass(level(p=(-0.1, 0, 2)), level(p=(0.1, 0, 2)), g) is GateEvent.PASS


def test_gate_pass_is_direction_sensitive():
    g = unit_gate()
    assert check_gate_pass(level(p=(0.1, 0, 2)), level(p=(-0.1, 0, 2)), g) is GateEvent.NONE


def test_gate_frame_hit_in_frame_band():
    g = unit_gate()
    # aperture half-width 0.75 m; 0.85 m is 0.1 m outside the edge, inside the 0.2 m band
    assert check_gate_pass(level(p=(-0.1, 0.85, 2)), level(p=(0.1, 0.85, 2)), g) is GateEvent.FRAME_HIT
    assert check_gate_pass(level(p=(-0.1, 1.5, 2)), level(p=(0.1, 1.5, 2)), g) is GateEvent.NONE


def test_segment_parallel_to_gate_plane_is_no_event():
    g = unit_gate()
    assert check_gate_pass(level(p=(-0.5, -1, 2)), level(p=(-0.5, 1, 2)), g) is GateEvent.NONE


def test_gate_rejects_non_orthogonal_axes():
    with pytest.raises(ValueError, match="orthogonal"):
        Gate([0, 0, 2], [1, 0, 0], [1, 0, 1])


def test_termination_causes(figure8):
    assert check_termination(level(p=(100, 0, 2)), figure8, 0) == "out-of-bounds"
    assert check_termination(level(p=(0, 0, -0.01)), figure8, 0) == "ground"
    assert check_termination(level(), figure8, 0, frame_hit=True) == "gate-frame"
    assert check_termination(level(), figure8, 10) == "completed"
    assert check_termination(level(), figure8, 3) == "running"


def test_gates_must_be_passed_in_order():
    # gate 1 sits before gate 0 along the flight line; passing it first must not count
    gates = [unit_gate((6.0, 0, 2)), Gate([3.0, 0, 2], [1, 0, 0], [0, 0, 1], index=1)]
    track = Track(gates, level(p=(0, 0, 2)))
    log = run_rollout(lambda ctx: Command(9.81), track, initial_state=level(p=(0, 0, 2), v=(4, 0, 0)), max_time=3.0)
    assert log.gates_passed == 1
    assert list(log.gate_event[log.gate_event >= 0]) == [0]


# ---- tracks


def test_figure8_layout(figure8):
    assert len(figure8.gates) == 10
    lo, hi = figure8.bounds
    assert np.allclose(hi - lo, [30, 15, 8])
    assert lo[2] == 0.0
    for g in figure8.gates:
        assert 2.0 <= g.center[2] <= 3.0
        assert inside_bounds(g.center, figure8.bounds)


def test_oval_has_six_gates_inside_bounds(oval):
    assert len(oval.gates) == 6
    assert all(inside_bounds(g.center, oval.bounds) for g in oval.gates)


@pytest.mark.parametrize("name", ["figure8", "oval"])
def test_gate_normals_follow_incoming_path(name):
    track = load_track(name)
    pts = [track.start_pose.p] + [g.center for g in track.gates]
    for prev, g in zip(pts, track.gates):
        d = g.center - prev
        assert d @ g.normal / np.linalg.norm(d) > 0.5


@pytest.mark.parametrize("name", ["figure8", "oval"])
def test_bundled_track_files_match_generator(name):
    bundled = json.loads((DATA_DIR / f"{name}.json").read_text(encoding="utf-8"))
    assert bundled == json.loads(json.dumps(generate_track(name).to_dict()))


def test_track_json_round_trip(tmp_path, figure8):
    figure8.save(tmp_path / "t.json")
    again = Track.load(tmp_path / "t.json")
    assert again.to_dict() == figure8.to_dict()


def test_unknown_track_name():
    with pytest.raises(ValueError, match="unknown track"):
        generate_track("spiral")


# ---- rollout driver


def test_hover_controller_passes_no_gates(figure8, fig8_reference):
    log = run_rollout(lambda ctx: Command.hover(), figure8, fig8_reference, seed=0)
    assert log.gates_passed == 0
    assert log.termination in ("timeout", "ground", "out-of-bounds", "gate-frame")


def test_rollout_is_deterministic_and_timestamps_increase(figure8, fig8_reference):
    ctrl = lambda ctx: Command(10.0, 0.0, 0.05 * np.sin(ctx.t), 0.1)
    a = run_rollout(ctrl, figure8, fig8_reference, seed=5, start_jitter=0.1)
    b = run_rollout(ctrl, figure8, fig8_reference, seed=5, start_jitter=0.1)
    assert a.to_csv() == b.to_csv()
    assert np.all(np.diff(a.t) > 0)


def test_rollout_rates_and_frame_hold(figure8, fig8_reference):
    seen = []

    def ctrl(ctx):
        seen.append((ctx.tick, ctx.frame_id, len(ctx.state_history(50))))
        return Command.hover()

    run_rollout(ctrl, figure8, fig8_reference, max_time=0.2)
    assert [f for _, f, _ in seen] == [t // 2 for t, _, _ in seen]  # 25 Hz vision under 50 Hz control
    assert all(n == 50 for _, _, n in seen)
    assert len(seen) == 10


def test_controller_failure_terminates_and_flags(figure8, fig8_reference):
    def ctrl(ctx):
        if ctx.tick == 3:
            raise RuntimeError("boom")
        return Command.hover()

    log = run_rollout(ctrl, figure8, fig8_reference)
    assert log.termination == "controller-error"
    assert len(log) == 3
    assert any("boom" in f for f in log.flags)


def test_rollout_csv_header(figure8, fig8_reference):
    log = run_rollout(lambda ctx: Command.hover(), figure8, fig8_reference, max_time=0.1)
    header = log.to_csv().splitlines()[0]
    assert header == ("t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,c_cmd,wx_cmd,wy_cmd,wz_cmd,"
                      "c_exp,wx_exp,wy_exp,wz_exp,source,gate_event")
