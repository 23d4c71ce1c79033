"""Closed-loop rollout driver: 100 Hz physics, 50 Hz control, 25 Hz vision (zero-order hold)."""

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from gazerace.sim.dynamics import Command, QuadParams, QuadState, clamp_command, rk4_step
from gazerace.sim.track import COMPLETED, RUNNING, Track, check_termination, gate_array, segment_gate_events

log = logging.getLogger(__name__)

CSV_HEADER = (
    "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,c_cmd,wx_cmd,wy_cmd,wz_cmd,"
    "c_exp,wx_exp,wy_exp,wz_exp,source,gate_event"
).split(",")


@dataclass(frozen=True)
class RateConfig:
    physics_hz: int = 100
    control_hz: int = 50
    vision_hz: int = 25
    timeout_factor: float = 3.0

    def __post_init__(self):
        if self.physics_hz % self.control_hz or self.control_hz % self.vision_hz:
            raise ValueError("loop rates must divide each other: physics % control == control % vision == 0")

    @property
    def substeps(self) -> int:
        return self.physics_hz // self.control_hz

    @property
    def vision_every(self) -> int:
        return self.control_hz // self.vision_hz


@dataclass
class ControlOutput:
    """What a controller hands back to the driver for one tick."""

    command: Command
    expert: Optional[Command] = None
    source: str = "policy"  # expert | policy | noise


class TickContext:
    """Read-only view of the rollout handed to the controller at each control tick."""

    def __init__(self, driver, tick):
        self._driver = driver
        self.tick = tick
        self.t = driver.t
        self.state = driver.state
        self.next_gate = driver.next_gate
        self.track = driver.track
        self.reference = driver.reference
        self.rng = driver.rng
        self.rates = driver.rates
        self.frame_id = driver.frame_id

    def state_history(self, n: int) -> np.ndarray:
        """Last ``n`` physics-rate states as (n, 13), oldest first, padded with the oldest sample."""
        hist = self._driver.history
        rows = hist[-n:]
        if len(rows) < n:
            rows = [rows[0]] * (n - len(rows)) + rows
        return np.stack(rows)

    @property
    def frame(self):
        """Most recent vision frame (rendered lazily, held between vision ticks)."""
        return self._driver.current_frame()


@dataclass
class RolloutLog:
    t: np.ndarray
    states: np.ndarray  # (N, 13)
    commands: np.ndarray  # (N, 4) applied
    expert: np.ndarray  # (N, 4) label, NaN where absent
    source: list
    frame_id: np.ndarray
    gate_event: np.ndarray  # gate index passed during the tick, -1 otherwise
    termination: str
    gates_passed: int
    total_gates: int
    flags: list = field(default_factory=list)
    final_state: Optional[QuadState] = None

    @property
    def completed(self) -> bool:
        return self.termination == COMPLETED

    def __len__(self):
        return len(self.t)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i in range(len(self.t)):
            row = [repr(float(self.t[i]))]
            row += [repr(float(x)) for x in self.states[i]]
            row += [repr(float(x)) for x in self.commands[i]]
            row += ["" if np.isnan(x) else repr(float(x)) for x in self.expert[i]]
            row += [self.source[i], "" if self.gate_event[i] < 0 else str(int(self.gate_event[i]))]
            w.writerow(row)
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


class _Driver:
    def __init__(self, track, reference, rates, params, rng, renderer, initial_state):
        self.track = track
        self.reference = reference
        self.rates = rates
        self.params = params
        self.rng = rng
        self.renderer = renderer
        self.state = initial_state
        self.t = initial_state.t
        self.next_gate = 0
        self.history = [initial_state.to_array()]
        self.frame_id = -1
        self._frame = None
        self._frame_state = initial_state

    def current_frame(self):
        if self.renderer is None:
            raise RuntimeError("rollout was started without a renderer")
        if self._frame is None:
            self._frame = self.renderer(self._frame_state, self.frame_id)
        return self._frame


def run_rollout(
    controller: Callable[[TickContext], object],
    track: Track,
    reference=None,
    rates: RateConfig = RateConfig(),
    seed: int = 0,
    params: QuadParams = QuadParams(),
    renderer=None,
    initial_state: Optional[QuadState] = None,
    start_jitter: float = 0.0,
    max_time: Optional[float] = None,
    on_tick=None,
) -> RolloutLog:
    """Fly ``controller`` on ``track`` until completion, crash or timeout.

    The controller returns a Command or a ControlOutput. The start state is the
    reference's initial state (or ``initial_state``), with the position perturbed
    uniformly by +-``start_jitter`` m using the seeded generator.
    """
    rng = np.random.default_rng(seed)
    if initial_state is None:
        initial_state = reference.initial_state() if reference is not None else track.start_pose
    s0 = initial_state.copy()
    if start_jitter > 0:
        s0.p = s0.p + rng.uniform(-start_jitter, start_jitter, 3)
    if max_time is None:
        if reference is None:
            raise ValueError("either a reference or max_time is required")
        max_time = rates.timeout_factor * reference.duration
    n_ticks = int(np.ceil(max_time * rates.control_hz))
    dt = 1.0 / rates.physics_hz
    t0 = s0.t

    d = _Driver(track, reference, rates, params, rng, renderer, s0)
    garr = gate_array(track.gates)
    n_gates = len(track.gates)
    ts, states, cmds, exps, srcs, fids, events = [], [], [], [], [], [], []
    flags = []
    termination = "timeout"
    x = s0.to_array()
    for tick in range(n_ticks):
        d.t = t0 + tick / rates.control_hz
        d.state = QuadState.from_array(d.t, x)
        if tick % rates.vision_every == 0:
            d.frame_id = tick // rates.vision_every
            d._frame = None
            d._frame_state = d.state
        ctx = TickContext(d, tick)
        try:
            out = controller(ctx)
        except Exception as exc:  # controller failure ends the rollout
            log.warning("controller failed at tick %d: %s", tick, exc)
            flags.append(f"controller-error@{tick}: {exc}")
            termination = "controller-error"
            break
        if not isinstance(out, ControlOutput):
            out = ControlOutput(out)
        applied = clamp_command(out.command, params)
        if applied.flagged:
            flags.append(f"command-flagged@{tick}")
        ts.append(d.t)
        states.append(x.copy())
        cmds.append(applied.as_array())
        exps.append(out.expert.as_array() if out.expert is not None else np.full(4, np.nan))
        srcs.append(out.source)
        fids.append(d.frame_id)
        event = -1
        u = applied.as_array()
        cause = RUNNING
        for _ in range(rates.substeps):
            x_new = rk4_step(x, u, params.g, params.rate_lag_tau, dt)
            codes = segment_gate_events(x[0:3], x_new[0:3], garr)
            hit = bool(np.any(codes == 2))
            if d.next_gate < n_gates and codes[d.next_gate] == 1:
                event = d.next_gate
                d.next_gate += 1
            x = x_new
            sn = QuadState(0.0, x[0:3], x[3:6], x[6:10], x[10:13])
            d.history.append(x.copy())
            cause = check_termination(sn, track, d.next_gate, frame_hit=hit)
            if cause != RUNNING:
                break
        events.append(event)
        if on_tick is not None:
            on_tick(ctx, applied)
        if cause != RUNNING:
            termination = cause
            break
        if len(d.history) > 4 * rates.physics_hz:
            del d.history[: len(d.history) - 2 * rates.physics_hz]

    as2d = lambda rows, w: np.array(rows, dtype=float).reshape(-1, w)
    return RolloutLog(
        t=np.array(ts, dtype=float),
        states=as2d(states, 13),
        commands=as2d(cmds, 4),
        expert=as2d(exps, 4),
        source=srcs,
        frame_id=np.array(fids, dtype=int),
        gate_event=np.array(events, dtype=int),
        termination=termination,
        gates_passed=d.next_gate,
        total_gates=len(track.gates),
        flags=flags,
        final_state=QuadState.from_array(t0 + len(ts) / rates.control_hz, x),
    )
