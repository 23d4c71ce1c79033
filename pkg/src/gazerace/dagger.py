"""DAgger: expert/policy blended rollouts, dataset aggregation and regression onto expert labels."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gazerace import nn
from gazerace.expert.mpc import MpcExpert
from gazerace.policy import (
    ObservationBundle,
    PolicyConfig,
    PolicyNet,
    act,
    make_assembler,
    normalize_command,
    save_policy,
)
from gazerace.sim.dynamics import Command, QuadParams, clamp_command
from gazerace.sim.rollout import ControlOutput, RateConfig, run_rollout

log = logging.getLogger(__name__)


@dataclass
class DaggerSchedule:
    iterations: int = 5
    rollouts: int = 30
    epochs: int = 20
    noise_p_start: float = 0.05
    noise_p_end: float = 0.25
    noise_thrust_sigma: float = 1.0  # m/s^2
    noise_rate_sigma: float = 0.3  # rad/s
    tau_thrust: float = 2.0  # m/s^2, first iteration
    tau_rate: float = 0.5  # rad/s, first iteration
    tau_growth: float = 1.5  # per iteration
    lr: float = 1e-3
    batch_size: int = 64
    start_jitter: float = 0.1  # m, uniform start-position perturbation

    def __post_init__(self):
        for name in ("iterations", "rollouts", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0 <= self.noise_p_start <= 1 and 0 <= self.noise_p_end <= 1):
            raise ValueError("noise probabilities must lie in [0, 1]")
        if self.tau_thrust < 0 or self.tau_rate < 0 or self.tau_growth <= 0:
            raise ValueError("blending thresholds must be non-negative")

    @property
    def total_rollouts(self) -> int:
        return self.iterations * self.rollouts

    @property
    def total_epochs(self) -> int:
        return self.iterations * self.epochs

    def noise_p(self, i: int) -> float:
        """Noise probability for iteration ``i`` (0-based), linear ramp."""
        if self.iterations == 1:
            return self.noise_p_start
        return self.noise_p_start + (self.noise_p_end - self.noise_p_start) * i / (self.iterations - 1)

    def tau(self, i: int) -> np.ndarray:
        """Per-dimension blending threshold (thrust, wx, wy, wz) for iteration ``i`` (0-based)."""
        g = self.tau_growth**i
        return np.array([self.tau_thrust, self.tau_rate, self.tau_rate, self.tau_rate]) * g

    def noise_sigma(self) -> np.ndarray:
        return np.array([self.noise_thrust_sigma] + [self.noise_rate_sigma] * 3)


class AggregatedDataset:
    """Append-only store of (observation, normalized expert label) pairs with iteration tags."""

    def __init__(self):
        self._ref, self._state, self._vis, self._labels, self._iters = [], [], [], [], []

    def __len__(self):
        return len(self._labels)

    def append(self, obs: ObservationBundle, expert_cmd, iteration: int):
        self._ref.append(obs.ref)
        self._state.append(obs.state)
        self._vis.append(obs.visual)
        self._labels.append(normalize_command(expert_cmd).astype(np.float32))
        self._iters.append(iteration)

    def extend(self, pairs, iteration):
        for obs, cmd in pairs:
            self.append(obs, cmd, iteration)

    def arrays(self, idx=None):
        idx = np.arange(len(self)) if idx is None else idx
        return (
            np.stack([self._ref[i] for i in idx]),
            np.stack([self._state[i] for i in idx]),
            np.stack([self._vis[i] for i in idx]),
        ), np.stack([self._labels[i] for i in idx])

    @property
    def iterations(self) -> np.ndarray:
        return np.array(self._iters, dtype=int)


@dataclass
class RolloutRecord:
    iteration: int
    rollout: int
    seed: int
    reference_id: str
    gates_passed: int
    total_gates: int
    termination: str
    ticks: int
    expert_fraction: float
    noise_fraction: float
    dataset_size: int


class BlendedController:
    """Applies the policy when it stays within ``tau`` of the expert, else the (possibly noisy) expert."""

    def __init__(self, model, assembler, expert, tau, noise_p, noise_sigma, rng, params=QuadParams()):
        self.model, self.assembler, self.expert = model, assembler, expert
        self.tau = np.asarray(tau, dtype=float)
        self.noise_p, self.noise_sigma, self.rng, self.params = noise_p, np.asarray(noise_sigma), rng, params
        self.pairs = []
        self.n_expert = 0
        self.n_noise = 0
        self.expert_failed = False

    def __call__(self, ctx):
        sol = self.expert.solve(ctx.state)
        e = sol.first
        if sol.flagged or not np.all(np.isfinite(e.as_array())):
            self.expert_failed = True
            raise RuntimeError(f"expert solver failed at tick {ctx.tick}")
        obs = self.assembler(ctx)
        self.pairs.append((obs, e.as_array()))
        if self.model is not None:
            p = act(obs, self.model, self.params)
            close = bool(np.all(np.abs(p.as_array() - e.as_array()) <= self.tau))
        else:
            close = False
        if close:
            return ControlOutput(p, expert=e, source="policy")
        self.n_expert += 1
        if self.rng.random() < self.noise_p:
            self.n_noise += 1
            noisy = e.as_array() + self.rng.normal(0.0, 1.0, 4) * self.noise_sigma
            return ControlOutput(clamp_command(Command.from_array(noisy), self.params), expert=e, source="noise")
        return ControlOutput(e, expert=e, source="expert")


def collect_rollout(model, assembler, reference, track, schedule: DaggerSchedule, iteration: int, seed: int,
                    renderer, rates: RateConfig = RateConfig(), params: QuadParams = QuadParams()):
    """One blended rollout; returns (RolloutLog, labeled pairs, BlendedController).

    If the expert solver fails the rollout stops there (termination
    ``expert-failure``) and the pairs labeled so far are still returned.
    """
    expert = MpcExpert(reference, params=params, control_dt=1.0 / rates.control_hz)
    assembler.reset()
    rng = np.random.default_rng([seed, 1])
    ctrl = BlendedController(model, assembler, expert, schedule.tau(iteration), schedule.noise_p(iteration),
                             schedule.noise_sigma(), rng, params)
    rlog = run_rollout(ctrl, track, reference, rates, seed=seed, params=params, renderer=renderer,
                       start_jitter=schedule.start_jitter)
    if ctrl.expert_failed:
        rlog.termination = "expert-failure"
    return rlog, ctrl.pairs, ctrl


def train_iteration(dataset: AggregatedDataset, model: PolicyNet, epochs: int, lr: float = 1e-3, seed: int = 0,
                    batch_size: int = 64, optimizer=None):
    """MSE regression onto normalized expert labels; returns the per-epoch training loss trace."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = optimizer or nn.Adam(model.params(), lr=lr)
    rng = np.random.default_rng(seed)
    inputs, labels = dataset.arrays()
    trace = []
    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            batch = tuple(a[idx] for a in inputs)
            y = model.forward(batch)
            err = y - labels[idx]
            loss = float(np.mean(err * err))
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite policy loss at batch starting {s}")
            opt.zero_grad()
            model.backward((2.0 * err / err.size).astype(y.dtype))
            opt.step()
            total += loss * len(idx)
        trace.append(total / len(labels))
    model.eval()
    return trace


@dataclass
class DaggerResult:
    model: PolicyNet
    records: list = field(default_factory=list)
    loss_traces: list = field(default_factory=list)
    dataset_sizes: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def rollout_seed(root: int, iteration: int, index: int) -> int:
    return int(np.random.SeedSequence([root, iteration, index]).generate_state(1)[0])


def run_dagger(cfg: PolicyConfig, references, track, schedule: DaggerSchedule, seed: int = 0, attention_net=None,
               renderer=None, out_dir=None, rates: RateConfig = RateConfig(), params: QuadParams = QuadParams(),
               on_record=None) -> DaggerResult:
    """Iterations of (collect on round-robin references -> aggregate -> train), checkpointing each iteration."""
    if not references:
        raise ValueError("DAgger needs at least one reference")
    if renderer is None:
        raise ValueError("DAgger needs a renderer for the visual front end")
    model = PolicyNet(cfg, seed)
    opt = nn.Adam(model.params(), lr=schedule.lr)
    data = AggregatedDataset()
    result = DaggerResult(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "provenance.ndjson").write_text("", encoding="utf-8")
    k = 0
    for it in range(schedule.iterations):
        for r in range(schedule.rollouts):
            ref = references[k % len(references)]
            k += 1
            s = rollout_seed(seed, it, r)
            assembler = make_assembler(cfg, attention_net, seed=s)
            t0 = time.perf_counter()
            try:
                rlog, pairs, ctrl = collect_rollout(model, assembler, ref, track, schedule, it, s, renderer, rates, params)
            except Exception as exc:  # keep going; the provenance log records the failure
                log.warning("rollout %d/%d failed: %s", it, r, exc)
                continue
            data.extend(pairs, it)
            n = max(len(pairs), 1)
            rec = RolloutRecord(it, r, s, ref.name, rlog.gates_passed, rlog.total_gates, rlog.termination, len(pairs),
                                ctrl.n_expert / n, ctrl.n_noise / n, len(data))
            result.records.append(rec)
            log.info("dagger it %d rollout %d: %s gates %d/%d expert %.2f (%.1fs)", it, r, ref.name,
                     rec.gates_passed, rec.total_gates, rec.expert_fraction, time.perf_counter() - t0)
            if out is not None:
                with open(out / "provenance.ndjson", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
            if on_record:
                on_record(rec)
        result.dataset_sizes.append(len(data))
        if len(data):
            trace = train_iteration(data, model, schedule.epochs, schedule.lr, rollout_seed(seed, it, 10**6),
                                    schedule.batch_size, optimizer=opt)
            result.loss_traces.append(trace)
        if out is not None:
            path = out / f"policy_it{it + 1}.nnw"
            save_policy(model, path)
            result.checkpoints.append(str(path))
    return result
