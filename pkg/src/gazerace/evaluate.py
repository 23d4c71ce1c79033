"""Closed-loop success rates and offline shadow command errors, plus report writing."""

import csv
import json
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gazerace.expert.mpc import MpcExpert
from gazerace.policy import act, normalize_command
from gazerace.sim.dynamics import Command, QuadParams
from gazerace.sim.rollout import ControlOutput, RateConfig, run_rollout

COMMAND_NAMES = ("Throttle", "Roll", "Pitch", "Yaw")
SUCCESS_HEADER = ["reference_id", "rep", "gates_passed", "total_gates", "terminated", "cause"]
SHADOW_HEADER = ["policy", "space", "command", "mse", "l1", "ticks"]


def wilson_interval(successes: int, trials: int, z: float = 1.959963984540054):
    """95% Wilson score interval for a binomial proportion."""
    if trials <= 0:
        return (float("nan"), float("nan"))
    p = successes / trials
    denom = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * np.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def trial_seed(root: int, ref_index: int, rep: int) -> int:
    return int(np.random.SeedSequence([root, ref_index, rep]).generate_state(1)[0])


@dataclass
class TrialResult:
    reference_id: str
    rep: int
    gates_passed: int
    total_gates: int
    cause: str

    @property
    def success(self) -> bool:
        return self.gates_passed == self.total_gates and self.cause == "completed"

    @property
    def terminated(self) -> int:
        """1 when the trial ended before completing the lap (crash, bounds, timeout, controller error)."""
        return 0 if self.success else 1


@dataclass
class SuccessResult:
    name: str
    trials: list = field(default_factory=list)

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def n_success(self) -> int:
        return sum(t.success for t in self.trials)

    @property
    def rate(self) -> float:
        return self.n_success / self.n_trials if self.trials else float("nan")

    @property
    def ci(self):
        return wilson_interval(self.n_success, self.n_trials)

    def fraction_with_gates(self, min_gates: int) -> float:
        return float(np.mean([t.gates_passed >= min_gates for t in self.trials])) if self.trials else float("nan")

    def per_reference(self):
        out = {}
        for t in self.trials:
            out.setdefault(t.reference_id, []).append(t.gates_passed)
        return out


_TRIAL_JOB = None  # set in the parent before forking workers; read by _run_trial


def _run_trial(task):
    i, rep, seed = task
    factory, references, track, renderer, start_jitter, rates, params = _TRIAL_JOB
    ref = references[i]
    rlog = run_rollout(factory(ref, seed), track, ref, rates, seed=seed, params=params, renderer=renderer,
                       start_jitter=start_jitter)
    return TrialResult(ref.name, rep, rlog.gates_passed, rlog.total_gates, rlog.termination)


def evaluate_success(controller_factory, references, track, reps: int = 10, root_seed: int = 0, renderer=None,
                     start_jitter: float = 0.1, rates: RateConfig = RateConfig(), params: QuadParams = QuadParams(),
                     name: str = "policy", jobs: int = 1) -> SuccessResult:
    """Fly ``reps`` trials per reference; ``controller_factory(reference, seed)`` builds a fresh controller.

    Every trial is seeded from (root_seed, reference index, rep), so ``jobs > 1`` (forked workers)
    gives the same trials as a single worker.
    """
    global _TRIAL_JOB
    if not references:
        raise ValueError("evaluation needs at least one reference")
    tasks = [(i, rep, trial_seed(root_seed, i, rep)) for i in range(len(references)) for rep in range(reps)]
    _TRIAL_JOB = (controller_factory, list(references), track, renderer, start_jitter, rates, params)
    try:
        if jobs > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(jobs) as pool:
                trials = pool.map(_run_trial, tasks)
        else:
            trials = [_run_trial(t) for t in tasks]
    finally:
        _TRIAL_JOB = None
    return SuccessResult(name, trials)


def expert_factory(params: QuadParams = QuadParams(), control_dt: float = 0.02):
    return lambda ref, seed: MpcExpert(ref, params=params, control_dt=control_dt)


def hover_factory(params: QuadParams = QuadParams()):
    return lambda ref, seed: (lambda ctx: Command.hover(params))


class ShadowController:
    """The expert flies; the policy predicts from the same observation stream without acting."""

    def __init__(self, expert, model, assembler, params: QuadParams = QuadParams()):
        self.expert, self.model, self.assembler, self.params = expert, model, assembler, params
        self.expert_cmds, self.policy_cmds = [], []

    def __call__(self, ctx):
        e = self.expert.command(ctx.state)
        if self.model is not None:
            p = act(self.assembler(ctx), self.model, self.params)
            self.policy_cmds.append(p.as_array())
            self.expert_cmds.append(e.as_array())
        return ControlOutput(e, expert=e, source="expert")


@dataclass
class ShadowResult:
    name: str
    expert: np.ndarray  # (n, 4) physical
    policy: np.ndarray  # (n, 4) physical

    def errors(self, space="normalized"):
        if space == "normalized":
            d = normalize_command(self.policy) - normalize_command(self.expert)
        elif space == "raw":
            d = self.policy - self.expert
        else:
            raise ValueError(f"unknown command space {space!r}")
        return np.mean(d * d, axis=0), np.mean(np.abs(d), axis=0)

    @property
    def mse(self):
        return self.errors("normalized")[0]


def offline_command_eval(model, assembler_factory, references, track, root_seed: int = 0, renderer=None,
                         start_jitter: float = 0.1, rates: RateConfig = RateConfig(), params: QuadParams = QuadParams(),
                         name: str = "policy", policy_override=None) -> ShadowResult:
    """MPC flies each reference once while the policy predicts in shadow; errors pooled over all ticks.

    ``policy_override(ctx, expert_cmd)`` replaces the network (used for oracle checks).
    """
    exp_all, pol_all = [], []
    for i, ref in enumerate(references):
        seed = trial_seed(root_seed, i, 0)
        expert = MpcExpert(ref, params=params, control_dt=1.0 / rates.control_hz)
        ctrl = ShadowController(expert, model, assembler_factory(seed) if model is not None else None, params)
        if policy_override is not None:
            inner = ctrl

            def ctrl(ctx, inner=inner):
                out = inner(ctx)
                inner.expert_cmds.append(out.command.as_array())
                inner.policy_cmds.append(np.asarray(policy_override(ctx, out.command), dtype=float))
                return out

            run_rollout(ctrl, track, ref, rates, seed=seed, params=params, renderer=renderer, start_jitter=start_jitter)
            ctrl = inner
        else:
            run_rollout(ctrl, track, ref, rates, seed=seed, params=params, renderer=renderer, start_jitter=start_jitter)
        exp_all.extend(ctrl.expert_cmds)
        pol_all.extend(ctrl.policy_cmds)
    return ShadowResult(name, np.array(exp_all).reshape(-1, 4), np.array(pol_all).reshape(-1, 4))


def _fmt(x) -> str:
    return f"{x:.6g}" if np.isfinite(x) else ("inf" if x > 0 else "nan")


def write_report(out_dir, success=None, shadow=None, config=None, gaze=None, extra_lines=None):
    """Write success.csv, shadow.csv, summary.txt and config_snapshot.json under ``out_dir``.

    ``success`` and ``shadow`` are lists of SuccessResult / ShadowResult (one per policy).
    ``gaze`` maps model names to metric summaries (with separate infinity counts).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    success = success or []
    shadow = shadow or []
    lines = []
    if success:
        with open(out / "success.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUCCESS_HEADER if len(success) == 1 else ["policy"] + SUCCESS_HEADER)
            for res in success:
                for t in res.trials:
                    row = [t.reference_id, t.rep, t.gates_passed, t.total_gates, t.terminated, t.cause]
                    w.writerow(row if len(success) == 1 else [res.name] + row)
        lines.append("Closed-loop success")
        for res in success:
            lo, hi = res.ci
            lines.append(f"  {res.name}: {res.n_success}/{res.n_trials} trials ({100 * res.rate:.1f}% success, "
                         f"95% CI {100 * lo:.1f}-{100 * hi:.1f}%)")
        if len(success) > 1:
            lines.append("Modality comparison (success rate, mean gates passed)")
            for res in sorted(success, key=lambda r: -r.rate):
                mean_gates = np.mean([t.gates_passed for t in res.trials]) if res.trials else float("nan")
                lines.append(f"  {res.name:<12} {100 * res.rate:6.1f}%  {mean_gates:6.2f}")
    if shadow:
        with open(out / "shadow.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SHADOW_HEADER)
            for res in shadow:
                for space in ("normalized", "raw"):
                    mse, l1 = res.errors(space)
                    for k, name in enumerate(COMMAND_NAMES):
                        w.writerow([res.name, space, name, _fmt(mse[k]), _fmt(l1[k]), len(res.expert)])
        lines.append("Shadow command errors (normalized units): " + " / ".join(COMMAND_NAMES))
        for res in shadow:
            mse, l1 = res.errors("normalized")
            lines.append(f"  {res.name} MSE: " + " ".join(_fmt(x) for x in mse))
            lines.append(f"  {res.name} L1:  " + " ".join(_fmt(x) for x in l1))
    if gaze:
        lines.append("Attention metrics (per-frame means; infinite KL counted separately)")
        for name, m in gaze.items():
            lines.append(f"  {name}: KL {_fmt(m['kl'])} (inf: {m.get('kl_inf', 0)})  CC {_fmt(m['cc'])}")
    lines.extend(extra_lines or [])
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "config_snapshot.json").write_text(json.dumps(config or {}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out
