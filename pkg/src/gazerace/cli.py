"""Command-line entry point: one subcommand per pipeline stage.

Exit status is 0 on success, 1 on a usage or validation error and 2 when a stage fails at runtime.
Every subcommand writes ``config_snapshot.json`` (the fully resolved configuration) and ``run.json``
(subcommand, seed and options) into its ``--out`` directory.
"""

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from gazerace import nn
from gazerace.config import Config, ConfigError, config_schema, load_config

log = logging.getLogger("gazerace")


class UsageError(Exception):
    """Bad command line: reported with the usage text, exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="JSON config file, or the preset names 'desk' / 'paper' (default: desk)")
    p.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    p.add_argument("--out", default=None, help="artifact directory (default runs/<subcommand>)")
    p.add_argument("--jobs", type=int, default=None, help="worker processes; overrides the config value")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gazerace", description="Gaze-attention drone racing workbench")
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)

    p = sub.add_parser("make-track", help="write a bundled track layout as JSON")
    _common(p)
    p.add_argument("--name", help="figure8 or oval (default: config track)")

    p = sub.add_parser("gen-reference", help="write jittered reference trajectories as CSV")
    _common(p)
    p.add_argument("--track", help="track name or JSON path (default: config track)")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--count", type=int, help="number of references (default: config n_references)")

    p = sub.add_parser("gen-data", help="render expert laps with synthetic gaze and attention maps")
    _common(p)

    p = sub.add_parser("train-attention", help="train the attention network on a gen-data directory")
    _common(p)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--no-augment", action="store_true", help="disable image augmentation")

    p = sub.add_parser("eval-attention", help="attention metrics against the mean-map and shuffle baselines")
    _common(p)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--model", required=True, help="attention weights (NNW1)")

    p = sub.add_parser("train-policy", help="DAgger training of a policy for one visual modality")
    _common(p)
    p.add_argument("--modality", choices=("attention", "tracks", "image"), help="default: config modality")
    p.add_argument("--attention-model", help="trained attention weights for the attention modality")

    for name, text in (("evaluate", "closed-loop gate success rates"), ("shadow-eval", "offline command errors")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--policy", action="append", default=[], help="policy weights; repeat to compare modalities")
        p.add_argument("--attention-model", help="attention weights used by attention-modality policies")
        p.add_argument("--split", choices=("train", "test"), default="train")
        if name == "evaluate":
            p.add_argument("--baseline", action="append", default=[], choices=("expert", "hover"),
                           help="also evaluate a reference controller")

    p = sub.add_parser("bench", help="per-stage act() latency per modality")
    _common(p)
    p.add_argument("--modality", action="append", choices=("attention", "tracks", "image"),
                   help="modalities to time (default: all)")
    p.add_argument("--attention-model", help="attention weights (default: untrained network)")
    p.add_argument("--policy", action="append", default=[], help="policy weights per modality (default: untrained)")

    p = sub.add_parser("config-schema", help="print every config key with its type and default")
    _common(p)
    return parser


# ---------------------------------------------------------------- shared helpers


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare(args, cfg: Config) -> Path:
    out = Path(args.out or Path("runs") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config_snapshot.json", cfg.to_dict())
    options = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "config", "command", "seed", "jobs")}
    _write_json(out / "run.json", {"subcommand": args.command, "seed": args.seed, "options": options})
    return out


def _references(cfg: Config, track, split: str, seed=None, count=None):
    from gazerace.expert.reference import jittered_references

    if seed is None:
        seed = cfg.train_reference_seed if split == "train" else cfg.test_reference_seed
    n = count or cfg.n_references
    return jittered_references(track, n, seed, offset=cfg.reference_offset, speed_range=(cfg.speed_min, cfg.speed_max),
                               prefix="ref" if split == "train" else "test")


def _attention_net(cfg: Config, path, seed: int):
    from gazerace.attention_net import AttentionNet, load_model

    if path:
        return load_model(path, cfg.attention_config())
    log.warning("no --attention-model given: using an untrained attention encoder")
    return AttentionNet(cfg.attention_config(), seed).eval()


def _load_policy_file(cfg: Config, path):
    from gazerace.policy import MODALITIES, load_policy

    tag = nn.read_tag(Path(path).read_bytes())
    modality = (tag or "").partition("modality=")[2]
    if modality not in MODALITIES:
        raise ConfigError(f"{path}: weight file carries no modality tag")
    pcfg = cfg.policy_config(modality)
    return load_policy(path, pcfg), pcfg


# ---------------------------------------------------------------- subcommands


def cmd_make_track(args, cfg, out):
    from gazerace.sim.track import load_track

    name = args.name or cfg.track
    track = load_track(name)
    track.save(out / f"{track.name}.json")
    print(f"wrote {out / (track.name + '.json')} ({len(track.gates)} gates)")


def cmd_gen_reference(args, cfg, out):
    from gazerace.sim.track import load_track

    track = load_track(args.track or cfg.track)
    seed = args.seed if args.seed else None  # 0 keeps the config's split seed
    refs = _references(cfg, track, args.split, seed, args.count)
    with open(out / "references.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "file", "duration_s", "mean_speed"])
        for ref in refs:
            ref.save_csv(out / f"{ref.name}.csv")
            speed = float(np.mean(np.linalg.norm(ref.v, axis=1)))
            w.writerow([ref.name, f"{ref.name}.csv", f"{ref.duration:.2f}", f"{speed:.3f}"])
    print(f"wrote {len(refs)} references to {out}")


def cmd_gen_data(args, cfg, out):
    from gazerace.datagen import generate_gaze_dataset, save_dataset
    from gazerace.sim.track import load_track

    track = load_track(cfg.track)
    refs = _references(cfg, track, "train")
    ds = generate_gaze_dataset(track, refs, cfg.gen_frames, cfg.camera(), args.seed, cfg.gaze_half_window,
                               cfg.start_jitter)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} frames from {len(set(ds.lap_ids.tolist()))} laps to {out} "
          f"(gaze inside image: {100 * ds.inside_fraction:.1f}%)")


def cmd_train_attention(args, cfg, out):
    from gazerace.attention_net import AttentionDataset, AugmentConfig, baseline_scores, save_model, train_attention
    from gazerace.datagen import load_dataset

    ds = load_dataset(args.data)
    data = AttentionDataset(ds.pixels, ds.maps, ds.lap_ids)
    train, val = data.split(cfg.att_val_fraction)
    acfg = cfg.attention_config()
    if args.no_augment:
        acfg.augment = False
    t0 = time.perf_counter()
    res = train_attention(train, acfg, args.seed, val=val, augment_cfg=None if acfg.augment else AugmentConfig.off(),
                          log=lambda msg: log.info("%s", msg))
    save_model(res.net, out / "attention.nnw")
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_kl", "val_kl", "val_cc"])
        for r in res.history:
            w.writerow([r.epoch, repr(r.train_kl), repr(r.val_kl), repr(r.val_cc)])
    base = baseline_scores(train, val, args.seed)
    last = res.final()
    print(f"trained {len(train)} frames, {acfg.epochs} epochs in {time.perf_counter() - t0:.0f}s: "
          f"val KL {last.val_kl:.4f} CC {last.val_cc:.4f} "
          f"(mean map KL {base['mean']['kl']:.4f} CC {base['mean']['cc']:.4f})")


def attention_scores(net, val, train, seed: int):
    """Model, mean-map and shuffle metrics on ``val`` as a name -> summary dict."""
    from gazerace.attention_net import baseline_scores, evaluate_maps, predict_batch

    kl, cc = evaluate_maps(predict_batch(net, val.pixels), val.maps)
    finite = kl[np.isfinite(kl)]
    scores = {"model": {"kl": float(finite.mean()) if finite.size else float("inf"), "cc": float(np.nanmean(cc)),
                        "kl_inf": int(np.isinf(kl).sum())}}
    scores.update(baseline_scores(train, val, seed))
    return scores


def cmd_eval_attention(args, cfg, out):
    from gazerace.attention_net import AttentionDataset, load_model
    from gazerace.datagen import load_dataset
    from gazerace.evaluate import write_report

    ds = load_dataset(args.data)
    train, val = AttentionDataset(ds.pixels, ds.maps, ds.lap_ids).split(cfg.att_val_fraction)
    net = load_model(args.model, cfg.attention_config())
    scores = attention_scores(net, val, train, args.seed)
    with open(out / "attention_metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "kl", "kl_inf", "cc", "frames"])
        for name, m in scores.items():
            w.writerow([name, repr(m["kl"]), m["kl_inf"], repr(m["cc"]), len(val)])
    write_report(out, config=cfg.to_dict(), gaze=scores)
    print((out / "summary.txt").read_text(encoding="utf-8"), end="")


def cmd_train_policy(args, cfg, out):
    from gazerace.dagger import run_dagger
    from gazerace.policy import save_policy
    from gazerace.render import make_renderer
    from gazerace.sim.track import load_track

    modality = args.modality or cfg.modality
    pcfg = cfg.policy_config(modality)
    anet = _attention_net(cfg, args.attention_model, args.seed) if modality == "attention" else None
    track = load_track(cfg.policy_track)
    refs = _references(cfg, track, "train")
    sched = cfg.schedule()
    res = run_dagger(pcfg, refs, track, sched, args.seed, anet, make_renderer(track, cfg.camera()), out_dir=out)
    save_policy(res.model, out / "policy.nnw")
    with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "epoch", "mse", "dataset_size"])
        for it, (trace, size) in enumerate(zip(res.loss_traces, res.dataset_sizes)):
            for ep, loss in enumerate(trace):
                w.writerow([it + 1, ep + 1, repr(float(loss)), size])
    gates = [r.gates_passed for r in res.records]
    print(f"{modality} policy: {len(res.records)} rollouts, dataset {res.dataset_sizes[-1] if res.dataset_sizes else 0} "
          f"pairs, mean gates during collection {np.mean(gates) if gates else 0:.2f}; wrote {out / 'policy.nnw'}")


def _eval_setup(args, cfg):
    from gazerace.render import make_renderer
    from gazerace.sim.track import load_track

    track = load_track(cfg.policy_track)
    refs = _references(cfg, track, args.split)
    if cfg.eval_references:
        refs = refs[: cfg.eval_references]
    return track, refs, make_renderer(track, cfg.camera())


def _policy_entries(args, cfg):
    """(name, model, policy config) per --policy; names carry the modality, disambiguated if repeated."""
    entries, seen = [], {}
    anet = None
    for path in args.policy:
        model, pcfg = _load_policy_file(cfg, path)
        if pcfg.modality == "attention" and anet is None:
            anet = _attention_net(cfg, args.attention_model, args.seed)
        seen[pcfg.modality] = seen.get(pcfg.modality, 0) + 1
        name = pcfg.modality if seen[pcfg.modality] == 1 else f"{pcfg.modality}{seen[pcfg.modality]}"
        entries.append((name, model, pcfg))
    return entries, anet


def cmd_evaluate(args, cfg, out):
    from gazerace.evaluate import evaluate_success, expert_factory, hover_factory, write_report
    from gazerace.policy import PolicyController, make_assembler

    if not args.policy and not args.baseline:
        raise ConfigError("evaluate needs at least one --policy or --baseline")
    track, refs, renderer = _eval_setup(args, cfg)
    entries, anet = _policy_entries(args, cfg)
    results = []
    for name, model, pcfg in entries:
        factory = lambda ref, seed, model=model, pcfg=pcfg: PolicyController(model, make_assembler(pcfg, anet, seed))
        results.append(evaluate_success(factory, refs, track, cfg.eval_reps, args.seed, renderer, cfg.start_jitter,
                                        name=name, jobs=cfg.jobs))
    for base in args.baseline:
        factory = expert_factory() if base == "expert" else hover_factory()
        results.append(evaluate_success(factory, refs, track, cfg.eval_reps, args.seed, None, cfg.start_jitter,
                                        name=base, jobs=cfg.jobs))
    write_report(out, success=results, config=cfg.to_dict())
    print((out / "summary.txt").read_text(encoding="utf-8"), end="")


def cmd_shadow_eval(args, cfg, out):
    from gazerace.evaluate import offline_command_eval, write_report
    from gazerace.policy import PolicyNet, make_assembler

    if not args.policy:
        raise ConfigError("shadow-eval needs at least one --policy")
    track, refs, renderer = _eval_setup(args, cfg)
    entries, anet = _policy_entries(args, cfg)
    # an untrained network of each modality gives the reference error level
    for modality in dict.fromkeys(p.modality for _, _, p in entries):
        pcfg = cfg.policy_config(modality)
        entries.append((f"{modality}-untrained", PolicyNet(pcfg, args.seed).eval(), pcfg))
    results = []
    for name, model, pcfg in entries:
        assemblers = lambda seed, pcfg=pcfg: make_assembler(pcfg, anet, seed)
        results.append(offline_command_eval(model, assemblers, refs, track, args.seed, renderer, cfg.start_jitter,
                                            name=name))
    write_report(out, shadow=results, config=cfg.to_dict())
    print((out / "summary.txt").read_text(encoding="utf-8"), end="")


class _TimedFrontEnd:
    def __init__(self, inner):
        self.inner, self.last = inner, 0.0

    def reset(self):
        self.inner.reset()

    def __call__(self, pixels, ticks=1):
        t0 = time.perf_counter()
        out = self.inner(pixels, ticks)
        self.last = time.perf_counter() - t0
        return out


BENCH_STAGES = ("render", "visual", "assemble", "forward", "act")


def bench_modality(cfg: Config, modality: str, model, anet, n_ticks: int, seed: int = 0):
    """Per-tick stage latencies (seconds) over ``n_ticks`` control ticks of expert-flown laps.

    Every tick renders a fresh frame and runs the visual front end, which is the worst case
    (in flight a frame arrives on every other control tick).
    """
    from gazerace.expert.mpc import MpcExpert
    from gazerace.policy import act, make_assembler
    from gazerace.render import render_frame
    from gazerace.sim.rollout import ControlOutput, run_rollout
    from gazerace.sim.track import load_track

    pcfg = cfg.policy_config(modality)
    track = load_track(cfg.policy_track)
    refs = _references(cfg, track, "train")
    cam = cfg.camera()
    assembler = make_assembler(pcfg, anet, seed)
    timed = _TimedFrontEnd(assembler.front_end)
    assembler.front_end = timed
    times = {k: [] for k in BENCH_STAGES}

    def controller(ctx, expert):
        if len(times["act"]) < n_ticks:
            t0 = time.perf_counter()
            frame = render_frame(ctx.state, track, cam, frame_id=ctx.tick)
            t1 = time.perf_counter()
            view = SimpleNamespace(tick=ctx.tick, t=ctx.t, state=ctx.state, reference=ctx.reference,
                                   state_history=ctx.state_history, frame=frame, frame_id=ctx.tick)
            obs = assembler(view)
            t2 = time.perf_counter()
            act(obs, model)
            t3 = time.perf_counter()
            times["render"].append(t1 - t0)
            times["visual"].append(timed.last)
            times["assemble"].append(t2 - t1 - timed.last)
            times["forward"].append(t3 - t2)
            times["act"].append(t3 - t0)
        e = expert.command(ctx.state)
        return ControlOutput(e, expert=e, source="expert")

    lap = 0
    while len(times["act"]) < n_ticks:
        ref = refs[lap % len(refs)]
        expert = MpcExpert(ref)
        assembler.reset()
        run_rollout(lambda ctx: controller(ctx, expert), track, ref, seed=seed + lap)
        lap += 1
    return {k: np.array(v[:n_ticks]) for k, v in times.items()}


def cmd_bench(args, cfg, out):
    from gazerace.policy import PolicyNet

    modalities = args.modality or ["attention", "tracks", "image"]
    policies = {}
    for path in args.policy:
        model, pcfg = _load_policy_file(cfg, path)
        policies[pcfg.modality] = model
    anet = _attention_net(cfg, args.attention_model, args.seed) if "attention" in modalities else None
    rows, over = [], []
    for m in modalities:
        model = policies.get(m) or PolicyNet(cfg.policy_config(m), args.seed).eval()
        times = bench_modality(cfg, m, model, anet, cfg.bench_ticks, args.seed)
        for stage in BENCH_STAGES:
            ms = 1000 * times[stage]
            rows.append([m, stage, f"{np.median(ms):.3f}", f"{np.percentile(ms, 95):.3f}", f"{ms.max():.3f}", len(ms)])
        p95 = float(np.percentile(1000 * times["act"], 95))
        if p95 > cfg.latency_budget_ms:
            over.append(m)
        flag = "OVER BUDGET" if p95 > cfg.latency_budget_ms else "ok"
        print(f"{m:<10} act p95 {p95:7.2f} ms (budget {cfg.latency_budget_ms:.0f} ms) {flag}")
    with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["modality", "stage", "p50_ms", "p95_ms", "max_ms", "ticks"])
        w.writerows(rows)
    if over:
        print(f"latency budget exceeded by: {', '.join(over)}")


def cmd_config_schema(args, cfg, out):
    schema = config_schema()
    _write_json(out / "config_schema.json", schema)
    print(json.dumps(schema, indent=2))


COMMANDS = {
    "make-track": cmd_make_track,
    "gen-reference": cmd_gen_reference,
    "gen-data": cmd_gen_data,
    "train-attention": cmd_train_attention,
    "eval-attention": cmd_eval_attention,
    "train-policy": cmd_train_policy,
    "evaluate": cmd_evaluate,
    "shadow-eval": cmd_shadow_eval,
    "bench": cmd_bench,
    "config-schema": cmd_config_schema,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\ngazerace: error: a subcommand is required")
        cfg = load_config(args.config)
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError(f"--jobs: must be positive, got {args.jobs}")
            cfg.jobs = args.jobs
        out = _prepare(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    except (ConfigError, OSError) as exc:
        print(f"gazerace: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg, out)
    except (ConfigError, nn.WeightFileError, FileNotFoundError) as exc:
        print(f"gazerace {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any stage failure maps to exit status 2
        log.exception("%s failed", args.command)
        print(f"gazerace {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
