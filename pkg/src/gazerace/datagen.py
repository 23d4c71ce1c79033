"""Synthetic gaze datasets: expert laps rendered per control tick with gaze on the upcoming gate."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gazerace.expert.mpc import MpcExpert
from gazerace.gaze import (
    HALF_WINDOW,
    SOURCE_RESOLUTION,
    AttentionMap,
    FixationWindow,
    GazeRecord,
    build_attention_map,
    load_gaze_csv,
    synth_gaze_oracle,
    write_gaze_csv,
)
from gazerace.attention_net import read_manifest, write_manifest
from gazerace.render import CameraModel, Frame, read_packed, render_frame, write_packed
from gazerace.sim.dynamics import QuadState
from gazerace.sim.rollout import RateConfig, run_rollout


@dataclass
class GazeDataset:
    pixels: np.ndarray  # (N, H, W, 3) uint8
    maps: np.ndarray  # (N, H, W) float32
    gaze: list  # GazeRecord per frame, source-resolution pixels
    lap_ids: np.ndarray
    reference_ids: list
    ticks: np.ndarray

    def __len__(self):
        return len(self.pixels)

    @property
    def inside_fraction(self) -> float:
        return float(np.mean([not g.clamped for g in self.gaze])) if self.gaze else float("nan")


def lap_gaze(log, track, cam: CameraModel, source_size=SOURCE_RESOLUTION):
    """Per-tick gaze for a flown lap, in ``source_size`` pixels; also returns the states."""
    src_cam = cam.scaled(*source_size)
    gates_done = np.concatenate([[0], np.cumsum(log.gate_event >= 0)[:-1]])
    states, gaze = [], []
    for i, x in enumerate(log.states):
        s = QuadState.from_array(log.t[i], x)
        states.append(s)
        nxt = min(int(gates_done[i]), len(track.gates) - 1)
        gaze.append(synth_gaze_oracle(s, track, nxt, src_cam, frame=i))
    return states, gaze


def generate_gaze_dataset(track, references, n_frames: int, cam: CameraModel = CameraModel(), seed: int = 0,
                          half_window: int = HALF_WINDOW, start_jitter: float = 0.1,
                          rates: RateConfig = RateConfig()) -> GazeDataset:
    """Fly the expert on references (round-robin) until ``n_frames`` control-tick frames are collected."""
    if n_frames < 1:
        raise ValueError("n_frames must be positive")
    pixels, maps, gaze, laps, refs, ticks = [], [], [], [], [], []
    lap = 0
    while len(pixels) < n_frames:
        ref = references[lap % len(references)]
        lap_seed = int(np.random.SeedSequence([seed, lap]).generate_state(1)[0])
        log = run_rollout(MpcExpert(ref, control_dt=1.0 / rates.control_hz), track, ref, rates, seed=lap_seed,
                          start_jitter=start_jitter)
        states, lap_g = lap_gaze(log, track, cam)
        xy = np.array([[g.x, g.y] for g in lap_g])
        take = min(len(states), n_frames - len(pixels))
        for i in range(take):
            lo, hi = max(0, i - half_window), min(len(states), i + half_window + 1)
            win = FixationWindow(xy[lo:hi], SOURCE_RESOLUTION)
            maps.append(build_attention_map(win, (cam.width, cam.height)).values.astype(np.float32))
            pixels.append(render_frame(states[i], track, cam, frame_id=len(pixels)).pixels)
            # dataset time runs on across laps; the lap-local tick is kept in ``ticks``
            gaze.append(GazeRecord(len(gaze) / rates.control_hz, len(gaze), lap_g[i].x, lap_g[i].y, lap_g[i].clamped))
            laps.append(lap)
            refs.append(ref.name)
            ticks.append(i)
        lap += 1
    maps_arr = np.stack(maps)
    maps_arr /= maps_arr.sum(axis=(1, 2), keepdims=True)
    return GazeDataset(np.stack(pixels), maps_arr, gaze, np.array(laps), refs, np.array(ticks))


FRAMES_FILE = "frames.pack"
INDEX_HEADER = ["frame", "lap", "reference", "tick", "gaze_clamped"]


def save_dataset(ds: GazeDataset, out_dir) -> Path:
    """Packed frames, one ATTM file per frame, the frame/map manifest, the gaze log and a per-frame index."""
    out = Path(out_dir)
    (out / "attention").mkdir(parents=True, exist_ok=True)
    h, w = ds.pixels.shape[1:3]
    write_packed(out / FRAMES_FILE, (Frame(w, h, px, i) for i, px in enumerate(ds.pixels)))
    pairs = []
    for i, m in enumerate(ds.maps):
        name = f"attention/{i:06d}.attm"
        AttentionMap(m).save(out / name)
        pairs.append((f"{FRAMES_FILE}#{i}", name))
    write_manifest(out / "manifest.csv", pairs)
    write_gaze_csv(out / "gaze.csv", ds.gaze)
    with open(out / "index.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(INDEX_HEADER)
        for i in range(len(ds)):
            wr.writerow([i, int(ds.lap_ids[i]), ds.reference_ids[i], int(ds.ticks[i]), int(ds.gaze[i].clamped)])
    return out


def load_dataset(data_dir) -> GazeDataset:
    """Inverse of :func:`save_dataset`."""
    root = Path(data_dir)
    if not (root / "manifest.csv").exists():
        raise FileNotFoundError(f"{root}: no manifest.csv (run gen-data first)")
    packs, pixels, maps = {}, [], []
    for frame_ref, att_file in read_manifest(root / "manifest.csv"):
        pack, _, idx = frame_ref.partition("#")
        if pack not in packs:
            packs[pack] = read_packed(root / pack)
        pixels.append(packs[pack][int(idx or 0)])
        maps.append(AttentionMap.load(root / att_file).values.astype(np.float32))
    gaze = load_gaze_csv(root / "gaze.csv")
    with open(root / "index.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not (len(rows) == len(pixels) == len(gaze)):
        raise ValueError(f"{root}: manifest, gaze log and index disagree in length")
    for g, r in zip(gaze, rows):
        g.clamped = bool(int(r["gaze_clamped"]))
    return GazeDataset(np.stack(pixels), np.stack(maps), gaze, np.array([int(r["lap"]) for r in rows]),
                       [r["reference"] for r in rows], np.array([int(r["tick"]) for r in rows]))
