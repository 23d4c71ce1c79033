"""End-to-end controller: temporal-conv branches over reference, state and visual windows plus a linear head."""

from dataclasses import asdict, dataclass, field

import numpy as np

from gazerace import nn
from gazerace.sim.dynamics import Command, QuadParams, clamp_command
from gazerace.sim.rollout import ControlOutput
from gazerace.tracks import N_TRACKS, FeatureTracker

MODALITIES = ("attention", "tracks", "image")
REF_HZ, STATE_HZ, VISION_HZ = 50, 100, 25


@dataclass
class PolicyConfig:
    modality: str = "attention"
    ref_window: float = 0.5  # seconds of reference at 50 Hz
    state_window: float = 0.5  # seconds of state at 100 Hz
    visual_window: float = 0.2  # seconds of visual features at 25 Hz
    temporal_channels: tuple = (64, 32, 32)
    temporal_kernel: int = 2
    head_widths: tuple = (256, 128, 64)
    point_width: int = 64
    image_channels: tuple = (16, 32, 32, 32)
    image_size: tuple = (128, 96)
    attention_features: int = 48
    velocity_scale: float = 5.0  # m/s mapped to 1 at the input
    rate_scale: float = 6.0  # rad/s mapped to 1 at the input

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality {self.modality!r} not in {MODALITIES}")
        self.temporal_channels = tuple(self.temporal_channels)
        self.head_widths = tuple(self.head_widths)
        self.image_channels = tuple(self.image_channels)
        self.image_size = tuple(self.image_size)
        for name in ("n_ref", "n_state", "n_visual"):
            if getattr(self, name) <= len(self.temporal_channels) * (self.temporal_kernel - 1):
                raise ValueError(f"{name} window too short for the temporal conv stack")

    @property
    def n_ref(self) -> int:
        return int(round(self.ref_window * REF_HZ))

    @property
    def n_state(self) -> int:
        return int(round(self.state_window * STATE_HZ))

    @property
    def n_visual(self) -> int:
        return int(round(self.visual_window * VISION_HZ))

    def visual_sample_shape(self):
        if self.modality == "attention":
            return (self.attention_features,)
        if self.modality == "tracks":
            return (N_TRACKS, 5)
        w, h = self.image_size
        return (h, w, 3)


@dataclass
class ObservationBundle:
    """Windows oldest-first: reference (25, 15), state (50, 15), visual (5, *sample shape)."""

    ref: np.ndarray
    state: np.ndarray
    visual: np.ndarray

    def validate(self, cfg: PolicyConfig):
        checks = (("reference", self.ref, (cfg.n_ref, 15)), ("state", self.state, (cfg.n_state, 15)),
                  ("visual", self.visual, (cfg.n_visual,) + cfg.visual_sample_shape()))
        for branch, arr, shape in checks:
            if arr.shape != shape:
                raise ValueError(f"{branch} branch expects {shape}, got {arr.shape}")
            if arr.dtype != np.uint8 and not np.all(np.isfinite(arr)):
                raise ValueError(f"{branch} window contains non-finite values")


def quats_to_rots(q) -> np.ndarray:
    """(n, 4) unit quaternions (w, x, y, z) to (n, 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=float).reshape(-1, 4)
    w, x, y, z = q.T
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=1).reshape(-1, 3, 3)


def state_features(q, v, w, cfg: PolicyConfig) -> np.ndarray:
    """(n, 15) rows of flattened rotation (9), scaled velocity (3), scaled body rates (3)."""
    r = quats_to_rots(q).reshape(-1, 9)
    return np.column_stack([r, np.asarray(v).reshape(-1, 3) / cfg.velocity_scale, np.asarray(w).reshape(-1, 3) / cfg.rate_scale])


def _temporal_stack(in_ch, cfg, rng):
    layers = []
    for ch in cfg.temporal_channels:
        layers += [nn.Conv1d(in_ch, ch, cfg.temporal_kernel, rng), nn.ReLU()]
        in_ch = ch
    return nn.Sequential(*layers, nn.MeanAxis(2))


class PointNetLite(nn.Module):
    """Shared per-point two-layer map followed by a max over the 40 points of each frame."""

    def __init__(self, width, rng):
        self.mlp = nn.Sequential(nn.Linear(5, width, rng), nn.ReLU(), nn.Linear(width, width, rng), nn.ReLU())
        self.pool = nn.MaxAxis(-2)

    def forward(self, x):  # (N, T, 40, 5) -> (N, width, T)
        return self.pool(self.mlp(x)).transpose(0, 2, 1)

    def backward(self, dy):
        return self.mlp.backward(self.pool.backward(dy.transpose(0, 2, 1)))


class FrameConv(nn.Module):
    """Per-frame conv stack (stride 2) flattened and stacked along the feature axis."""

    def __init__(self, cfg, rng):
        layers, c = [], 3
        for ch in cfg.image_channels:
            layers += [nn.Conv2d(c, ch, 3, rng, stride=2), nn.ReLU()]
            c = ch
        self.convs = nn.Sequential(*layers, nn.Flatten())
        w, h = cfg.image_size
        for _ in cfg.image_channels:
            w, h = (w - 1) // 2 + 1, (h - 1) // 2 + 1
        self.out_features = c * w * h

    def forward(self, x):  # (N, T, H, W, 3) uint8 -> (N, F, T)
        n, t = x.shape[:2]
        img = (np.asarray(x, dtype=nn.get_dtype()) / 255.0).reshape((n * t,) + x.shape[2:]).transpose(0, 3, 1, 2)
        self._nt = (n, t, x.shape)
        return self.convs(img).reshape(n, t, -1).transpose(0, 2, 1)

    def backward(self, dy):
        n, t, shape = self._nt
        d = self.convs.backward(np.ascontiguousarray(dy.transpose(0, 2, 1)).reshape(n * t, -1))
        return d.transpose(0, 2, 3, 1).reshape(shape)


class PolicyNet(nn.Module):
    def __init__(self, cfg: PolicyConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.ref_branch = _temporal_stack(15, cfg, rng)
        self.state_branch = _temporal_stack(15, cfg, rng)
        if cfg.modality == "attention":
            self.front = None
            vis_ch = cfg.attention_features
        elif cfg.modality == "tracks":
            self.front = PointNetLite(cfg.point_width, rng)
            vis_ch = cfg.point_width
        else:
            self.front = FrameConv(cfg, rng)
            vis_ch = self.front.out_features
        self.visual_branch = _temporal_stack(vis_ch, cfg, rng)
        layers, width = [], 3 * cfg.temporal_channels[-1]
        for hw in cfg.head_widths:
            layers += [nn.Linear(width, hw, rng), nn.ReLU()]
            width = hw
        self.head = nn.Sequential(*layers, nn.Linear(width, 4, rng))

    def forward(self, batch):
        """``batch`` = (ref (N,25,15), state (N,50,15), visual (N,5,...)) -> normalized commands (N,4)."""
        ref, state, vis = batch
        a = self.ref_branch(np.asarray(ref).transpose(0, 2, 1))
        b = self.state_branch(np.asarray(state).transpose(0, 2, 1))
        v = self.front(vis) if self.front is not None else np.asarray(vis).transpose(0, 2, 1)
        c = self.visual_branch(v)
        self._widths = (a.shape[1], b.shape[1])
        return self.head(np.concatenate([a, b, c], axis=1))

    def backward(self, dy):
        d = self.head.backward(dy)
        wa, wb = self._widths
        da = self.ref_branch.backward(d[:, :wa]).transpose(0, 2, 1)
        db = self.state_branch.backward(d[:, wa : wa + wb]).transpose(0, 2, 1)
        dv = self.visual_branch.backward(d[:, wa + wb :])
        dv = self.front.backward(dv) if self.front is not None else dv.transpose(0, 2, 1)
        return da, db, dv


def normalize_command(u, params: QuadParams = QuadParams()) -> np.ndarray:
    """(c, wx, wy, wz) -> ((c - g)/g, w/w_max); works on (4,) or (n, 4)."""
    u = np.asarray(u, dtype=float)
    return np.concatenate([(u[..., :1] - params.g) / params.g, u[..., 1:] / params.w_max], axis=-1)


def denormalize_command(y, params: QuadParams = QuadParams()) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return np.concatenate([params.g + params.g * y[..., :1], y[..., 1:] * params.w_max], axis=-1)


def stack_observations(obs_list):
    return (np.stack([o.ref for o in obs_list]), np.stack([o.state for o in obs_list]), np.stack([o.visual for o in obs_list]))


def forward_policy(obs: ObservationBundle, model: PolicyNet) -> np.ndarray:
    """Unclamped physical command (c, wx, wy, wz) for one observation."""
    obs.validate(model.cfg)
    model.eval()
    y = model.forward(stack_observations([obs]))[0]
    return denormalize_command(y)


def act(obs: ObservationBundle, model: PolicyNet, params: QuadParams = QuadParams()) -> Command:
    """forward_policy followed by clamping; non-finite outputs fall back to hover and are flagged."""
    u = forward_policy(obs, model)
    return clamp_command(Command.from_array(u), params)


class VisualFrontEnd:
    """Turns a rendered frame into one visual sample for the configured modality."""

    def __init__(self, cfg: PolicyConfig, attention_net=None, seed: int = 0):
        self.cfg = cfg
        if cfg.modality == "attention" and attention_net is None:
            raise ValueError("attention modality needs an attention network")
        self.attention_net = attention_net
        w, h = cfg.image_size
        self.tracker = FeatureTracker(w, h, seed=seed) if cfg.modality == "tracks" else None

    def reset(self):
        if self.tracker is not None:
            self.tracker.reset()

    def __call__(self, pixels, ticks=1):
        if self.cfg.modality == "attention":
            from gazerace.attention_net import encoder_features

            return encoder_features(self.attention_net, pixels).astype(np.float32)
        if self.cfg.modality == "tracks":
            return self.tracker.update(pixels, ticks).values.astype(np.float32)
        return np.asarray(pixels, dtype=np.uint8)


@dataclass
class ObservationAssembler:
    """Builds ObservationBundles from rollout tick contexts; one instance per rollout."""

    cfg: PolicyConfig
    front_end: VisualFrontEnd
    _visual: list = field(default_factory=list)
    _last_frame: int = -1
    _last_tick: int = 0

    def reset(self):
        self._visual = []
        self._last_frame = -1
        self._last_tick = 0
        self.front_end.reset()

    def __call__(self, ctx) -> ObservationBundle:
        cfg = self.cfg
        if ctx.reference is None:
            raise ValueError("policy observations need a reference trajectory")
        t_start = float(ctx.reference.t[0])
        times = ctx.t - np.arange(cfg.n_ref - 1, -1, -1) / REF_HZ
        _, v, q, w = ctx.reference.sample(np.maximum(times, t_start))
        ref = state_features(q, v, w, cfg)
        hist = ctx.state_history(cfg.n_state)
        state = state_features(hist[:, 6:10], hist[:, 3:6], hist[:, 10:13], cfg)
        if ctx.frame_id != self._last_frame:
            ticks = ctx.tick - self._last_tick if self._last_frame >= 0 else 1
            sample = self.front_end(ctx.frame.pixels, ticks)
            self._visual.append(sample)
            self._visual = self._visual[-cfg.n_visual :]
            self._last_frame, self._last_tick = ctx.frame_id, ctx.tick
        vis = self._visual
        if len(vis) < cfg.n_visual:
            vis = [vis[0]] * (cfg.n_visual - len(vis)) + vis
        dtype = np.uint8 if cfg.modality == "image" else np.float32
        return ObservationBundle(ref.astype(np.float32), state.astype(np.float32), np.stack(vis).astype(dtype))


class PolicyController:
    """Rollout controller that flies the network; optional ``expert`` is queried for labels only."""

    def __init__(self, model: PolicyNet, assembler: ObservationAssembler, params: QuadParams = QuadParams(), expert=None):
        self.model, self.assembler, self.params, self.expert = model, assembler, params, expert
        self.observations = []

    def __call__(self, ctx):
        obs = self.assembler(ctx)
        u = act(obs, self.model, self.params)
        label = self.expert(ctx).command if self.expert is not None else None
        return ControlOutput(u, expert=label, source="policy")


def make_assembler(cfg: PolicyConfig, attention_net=None, seed: int = 0) -> ObservationAssembler:
    return ObservationAssembler(cfg, VisualFrontEnd(cfg, attention_net, seed))


def save_policy(model: PolicyNet, path):
    nn.save_file(model, path, tag=f"modality={model.cfg.modality}")


def load_policy(path, cfg: PolicyConfig) -> PolicyNet:
    model = PolicyNet(cfg, 0)
    nn.load_file(model, path, tag=f"modality={cfg.modality}")
    return model.eval()


def config_dict(cfg: PolicyConfig):
    return asdict(cfg)
