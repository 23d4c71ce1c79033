"""Encoder-decoder attention predictor and its training loop."""

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from gazerace import nn
from gazerace.gaze import AttentionMap, baseline_mean_map, baseline_shuffle, kl_divergence, pearson_cc
from gazerace.render import Frame


@dataclass
class AttentionNetConfig:
    width: int = 128
    height: int = 96
    base_channels: int = 16
    epochs: int = 5
    batch_size: int = 128
    lr: float = 2e-4
    augment: bool = True
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.width % 16 or self.height % 4:
            raise ValueError(f"resolution {self.width}x{self.height}: width must be a multiple of 16 and height of 4")
        if self.base_channels < 1 or self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid attention-net hyperparameters")

    @property
    def feature_shape(self):
        """(rows, cols) of the final encoder map (stem conv, max pool, two strided blocks)."""
        h, w = -(-self.height // 2) // 2, -(-self.width // 2) // 2
        for _ in range(2):
            h, w = -(-h // 2), -(-w // 2)
        return h, w

    @property
    def feature_length(self) -> int:
        h, w = self.feature_shape
        return h * w


class AttentionNet(nn.Module):
    """ResNet-style encoder (/16) and an upsampling decoder ending in a spatial log-softmax."""

    def __init__(self, cfg: AttentionNetConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.base_channels
        self.stem = nn.Sequential(nn.Conv2d(3, c, 3, rng, stride=2, bias=False), nn.BatchNorm2d(c), nn.ReLU(), nn.MaxPool2d(2))
        self.block1 = nn.ResidualBlock(c, c, 1, rng)
        self.block2 = nn.ResidualBlock(c, 2 * c, 2, rng)
        self.block3 = nn.ResidualBlock(2 * c, 4 * c, 2, rng)
        self.block4 = nn.ResidualBlock(4 * c, 8 * c, 1, rng)
        self.decoder = nn.Sequential(
            nn.Upsample(2), nn.Conv2d(8 * c, 4 * c, 3, rng), nn.ReLU(),
            nn.Upsample(2), nn.Conv2d(4 * c, 2 * c, 3, rng), nn.ReLU(),
            nn.Upsample(2), nn.Conv2d(2 * c, c, 3, rng), nn.ReLU(),
            nn.Upsample(2), nn.Conv2d(c, 1, 1, rng, padding=0),
            nn.Crop2d(cfg.height, cfg.width),
        )
        self.head = nn.SpatialLogSoftmax()
        # small logit head: the untrained map starts close to uniform instead of
        # amplifying whatever random structure the He-initialized stack produces
        self.decoder.layers[-2].weight.data *= 0.1

    def encode(self, x):
        h = self.stem(x)
        for b in (self.block1, self.block2, self.block3, self.block4):
            h = b(h)
        return h

    def forward(self, x):
        """Log attention probabilities, shape (N, 1, H, W)."""
        return self.head(self.decoder(self.encode(x)))

    def backward(self, dy):
        d = self.decoder.backward(self.head.backward(dy))
        for b in (self.block4, self.block3, self.block2, self.block1):
            d = b.backward(d)
        return self.stem.backward(d)


def frames_to_input(pixels) -> np.ndarray:
    """uint8 (N,H,W,3) or a single (H,W,3) image -> float NCHW tensor in [0, 1]."""
    px = np.asarray(pixels)
    if px.ndim == 3:
        px = px[None]
    return (px.astype(nn.get_dtype()) / 255.0).transpose(0, 3, 1, 2)


def _check_frame(net, frame):
    px = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    if px.shape[:2] != (net.cfg.height, net.cfg.width):
        raise ValueError(f"frame {px.shape[1]}x{px.shape[0]} does not match network {net.cfg.width}x{net.cfg.height}")
    return px


def predict_attention(net: AttentionNet, frame) -> AttentionMap:
    net.eval()
    logp = net.forward(frames_to_input(_check_frame(net, frame)))[0, 0].astype(np.float64)
    p = np.exp(logp)
    return AttentionMap(p / p.sum())


def predict_batch(net: AttentionNet, pixels, batch=64) -> np.ndarray:
    net.eval()
    out = []
    for i in range(0, len(pixels), batch):
        out.append(np.exp(net.forward(frames_to_input(pixels[i : i + batch]))[:, 0].astype(np.float64)))
    return np.concatenate(out)


def encoder_features(net: AttentionNet, frame) -> np.ndarray:
    """Channel-mean of the last encoder block, flattened row-major."""
    net.eval()
    h = net.encode(frames_to_input(_check_frame(net, frame)))
    return h.mean(axis=1).reshape(-1)


def encoder_features_batch(net: AttentionNet, pixels) -> np.ndarray:
    net.eval()
    h = net.encode(frames_to_input(pixels))
    return h.mean(axis=1).reshape(h.shape[0], -1)


@dataclass
class AugmentConfig:
    p_brightness: float = 0.5
    p_contrast: float = 0.5
    p_saturation: float = 0.5
    p_hue: float = 0.5
    p_noise: float = 0.5
    p_blur: float = 0.5
    p_erase: float = 0.5

    @classmethod
    def off(cls):
        return cls(0, 0, 0, 0, 0, 0, 0)


_LUMA = np.array([0.299, 0.587, 0.114])


def augment(pixels, seed, cfg: AugmentConfig = AugmentConfig()):
    """Photometric augmentation of a uint8 (H,W,3) image; geometry is never changed.

    Returns the augmented image and the list of transforms applied.
    """
    rng = np.random.default_rng(seed)
    img = np.asarray(pixels, dtype=np.float64) / 255.0
    applied = []
    # draw every decision up front so the stream does not depend on which transforms fire
    draws = rng.random(7)
    if draws[0] < cfg.p_brightness:
        img = img * rng.uniform(0.7, 1.3)
        applied.append("brightness")
    if draws[1] < cfg.p_contrast:
        m = img.mean()
        img = (img - m) * rng.uniform(0.7, 1.3) + m
        applied.append("contrast")
    if draws[2] < cfg.p_saturation:
        gray = (img @ _LUMA)[..., None]
        img = gray + (img - gray) * rng.uniform(0.6, 1.4)
        applied.append("saturation")
    if draws[3] < cfg.p_hue:
        img = _rotate_hue(img, rng.uniform(-0.3, 0.3))
        applied.append("hue")
    if draws[4] < cfg.p_noise:
        img = img + rng.normal(0.0, rng.uniform(0.01, 0.05), img.shape)
        applied.append("noise")
    if draws[5] < cfg.p_blur:
        img = gaussian_filter(img, sigma=(rng.uniform(0.3, 1.2),) * 2 + (0,))
        applied.append("blur")
    if draws[6] < cfg.p_erase:
        h, w = img.shape[:2]
        area = rng.uniform(0.05, 0.20) * h * w
        aspect = rng.uniform(0.5, 2.0)
        eh = int(np.clip(round(np.sqrt(area / aspect)), 1, h))
        ew = int(np.clip(round(area / eh), 1, w))
        y0, x0 = rng.integers(0, h - eh + 1), rng.integers(0, w - ew + 1)
        img[y0 : y0 + eh, x0 : x0 + ew] = 0.5
        applied.append("erase")
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8), applied


def _rotate_hue(img, angle):
    """Rotate chroma in YIQ space by ``angle`` (radians)."""
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return img @ m.T


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AttentionDataset:
    pixels: np.ndarray  # (N, H, W, 3) uint8
    maps: np.ndarray  # (N, H, W) float, each sums to 1
    lap_ids: np.ndarray = None  # (N,) lap index per frame

    def __post_init__(self):
        if len(self.pixels) == 0:
            raise ValueError("empty attention dataset")
        if len(self.pixels) != len(self.maps):
            raise ValueError("frames and maps differ in count")
        if self.lap_ids is None:
            self.lap_ids = np.zeros(len(self.pixels), dtype=int)

    def __len__(self):
        return len(self.pixels)

    def subset(self, idx):
        return AttentionDataset(self.pixels[idx], self.maps[idx], self.lap_ids[idx])

    def split(self, val_fraction):
        """Hold out the trailing ``val_fraction`` of frames (temporally disjoint from training)."""
        n = len(self)
        if n < 2:
            raise ValueError("need at least two frames to split")
        n_val = min(n - 1, max(1, int(round(val_fraction * n))))
        return self.subset(np.arange(n - n_val)), self.subset(np.arange(n - n_val, n))


@dataclass
class EpochRecord:
    epoch: int
    train_kl: float
    val_kl: float
    val_cc: float
    seconds: float


@dataclass
class TrainResult:
    net: AttentionNet
    history: list = field(default_factory=list)

    def final(self):
        return self.history[-1]


def evaluate_maps(pred, truth):
    """Per-frame KL and CC lists (natural log; undefined CC is NaN)."""
    kl = [kl_divergence(t, p) for p, t in zip(pred, truth)]
    cc = [pearson_cc(t, p) for p, t in zip(pred, truth)]
    return np.array(kl), np.array(cc)


def train_attention(data: AttentionDataset, cfg: AttentionNetConfig, seed: int = 0, val: AttentionDataset = None,
                    augment_cfg: AugmentConfig = None, log=None, net: AttentionNet = None):
    """Minimize the attention KL with Adam; logs train KL and validation KL/CC per epoch."""
    if len(data) == 0:
        raise ValueError("empty training set")
    if augment_cfg is None:
        augment_cfg = AugmentConfig() if cfg.augment else AugmentConfig.off()
    net = net or AttentionNet(cfg, seed)
    opt = nn.Adam(net.params(), lr=cfg.lr)
    rng = np.random.default_rng(seed)
    result = TrainResult(net)
    batch_id = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        net.train()
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            px = data.pixels[idx]
            if cfg.augment:
                seeds = rng.integers(0, 2**63 - 1, size=len(idx))
                px = np.stack([augment(p, int(s), augment_cfg)[0] for p, s in zip(px, seeds)])
            target = data.maps[idx][:, None].astype(nn.get_dtype())
            opt.zero_grad()
            logp = net.forward(frames_to_input(px))
            with np.errstate(divide="ignore", invalid="ignore"):
                ent = np.where(target > 0, target * np.log(target), 0.0)
            loss = float(np.sum(ent - target * logp)) / len(idx)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite attention loss at epoch {epoch}, batch {batch_id}")
            net.backward(-target / len(idx))
            opt.step()
            total += loss * len(idx)
            count += len(idx)
            batch_id += 1
        rec = EpochRecord(epoch, total / count, float("nan"), float("nan"), 0.0)
        if val is not None and len(val):
            kl, cc = evaluate_maps(predict_batch(net, val.pixels), val.maps)
            rec.val_kl = float(np.mean(kl[np.isfinite(kl)]))
            rec.val_cc = float(np.nanmean(cc))
        rec.seconds = time.perf_counter() - t0
        result.history.append(rec)
        if log:
            log(rec)
    net.eval()
    return result


def baseline_scores(train: AttentionDataset, val: AttentionDataset, seed: int = 0):
    """KL/CC of the mean-map and within-lap shuffle baselines on ``val``."""
    mean = baseline_mean_map(list(train.maps)).values
    kl_m, cc_m = evaluate_maps([mean] * len(val), val.maps)
    boundaries = [0] + [i for i in range(1, len(val)) if val.lap_ids[i] != val.lap_ids[i - 1]]
    perm = baseline_shuffle(len(val), boundaries, seed)
    kl_s, cc_s = evaluate_maps(val.maps[perm], val.maps)
    return {
        "mean": {"kl": _finite_mean(kl_m), "cc": float(np.nanmean(cc_m)), "kl_inf": int(np.isinf(kl_m).sum())},
        "shuffle": {"kl": _finite_mean(kl_s), "cc": float(np.nanmean(cc_s)), "kl_inf": int(np.isinf(kl_s).sum())},
    }


def _finite_mean(v):
    f = v[np.isfinite(v)]
    return float(f.mean()) if f.size else float("inf")


def write_manifest(path, pairs):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_file", "attention_file"])
        w.writerows(pairs)


def read_manifest(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["frame_file"], r["attention_file"]) for r in csv.DictReader(fh)]


def config_dict(cfg: AttentionNetConfig):
    return asdict(cfg)


def save_model(net: AttentionNet, path):
    nn.save_file(net, path)


def load_model(path, cfg: AttentionNetConfig) -> AttentionNet:
    net = AttentionNet(cfg, 0)
    nn.load_file(net, Path(path))
    return net.eval()
