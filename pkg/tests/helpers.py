"""Shared gradient-check drivers for the layer suite and the full policy graph."""

import numpy as np

from gazerace import nn
from gazerace.policy import PolicyConfig, PolicyNet

SMALL_POLICY = dict(
    temporal_channels=(6, 5, 4),
    head_widths=(12, 8, 6),
    point_width=6,
    image_channels=(3, 4),
    image_size=(12, 8),
    attention_features=7,
)


def layer_cases(rng):
    """(name, module, input) for every layer kind, at small random shapes."""
    return [
        ("linear", nn.Linear(5, 4, rng), rng.standard_normal((3, 2, 5))),
        ("conv2d", nn.Conv2d(3, 4, 3, rng), rng.standard_normal((2, 3, 6, 5))),
        ("conv2d-stride2", nn.Conv2d(2, 3, 3, rng, stride=2), rng.standard_normal((2, 2, 7, 6))),
        ("conv2d-1x1", nn.Conv2d(3, 2, 1, rng), rng.standard_normal((2, 3, 4, 4))),
        ("conv1d", nn.Conv1d(3, 4, 2, rng), rng.standard_normal((2, 3, 6))),
        ("batchnorm2d", nn.BatchNorm2d(3), rng.standard_normal((4, 3, 3, 3))),
        ("relu", nn.ReLU(), rng.standard_normal((2, 3, 4, 4))),
        ("maxpool2d", nn.MaxPool2d(2), rng.standard_normal((2, 2, 6, 4))),
        ("upsample", nn.Upsample(2), rng.standard_normal((2, 2, 3, 3))),
        ("crop2d", nn.Crop2d(3, 2), rng.standard_normal((2, 2, 4, 4))),
        ("spatial-softmax", nn.SpatialSoftmax(), rng.standard_normal((2, 1, 4, 5))),
        ("spatial-log-softmax", nn.SpatialLogSoftmax(), rng.standard_normal((2, 1, 4, 5))),
        ("flatten", nn.Flatten(), rng.standard_normal((2, 3, 2, 2))),
        ("mean-axis", nn.MeanAxis(2), rng.standard_normal((2, 3, 5))),
        ("max-axis", nn.MaxAxis(-2), rng.standard_normal((2, 3, 6, 4))),
        ("residual-block", nn.ResidualBlock(2, 3, 2, rng), rng.standard_normal((2, 2, 6, 6))),
        ("residual-identity", nn.ResidualBlock(3, 3, 1, rng), rng.standard_normal((2, 3, 4, 4))),
    ]


def policy_inputs(cfg: PolicyConfig, n, rng):
    ref = rng.standard_normal((n, cfg.n_ref, 15))
    state = rng.standard_normal((n, cfg.n_state, 15))
    shape = (n, cfg.n_visual) + cfg.visual_sample_shape()
    vis = rng.integers(0, 256, shape).astype(np.uint8) if cfg.modality == "image" else rng.standard_normal(shape)
    return ref, state, vis


def policy_gradcheck(modality, seed=0, h=1e-5):
    """Max relative error per parameter (and per differentiable input) of the whole policy graph, in float64."""
    rng = np.random.default_rng(seed)
    with nn.precision(np.float64):
        cfg = PolicyConfig(modality=modality, **SMALL_POLICY)
        model = PolicyNet(cfg, seed)
        # zero-initialized biases put fully dead positions exactly on the ReLU kink
        for name, p in model.named_params():
            if name.endswith("bias"):
                p.data[...] = rng.uniform(-0.1, 0.1, p.shape)
        batch = policy_inputs(cfg, 2, rng)
        out = model.forward(batch)
        r = rng.standard_normal(out.shape)

        def loss():
            return float(np.sum(r * model.forward(batch)))

        model.zero_grad()
        model.forward(batch)
        d_ref, d_state, d_vis = model.backward(r)
        errors = {
            "input.ref": nn.relative_error(d_ref, nn.numeric_grad(loss, batch[0], h)),
            "input.state": nn.relative_error(d_state, nn.numeric_grad(loss, batch[1], h)),
        }
        if modality != "image":
            errors["input.visual"] = nn.relative_error(d_vis, nn.numeric_grad(loss, batch[2], h))
        for name, p in model.named_params():
            errors[name] = nn.relative_error(p.grad.copy(), nn.numeric_grad(loss, p.data, h))
    return errors


def direct_attention_map(fixations, source=(800, 600), out=(128, 96), var=(200.0, 200.0)):
    """Max-of-Gaussians map evaluated pixel by pixel from the full bivariate density (no log domain, no separability)."""
    w, h = out
    rx, ry = w / source[0], h / source[1]
    vx, vy = var[0] * rx**2, var[1] * ry**2
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    best = np.zeros((h, w))
    for fx, fy in fixations:
        cx, cy = (fx + 0.5) * rx - 0.5, (fy + 0.5) * ry - 0.5
        dens = np.exp(-0.5 * ((xs - cx) ** 2 / vx + (ys - cy) ** 2 / vy)) / (2 * np.pi * np.sqrt(vx * vy))
        best = np.maximum(best, dens)
    return best / best.sum()
