import numpy as np
import pytest

from gazerace.attention_net import (
    AttentionDataset,
    AttentionNet,
    AttentionNetConfig,
    AugmentConfig,
    TrainingDiverged,
    augment,
    baseline_scores,
    encoder_features,
    encoder_features_batch,
    load_model,
    predict_attention,
    predict_batch,
    read_manifest,
    save_model,
    train_attention,
    write_manifest,
)
from gazerace.gaze import FixationWindow, build_attention_map
from gazerace.render import CameraModel, render_frame
from gazerace.sim import QuadState
from gazerace.sim.rotations import quat_from_euler

CFG = AttentionNetConfig()


@pytest.fixture(scope="module")
def net():
    return AttentionNet(CFG, seed=0).eval()


@pytest.fixture(scope="module")
def frames(figure8):
    out = []
    for i in range(16):
        s = QuadState(0.0, [-8 + i, 0.5 * i - 3, 2.0], np.zeros(3), quat_from_euler(0, 0, 0.4 * i))
        out.append(render_frame(s, figure8, CameraModel()).pixels)
    return np.stack(out)


def tiny_dataset(frames, rng):
    maps = []
    for _ in frames:
        fix = rng.uniform([100, 100], [700, 500], size=(3, 2))
        maps.append(build_attention_map(FixationWindow(fix), (128, 96)).values.astype(np.float32))
    return AttentionDataset(frames, np.stack(maps), np.repeat([0, 1], len(frames) // 2))


def test_paper_scale_defaults():
    assert (CFG.epochs, CFG.batch_size, CFG.lr) == (5, 128, 2e-4)


@pytest.mark.parametrize("size, length", [((128, 96), 48), ((400, 300), 475)])
def test_encoder_feature_length(size, length):
    cfg = AttentionNetConfig(*size)
    assert cfg.feature_length == length
    net = AttentionNet(cfg, 0).eval()
    feats = encoder_features(net, np.zeros((size[1], size[0], 3), dtype=np.uint8))
    assert feats.shape == (length,)


def test_decoder_output_matches_input_resolution(net, frames):
    logp = net.forward(np.asarray(frames[:2], dtype=np.float32).transpose(0, 3, 1, 2) / 255.0)
    assert logp.shape == (2, 1, 96, 128)


def test_prediction_is_a_distribution(net, frames, rng):
    for px in (frames[0], rng.integers(0, 256, (96, 128, 3), dtype=np.uint8)):
        m = predict_attention(net, px)
        assert m.values.sum() == pytest.approx(1.0, abs=1e-5)
        assert np.all(m.values >= 0)


def test_untrained_gray_input_is_near_uniform(net):
    m = predict_attention(net, np.full((96, 128, 3), 128, dtype=np.uint8)).values
    assert m.max() / m.min() < 10


def test_wrong_resolution_rejected(net):
    with pytest.raises(ValueError):
        predict_attention(net, np.zeros((60, 80, 3), dtype=np.uint8))


def test_batch_prediction_matches_single(net, frames):
    batch = predict_batch(net, frames[:3])
    for i in range(3):
        assert np.allclose(batch[i], predict_attention(net, frames[i]).values, atol=1e-6)
    feats = encoder_features_batch(net, frames[:3])
    assert np.allclose(feats[1], encoder_features(net, frames[1]), atol=1e-5)


def test_different_frames_give_different_features(net, frames):
    assert not np.allclose(encoder_features(net, frames[0]), encoder_features(net, frames[5]))


# ---- augmentation


def test_augment_off_is_identity(frames):
    img, applied = augment(frames[0], 3, AugmentConfig.off())
    assert applied == []
    assert np.array_equal(img, frames[0])


def test_augment_is_seeded(frames):
    a, la = augment(frames[0], 11)
    b, lb = augment(frames[0], 11)
    assert la == lb and np.array_equal(a, b)


def test_erase_sets_a_gray_rectangle(frames):
    only_erase = AugmentConfig(0, 0, 0, 0, 0, 0, 1.0)
    src = np.zeros((96, 128, 3), dtype=np.uint8)  # black input makes the gray patch unambiguous
    for seed in range(10):
        img, applied = augment(src, seed, only_erase)
        assert applied == ["erase"]
        mask = np.all(img == 128, axis=-1)
        rows, cols = np.nonzero(mask)
        box = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
        assert box == mask.sum()  # a filled rectangle
        assert 0.05 * 96 * 128 * 0.9 <= mask.sum() <= 0.20 * 96 * 128 * 1.1


def test_each_transform_fires_about_half_the_time(frames):
    counts = {}
    for seed in range(400):
        for name in augment(frames[0], seed)[1]:
            counts[name] = counts.get(name, 0) + 1
    assert set(counts) == {"brightness", "contrast", "saturation", "hue", "noise", "blur", "erase"}
    assert all(140 <= c <= 260 for c in counts.values()), counts


def test_augment_keeps_geometry(frames):
    # photometric changes only: the gate pixels stay where they were
    only_colour = AugmentConfig(1.0, 1.0, 0, 0, 0, 0, 0)
    img, _ = augment(frames[3], 5, only_colour)
    sky = np.all(frames[3] == frames[3][0, 0], axis=-1)
    assert np.all(np.all(img[sky] == img[sky][0], axis=-1))


# ---- training


def test_split_holds_out_trailing_frames(frames, rng):
    data = tiny_dataset(frames, rng)
    train, val = data.split(0.25)
    assert (len(train), len(val)) == (12, 4)
    assert np.array_equal(val.pixels, frames[12:])


def test_training_is_deterministic_without_augmentation(frames, rng):
    data = tiny_dataset(frames, rng)
    cfg = AttentionNetConfig(epochs=1, batch_size=8, augment=False)
    a = train_attention(data, cfg, seed=4).final()
    b = train_attention(data, cfg, seed=4).final()
    assert a.train_kl == b.train_kl


def test_training_reduces_loss_and_logs_validation(frames, rng):
    data = tiny_dataset(frames, rng)
    train, val = data.split(0.25)
    cfg = AttentionNetConfig(epochs=3, batch_size=4, lr=1e-3, augment=False)
    res = train_attention(train, cfg, seed=0, val=val)
    assert len(res.history) == 3
    assert res.history[-1].train_kl < res.history[0].train_kl
    assert np.isfinite(res.final().val_kl) and -1 <= res.final().val_cc <= 1


def test_divergence_reports_batch(frames, rng):
    data = tiny_dataset(frames, rng)
    data.maps[0, 0, 0] = np.nan
    cfg = AttentionNetConfig(epochs=1, batch_size=16, augment=False)
    with pytest.raises(TrainingDiverged, match="batch 0"):
        train_attention(data, cfg, seed=0)


def test_baseline_scores_shape(frames, rng):
    train, val = tiny_dataset(frames, rng).split(0.5)
    scores = baseline_scores(train, val, seed=0)
    assert set(scores) == {"mean", "shuffle"}
    assert all(set(s) == {"kl", "cc", "kl_inf"} for s in scores.values())
    assert 0 <= scores["mean"]["kl_inf"] <= len(val)


def test_model_round_trip(tmp_path, net, frames):
    save_model(net, tmp_path / "att.nnw")
    back = load_model(tmp_path / "att.nnw", CFG)
    assert np.array_equal(predict_batch(back, frames[:2]), predict_batch(net, frames[:2]))


def test_manifest_round_trip(tmp_path):
    pairs = [("frames.pack#0", "attention/000000.attm"), ("frames.pack#1", "attention/000001.attm")]
    write_manifest(tmp_path / "m.csv", pairs)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "frame_file,attention_file"
    assert read_manifest(tmp_path / "m.csv") == pairs
