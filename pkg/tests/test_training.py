import zipfile

import numpy as np
import pytest
import torch

from octanet.core import AnnotationSet, ConfigError, DataError
from octanet.data.dataset import Sample
from octanet.data.synth import SynthParams, synth_samples
from octanet.nn.coarse import CoarseNetConfig, coarse_forward
from octanet.nn.fine import SrsConfig, srs_refine
from octanet.training import (
    TrainConfig,
    augment,
    dice_loss,
    load_checkpoint,
    mse_loss,
    poly_lr,
    restore_coarse,
    restore_srs,
    rotate_pair,
    save_checkpoint,
    train_coarse,
    train_fine,
    write_log,
)

from conftest import fd_rel_error

TINY = CoarseNetConfig.preset("tiny")


@pytest.fixture(scope="module")
def samples():
    return synth_samples(2, SynthParams(size=64, noise=0.1), first_seed=3)


@pytest.fixture(scope="module")
def coarse_run(samples):
    return train_coarse(TrainConfig(epochs=3, seed=1), samples, TINY)


# ------------------------------------------------------------------------- losses

def test_mse_examples():
    g = torch.tensor([1.0, 0.0])
    assert mse_loss(g, g).item() == 0
    assert mse_loss(torch.ones(4), torch.zeros(4)).item() == 1
    assert mse_loss(torch.tensor([0.5, 0.0]), g).item() == pytest.approx(0.125)


def test_dice_examples():
    g = torch.tensor([1.0, 0.0, 1.0, 0.0])
    assert dice_loss(g, g).item() == pytest.approx(0.0, abs=1e-6)
    assert dice_loss(torch.zeros(4), torch.zeros(4)).item() == 0.0
    assert dice_loss(torch.ones(4), g).item() == pytest.approx(1 / 3, abs=1e-6)
    with pytest.raises(ValueError):
        dice_loss(g, g, eps=0)
    with pytest.raises(ValueError):
        mse_loss(g, torch.zeros(3))


@pytest.mark.parametrize("loss_fn", [dice_loss, mse_loss])
def test_loss_gradients_match_finite_differences(loss_fn):
    gen = torch.Generator().manual_seed(0)
    p = torch.rand(2, 1, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    g = (torch.rand(2, 1, 4, 4, generator=gen, dtype=torch.float64) > 0.5).double()
    assert fd_rel_error(lambda: loss_fn(p, g), [p]) < 1e-4


def test_poly_schedule():
    assert poly_lr(0, 100, 5e-4) == 5e-4
    assert poly_lr(100, 100, 5e-4) == 0
    assert poly_lr(50, 100, 5e-4, 0.9) == pytest.approx(0.0005 * 0.5**0.9)
    assert poly_lr(50, 100, 5e-4, 0.9) == pytest.approx(0.0002679, abs=1e-7)
    with pytest.raises(ValueError):
        poly_lr(101, 100, 5e-4)


# ------------------------------------------------------------------- augmentation

def test_zero_rotation_is_identity(samples):
    s = samples[0]
    img, ann = rotate_pair(s.image, s.annotations, 0.0)
    assert img is s.image and ann is s.annotations


def test_rotation_round_trip_and_binary(samples):
    for s in synth_samples(5, SynthParams(size=64, noise=0.0), first_seed=40):
        mask = s.annotations.pixel_mask.values
        _, ann = rotate_pair(s.image, s.annotations, 10.0)
        assert set(np.unique(ann.pixel_mask.values)) <= {0, 1}
        _, back = rotate_pair(s.image, ann, -10.0)
        b = back.pixel_mask.values
        dice = 2 * (b & mask).sum() / (b.sum() + mask.sum())
        assert dice >= 0.9


def test_augment_respects_range(samples, rng):
    s = samples[0]
    img, ann = augment(s.image, s.annotations, rng, max_angle=0.0)
    assert img is s.image
    img, ann = augment(s.image, s.annotations, rng, max_angle=10.0)
    assert img.shape == s.image.shape and ann.shape == s.annotations.shape


# ----------------------------------------------------------------------- training

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    cfg = TrainConfig.from_dict({"epochs": 3, "unrelated": 1})
    assert cfg.epochs == 3 and TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_coarse_training_is_deterministic(samples, coarse_run):
    again = train_coarse(TrainConfig(epochs=3, seed=1), samples, TINY)
    assert [r["loss"] for r in again.log] == [r["loss"] for r in coarse_run.log]
    a = coarse_run.checkpoint.tensors
    assert all(np.array_equal(a[k], again.checkpoint.tensors[k]) for k in a)


def test_loss_decreases(samples):
    res = train_coarse(TrainConfig(epochs=25, seed=0, rotation=0), samples, TINY)
    assert res.log[-1]["loss"] < res.log[0]["loss"]
    assert res.log[-1]["lr"] < res.log[0]["lr"]


def test_empty_or_mismatched_training_sets_rejected(samples):
    with pytest.raises(DataError):
        train_coarse(TrainConfig(epochs=1), [], TINY)
    cl_only = [Sample(s.name, s.image, AnnotationSet(centerline_mask=s.annotations.centerline_mask))
               for s in samples]
    with pytest.raises(DataError):
        train_coarse(TrainConfig(epochs=1), cl_only, TINY)
    res = train_coarse(TrainConfig(epochs=1), cl_only, CoarseNetConfig.preset("tiny", dual_branch=False))
    assert "centerline" not in res.log[0]


def test_fine_training_freezes_coarse(samples, coarse_run):
    net = coarse_run.coarse
    before = {k: v.clone() for k, v in net.state_dict().items()}
    res = train_fine(TrainConfig(epochs=3, seed=1), samples, net, SrsConfig())
    after = net.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert all(p.requires_grad for p in net.parameters())
    assert res.srs is not None and len(res.log) == 3


def test_joint_fine_tuning_updates_coarse(samples, coarse_run):
    net = restore_coarse(coarse_run.checkpoint)
    before = net.pixel_head.weight.detach().clone()
    train_fine(TrainConfig(epochs=2, seed=1, joint=True), samples, net, SrsConfig())
    assert not torch.equal(before, net.pixel_head.weight)


def test_refiner_layout_must_match_coarse(samples, coarse_run):
    with pytest.raises(ConfigError):
        train_fine(TrainConfig(epochs=1), samples, coarse_run.coarse,
                   SrsConfig(refine_centerline_branch=False))


# --------------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_bitwise(tmp_path, samples, coarse_run):
    img = samples[0].image
    expected = coarse_forward(coarse_run.coarse, img)
    digest = save_checkpoint(tmp_path / "c.ckpt", coarse_run.checkpoint)
    assert len(digest) == 64
    ckpt = load_checkpoint(tmp_path / "c.ckpt")
    assert ckpt.stage == "coarse" and ckpt.seed == 1 and ckpt.epoch == 3
    for k, v in coarse_run.checkpoint.optimizer.items():
        assert np.array_equal(ckpt.optimizer[k], v)
    got = coarse_forward(restore_coarse(ckpt), img)
    assert np.array_equal(got.pixel_map.values, expected.pixel_map.values)
    assert np.array_equal(got.centerline_map.values, expected.centerline_map.values)


def test_fine_checkpoint_round_trip(tmp_path, samples, coarse_run):
    res = train_fine(TrainConfig(epochs=2, seed=2), samples, coarse_run.coarse, SrsConfig(), "abc")
    img = samples[1].image
    _, expected = srs_refine(res.srs, img, coarse_forward(res.coarse, img))
    save_checkpoint(tmp_path / "f.ckpt", res.checkpoint)
    ckpt = load_checkpoint(tmp_path / "f.ckpt")
    assert ckpt.coarse_ref == "abc"
    _, got = srs_refine(restore_srs(ckpt), img, coarse_forward(restore_coarse(ckpt), img))
    assert np.array_equal(got.values, expected.values)
    with pytest.raises(ConfigError):
        restore_srs(_reload_coarse(tmp_path, coarse_run))


def _reload_coarse(tmp_path, coarse_run):
    save_checkpoint(tmp_path / "c.ckpt", coarse_run.checkpoint)
    return load_checkpoint(tmp_path / "c.ckpt")


def _rewrite(src, dst, member, transform):
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
        for item in zin.infolist():
            data = zin.read(item)
            zout.writestr(item, transform(data) if item.filename == member else data)


def test_incompatible_checkpoints_rejected(tmp_path, coarse_run):
    good = tmp_path / "c.ckpt"
    save_checkpoint(good, coarse_run.checkpoint)
    _rewrite(good, tmp_path / "v.ckpt", "MANIFEST", lambda b: b.replace(b"format_version = 1", b"format_version = 9"))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "v.ckpt")
    _rewrite(good, tmp_path / "h.ckpt", "config.json", lambda b: b.replace(b'"epochs": 3', b'"epochs": 4'))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "h.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_write_log(tmp_path, coarse_run):
    write_log(tmp_path / "log.csv", coarse_run.log)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["epoch", "lr", "loss"]
    assert len(lines) == 4
