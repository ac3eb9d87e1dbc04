import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from octanet.core import ConfigError, DataError, is_thin
from octanet.data import (
    BUNDLED_SPLIT,
    DatasetManifest,
    SynthParams,
    bundled_split,
    load_dataset,
    skeletonize,
    synth_generate,
    synth_samples,
    write_samples,
    write_synthetic_dataset,
)
from octanet.data.skeleton import connectivity_number, ring_components
from octanet.io import write_gray_png

EIGHT = np.ones((3, 3), int)


# ----------------------------------------------------------------------- skeleton

def test_bar_thins_to_middle_row():
    m = np.zeros((9, 20), np.uint8)
    m[3:6, 2:18] = 1
    skel = skeletonize(m).values
    assert skel[4, 4:16].all()
    assert skel[3].sum() == 0 and skel[5].sum() == 0
    assert is_thin(skel)


def test_thin_curve_is_a_fixpoint():
    # a row joined diagonally to a rising diagonal, then a vertical run: no redundant pixels
    m = np.zeros((16, 16), np.uint8)
    m[8, 2:9] = 1
    for k in range(5):
        m[7 - k, 9 + k] = 1
    m[9:14, 1] = 1
    assert np.array_equal(skeletonize(m).values, m)


def test_empty_mask():
    assert not skeletonize(np.zeros((8, 8))).values.any()


def test_connectivity_number_cases():
    m = np.zeros((3, 3), bool)
    m[1, :] = True
    assert connectivity_number(m, 1, 1) == 2  # bridge pixel
    m[1, 2] = False
    assert connectivity_number(m, 1, 1) == 1  # line end
    assert ring_components(np.ones((3, 3), bool), 1, 1) == 1


@st.composite
def blobby_masks(draw):
    h = draw(st.integers(8, 24))
    w = draw(st.integers(8, 24))
    m = np.zeros((h, w), bool)
    for _ in range(draw(st.integers(1, 5))):
        r0 = draw(st.integers(0, h - 1))
        c0 = draw(st.integers(0, w - 1))
        m[r0 : r0 + draw(st.integers(1, 8)), c0 : c0 + draw(st.integers(1, 8))] = True
    return m


@settings(max_examples=80, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(blobby_masks())
def test_skeleton_properties(mask):
    skel = skeletonize(mask).values.astype(bool)
    assert not (skel & ~mask).any()
    assert ndimage.label(skel, EIGHT)[1] == ndimage.label(mask, EIGHT)[1]
    # any surviving 2x2 block consists of pixels that cannot go without splitting a component
    block = skel[:-1, :-1] & skel[1:, :-1] & skel[:-1, 1:] & skel[1:, 1:]
    for r, c in zip(*np.nonzero(block)):
        for p in ((r, c), (r + 1, c), (r, c + 1), (r + 1, c + 1)):
            assert connectivity_number(skel, *p) != 1 and ring_components(skel, *p) != 1


# ----------------------------------------------------------------------- synthetic

def test_generator_is_deterministic():
    p = SynthParams(seed=11)
    (i1, a1), (i2, a2) = synth_generate(p), synth_generate(p)
    assert np.array_equal(i1.values, i2.values)
    assert np.array_equal(a1.pixel_mask.values, a2.pixel_mask.values)
    i3, _ = synth_generate(SynthParams(seed=12))
    assert not np.array_equal(i1.values, i3.values)


def test_noiseless_foreground_matches_support():
    for seed in range(5):
        img, ann = synth_generate(SynthParams(noise=0.0, seed=seed))
        assert np.array_equal(img.values > 0, ann.pixel_mask.values.astype(bool))


def test_centerlines_are_thin_subsets():
    for seed in range(20):
        _, ann = synth_generate(SynthParams(size=96, seed=seed))
        assert ann.thin and ann.centerline_mask.is_thin()
        cl, px = ann.centerline_mask.values, ann.pixel_mask.values
        assert cl.any() and not (cl & ~px).any()


def test_bundled_split():
    train, test = bundled_split()
    assert (len(train), len(test)) == (BUNDLED_SPLIT["train"], BUNDLED_SPLIT["test"])
    assert train[0].image.shape == (64, 64)
    assert not {s.name for s in train} & {s.name for s in test}


def test_synth_params_validation():
    with pytest.raises(ConfigError):
        SynthParams(size=16)


# ------------------------------------------------------------------------- loader

def test_write_and_load_round_trip(tmp_path):
    params = SynthParams(size=64, noise=0.1)
    manifest = write_synthetic_dataset(tmp_path, 3, 2, params, seed=5)
    loaded = DatasetManifest.from_file(tmp_path / "manifest.txt")
    train = load_dataset(loaded, "train")
    original = synth_samples(3, params, 5)
    assert [s.name for s in train] == sorted(s.name for s in original)
    for a, b in zip(train, original):
        assert np.abs(a.image.values - b.image.values).max() <= 0.5 / 255 + 1e-6
        assert np.array_equal(a.annotations.pixel_mask.values, b.annotations.pixel_mask.values)
        assert np.array_equal(a.annotations.centerline_mask.values, b.annotations.centerline_mask.values)
    assert len(load_dataset(manifest, "test")) == 2


def test_centerline_only_subset(tmp_path):
    write_samples(tmp_path, "train", synth_samples(2, SynthParams(), 0))
    m = DatasetManifest(tmp_path, "rose2")
    assert m.mode == "centerline-only" and m.tolerance_mode
    for s in load_dataset(m, "train"):
        assert s.annotations.pixel_mask is None and s.annotations.centerline_mask is not None


def test_dual_subset_carries_both(tmp_path):
    write_samples(tmp_path, "train", synth_samples(2, SynthParams(), 0))
    for s in load_dataset(DatasetManifest(tmp_path, "rose1-svc+dvc"), "train"):
        assert s.annotations.mode == "dual"


def test_empty_dataset(tmp_path):
    with pytest.raises(DataError, match="empty dataset"):
        load_dataset(DatasetManifest(tmp_path, "synthetic"), "train")


def test_itemized_errors(tmp_path):
    write_samples(tmp_path, "train", synth_samples(3, SynthParams(), 0))
    names = sorted(p.stem for p in (tmp_path / "train" / "img").iterdir())
    (tmp_path / "train" / "gt_pixel" / f"{names[0]}.png").unlink()
    write_gray_png(tmp_path / "train" / "gt_centerline" / f"{names[1]}.png", np.full((64, 64), 7, np.uint8))
    write_gray_png(tmp_path / "train" / "gt_pixel" / f"{names[2]}.png", np.zeros((64, 60), np.uint8))
    with pytest.raises(DataError) as err:
        load_dataset(DatasetManifest(tmp_path, "synthetic"), "train")
    msg = str(err.value)
    assert f"{names[0]}: missing gt_pixel" in msg
    assert "not binary" in msg and "shape" in msg


def test_manifest_remapping_and_explicit_lists(tmp_path):
    data = tmp_path / "data"
    write_samples(data, "train", synth_samples(3, SynthParams(), 0))
    (data / "train" / "gt_centerline").rename(data / "train" / "cl")
    stem = sorted(p.stem for p in (data / "train" / "img").iterdir())[1]
    # a vendor layout keeps images as TIFF
    png = data / "train" / "img" / f"{stem}.png"
    Image.open(png).save(png.with_suffix(".tif"))
    png.unlink()
    (tmp_path / "m.txt").write_text(
        f"root = data\nsubset = rose1-svc\ntrain = {stem},\ndir.gt_centerline = cl\n"
    )
    m = DatasetManifest.from_file(tmp_path / "m.txt")
    assert m.root == data
    (s,) = load_dataset(m, "train")
    assert s.name == stem and s.annotations.mode == "dual"


def test_manifest_validation(tmp_path):
    with pytest.raises(ConfigError):
        DatasetManifest(tmp_path, "rose3")
    with pytest.raises(ConfigError):
        DatasetManifest(tmp_path, "rose2", train=["a"], test=["a"])
