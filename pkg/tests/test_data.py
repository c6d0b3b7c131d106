import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cmrfcn import data
from cmrfcn.errors import ConfigError, FormatError, ShapeError


# ---------------------------------------------------------------------------
# containers


@pytest.mark.parametrize("kind", ["image", "labels"])
def test_container_roundtrip(tmp_path, rng, kind):
    if kind == "image":
        item = data.Volume(rng.random((3, 5, 7)).astype(np.float32), (1.8, 1.8, 10.0), 0.04)
    else:
        item = data.LabelMap(rng.integers(0, 4, (2, 3, 5, 7)).astype(np.int16), (1.25, 1.25, 8.0), frame_interval=0.0)
    path = tmp_path / "x.csg"
    data.write_container(path, item)
    back = data.read_container(path)
    assert type(back) is type(item)
    assert back.data.dtype == item.data.dtype
    assert np.array_equal(back.data, item.data)
    assert back.spacing == item.spacing and back.frame_interval == item.frame_interval
    data.write_container(tmp_path / "y.csg", back)
    assert (tmp_path / "y.csg").read_bytes() == path.read_bytes()


def test_container_layout(tmp_path):
    path = tmp_path / "l.csg"
    data.write_container(path, data.LabelMap(np.array([[[1, 2]]], np.int16)))
    raw = path.read_bytes()
    assert raw[:4] == b"CSG1" and raw[4] == 1 and raw[5] == 3
    assert [int.from_bytes(raw[6 + 8 * i:14 + 8 * i], "little") for i in range(3)] == [1, 1, 2]
    assert raw[-4:] == b"\x01\x00\x02\x00"


def test_container_errors(tmp_path):
    path = tmp_path / "bad.csg"
    data.write_container(path, data.Volume(np.zeros((2, 2), np.float32)))
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        data.read_container(path)
    path.write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        data.read_container(path)
    path.write_bytes(raw[:4] + b"\x07" + raw[5:])
    with pytest.raises(FormatError):
        data.read_container(path)


@given(arrays(np.int16, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)),
              elements=st.integers(0, 3)))
def test_label_container_roundtrip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("c") / "p.csg"
    data.write_container(path, data.LabelMap(arr))
    assert np.array_equal(data.read_container(path).data, arr)


# ---------------------------------------------------------------------------
# preprocessing


def test_crop_identity_and_centre(rng):
    img = rng.random((2, 192, 192))
    out, _ = data.crop_or_pad(img, 192)
    assert np.array_equal(out, img)
    big = rng.random((200, 200))
    out, _ = data.crop_or_pad(big, 192)
    assert np.array_equal(out, big[4:196, 4:196])


@given(h=st.integers(4, 40), w=st.integers(4, 40), target=st.sampled_from([16, 32]))
def test_crop_uncrop_restores_support(h, w, target):
    lab = np.random.default_rng(h * 100 + w).integers(1, 4, (2, h, w)).astype(np.int16)
    cropped, rec = data.crop_or_pad(lab, target)
    back = data.uncrop(cropped, rec, fill=0)
    assert back.shape == lab.shape
    # pixels inside the window survive; the rest is background
    kept = back != 0
    assert np.array_equal(back[kept], lab[kept])
    assert kept.sum() == min(h, target) * min(w, target) * 2


def test_uncrop_geometry_error():
    _, rec = data.crop_or_pad(np.zeros((10, 10)), 16)
    with pytest.raises(ShapeError):
        data.uncrop(np.zeros((8, 8)), rec)


def test_normalize_examples():
    out = data.normalize_intensity(np.array([[10.0, 20.0, 30.0]]))
    np.testing.assert_allclose(out, [[0, 0.5, 1]])
    assert np.all(data.normalize_intensity(np.full((3, 3), 4.0)) == 0)


@given(arrays(np.float64, (2, 4, 4), elements=st.floats(-1e6, 1e6)))
def test_normalize_range(img):
    out = data.normalize_intensity(img)
    assert out.min() >= 0 and out.max() <= 1
    img32 = img.astype(np.float32)  # slices are stored as float32
    for z in range(2):
        if img32[z].max() > img32[z].min():
            assert out[z].min() == 0 and out[z].max() == 1


# ---------------------------------------------------------------------------
# augmentation


def _disk(size=32, r=5, centre=(15.5, 15.5)):
    yy, xx = np.mgrid[0:size, 0:size]
    return (np.hypot(yy - centre[0], xx - centre[1]) <= r).astype(np.int16)


def test_identity_draw_is_identity(rng):
    img = rng.random((24, 24)).astype(np.float32)
    lab = rng.integers(0, 4, (24, 24)).astype(np.int16)
    out_i, out_l = data.apply_augmentation(img, lab, data.AugmentDraw(0, 0, 0, 1, 1))
    assert np.array_equal(out_i, img) and np.array_equal(out_l, lab)


def test_translation_moves_centroid():
    lab = _disk()
    _, out = data.apply_augmentation(lab.astype(np.float32), lab, data.AugmentDraw(5, 0, 0, 1, 1))
    ys, xs = np.nonzero(lab)
    ys2, xs2 = np.nonzero(out)
    assert abs((xs2.mean() - xs.mean()) - 5) <= 0.5
    assert abs(ys2.mean() - ys.mean()) <= 0.5


@given(seed=st.integers(0, 2**20))
def test_augment_invents_no_classes(seed):
    r = np.random.default_rng(seed)
    lab = np.where(_disk(r=6) > 0, r.choice([1, 3]), 0).astype(np.int16)
    img = r.random(lab.shape).astype(np.float32)
    out_i, out_l = data.augment(img, lab, data.AugmentParams(), r)
    assert set(np.unique(out_l)) <= set(np.unique(lab)) | {0}
    assert out_i.min() >= 0 and out_i.max() <= 1


def test_augment_params_validation():
    with pytest.raises(ConfigError):
        data.AugmentParams(max_translation=-1)
    with pytest.raises(ConfigError):
        data.AugmentParams(scale_range=(1.2, 0.9))


# ---------------------------------------------------------------------------
# sampling


def _dataset(n, size=4):
    imgs = np.arange(n, dtype=np.float32)[:, None, None] * np.ones((1, size, size), np.float32)
    return data.SliceDataset(imgs, np.zeros((n, size, size), np.int16))


def test_sample_single_slice():
    ds = _dataset(1)
    imgs, labs = data.sample_minibatch(ds, 1, np.random.default_rng(0))
    assert np.array_equal(imgs[0], ds.images[0])


def test_sampling_is_reproducible():
    ds = _dataset(7)
    a = [data.sample_minibatch(ds, 5, data.iteration_rng(3, i))[0] for i in range(4)]
    b = [data.sample_minibatch(ds, 5, data.iteration_rng(3, i))[0] for i in range(4)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_sampling_is_uniform():
    ds = _dataset(5)
    imgs, _ = data.sample_minibatch(ds, 10_000, np.random.default_rng(42))
    counts = np.bincount(imgs[:, 0, 0].astype(int), minlength=5)
    n, p = 10_000, 0.2
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma), counts


def test_sample_empty_dataset():
    with pytest.raises(ConfigError):
        data.sample_minibatch(_dataset(0), 2, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# manifest


def test_manifest_roundtrip(tmp_path):
    rows = [dict(subject_id="s1", path="s1/image_f00.csg", label_path="s1/label_f00.csg",
                 frame_index=0, slice_index=z, phase="ED", split="train") for z in range(2)]
    data.write_manifest(tmp_path / "m.csv", rows)
    back = data.read_manifest(tmp_path / "m.csv")
    assert [r["slice_index"] for r in back] == [0, 1]
    assert back[0]["path"] == str(tmp_path / "s1/image_f00.csg")


def test_manifest_missing_columns(tmp_path):
    (tmp_path / "m.csv").write_text("subject_id,path\ns,x\n")
    with pytest.raises(ConfigError):
        data.read_manifest(tmp_path / "m.csv")


# ---------------------------------------------------------------------------
# phantoms


def test_phantom_noiseless_levels_match_labels():
    spec = data.clean_spec(data.PhantomSpec(seed=3))
    vol, lab = data.generate_phantom(spec)
    ip = spec.intensity
    levels = {0: ip.background, 1: ip.lv_blood, 2: ip.myocardium, 3: ip.rv_blood}
    for c, v in levels.items():
        np.testing.assert_allclose(vol.data[lab.data == c], np.float32(v))
    # level sets coincide with label regions because the levels are distinct
    for c, v in levels.items():
        assert np.array_equal(vol.data == np.float32(v), lab.data == c)


def test_phantom_is_deterministic():
    a = data.generate_phantom(data.PhantomSpec(seed=9))
    b = data.generate_phantom(data.PhantomSpec(seed=9))
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


@given(seed=st.integers(0, 2**31 - 1), size=st.sampled_from([32, 48, 64]), frames=st.integers(4, 30))
def test_random_phantoms_are_valid(seed, size, frames):
    spec = data.random_phantom_spec(np.random.default_rng(seed), image_size=size, n_frames=frames, n_slices=3)
    lab = data.phantom_labels(spec)
    assert lab.min() >= 0 and lab.max() <= 3  # one class per voxel: a partition
    cavity = (lab == data.LV_CAVITY).sum(axis=(1, 2, 3))
    assert cavity[0] > cavity[spec.es_frame]
    assert int(np.argmin(cavity)) == spec.es_frame
    for c in (1, 2, 3):
        assert (lab[0] == c).any()


def test_phantom_spec_validation():
    with pytest.raises(ConfigError):
        data.PhantomSpec(lv_radius_es=10.0, lv_radius_ed=9.0).validate()
    with pytest.raises(ConfigError):
        data.PhantomSpec(image_size=20).validate()
    with pytest.raises(ConfigError):
        data.PhantomSpec(es_frame=0).validate()


def test_split_counts():
    assert data.split_counts(10) == (7, 1, 2)
    assert data.split_counts(60, (2 / 3, 0, 1 / 3)) == (40, 0, 20)
    with pytest.raises(ConfigError):
        data.split_counts(10, (0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        data.synth_cohort(0, seed=1)
