import numpy as np
import numpy.testing as npt
import pytest
from dataclasses import replace

from geofed import synthdata as sd
from geofed.rng import stream


def _profile(weights=(0.5, 0.3, 0.2), texture=0.05, family="rectangle", **kw):
    apps = tuple(sd.Appearance(tuple(sd.PALETTE[c]), texture, family) for c in range(len(weights)))
    return sd.InstitutionProfile(0, tuple(weights), apps, **kw)


def test_same_seed_bit_identical():
    p = _profile(seed=42, sample_count=10)
    a, b = sd.generate_dataset(p), sd.generate_dataset(p)
    for split in ("train", "val", "test"):
        assert getattr(a, split).images.tobytes() == getattr(b, split).images.tobytes()
        assert getattr(a, split).masks.tobytes() == getattr(b, split).masks.tobytes()


def test_zero_weight_category_never_appears():
    d = sd.generate_dataset(_profile((1.0, 0.0, 0.0), sample_count=20))
    assert set(np.unique(d.train.masks)) <= {0, sd.IGNORE}


def test_no_background_means_no_ignore():
    d = sd.generate_dataset(_profile(background=False, sample_count=10))
    assert sd.IGNORE not in d.train.masks


def test_split_sizes():
    assert sd.split_sizes(100) == (60, 20, 20)
    d = sd.generate_dataset(_profile(sample_count=100))
    assert (len(d.train), len(d.val), len(d.test)) == (60, 20, 20)


def test_zero_texture_exact_colour():
    p = _profile(texture=0.0, sample_count=5)
    s = sd.render_sample(p, stream(0, "sample", 0, 0))
    for c in range(3):
        region = s.mask == c
        if region.any():
            npt.assert_array_equal(s.image[region], np.broadcast_to(sd.PALETTE[c], (region.sum(), 3)))


def test_appearance_only_change_keeps_masks():
    p = _profile(sample_count=8)
    apps = tuple(replace(a, color=(0.1, 0.1, 0.1)) for a in p.appearance)
    q = replace(p, appearance=apps)
    a, b = sd.generate_dataset(p), sd.generate_dataset(q)
    npt.assert_array_equal(a.train.masks, b.train.masks)
    assert not np.array_equal(a.train.images, b.train.images)


def test_stripe_family_is_axis_aligned():
    p = _profile((1.0, 0.0), family="stripe", texture=0.0)
    for i in range(10):
        s = sd.render_sample(p, stream(0, "sample", 0, i))
        region = s.mask == 0
        rows, cols = region.any(axis=1), region.any(axis=0)
        # a stripe spans a whole row or column; the union of stripes too
        assert region[rows].all(axis=1).any() or region[:, cols].all(axis=0).any()


def test_category_frequencies_converge():
    weights = np.array([0.5, 0.3, 0.2])
    p = _profile(tuple(weights), height=8, width=8)
    cats = []
    for i in range(10_000):
        cats.extend(sd.render_sample(p, stream(7, "sample", 0, i)).categories)
    freq = np.bincount(cats, minlength=3) / len(cats)
    npt.assert_allclose(freq, weights, atol=0.03)


def test_heterogeneity_identical_and_disjoint():
    a = _profile((1.0, 0.0))
    rep = sd.heterogeneity_report([a, a])
    npt.assert_array_equal(rep["tv_distance"], 0.0)
    b = replace(_profile((0.0, 1.0)), institution_id=1)
    assert sd.heterogeneity_report([a, b])["tv_distance"][0, 1] == 1.0
    with pytest.raises(ValueError):
        sd.heterogeneity_report([a])


def test_benchmark_has_heterogeneity():
    profiles = sd.benchmark_profiles(4, seed=0)
    weights = np.array([p.class_weights for p in profiles])
    assert (weights == 0).any(axis=1).all()  # every institution misses something
    assert (weights[:, 4:].sum(axis=0) < weights[:, :4].sum(axis=0).min()).all()
    colors = {p.appearance[0].color for p in profiles}
    assert len(colors) == 4


def test_profile_validation():
    with pytest.raises(ValueError):
        _profile((1.0,))
    with pytest.raises(ValueError):
        _profile((1.0, -1.0))
    with pytest.raises(ValueError):
        _profile(height=4)


def test_dump_and_load(tmp_path):
    d = sd.generate_dataset(_profile(sample_count=10))
    sd.dump_dataset(d, tmp_path)
    back = sd.load_split(tmp_path / "train.bin")
    npt.assert_array_equal(back.masks, d.train.masks)
    npt.assert_allclose(back.images, d.train.images, atol=1e-7)
    raw = (tmp_path / "train.bin").read_bytes()
    assert list(np.frombuffer(raw[:16], "<u4")) == [32, 32, 3, 6]
