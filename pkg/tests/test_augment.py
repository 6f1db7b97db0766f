import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoshot.augment import (
    AugmentError,
    AugPolicy,
    ColorJitter,
    CutRegion,
    HorizontalFlip,
    RandomResizedCrop,
    Resize,
    VerticalFlip,
    apply_policy,
    augment_image,
    cutmix,
    hflip,
    mixup,
    resize,
    resizemix,
    sample_lambda,
    vflip,
)
from protoshot.dataset import LabeledExample

CLASSES = ("a", "b", "c")


def img(seed, shape=(3, 8, 8), label="a", sid=None):
    rng = np.random.default_rng(seed)
    return LabeledExample(rng.random(shape), label, sid or f"{label}{seed}")


def check_soft_label(m, la, lb):
    assert abs(m.soft_label.sum() - 1.0) < 1e-9
    assert np.all(m.soft_label >= 0)
    support = {CLASSES[i] for i in np.flatnonzero(m.soft_label)}
    assert support <= {la, lb}


# ---------------------------------------------------------------- mixup


def test_mixup_lambda_one_is_identity():
    a, b = img(0), img(1, label="b")
    m = mixup(a, b, 1.0, CLASSES)
    assert np.array_equal(m.image, a.data)
    assert m.soft_label.tolist() == [1.0, 0.0, 0.0]


def test_mixup_midpoint():
    a = LabeledExample(np.full((1, 1, 1), 0.2), "a", "x")
    b = LabeledExample(np.full((1, 1, 1), 0.6), "b", "y")
    m = mixup(a, b, 0.5, CLASSES)
    assert m.image.item() == pytest.approx(0.4, abs=1e-7)
    assert m.soft_label.tolist() == [0.5, 0.5, 0.0]


def test_mixup_shape_mismatch():
    with pytest.raises(AugmentError, match="shape"):
        mixup(img(0), img(1, shape=(3, 4, 4)), 0.5, CLASSES)


def test_mixup_rejects_lambda_outside_unit_interval():
    with pytest.raises(AugmentError):
        mixup(img(0), img(1), 1.5, CLASSES)


@settings(max_examples=100, deadline=None)
@given(lam=st.floats(0, 1), seed=st.integers(0, 10_000))
def test_mixup_pixels_stay_in_source_envelope(lam, seed):
    a, b = img(seed, (1, 4, 4)), img(seed + 1, (1, 4, 4), label="c")
    m = mixup(a, b, lam, CLASSES)
    lo, hi = np.minimum(a.data, b.data), np.maximum(a.data, b.data)
    assert np.all(m.image >= lo) and np.all(m.image <= hi)
    check_soft_label(m, "a", "c")


def test_same_label_mix_gives_single_entry():
    m = mixup(img(0), img(1), 0.3, CLASSES)
    assert m.soft_label.tolist() == [1.0, 0.0, 0.0]


# ---------------------------------------------------------------- cutmix


def test_cutmix_lambda_one_keeps_a():
    a, b = img(0), img(1, label="b")
    m = cutmix(a, b, 1.0, np.random.default_rng(0), CLASSES)
    assert m.region.area == 0 and np.array_equal(m.image, a.data)
    assert m.lam == 1.0 and m.soft_label.tolist() == [1.0, 0.0, 0.0]


def test_cutmix_lambda_zero_is_pure_b():
    a, b = img(0), img(1, label="b")
    m = cutmix(a, b, 0.0, np.random.default_rng(0), CLASSES)
    assert np.array_equal(m.image, b.data) and m.lam == 0.0


def test_cutmix_224_quarter_patch():
    a = LabeledExample(np.zeros((1, 224, 224)), "a", "x")
    b = LabeledExample(np.ones((1, 224, 224)), "b", "y")
    m = cutmix(a, b, 0.75, np.random.default_rng(3), CLASSES)
    assert (m.region.height, m.region.width) == (112, 112)
    assert m.lam == 1 - 12544 / 50176 == 0.75


@settings(max_examples=200, deadline=None)
@given(lam=st.floats(0, 1), seed=st.integers(0, 2**32 - 1), h=st.integers(1, 12), w=st.integers(1, 12))
def test_cutmix_pixel_census_matches_region(lam, seed, h, w):
    a = LabeledExample(np.zeros((2, h, w)), "a", "x")
    b = LabeledExample(np.ones((2, h, w)), "b", "y")
    m = cutmix(a, b, lam, np.random.default_rng(seed), CLASSES)
    census = int(m.image[0].sum())
    assert census == m.region.area == int(m.region.mask().sum())
    assert np.array_equal(m.image[0] == 1, m.region.mask())
    assert m.lam == 1 - m.region.area / (h * w)
    assert round(h * w * (1 - m.lam)) == census
    check_soft_label(m, "a", "b")


def test_cutmix_on_vectors_swaps_a_segment():
    a = LabeledExample(np.zeros(20), "a", "x")
    b = LabeledExample(np.ones(20), "b", "y")
    m = cutmix(a, b, 0.7, np.random.default_rng(0), CLASSES)
    idx = np.flatnonzero(m.image)
    assert len(idx) == 6 and np.all(np.diff(idx) == 1)
    assert m.lam == pytest.approx(0.7)


def test_cut_region_bounds_and_mask():
    r = CutRegion(1, 2, 3, 2, 5, 5)
    assert r.mask().sum() == r.area == 6
    with pytest.raises(AugmentError):
        CutRegion(3, 0, 3, 1, 5, 5)


# ---------------------------------------------------------------- resizemix


def test_resizemix_lambda_one_is_a():
    a, b = img(0), img(1, shape=(3, 4, 4), label="b")
    assert np.array_equal(resizemix(a, b, 1.0, CLASSES).image, a.data)


@settings(max_examples=50, deadline=None)
@given(lam=st.floats(0, 1), seed=st.integers(0, 1000))
def test_resizemix_equals_mixup_at_equal_size(lam, seed):
    a, b = img(seed), img(seed + 7, label="c")
    r, m = resizemix(a, b, lam, CLASSES), mixup(a, b, lam, CLASSES)
    assert np.array_equal(r.image, m.image) and np.array_equal(r.soft_label, m.soft_label)


def test_resizemix_lambda_zero_is_resized_b():
    a, b = img(0), img(1, shape=(3, 4, 4), label="b")
    m = resizemix(a, b, 0.0, CLASSES)
    assert np.allclose(m.image, resize(b.data, (8, 8)), atol=0)
    assert m.soft_label.tolist() == [0.0, 1.0, 0.0]


def test_resize_identity_and_constant_image():
    x = img(3).data
    assert resize(x, (8, 8)) is x
    flat = np.full((2, 5, 7), 0.25, np.float32)
    assert np.allclose(resize(flat, (9, 3)), 0.25)


def test_resizemix_rejects_channel_mismatch():
    with pytest.raises(AugmentError):
        resizemix(img(0), img(1, shape=(1, 8, 8)), 0.5, CLASSES)


# ---------------------------------------------------------------- lambda sampling


def test_beta_one_is_uniform():
    from scipy import stats

    rng = np.random.default_rng(0)
    draws = [sample_lambda(1.0, rng) for _ in range(100_000)]
    assert stats.kstest(draws, "uniform").statistic < 0.02
    assert min(draws) >= 0 and max(draws) <= 1


def test_lambda_deterministic_and_alpha_checked():
    r1 = np.random.default_rng(5)
    r2 = np.random.default_rng(5)
    assert sample_lambda(0.4, r1) == sample_lambda(0.4, r2)
    with pytest.raises(AugmentError):
        sample_lambda(0.0, r1)


# ---------------------------------------------------------------- per-image ops


def test_flips_are_involutions():
    x = img(2).data
    assert np.array_equal(hflip(hflip(x)), x)
    assert np.array_equal(vflip(vflip(x)), x)
    op = HorizontalFlip(p=1.0)
    rng = np.random.default_rng(0)
    assert np.array_equal(op(op(x, rng), rng), x)
    assert np.array_equal(hflip(x)[:, :, 0], x[:, :, -1])


def test_per_image_ops_keep_range_and_shape():
    rng = np.random.default_rng(0)
    x = img(4, shape=(3, 12, 10)).data
    for op in (ColorJitter(), RandomResizedCrop(), VerticalFlip(0.45), Resize((6, 6))):
        y = op(x, rng)
        assert y.min() >= 0 and y.max() <= 1
    assert RandomResizedCrop()(x, rng).shape == x.shape
    assert Resize((6, 6))(x, rng).shape == (3, 6, 6)


def test_crop_scale_validated():
    with pytest.raises(AugmentError):
        RandomResizedCrop(scale=(0.0, 1.0))


def test_augment_image_rejects_vectors():
    v = LabeledExample(np.zeros(4), "a", "v")
    assert augment_image(v, (), np.random.default_rng(0)) is v
    with pytest.raises(AugmentError, match="raw vector"):
        augment_image(v, (HorizontalFlip(1.0),), np.random.default_rng(0))


# ---------------------------------------------------------------- policies


def batch(n, shape=(3, 8, 8)):
    return [img(i, shape, label=CLASSES[i % 3]) for i in range(n)]


def test_policy_none_gives_exact_one_hot():
    out = apply_policy(batch(4), AugPolicy(), np.random.default_rng(0), CLASSES)
    for i, m in enumerate(out):
        assert m.soft_label.tolist() == [float(k == i % 3) for k in range(3)]


@pytest.mark.parametrize("mix", ["mixup", "cutmix", "resizemix", "all-augment"])
def test_mix_policies_normalize_labels(mix):
    pol = AugPolicy(ops=(HorizontalFlip(0.45), VerticalFlip(0.45)), mix=mix, alpha=1.0)
    out = apply_policy(batch(8), pol, np.random.default_rng(1), CLASSES)
    assert len(out) == 8
    for m in out:
        i, j = m.provenance
        assert i != j
        assert abs(m.soft_label.sum() - 1) < 1e-9
        assert m.image.shape == (3, 8, 8) and m.image.min() >= 0 and m.image.max() <= 1


def test_mix_needs_two_examples():
    with pytest.raises(AugmentError, match="mix requires ≥2"):
        apply_policy(batch(1), AugPolicy(mix="mixup"), np.random.default_rng(0), CLASSES)


def test_policy_is_pure_given_rng_state():
    pol = AugPolicy(ops=(ColorJitter(),), mix="all-augment")
    a = apply_policy(batch(5), pol, np.random.default_rng(9), CLASSES)
    b = apply_policy(batch(5), pol, np.random.default_rng(9), CLASSES)
    assert all(np.array_equal(x.image, y.image) and x.lam == y.lam for x, y in zip(a, b))


def test_all_augment_uses_every_op_over_many_batches():
    seen = set()
    for s in range(40):
        out = apply_policy(batch(3), AugPolicy(mix="all-augment"), np.random.default_rng(s), CLASSES)
        seen.add("cutmix" if out[0].region is not None else "blend")
    assert seen == {"cutmix", "blend"}


def test_policy_validation_and_dict_round_trip():
    with pytest.raises(AugmentError):
        AugPolicy(mix="cutout")
    with pytest.raises(AugmentError):
        AugPolicy(ops=(HorizontalFlip(1.5),))
    pol = AugPolicy(ops=(RandomResizedCrop(scale=(0.6, 1.0)), HorizontalFlip(0.45), ColorJitter(0.1, 0.2, 0.0)), mix="cutmix", alpha=0.5)
    assert AugPolicy.from_dict(pol.to_dict()) == pol
