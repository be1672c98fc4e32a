import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xrayqc.augment import AugmentConfig, apply_augment, apply_flips, eval_transform, flip_h, flip_v, resize

images = arrays(
    np.uint8,
    st.tuples(st.just(3), st.integers(1, 7), st.integers(1, 7)),
    elements=st.integers(0, 255),
)


def brute_resize(img, tw, th):
    # float reference, corner aligned, half up
    _, h, w = img.shape
    out = np.zeros((3, th, tw), np.uint8)
    for c in range(3):
        for i in range(th):
            sy = i * (h - 1) / (th - 1) if th > 1 else 0.0
            y0 = int(np.floor(sy))
            y1 = min(y0 + 1, h - 1)
            fy = sy - y0
            for j in range(tw):
                sx = j * (w - 1) / (tw - 1) if tw > 1 else 0.0
                x0 = int(np.floor(sx))
                x1 = min(x0 + 1, w - 1)
                fx = sx - x0
                top = img[c, y0, x0] * (1 - fx) + img[c, y0, x1] * fx
                bot = img[c, y1, x0] * (1 - fx) + img[c, y1, x1] * fx
                out[c, i, j] = int(np.floor(top * (1 - fy) + bot * fy + 0.5 + 1e-9))
    return out


def test_flip_pair():
    img = np.array([[[1, 2]], [[3, 4]], [[5, 6]]], np.uint8)
    assert flip_h(img).tolist() == [[[2, 1]], [[4, 3]], [[6, 5]]]
    assert flip_v(img).tolist() == img.tolist()


def test_flip_single_column_identity(rng):
    img = rng.integers(0, 256, (3, 5, 1), dtype=np.uint8)
    np.testing.assert_array_equal(flip_h(img), img)


@given(images)
@settings(max_examples=60)
def test_flip_involution_and_commute(img):
    np.testing.assert_array_equal(flip_h(flip_h(img)), img)
    np.testing.assert_array_equal(flip_v(flip_v(img)), img)
    np.testing.assert_array_equal(flip_h(flip_v(img)), flip_v(flip_h(img)))


def test_resize_hand_value():
    img = np.array([[[0, 255]]] * 3, np.uint8)
    assert resize(img, 3, 1)[0].tolist() == [[0, 128, 255]]


@given(images, st.integers(1, 9), st.integers(1, 9))
@settings(max_examples=60)
def test_resize_matches_reference(img, tw, th):
    np.testing.assert_array_equal(resize(img, tw, th), brute_resize(img, tw, th))


@given(images)
@settings(max_examples=30)
def test_resize_same_size_identity(img):
    np.testing.assert_array_equal(resize(img, img.shape[2], img.shape[1]), img)


@given(st.integers(0, 255), st.integers(1, 6), st.integers(1, 6), st.integers(1, 20), st.integers(1, 20))
@settings(max_examples=60)
def test_resize_constant(v, w, h, tw, th):
    img = np.full((3, h, w), v, np.uint8)
    out = resize(img, tw, th)
    assert out.shape == (3, th, tw)
    assert (out == v).all()


def test_resize_rejects_bad_target():
    with pytest.raises(ValueError):
        resize(np.zeros((3, 2, 2), np.uint8), 0, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(flip_h_prob=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(target_width=0)


def test_zero_probabilities_only_resize(rng):
    img = rng.integers(0, 256, (3, 6, 4), dtype=np.uint8)
    cfg = AugmentConfig(0.0, 0.0, 8, 12)
    np.testing.assert_array_equal(apply_augment(img, cfg, rng), resize(img, 8, 12))
    np.testing.assert_array_equal(eval_transform(img, cfg), resize(img, 8, 12))


def test_unit_probabilities_flip_both(rng):
    img = rng.integers(0, 256, (3, 6, 4), dtype=np.uint8)
    cfg = AugmentConfig(1.0, 1.0, 4, 6)
    for seed in range(5):
        out = apply_augment(img, cfg, np.random.default_rng(seed))
        np.testing.assert_array_equal(out, flip_v(flip_h(img)))


def test_augment_deterministic(rng):
    img = rng.integers(0, 256, (3, 6, 4), dtype=np.uint8)
    cfg = AugmentConfig(target_width=5, target_height=7)
    runs = [[apply_augment(img, cfg, np.random.default_rng(3)) for _ in range(4)] for _ in range(2)]
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a, b)


def test_apply_flips_states(rng):
    img = rng.integers(0, 256, (3, 3, 4), dtype=np.uint8)
    np.testing.assert_array_equal(apply_flips(img, (False, False)), img)
    np.testing.assert_array_equal(apply_flips(img, (True, False)), flip_h(img))
    np.testing.assert_array_equal(apply_flips(img, (False, True)), flip_v(img))
