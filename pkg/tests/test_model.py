import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xrayqc.augment import AugmentConfig
from xrayqc.convert import ConversionMethod
from xrayqc.errors import CheckpointFormatError, ConfigurationError
from xrayqc.model import (
    BackboneSpec,
    FeatureTable,
    HeadParams,
    TrainConfig,
    argmax_label,
    backbone_forward,
    cross_entropy,
    cross_entropy_logits,
    head_forward,
    head_gradients,
    head_logits,
    load_features,
    load_params,
    lr_at,
    predict,
    save_features,
    save_params,
    sgd_step,
    softmax,
    train,
)
from xrayqc.synth import DatasetIndex, Label, SampleRecord

ZERO_IMAGE_FEATURES = [
    0.09226279093978669, 0.02339171917551564, 0.01600159553086434, 0.005133954644239543,
    0.09714824586896763, 0.0, 0.020566976774014402, 0.024816261631579767,
    0.0, 0.017675869689147982, 0.11348125914478174, 0.06511828758334025,
    0.0629962643611502, 0.16270176022973434, 0.0, 0.0,
    0.023336943021250466, 0.0, 0.0, 0.00843555428876266,
    0.029107610116641855, 0.04531189824702295, 0.05267054186762482, 0.0935114015722082,
    0.0, 0.0, 0.0, 0.0,
    0.00045845679092776023, 0.14735965963508468, 0.0, 0.017394567887908816,
]


def constant_oracle(spec, value):
    """Interior activation of the backbone for a constant input, stage by stage."""
    h = np.full(3, value / 255.0)
    for w, b in spec.params:
        cin = w.shape[0] // 9
        h = np.maximum(h @ w.reshape(9, cin, -1).sum(axis=0) + b, 0.0)
    return h


def reference_head(f, p):
    # independent loop-free restatement with explicit matrix products
    a = np.dot(p.w_p.T, f) + p.b_p
    a = np.where(a > 0, a, 0.0)
    b = np.dot(p.w_1.T, a) + p.b_1
    b = np.where(b > 0, b, 0.0)
    z = np.dot(p.w_2.T, b) + p.b_2
    e = np.exp(z - z.max())
    return e / e.sum()


def loss_of(f, p, label):
    return float(cross_entropy_logits(head_logits(f, p), [label])[0])


def random_params(rng, feature_dim=32, hidden=(512, 256)):
    p = HeadParams.init(rng, feature_dim, hidden)
    for b in (p.b_p, p.b_1, p.b_2):
        b[:] = rng.normal(0.0, 0.1, b.shape)
    return p


def near_kink(f, p, margin=1e-3):
    z_p = f @ p.w_p + p.b_p
    z_1 = np.maximum(z_p, 0) @ p.w_1 + p.b_1
    return np.abs(z_p).min() < margin or np.abs(z_1).min() < margin


def fd_check(f, p, label, entries, h=1e-5):
    """Worst violations of the combined tolerance over (tensor, flat index) entries."""
    grad = head_gradients(f, p, label)
    failures = []
    for name, flat in entries:
        arr = getattr(p, name)
        g = getattr(grad, name).ravel()[flat]
        orig = arr.ravel()[flat]
        view = arr.reshape(-1)
        view[flat] = orig + h
        up = loss_of(f, p, label)
        view[flat] = orig - h
        down = loss_of(f, p, label)
        view[flat] = orig
        num = (up - down) / (2 * h)
        err = abs(g - num)
        if not (err <= 1e-7 or err <= 1e-4 * max(abs(g), abs(num))):
            failures.append((name, flat, g, num))
    return failures


# --- backbone -------------------------------------------------------------


def test_zero_image_fixture():
    f = backbone_forward(np.zeros((3, 8, 8), np.uint8), BackboneSpec())
    np.testing.assert_allclose(f, ZERO_IMAGE_FEATURES, rtol=0, atol=1e-12)


@pytest.mark.parametrize("shape", [(256, 128), (2000, 1000), (8, 8), (9, 13)])
def test_feature_length(shape, rng):
    img = rng.integers(0, 256, (3, *shape), dtype=np.uint8)
    f = backbone_forward(img, BackboneSpec())
    assert f.shape == (32,)
    assert np.isfinite(f).all()


def test_undersized_input():
    with pytest.raises(ValueError):
        backbone_forward(np.zeros((3, 7, 8), np.uint8), BackboneSpec())


def test_backbone_deterministic_and_seeded(rng):
    img = rng.integers(0, 256, (3, 16, 16), dtype=np.uint8)
    np.testing.assert_array_equal(backbone_forward(img, BackboneSpec(3)), backbone_forward(img, BackboneSpec(3)))
    assert BackboneSpec(3).serialize() == BackboneSpec(3).serialize()
    assert BackboneSpec(3).serialize() != BackboneSpec(4).serialize()


def test_backbone_params_read_only():
    w, _ = BackboneSpec().params[0]
    with pytest.raises(ValueError):
        w[0, 0] = 1.0


@pytest.mark.parametrize("value", [0, 77, 200, 255])
def test_constant_input_converges_to_oracle(value):
    spec = BackboneSpec()
    target = constant_oracle(spec, value)
    errs = []
    feats = {}
    for size in (256, 512, 1024):
        feats[size] = backbone_forward(np.full((3, size, size), value, np.uint8), spec)
        errs.append(np.abs(feats[size] - target).max())
    # border effects shrink like 1/size: each doubling roughly halves the gap
    for a, b in zip(errs, errs[1:]):
        assert 0.45 * a <= b <= 0.55 * a
    # removing the 1/size term leaves the interior oracle
    extrapolated = 2 * feats[1024] - feats[512]
    np.testing.assert_allclose(extrapolated, target, rtol=0, atol=1e-3)


@pytest.mark.xfail(strict=True, reason="border term is ~12/size; 1e-3 needs images near 10000 px wide")
def test_constant_doubling_within_1e_3():
    spec = BackboneSpec()
    small = backbone_forward(np.full((3, 1024, 1024), 255, np.uint8), spec)
    large = backbone_forward(np.full((3, 2048, 2048), 255, np.uint8), spec)
    np.testing.assert_allclose(large, small, rtol=0, atol=1e-3)


# --- head -------------------------------------------------------------------


def test_zero_params_uniform():
    pred = head_forward(np.ones(32), HeadParams.zeros())
    np.testing.assert_array_equal(pred.probs, [0.5, 0.5])
    assert pred.label is Label.ABNORMAL


@given(st.floats(-700, 700))
def test_equal_logits_uniform(z):
    np.testing.assert_allclose(softmax(np.array([z, z])), [0.5, 0.5], rtol=0, atol=1e-15)


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_softmax_is_distribution(a, b):
    p = softmax(np.array([a, b]))
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) <= 1e-9


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-1e3, 1e3))
def test_argmax_shift_invariance(a, b, c):
    base = argmax_label(softmax(np.array([a, b])))
    assert argmax_label(softmax(np.array([a + c, b + c]))) is base


def test_head_matches_reference(rng):
    for _ in range(10):
        p = random_params(rng)
        f = rng.normal(size=32)
        pred = head_forward(f, p)
        np.testing.assert_allclose(pred.probs, reference_head(f, p), rtol=0, atol=1e-12)
        assert abs(pred.probs.sum() - 1.0) <= 1e-9


def test_head_rejects_non_finite():
    with pytest.raises(ValueError):
        head_forward(np.full(32, np.nan), HeadParams.zeros())
    with pytest.raises(ValueError):
        head_forward(np.zeros(31), HeadParams.zeros())


def test_head_params_shape_check():
    p = HeadParams.zeros()
    with pytest.raises(ValueError):
        HeadParams(p.w_p, np.zeros(7), p.w_1, p.b_1, p.w_2, p.b_2)


def test_cross_entropy_anchors():
    assert abs(cross_entropy([0.5, 0.5], 0) - math.log(2)) <= 1e-12
    assert abs(cross_entropy([0.5, 0.5], 1) - math.log(2)) <= 1e-12
    assert cross_entropy([1.0, 0.0], 0) == 0.0
    assert abs(cross_entropy([0.9, 0.1], 1) - math.log(10)) <= 1e-12


def test_cross_entropy_logits_extreme():
    # stable path: no overflow, exact large-margin loss
    loss = cross_entropy_logits(np.array([1000.0, 0.0]), [1])[0]
    assert loss == pytest.approx(1000.0, rel=1e-12)


def test_gradient_symmetric_zero_point():
    g = head_gradients(np.ones(32), HeadParams.zeros(), Label.NORMAL)
    np.testing.assert_allclose(g.b_2, [-0.5, 0.5], rtol=0, atol=1e-15)


def test_gradient_zero_features(rng):
    p = random_params(rng)
    g = head_gradients(np.zeros(32), p, 1)
    assert not g.w_p.any()
    assert g.b_p.any()


def test_every_entry_matches_fd_small_head(rng):
    checked = 0
    while checked < 100:
        p = random_params(rng, feature_dim=5, hidden=(7, 6))
        f = rng.normal(size=5)
        if near_kink(f, p):
            continue
        label = int(rng.integers(0, 2))
        entries = [(n, i) for n in HeadParams.names() for i in range(getattr(p, n).size)]
        assert fd_check(f, p, label, entries) == []
        checked += 1


def test_full_size_gradient_sampled_entries(rng):
    checked = 0
    while checked < 10:
        p = random_params(rng)
        f = rng.normal(size=32)
        if near_kink(f, p):
            continue
        entries = []
        for n in HeadParams.names():
            size = getattr(p, n).size
            entries += [(n, int(i)) for i in rng.choice(size, min(size, 12), replace=False)]
        assert fd_check(f, p, int(rng.integers(0, 2)), entries) == []
        checked += 1


def test_gradient_step_reduces_loss(rng):
    for _ in range(20):
        p = random_params(rng)
        f = rng.normal(size=32)
        label = int(rng.integers(0, 2))
        before = loss_of(f, p, label)
        sgd_step(p, head_gradients(f, p, label), 1e-6)
        assert loss_of(f, p, label) < before


# --- schedule and training ---------------------------------------------------


def test_lr_schedule():
    cfg = TrainConfig()
    for e in range(10):
        assert lr_at(e, cfg) == 0.001
    assert lr_at(10, cfg) == pytest.approx(0.0001, rel=1e-12)
    assert lr_at(25, cfg) == pytest.approx(0.00001, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(decay_factor=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr0=0.0)


def blob_fixture(seed=0, n=40, dim=32):
    rng = np.random.default_rng(seed)
    recs, feats = [], {}
    for i in range(n):
        label = Label(i % 2)
        center = 3.0 if label is Label.ABNORMAL else -3.0
        sid = f"s{i:03d}"
        recs.append(SampleRecord(sid, 1 + i % 3, label, f"{sid}.pgm"))
        feats[sid] = rng.normal(center, 1.0, dim)
    return DatasetIndex(recs), FeatureTable(feats)


def test_separable_blobs_train_perfectly():
    index, table = blob_fixture()
    result = train(index, [1, 2, 3], ConversionMethod.naive(), TrainConfig(epochs=5), AugmentConfig(),
                   extractor=table)
    assert len(result.history) == 5
    assert all(np.isfinite(loss) for _, _, loss in result.history)
    for r in index:
        assert head_forward(table.lookup(r, None, None), result.params).label is r.label


def test_train_deterministic_and_freezes_backbone():
    index, table = blob_fixture(1)
    spec = BackboneSpec()
    before = spec.serialize()
    runs = [
        train(index, [1, 2], ConversionMethod.naive(), TrainConfig(epochs=3, seed=5), AugmentConfig(seed=2),
              spec=spec, extractor=table)
        for _ in range(2)
    ]
    assert spec.serialize() == before
    np.testing.assert_allclose([h[2] for h in runs[0].history], [h[2] for h in runs[1].history], rtol=0, atol=1e-12)
    for a, b in zip(runs[0].params.arrays(), runs[1].params.arrays()):
        np.testing.assert_array_equal(a, b)


def test_train_single_class_errors():
    index, table = blob_fixture()
    only_normal = DatasetIndex([r for r in index if r.label is Label.NORMAL])
    with pytest.raises(ConfigurationError):
        train(only_normal, [1, 2, 3], ConversionMethod.naive(), TrainConfig(epochs=1), AugmentConfig(), extractor=table)


def test_train_on_images_and_predict(small_dataset):
    aug = AugmentConfig(target_width=32, target_height=64)
    method = ConversionMethod.local()
    result = train(small_dataset, [1, 2, 3], method, TrainConfig(epochs=2), aug)
    rec = small_dataset.select([4])[0]
    from xrayqc.imageio import load_pgm16

    img = load_pgm16(small_dataset.image_path(rec))
    a = predict(img, method, BackboneSpec(), result.params, aug)
    b = predict(img, method, BackboneSpec(), result.params, aug)
    np.testing.assert_array_equal(a.probs, b.probs)
    assert abs(a.probs.sum() - 1.0) <= 1e-9


# --- files -------------------------------------------------------------------


def test_params_round_trip(tmp_path, rng):
    p = random_params(rng)
    save_params(p, tmp_path / "head.ckpt")
    assert (tmp_path / "head.ckpt").read_text().splitlines()[0] == "xrayqc-head v1 F=32"
    q = load_params(tmp_path / "head.ckpt")
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)


def test_params_truncated(tmp_path, rng):
    save_params(random_params(rng), tmp_path / "head.ckpt")
    text = (tmp_path / "head.ckpt").read_text()
    (tmp_path / "cut.ckpt").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointFormatError):
        load_params(tmp_path / "cut.ckpt")


def test_params_declared_dim_mismatch(tmp_path, rng):
    save_params(random_params(rng), tmp_path / "head.ckpt")
    text = (tmp_path / "head.ckpt").read_text().replace("F=32", "F=16", 1)
    (tmp_path / "bad.ckpt").write_text(text)
    with pytest.raises(CheckpointFormatError):
        load_params(tmp_path / "bad.ckpt")


def test_feature_csv(tmp_path):
    path = tmp_path / "f.csv"
    path.write_text("sample_id," + ",".join(f"f{i}" for i in range(32)) + "\nx," + ",".join(["0"] * 32) + "\n")
    feats = load_features(path)
    np.testing.assert_array_equal(feats["x"], np.zeros(32))
    save_features({"y": np.arange(32) / 7}, tmp_path / "g.csv")
    np.testing.assert_array_equal(load_features(tmp_path / "g.csv")["y"], np.arange(32) / 7)


def test_feature_csv_wrong_width(tmp_path):
    path = tmp_path / "f.csv"
    path.write_text("sample_id,f0,f1\nx,0,0\n")
    with pytest.raises(CheckpointFormatError):
        load_features(path)
