import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedsm.config import DEFAULTS
from fedsm.data import generate_synthetic
from fedsm.errors import ConfigError, DegenerateInput, DimensionError, NumericsError, ParseError
from fedsm.model import (
    StudentModel,
    TrainConfig,
    classifier_loss_and_grad,
    forward,
    grad_check,
    grad_check_report,
    init_model,
    load_checkpoint,
    loss_and_grad,
    retrain_classifier,
    save_checkpoint,
    sgd_step,
    teacher_logits,
    train_epochs,
)
from fedsm.numerics import RngStream, softmax
from fedsm.semantics import make_label_embeddings, make_sample_embeddings

f32 = lambda a: np.array(a, dtype=np.float32)


def hand_model():
    return StudentModel(
        [(f32([[1, 0], [0, -1]]), f32([0, 0]))],
        (f32([[1, 2], [3, 4]]), f32([0.5, 0])),
        (f32([[1, -1], [2, 0]]), f32([0, 1])),
    )


def random_case(seed, mode, dims=(16, 64, 16, 10), batch=5):
    m, h, d, c = dims
    rng = RngStream(seed, 77)
    model = init_model(m, [h], d, c, rng)
    x = rng.gaussians((batch, m))
    y = rng.integers(0, c, batch)
    q = 3.0 * rng.gaussians((batch, c))
    hv = rng.gaussians((batch, d))
    return model, x, y, TrainConfig(distill_mode=mode), q, hv


def test_forward_hand_computed():
    # hidden: relu([1, -2]) = [1, 0]; feature = [1.5, 2]; logits = [1.5 + 4, -1.5 + 1]
    feat, logits = forward(hand_model(), [1, 2])
    np.testing.assert_allclose(feat, [1.5, 2.0])
    np.testing.assert_allclose(logits, [5.5, -0.5])


def test_forward_zero_model_uniform():
    model = init_model(4, [3], 2, 5, RngStream(0, 0))
    for p in model.params():
        p[...] = 0
    _, logits = forward(model, np.ones(4))
    assert np.all(logits == 0)
    np.testing.assert_allclose(softmax(logits), 0.2)


def test_forward_pure_and_checks_dim():
    model = init_model(4, [3], 2, 5, RngStream(0, 0))
    x = RngStream(1, 0).gaussians(4)
    a, b = forward(model, x), forward(model, x)
    assert a[1].tobytes() == b[1].tobytes()
    with pytest.raises(DimensionError):
        forward(model, np.ones(3))


def test_teacher_logits_examples():
    labels = np.eye(3)
    np.testing.assert_allclose(teacher_logits([1, 0, 0], labels, 1.0), [1, 0, 0])
    base = teacher_logits([0.3, 0.4, 0.1], labels, 1.0)
    np.testing.assert_allclose(teacher_logits([0.3, 0.4, 0.1], labels, 10.0), 10 * base, rtol=1e-6)
    with pytest.raises(DegenerateInput):
        teacher_logits([0, 0, 0], labels)
    with pytest.raises(DimensionError):
        teacher_logits([1, 0], labels)


def test_teacher_argmax_on_clean_anchored_samples():
    rng = RngStream(3, 0)
    anchors = make_label_embeddings(10, 16, rng)
    ds = generate_synthetic(10, 16, 100, anchors, 2.0, 0.0, rng)
    hv = make_sample_embeddings(ds.features, 2.0, DEFAULTS["data.teacher_noise"], rng)
    q = teacher_logits(hv, anchors)
    assert np.mean(np.argmax(q, axis=1) == ds.labels) >= 0.95


def test_cross_entropy_uniform_logits():
    model = init_model(4, [3], 2, 10, RngStream(0, 0))
    for p in model.params():
        p[...] = 0
    loss, _ = loss_and_grad(model, np.ones((1, 4)), [3], TrainConfig(distill_mode="none"))
    assert loss == pytest.approx(math.log(10), abs=1e-6)


def test_kl_vanishes_when_teacher_matches():
    model, x, y, _, _, _ = random_case(0, "kl")
    _, p = forward(model, x)
    ce, _ = loss_and_grad(model, x, y, TrainConfig(distill_mode="none"))
    kl, _ = loss_and_grad(model, x, y, TrainConfig(distill_mode="kl"), teacher_logits=p)
    assert kl == pytest.approx(ce, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-20, 20)), st.floats(-5, 5))
def test_kl_nonnegative_and_zero_on_shift(q, shift):
    model = init_model(3, [4], 2, 6, RngStream(0, 0))
    x = np.ones((1, 3))
    cfg_none, cfg_kl = TrainConfig(distill_mode="none"), TrainConfig(distill_mode="kl")
    ce, _ = loss_and_grad(model, x, [0], cfg_none)
    kl, _ = loss_and_grad(model, x, [0], cfg_kl, teacher_logits=q[None])
    assert kl - ce >= -1e-7
    _, p = forward(model, x)
    kl0, _ = loss_and_grad(model, x, [0], cfg_kl, teacher_logits=p + np.float32(shift))
    assert abs(kl0 - ce) <= 1e-6


def test_mse_term():
    model, x, y, _, _, hv = random_case(1, "mse")
    feat, _ = forward(model, x)
    ce, _ = loss_and_grad(model, x, y, TrainConfig(distill_mode="none"))
    mse, _ = loss_and_grad(model, x, y, TrainConfig(distill_mode="mse"), teacher_features=hv)
    assert mse - ce == pytest.approx(np.mean((feat.astype(np.float64) - hv) ** 2), rel=1e-5)


def test_missing_teacher_data():
    model, x, y, _, _, _ = random_case(0, "kl")
    with pytest.raises(ConfigError):
        loss_and_grad(model, x, y, TrainConfig(distill_mode="kl"))
    with pytest.raises(ConfigError):
        loss_and_grad(model, x, y, TrainConfig(distill_mode="mse"))


@pytest.mark.parametrize("mode", ["kl", "mse", "none"])
def test_grad_check_modes(mode):
    model, x, y, cfg, q, hv = random_case(2, mode)
    rep = grad_check_report(model, x, y, cfg, 1e-3, q, hv)
    assert rep.max_rel_error < 1e-3
    assert rep.skipped <= 0.01 * (rep.checked + rep.skipped)


def test_grad_check_deeper_model():
    rng = RngStream(5, 0)
    model = init_model(5, [7, 6], 4, 3, rng)
    x, y = rng.gaussians((4, 5)), rng.integers(0, 3, 4)
    assert grad_check(model, x, y, TrainConfig(distill_mode="mse"), 1e-3, None, rng.gaussians((4, 4))) < 1e-3


def test_grad_check_epsilon_range():
    model, x, y, cfg, q, hv = random_case(0, "none", dims=(3, 4, 2, 2), batch=2)
    with pytest.raises(ConfigError):
        grad_check(model, x, y, cfg, 0.1)


def test_grad_check_catches_wrong_gradient(monkeypatch):
    import fedsm.model as M

    real = M.loss_and_grad

    def broken(*args, **kw):
        loss, grads = real(*args, **kw)
        grads[-1] = grads[-1] * 1.5
        return loss, grads

    model, x, y, cfg, q, hv = random_case(0, "none", dims=(3, 4, 2, 3), batch=3)
    monkeypatch.setattr(M, "loss_and_grad", broken)
    assert grad_check(model, x, y, cfg) > 0.1


def test_batch_order_invariance():
    model, x, y, cfg, q, _ = random_case(4, "kl")
    perm = np.array([3, 0, 4, 1, 2])
    a, _ = loss_and_grad(model, x, y, cfg, q)
    b, _ = loss_and_grad(model, x[perm], y[perm], cfg, q[perm])
    assert a == pytest.approx(b, rel=1e-6)


def test_sgd_zero_lr_noop():
    model, x, y, cfg, _, _ = random_case(0, "none")
    before = model.to_bytes()
    _, grads = loss_and_grad(model, x, y, cfg)
    sgd_step(model, grads, 0.0)
    assert model.to_bytes() == before


def test_single_step_decreases_convex_loss():
    rng = RngStream(0, 0)
    model = init_model(3, [], 4, 3, rng)
    feats = rng.gaussians((30, 4)).astype(np.float32)
    labels = rng.integers(0, 3, 30)
    before, (gw, gb) = classifier_loss_and_grad(model, feats, labels)
    w, b = model.classifier
    w -= np.float32(0.1) * gw
    b -= np.float32(0.1) * gb
    after, _ = classifier_loss_and_grad(model, feats, labels)
    assert after < before


def test_train_epochs_deterministic_and_learns():
    rng = RngStream(0, 0)
    ds = generate_synthetic(3, 4, 40, None, 3.0, 0.5, rng)
    traces = []
    for _ in range(2):
        model = init_model(4, [8], 4, 3, RngStream(1, 0))
        traces.append(train_epochs(model, ds.features, ds.labels, TrainConfig(distill_mode="none", epochs_per_round=5), RngStream(2, 0)))
    assert traces[0] == traces[1]
    assert traces[0][-1] < traces[0][0]


def test_train_epochs_divergence_raises():
    rng = RngStream(0, 0)
    model = init_model(4, [8], 4, 3, rng)
    x = 1e4 * rng.gaussians((16, 4))
    cfg = TrainConfig(distill_mode="none", lr_local=1e8, epochs_per_round=20)
    with np.errstate(all="ignore"), pytest.raises(NumericsError):
        train_epochs(model, x, rng.integers(0, 3, 16), cfg, rng)


def test_retrain_zero_epochs_and_frozen_extractor():
    model, *_ = random_case(0, "none")
    rng = RngStream(0, 1)
    feats = rng.gaussians((50, 16)).astype(np.float32)
    labels = rng.integers(0, 10, 50)
    before = model.to_bytes()
    retrain_classifier(model, feats, labels, TrainConfig(), 0, rng)
    assert model.to_bytes() == before
    digest = model.extractor_digest()
    clf_before = model.classifier[0].copy()
    retrain_classifier(model, feats, labels, TrainConfig(), 3, rng)
    assert model.extractor_digest() == digest
    assert not np.array_equal(model.classifier[0], clf_before)
    with pytest.raises(DimensionError):
        retrain_classifier(model, feats[:, :5], labels, TrainConfig(), 1, rng)


def test_retrain_separable_pseudo_set():
    rng = RngStream(1, 0)
    model = init_model(6, [8], 5, 5, rng)
    labels = np.repeat(np.arange(5), 100)
    feats = (3.0 * np.eye(5)[labels] + 0.3 * rng.gaussians((500, 5))).astype(np.float32)
    retrain_classifier(model, feats, labels, TrainConfig(lr_retrain=0.01), 50, rng)
    w, b = model.classifier
    acc = np.mean(np.argmax(feats @ w + b, axis=1) == labels)
    assert acc > 0.9


def test_checkpoint_round_trip(tmp_path):
    model = init_model(5, [7, 6], 4, 3, RngStream(0, 0))
    save_checkpoint(tmp_path / "m.bin", model)
    blob = (tmp_path / "m.bin").read_bytes()
    assert blob[:8] == b"FEDSMCK\x00"
    loaded = load_checkpoint(tmp_path / "m.bin")
    assert loaded.dims == [5, 7, 6, 4, 3]
    assert loaded.to_bytes() == blob
    with pytest.raises(ParseError):
        StudentModel.from_bytes(b"garbage!" + blob[8:])
    with pytest.raises(ParseError):
        StudentModel.from_bytes(blob + b"\x00")
