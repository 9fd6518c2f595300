import numpy as np
import pytest

from conftest import as_training
from kdseg.distill import DistillConfig, Variant, loss_ce
from kdseg.errors import DataError, ParameterError, ScenarioError
from kdseg.segnet import SegModel, encoder_param_names, extend_classifier, snapshot
from kdseg.tensor import Tensor, no_grad
from kdseg.trainer import SGD, AugmentSpec, TrainConfig, augment, batches, poly_lr, train_incremental, train_initial


def test_poly_lr_values():
    assert poly_lr(0, 100, 1e-4, 1e-6) == 1e-4
    assert poly_lr(100, 100, 1e-4, 1e-6) == 1e-6
    assert poly_lr(50, 100, 1e-4, 1e-6, 0.9) == pytest.approx(1e-6 + 9.9e-5 * 0.5**0.9, rel=1e-12)
    assert poly_lr(50, 100, 1e-4, 1e-6, 0.9) == pytest.approx(5.405e-5, rel=1e-3)
    with pytest.raises(ParameterError):
        poly_lr(0, 0, 1e-4, 1e-6)


def _sample(seed, size=24, classes=4):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(size, size, 3)).astype(np.float32), rng.integers(0, classes, size=(size, size))


def test_augment_pure_crop_is_subwindow():
    img, lab = _sample(0)
    spec = AugmentSpec(flip_prob=0.0, scale_min=1.0, scale_max=1.0)
    a, b = augment(img, lab, spec, np.random.default_rng(1), crop=8)
    hits = [(y, x) for y in range(17) for x in range(17) if np.array_equal(lab[y:y + 8, x:x + 8], b)]
    assert any(np.array_equal(img[y:y + 8, x:x + 8], a) for y, x in hits)


def test_flip_twice_restores_window():
    img, lab = _sample(2)
    flip = AugmentSpec(flip_prob=1.0, scale_min=1.0, scale_max=1.0)
    once_img, once_lab = augment(img, lab, flip, np.random.default_rng(3), crop=24)
    twice_img, twice_lab = augment(once_img, once_lab, flip, np.random.default_rng(3), crop=24)
    np.testing.assert_array_equal(twice_img, img)
    np.testing.assert_array_equal(twice_lab, lab)


def test_scaling_never_invents_classes():
    img, lab = _sample(4, classes=5)
    lab[lab == 3] = 0
    before = set(np.unique(lab).tolist()) | {255}
    for seed in range(100):
        _, out = augment(img, lab, AugmentSpec(), np.random.default_rng(seed), crop=32)
        assert set(np.unique(out).tolist()) <= before


def test_augment_is_deterministic_per_rng_state():
    img, lab = _sample(5)
    a = augment(img, lab, AugmentSpec(), np.random.default_rng(9), crop=16)
    b = augment(img, lab, AugmentSpec(), np.random.default_rng(9), crop=16)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_weight_decay_is_exact_with_zero_gradient():
    p = Tensor(np.array([1.0, -2.0, 0.5], np.float32), requires_grad=True)
    p.grad = np.zeros(3, np.float32)
    start = p.data.copy()
    SGD([p], weight_decay=0.01).step(0.1)
    np.testing.assert_array_equal(p.data, start * np.float32(1 - 0.1 * 0.01))


def _cfg(**kw):
    base = dict(steps_per_class=2, crop=16, batch_size=2, seed=3, lr_start=0.05)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def samples(small_arrays):
    return as_training(small_arrays)


def test_zero_steps_leave_model_unchanged(samples):
    model = SegModel(6, seed=0)
    before = model.state_dict()
    _, hist = train_initial(model, samples, _cfg(steps_per_class=0))
    assert hist == []
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_initial_training_reduces_loss(samples):
    model = SegModel(6, seed=1)
    images = np.stack([s[0] for s in samples[:8]])
    labels = np.stack([s[1] for s in samples[:8]])

    def ce():
        with no_grad():
            return float(loss_ce(model.forward(images).logits, labels).data)

    before = ce()
    _, hist = train_initial(model, samples, _cfg(steps_per_class=15, crop=32, batch_size=4))
    assert len(hist) == 6 * 15
    assert ce() < before


def test_training_is_deterministic(samples):
    a, _ = train_initial(SegModel(6, seed=2), samples, _cfg())
    b, _ = train_initial(SegModel(6, seed=2), samples, _cfg())
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, b.state_dict()[k])


def test_initial_training_checks_inputs(samples):
    with pytest.raises(DataError):
        train_initial(SegModel(3), [], _cfg())
    with pytest.raises(ScenarioError):
        train_initial(SegModel(3), samples, _cfg(), num_initial=4)


def _incremental(samples, distill, freeze="none", steps=3):
    base = SegModel(5, seed=4)
    teacher = snapshot(base)
    student = extend_classifier(base, 1, seed=1)
    cfg = _cfg(steps_per_class=steps, distill=distill, freeze=freeze)
    return teacher, base, train_incremental(teacher, student, samples, cfg)


def test_zero_lambda_equals_fine_tuning(samples):
    _, _, (ft, _) = _incremental(samples, DistillConfig(Variant.NONE))
    _, _, (zero, _) = _incremental(samples, DistillConfig(Variant.CLS_T, lambda_d=0.0))
    for k, v in ft.state_dict().items():
        np.testing.assert_array_equal(v, zero.state_dict()[k])


def test_enc_distillation_starts_at_zero(samples):
    _, _, (_, hist) = _incremental(samples, DistillConfig(Variant.ENC))
    assert hist[0].distill == 0.0
    assert hist[-1].distill > 0.0


def test_encoder_frozen_step(samples):
    teacher, base, (student, hist) = _incremental(samples, DistillConfig(Variant.CLS_T), freeze="encoder", steps=4)
    assert len(hist) == 1 * 4
    for name in encoder_param_names(student):
        np.testing.assert_array_equal(student.params[name].data, base.params[name].data)
    assert not np.array_equal(student.params["head.weight"].data[..., :5], base.params["head.weight"].data)


def test_teacher_is_untouched_by_incremental_step(samples):
    x = np.stack([s[0][:16, :16] for s in samples[:2]])
    base = SegModel(5, seed=4)
    teacher = snapshot(base)
    probe = teacher.forward(x).logits.data.copy()
    train_incremental(teacher, extend_classifier(base, 1), samples, _cfg(distill=DistillConfig(Variant.DEC)))
    np.testing.assert_array_equal(teacher.forward(x).logits.data, probe)


def test_incremental_requires_added_classes(samples):
    base = SegModel(5)
    with pytest.raises(ScenarioError):
        train_incremental(snapshot(base), base.copy(), samples, _cfg())


def test_batches_cycle_and_shapes(samples):
    feed = batches(samples[:3], _cfg(batch_size=2), stream=0)
    imgs, labs = next(feed)
    assert imgs.shape == (2, 16, 16, 3) and labs.shape == (2, 16, 16)
    for _ in range(5):
        next(feed)
