import itertools

import numpy as np
import pytest

from apkforge import classifier as clf
from apkforge.classifier import Hyper, Metrics
from apkforge.errors import DegenerateDataset, EmptyEvalSet, ForgeError, InvalidSize

import oracles


def toy_separable(seed=0, n=100):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 0.3, (n, 2)) + [-1.5, 0]
    b = rng.normal(0, 0.3, (n, 2)) + [1.5, 0]
    # enforce a margin of at least 1 around x = 0
    a[:, 0] = np.minimum(a[:, 0], -0.5)
    b[:, 0] = np.maximum(b[:, 0], 0.5)
    return np.vstack([a, b]), ["a"] * n + ["b"] * n


def test_featurize_constant_images():
    assert not clf.featurize(np.zeros((256, 256, 3), np.uint8)).any()
    ones = clf.featurize(np.full((256, 256, 3), 255, np.uint8), d=8)
    assert ones.shape == (192,) and (ones == 1.0).all()


def test_featurize_channel_slice_is_resized_plane():
    from apkforge.fusion import lanczos_resize
    img = np.random.default_rng(2).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    v = clf.featurize(img, d=16)
    assert np.array_equal(v[:256], lanczos_resize(img[..., 0], 16, 16).ravel() / 255.0)


def test_featurize_rejects_non_square():
    with pytest.raises(InvalidSize):
        clf.featurize(np.zeros((10, 12, 3), np.uint8))


def test_separable_toy_reaches_high_accuracy():
    x, y = toy_separable()
    model = clf.train(x, y, Hyper(learning_rate=0.1, epochs=200), seed=0)
    acc = np.mean(np.array(model.predict(x)) == np.array(y))
    assert acc >= 0.99


def test_loss_trace_non_increasing_full_batch():
    x, y = toy_separable(1)
    model = clf.train(x, y, Hyper(learning_rate=0.05, epochs=50, batch_size=len(y)), seed=0)
    assert np.all(np.diff(model.loss_trace) <= 1e-12)


def test_memorizes_duplicated_samples():
    x = np.array([[1.0, 0.0, 0.2], [1.0, 0.0, 0.2], [0.0, 1.0, 0.7], [0.0, 1.0, 0.7]])
    y = ["p", "p", "q", "q"]
    model = clf.train(x, y, Hyper(epochs=100), seed=3)
    assert model.predict(x) == y


def test_indistinguishable_inputs():
    x = np.ones((10, 4))
    y = ["a"] * 7 + ["b"] * 3
    model = clf.train(x, y, Hyper(epochs=50), seed=0)
    acc = np.mean(np.array(model.predict(x)) == np.array(y))
    assert acc <= 0.7


def test_degenerate_datasets():
    with pytest.raises(DegenerateDataset):
        clf.train(np.zeros((3, 2)), ["a", "a", "a"])
    with pytest.raises(DegenerateDataset):
        clf.train(np.zeros((0, 2)), [])


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check_random_init(seed):
    rng = np.random.default_rng(seed)
    classes = ["a", "b", "c"]
    model = clf.SoftmaxModel(rng.normal(0, 0.5, (3, 40)), rng.normal(0, 0.5, 3), classes,
                             hyper=Hyper(l2=1e-3))
    x = rng.random((16, 40))
    labels = list(rng.choice(classes, 16))
    assert clf.gradient_check(model, x, labels, n_params=100, seed=seed) < 1e-4


def test_zero_init_bias_gradient_closed_form():
    classes = ["a", "b"]
    model = clf.SoftmaxModel(np.zeros((2, 5)), np.zeros(2), classes)
    x = np.random.default_rng(0).random((4, 5))
    labels = ["a", "b", "a", "b"]
    y = np.array([0, 1, 0, 1])
    _, _, gb = clf.loss_and_grads(model.weights, model.bias, x, y, 0.0)
    onehot_mean = np.eye(2)[y].mean(axis=0)
    assert np.allclose(gb, 0.5 - onehot_mean)
    assert clf.gradient_check(model, x, labels, n_params=12) < 1e-4


def test_gradient_check_single_sample():
    rng = np.random.default_rng(7)
    model = clf.SoftmaxModel(rng.normal(size=(2, 6)), rng.normal(size=2), ["x", "y"])
    assert clf.gradient_check(model, rng.random(6), ["y"]) < 1e-4


def test_training_is_bit_identical():
    x, y = toy_separable(5, 40)
    m1 = clf.train(x, y, Hyper(epochs=30, batch_size=7), seed=11)
    m2 = clf.train(x, y, Hyper(epochs=30, batch_size=7), seed=11)
    assert m1.weights.tobytes() == m2.weights.tobytes()
    assert m1.bias.tobytes() == m2.bias.tobytes()


def test_logit_shift_invariance():
    rng = np.random.default_rng(0)
    model = clf.SoftmaxModel(rng.normal(size=(4, 8)), rng.normal(size=4), list("abcd"))
    x = rng.random((20, 8))
    before = model.predict_index(x)
    model.bias = model.bias + 123.25
    assert np.array_equal(model.predict_index(x), before)
    z = rng.normal(size=(5, 4))
    assert np.allclose(clf.softmax(z), clf.softmax(z + 1000.0))


def test_worked_metrics():
    m = Metrics(tp=3, tn=5, fp=1, fn=1)
    assert (m.accuracy, m.precision, m.recall, m.f1) == pytest.approx((0.8, 0.75, 0.75, 0.75), abs=1e-12)


def test_perfect_and_all_negative_predictors():
    truth = ["mal"] * 4 + ["benign"] * 6
    m = clf.confusion(truth, truth, "mal")
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)
    m = clf.confusion(truth, ["benign"] * 10, "mal")
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
    assert m.accuracy == 6 / 10


def test_metric_grid_small():
    for tp, tn, fp, fn in itertools.product(range(4), repeat=4):
        got = Metrics(tp, tn, fp, fn)
        ref = oracles.metrics_ref(tp, tn, fp, fn)
        assert np.allclose((got.accuracy, got.precision, got.recall, got.f1), ref, atol=1e-12, rtol=0)


def test_evaluate_binary_and_multiclass():
    model = clf.SoftmaxModel(np.eye(3), np.zeros(3), ["benign", "sms", "adware"])
    x = np.eye(3)[[0, 1, 2, 1]]
    per = clf.evaluate(model, x, ["benign", "sms", "adware", "adware"])
    assert [m.tp for m in per] == [1, 1, 1]
    macro = clf.macro_average(per)
    weighted = clf.weighted_average(per)
    assert set(macro) == set(weighted) == {"accuracy", "precision", "recall", "f1"}
    two = clf.SoftmaxModel(np.eye(2), np.zeros(2), ["benign", "sms"])
    m = clf.evaluate(two, np.eye(2)[[0, 1, 1]], ["benign", "sms", "benign"])
    assert (m.tp, m.tn, m.fp, m.fn) == (1, 1, 1, 0)
    with pytest.raises(EmptyEvalSet):
        clf.evaluate(two, np.zeros((0, 2)), [])


def test_positive_class_is_the_non_benign_one():
    assert clf.positive_class(["benign", "sms"]) == "sms"
    assert clf.positive_class(["Benign", "adware"]) == "adware"
    assert clf.positive_class(["clean", "sms"]) == "sms"


def test_model_file_roundtrip(tmp_path):
    x, y = toy_separable(2, 20)
    model = clf.train(x, y, Hyper(epochs=5), seed=9)
    model.input_size = 32
    path = tmp_path / "m.bin"
    clf.save_model(model, path)
    assert path.read_bytes()[:4] == b"MLF1"
    back = clf.load_model(path)
    assert back.classes == model.classes and back.seed == 9 and back.input_size == 32
    assert back.weights.tobytes() == model.weights.tobytes()
    assert back.predict(x) == model.predict(x)
    path.write_bytes(b"junk")
    with pytest.raises(ForgeError):
        clf.load_model(path)
