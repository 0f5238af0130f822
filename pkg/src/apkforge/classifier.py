"""Multinomial logistic regression over downsampled fused images, plus metrics.

This is a validation model, not a detector: it exists to show the fused
images carry class signal and to exercise the evaluation formulas.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataset, EmptyEvalSet, InvalidSize, ForgeError
from .fusion import lanczos_resize

MODEL_MAGIC = b"MLF1"
MODEL_VERSION = 1


def featurize(img, d: int = 32) -> np.ndarray:
    """Resize each channel to ``d x d`` and flatten channel-major, scaled to [0, 1]."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] != arr.shape[1]:
        raise InvalidSize(f"expected a square RGB image, got shape {arr.shape}")
    if d < 1:
        raise InvalidSize(f"downsample size must be positive, got {d}")
    planes = [lanczos_resize(arr[..., k], d, d) for k in range(3)]
    return np.concatenate([p.ravel() for p in planes]).astype(np.float64) / 255.0


@dataclass
class Hyper:
    learning_rate: float = 0.1
    epochs: int = 200
    l2: float = 1e-4
    batch_size: int = 32


@dataclass
class SoftmaxModel:
    weights: np.ndarray          # classes x features
    bias: np.ndarray             # classes
    classes: list[str]
    seed: int = 0
    hyper: Hyper = field(default_factory=Hyper)
    loss_trace: list[float] = field(default_factory=list)
    input_size: int = 32

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.weights.T + self.bias

    def predict_index(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def predict(self, x: np.ndarray) -> list[str]:
        return [self.classes[i] for i in self.predict_index(x)]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(weights, bias, x, y, l2):
    """Mean cross-entropy plus ``l2/2 * ||W||^2`` and its gradients."""
    n = x.shape[0]
    z = x @ weights.T + bias
    z = z - z.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_p[np.arange(n), y].mean() + 0.5 * l2 * np.sum(weights * weights)
    delta = np.exp(log_p)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return loss, delta.T @ x + l2 * weights, delta.sum(axis=0)


def train(x, labels, hyper: Hyper = Hyper(), seed: int = 0, classes=None) -> SoftmaxModel:
    """Mini-batch gradient descent from zero weights.

    Shuffling uses a generator seeded with ``seed``, so runs are bit-identical.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = list(labels)
    if x.ndim != 2 or x.shape[0] != len(labels) or not labels:
        raise DegenerateDataset("features and labels must be non-empty and aligned")
    classes = list(classes) if classes is not None else sorted(set(labels))
    if len(classes) < 2 or len(set(classes)) != len(classes):
        raise DegenerateDataset(f"need at least two distinct classes, got {classes}")
    index = {c: i for i, c in enumerate(classes)}
    try:
        y = np.array([index[lab] for lab in labels])
    except KeyError as exc:
        raise DegenerateDataset(f"label {exc.args[0]!r} not among classes") from None

    rng = np.random.default_rng(seed)
    n, f = x.shape
    weights = np.zeros((len(classes), f))
    bias = np.zeros(len(classes))
    trace = []
    bs = max(1, hyper.batch_size)
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            batch = order[start:start + bs]
            _, gw, gb = loss_and_grads(weights, bias, x[batch], y[batch], hyper.l2)
            weights -= hyper.learning_rate * gw
            bias -= hyper.learning_rate * gb
        trace.append(float(loss_and_grads(weights, bias, x, y, hyper.l2)[0]))
    return SoftmaxModel(weights, bias, classes, seed, hyper, trace, 0)


def gradient_check(model: SoftmaxModel, x, labels, n_params: int = 100,
                   h: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.array([model.classes.index(lab) for lab in labels])
    l2 = model.hyper.l2
    w, b = model.weights.copy(), model.bias.copy()
    _, gw, gb = loss_and_grads(w, b, x, y, l2)
    analytic = np.concatenate([gw.ravel(), gb])
    total = analytic.size
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    worst = 0.0
    for p in picks:
        def loss_at(delta):
            params = np.concatenate([w.ravel(), b])
            params[p] += delta
            ww = params[:w.size].reshape(w.shape)
            bb = params[w.size:]
            return loss_and_grads(ww, bb, x, y, l2)[0]
        numeric = (loss_at(h) - loss_at(-h)) / (2 * h)
        denom = max(abs(numeric) + abs(analytic[p]), 1e-8)
        worst = max(worst, abs(numeric - analytic[p]) / denom)
    return worst


# -- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def accuracy(self) -> float:
        total = self.tp + self.tn + self.fp + self.fn
        return (self.tp + self.tn) / total if total else 0.0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
                "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def confusion(truth, predicted, positive) -> Metrics:
    tp = tn = fp = fn = 0
    for t, p in zip(truth, predicted):
        if t == positive:
            tp += p == positive
            fn += p != positive
        else:
            fp += p == positive
            tn += p != positive
    return Metrics(tp, tn, fp, fn)


def positive_class(classes) -> str:
    """The class treated as positive in a binary setting: the non-benign one."""
    others = [c for c in classes if c.lower() != "benign"]
    return others[0] if len(others) == 1 else classes[-1]


def evaluate(model: SoftmaxModel, x, labels):
    """Binary :class:`Metrics` for two classes, else one-vs-rest per class."""
    labels = list(labels)
    if not labels:
        raise EmptyEvalSet("no records to evaluate")
    predicted = model.predict(np.asarray(x, dtype=np.float64))
    if len(model.classes) == 2:
        return confusion(labels, predicted, positive_class(model.classes))
    return [confusion(labels, predicted, c) for c in model.classes]


def macro_average(per_class: list[Metrics]) -> dict:
    keys = ("accuracy", "precision", "recall", "f1")
    return {k: float(np.mean([getattr(m, k) for m in per_class])) for k in keys}


def weighted_average(per_class: list[Metrics]) -> dict:
    support = np.array([m.tp + m.fn for m in per_class], dtype=np.float64)
    keys = ("accuracy", "precision", "recall", "f1")
    if support.sum() == 0:
        return {k: 0.0 for k in keys}
    return {k: float(np.dot(support, [getattr(m, k) for m in per_class]) / support.sum())
            for k in keys}


# -- persistence -------------------------------------------------------------

def save_model(model: SoftmaxModel, path) -> None:
    """Flat little-endian file: magic, version, classes, dims, float64 params."""
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", MODEL_VERSION))
    buf.write(struct.pack("<I", len(model.classes)))
    for c in model.classes:
        raw = c.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
    n_cls, n_feat = model.weights.shape
    buf.write(struct.pack("<IIIq", n_cls, n_feat, model.input_size, model.seed))
    buf.write(model.weights.astype("<f8").tobytes())
    buf.write(model.bias.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path) -> SoftmaxModel:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[:4] != MODEL_MAGIC:
            raise ForgeError("not an MLF1 model file")
        version, n = struct.unpack_from("<II", data, 4)
        if version != MODEL_VERSION:
            raise ForgeError(f"unsupported model version {version}")
        pos = 12
        classes = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", data, pos)
            classes.append(data[pos + 4:pos + 4 + ln].decode("utf-8"))
            pos += 4 + ln
        n_cls, n_feat, d, seed = struct.unpack_from("<IIIq", data, pos)
        pos += 20
        w = np.frombuffer(data, dtype="<f8", count=n_cls * n_feat, offset=pos)
        pos += 8 * n_cls * n_feat
        b = np.frombuffer(data, dtype="<f8", count=n_cls, offset=pos)
    except (struct.error, ValueError) as exc:
        raise ForgeError(f"corrupt model file: {exc}") from None
    return SoftmaxModel(w.reshape(n_cls, n_feat).astype(np.float64), b.astype(np.float64),
                        classes, seed, input_size=d)
