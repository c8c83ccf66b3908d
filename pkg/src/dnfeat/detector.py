"""Binary real-vs-generated classifier over feature maps, plus Acc / AP metrics.

Labels: 0 = real, 1 = generated. Scores are the probability of "generated".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from ._validation import (
    FormatError,
    MetricError,
    ParameterError,
    TrainingError,
    check_binary_labels,
    check_images,
    check_random_seed,
)
from .formats import read_json, read_tensor, write_json, write_tensor

STD_FLOOR = 1e-6


# -- metrics ------------------------------------------------------------------

def ranking_order(scores) -> np.ndarray:
    """Indices by descending score; ties keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at the rank of every positive.

    Computed exactly in rationals and rounded once, so equal inputs give
    equal outputs regardless of summation order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-D and equally long")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("average precision needs both positive and negative labels")
    hits = 0
    total = Fraction(0)
    for rank, idx in enumerate(ranking_order(scores), start=1):
        if labels[idx] == 1:
            hits += 1
            total += Fraction(hits, rank)
    return float(total / n_pos)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise MetricError("accuracy of an empty set is undefined")
    if scores.shape != labels.shape:
        raise MetricError("scores and labels must have the same shape")
    correct = int(np.sum((scores >= threshold).astype(int) == labels))
    return correct / scores.size


def error_rate(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise MetricError("error rate of an empty set is undefined")
    wrong = int(np.sum((scores >= threshold).astype(int) != labels))
    return wrong / scores.size


@dataclass
class EvalReport:
    accuracy: float
    average_precision: float
    n_real: int
    n_generated: int
    scores: list = field(default_factory=list, repr=False)
    labels: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "average_precision": self.average_precision,
            "n": self.n_real + self.n_generated,
            "n_real": self.n_real,
            "n_generated": self.n_generated,
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["scores"] = [float(s) for s in self.scores]
        d["labels"] = [int(v) for v in self.labels]
        return d


def evaluate(model, features, labels, threshold: float | None = None) -> EvalReport:
    labels = check_binary_labels(labels)
    scores = model.predict_score(features)
    thr = model.threshold if threshold is None else threshold
    return EvalReport(
        accuracy=accuracy(scores, labels, thr),
        average_precision=average_precision(scores, labels),
        n_real=int(np.sum(labels == 0)),
        n_generated=int(np.sum(labels == 1)),
        scores=scores.tolist(),
        labels=labels.tolist(),
    )


# -- classifier -----------------------------------------------------------------

class _LinearHead:
    def __init__(self, h, w):
        self.dense = nn.Dense("head", h * w, 1, zero=True)

    def init(self, rng, params):
        self.dense.init(rng, params)

    def forward(self, params, x):
        out, cache = self.dense.forward(params, self.embed(params, x))
        return out[:, 0], cache

    def embed(self, params, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, params, cache, dlogits):
        grads = {}
        self.dense.backward(params, cache, grads, dlogits[:, None])
        return grads


class _ResNet:
    """Conv stem, residual blocks (2x2 average pooling between them), global pool, linear.

    With ``stem_pool`` the stem output is average pooled 2x2 before the first
    block, like the strided stem of a standard ResNet. The ReLU comes first,
    so energy the stem filters pick up at the finest scale survives pooling.
    """

    def __init__(self, width, n_blocks, stem_pool=False):
        self.n_blocks = n_blocks
        self.stem_pool = stem_pool
        self.stem = nn.Conv3x3("stem", 1, width, input_grad=False)
        self.blocks = [
            (nn.Conv3x3(f"block{i}.a", width, width), nn.Conv3x3(f"block{i}.b", width, width))
            for i in range(n_blocks)
        ]
        self.head = nn.Dense("head", width, 1)

    def init(self, rng, params):
        self.stem.init(rng, params)
        for a, b in self.blocks:
            a.init(rng, params)
            b.init(rng, params)
            # residual branch starts near identity
            params[b.name + ".w"] *= 0.1
        self.head.init(rng, params)

    def forward(self, params, x):
        cache = {}
        g = self._trunk(params, x, cache)
        out, cache["head"] = self.head.forward(params, g)
        return out[:, 0], cache

    def embed(self, params, x):
        """Globally pooled activations that feed the linear head."""
        return self._trunk(params, x, {})

    def _trunk(self, params, x, cache):
        z, cache["stem"] = self.stem.forward(params, x[..., None])
        h, cache["stem.mask"] = nn.relu_forward(z)
        cache["stem.pool"] = self.stem_pool and h.shape[1] % 2 == 0 and h.shape[2] % 2 == 0
        if cache["stem.pool"]:
            h = nn.avgpool2_forward(h)
        for i, (a, b) in enumerate(self.blocks):
            za, cache[a.name] = a.forward(params, h)
            r, cache[a.name + ".mask"] = nn.relu_forward(za)
            zb, cache[b.name] = b.forward(params, r)
            h, cache[f"block{i}.mask"] = nn.relu_forward(h + zb)
            pool = i < self.n_blocks - 1 and h.shape[1] % 2 == 0 and h.shape[2] % 2 == 0
            cache[f"block{i}.pool"] = pool
            if pool:
                h = nn.avgpool2_forward(h)
        cache["gap.shape"] = h.shape
        return h.mean(axis=(1, 2))

    def backward(self, params, cache, dlogits):
        grads = {}
        dg = self.head.backward(params, cache["head"], grads, dlogits[:, None])
        n, hh, ww, c = cache["gap.shape"]
        dh = np.broadcast_to(dg[:, None, None, :] / (hh * ww), (n, hh, ww, c))
        for i in reversed(range(self.n_blocks)):
            a, b = self.blocks[i]
            if cache[f"block{i}.pool"]:
                dh = nn.avgpool2_backward(dh)
            dsum = dh * cache[f"block{i}.mask"]
            dr = b.backward(params, cache[b.name], grads, dsum) * cache[a.name + ".mask"]
            dh = dsum + a.backward(params, cache[a.name], grads, dr)
        if cache["stem.pool"]:
            dh = nn.avgpool2_backward(dh)
        self.stem.backward(params, cache["stem"], grads, dh * cache["stem.mask"])
        return grads


class DnfDetector(ClassifierMixin, BaseEstimator):
    """Real-vs-generated classifier over ``(n, H, W)`` feature maps.

    Inputs are standardized per pixel with statistics from the training
    set. Training uses Adam with a validation plateau schedule: the
    learning rate drops by ``lr_decay`` whenever validation accuracy has not
    risen by ``min_improvement`` for ``patience`` epochs, and training ends
    once it falls to ``min_learning_rate`` (or after ``max_epochs``). The
    weights with the best validation accuracy are kept.
    """

    def __init__(self, arch="resnet", width=16, n_blocks=3, stem_pool=True, batch_size=64,
                 learning_rate=1e-4, beta1=0.9, beta2=0.999, lr_decay=10.0,
                 patience=5, min_improvement=0.001, min_learning_rate=1e-6,
                 max_epochs=60, flip_prob=0.5, threshold=0.5, seed=0):
        self.arch = arch
        self.width = width
        self.n_blocks = n_blocks
        self.stem_pool = stem_pool
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.lr_decay = lr_decay
        self.patience = patience
        self.min_improvement = min_improvement
        self.min_learning_rate = min_learning_rate
        self.max_epochs = max_epochs
        self.flip_prob = flip_prob
        self.threshold = threshold
        self.seed = seed

    def _build(self, h, w):
        if self.arch == "linear":
            return _LinearHead(h, w)
        if self.arch == "resnet":
            if not 1 <= self.width <= 32:
                raise ParameterError("width must be in [1, 32]")
            return _ResNet(self.width, self.n_blocks, bool(self.stem_pool))
        raise ParameterError(f"unknown architecture {self.arch!r}")

    def _standardize(self, X):
        return ((X - self.mean_) / self.std_).astype(np.float32)

    def _logits(self, params, Xn, chunk=256):
        out = []
        for s in range(0, Xn.shape[0], chunk):
            logits, _ = self.net_.forward(params, Xn[s:s + chunk])
            out.append(logits)
        return np.concatenate(out).astype(np.float64)

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, dtype=np.float64)
        y = check_binary_labels(y, X.shape[0])
        if X_val is None:
            X_val, y_val = X, y
        X_val = check_images(X_val, dtype=np.float64, name="X_val")
        y_val = check_binary_labels(y_val, X_val.shape[0], name="y_val")
        if X_val.shape[1:] != X.shape[1:]:
            raise ParameterError("validation features have a different shape")
        for name, labels in (("training", y), ("validation", y_val)):
            if np.unique(labels).size < 2:
                raise ParameterError(f"{name} set must contain both classes")

        seed = check_random_seed(self.seed)
        self.classes_ = np.array([0, 1])
        self.feature_shape_ = X.shape[1:]
        # rounded to float32 up front so a saved and reloaded model scores identically
        self.mean_ = X.mean(axis=0).astype(np.float32).astype(np.float64)
        self.std_ = np.maximum(X.std(axis=0), STD_FLOOR).astype(np.float32).astype(np.float64)
        self.net_ = self._build(*self.feature_shape_)
        rng = np.random.default_rng(seed)
        params = {}
        self.net_.init(rng, params)

        Xn = self._standardize(X)
        flip = rng.random(X.shape[0]) < self.flip_prob
        Xn[flip] = Xn[flip][:, :, ::-1]
        Xv = self._standardize(X_val)
        yf = y.astype(np.float32)

        opt = nn.Adam(params, lr=self.learning_rate, beta1=self.beta1, beta2=self.beta2)
        n = X.shape[0]
        batch = n if self.batch_size is None else int(self.batch_size)
        best_acc, best_params, stale = -1.0, None, 0
        self.history_ = []
        for epoch in range(int(self.max_epochs)):
            order = rng.permutation(n)
            losses = []
            for s in range(0, n, batch):
                idx = order[s:s + batch]
                logits, cache = self.net_.forward(params, Xn[idx])
                loss, dlogits = nn.bce_with_logits(logits, yf[idx])
                if not np.isfinite(loss):
                    raise TrainingError(f"detector loss diverged in epoch {epoch}")
                grads = self.net_.backward(params, cache, dlogits.astype(np.float32))
                opt.step(params, grads)
                losses.append(loss * len(idx))
            val_acc = accuracy(nn.sigmoid(self._logits(params, Xv)), y_val, self.threshold)
            self.history_.append({
                "epoch": epoch, "loss": float(np.sum(losses) / n),
                "val_accuracy": val_acc, "learning_rate": opt.lr,
            })
            if val_acc >= best_acc + self.min_improvement:
                best_acc, stale = val_acc, 0
                best_params = {k: v.copy() for k, v in params.items()}
            else:
                stale += 1
                if stale >= self.patience:
                    opt.lr /= self.lr_decay
                    stale = 0
                    if opt.lr <= self.min_learning_rate * (1 + 1e-9):
                        break
        self.params_ = best_params if best_params is not None else params
        self.best_val_accuracy_ = best_acc
        self.final_learning_rate_ = opt.lr
        self.n_epochs_ = len(self.history_)
        return self

    def _check_features(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, dtype=np.float64)
        if X.shape[1:] != tuple(self.feature_shape_):
            raise ParameterError(
                f"feature shape {X.shape[1:]} does not match the model's {tuple(self.feature_shape_)}")
        return X

    def decision_function(self, X):
        X = self._check_features(X)
        return self._logits(self.params_, self._standardize(X))

    def embed(self, X, chunk=256) -> np.ndarray:
        """Representation the final linear layer sees, one row per feature map."""
        X = self._check_features(X)
        Xn = self._standardize(X)
        return np.concatenate([self.net_.embed(self.params_, Xn[s:s + chunk])
                               for s in range(0, Xn.shape[0], chunk)]).astype(np.float64)

    def predict_score(self, X) -> np.ndarray:
        """Probability that each feature map comes from a generated image."""
        return nn.sigmoid(self.decision_function(X)).astype(np.float64)

    def predict_proba(self, X):
        p = self.predict_score(X)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X):
        return (self.predict_score(X) >= self.threshold).astype(np.int64)

    def score(self, X, y, sample_weight=None):
        return accuracy(self.predict_score(X), check_binary_labels(y), self.threshold)

    # -- persistence -----------------------------------------------------------
    def save(self, directory) -> None:
        check_is_fitted(self, "params_")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_tensor(directory / "stats.mean.dnft", self.mean_)
        write_tensor(directory / "stats.std.dnft", self.std_)
        for k, v in sorted(self.params_.items()):
            write_tensor(directory / f"param.{k}.dnft", v)
        write_json(directory / "detector.json", {
            "kind": "dnf-detector",
            "config": self.get_params(),
            "feature_shape": list(self.feature_shape_),
            "params": sorted(self.params_),
            "best_val_accuracy": self.best_val_accuracy_,
            "final_learning_rate": self.final_learning_rate_,
            "n_epochs": self.n_epochs_,
            "history": self.history_,
        })

    @classmethod
    def load(cls, directory) -> "DnfDetector":
        directory = Path(directory)
        meta = read_json(directory / "detector.json")
        if meta.get("kind") != "dnf-detector":
            raise FormatError(f"{directory} does not hold a detector")
        model = cls(**meta["config"])
        model.classes_ = np.array([0, 1])
        model.feature_shape_ = tuple(meta["feature_shape"])
        model.mean_ = read_tensor(directory / "stats.mean.dnft").astype(np.float64)
        model.std_ = read_tensor(directory / "stats.std.dnft").astype(np.float64)
        model.net_ = model._build(*model.feature_shape_)
        model.params_ = {k: read_tensor(directory / f"param.{k}.dnft") for k in meta["params"]}
        model.best_val_accuracy_ = meta["best_val_accuracy"]
        model.final_learning_rate_ = meta["final_learning_rate"]
        model.n_epochs_ = meta["n_epochs"]
        model.history_ = meta["history"]
        return model


def train_detector(features, labels, val_features, val_labels, config: dict | None = None) -> DnfDetector:
    return DnfDetector(**(config or {})).fit(features, labels, val_features, val_labels)


def predict_score(model: DnfDetector, feature) -> float:
    """Score a single ``(H, W)`` feature map."""
    feature = np.asarray(feature)
    if feature.ndim != 2:
        raise ParameterError(f"expected one (H, W) feature map, got shape {feature.shape}")
    return float(model.predict_score(feature[None])[0])
