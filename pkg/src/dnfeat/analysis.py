"""Frequency-domain and embedding analyses of feature populations."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import MetricError, ParameterError, check_binary_labels, check_images
from .formats import write_json, write_png, write_tensor


def dft2(x) -> np.ndarray:
    """Unnormalized 2-D DFT: ``X[k, l] = sum_{m, n} x[m, n] exp(-2 pi i (km/M + ln/N))``."""
    return np.fft.fft2(np.asarray(x, dtype=np.float64))


@dataclass
class SpectrumMap:
    """Mean of ``log(1 + |DFT|)`` over a population, DC bin at the centre."""

    mean: np.ndarray
    stderr: np.ndarray
    count: int

    def save(self, path_stem) -> None:
        stem = Path(path_stem)
        write_tensor(stem.with_suffix(".mean.dnft"), self.mean)
        write_tensor(stem.with_suffix(".stderr.dnft"), self.stderr)
        write_json(stem.with_suffix(".json"), {
            "count": self.count, "shape": list(self.mean.shape), "origin": "centered",
            "transform": "log1p(abs(dft2))",
        })

    def to_png(self, path) -> None:
        write_png(path, render_uint8(self.mean))


def render_uint8(x) -> np.ndarray:
    """Min-max normalize to 8-bit grayscale (all-zero for a constant map)."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(x.shape, dtype=np.uint8)
    return np.floor((x - lo) / (hi - lo) * 255 + 0.5).astype(np.uint8)


def mean_log_spectrum(features) -> SpectrumMap:
    X = check_images(features, dtype=np.float64, name="features")
    if X.shape[0] < 2:
        raise ParameterError("need at least two feature maps")
    logmag = np.log1p(np.abs(np.fft.fft2(X, axes=(1, 2))))
    mean = logmag.mean(axis=0)
    stderr = logmag.std(axis=0, ddof=1) / np.sqrt(X.shape[0])
    return SpectrumMap(np.fft.fftshift(mean), np.fft.fftshift(stderr), X.shape[0])


def combine_spectra(maps) -> np.ndarray:
    """Count-weighted mean of several spectrum means."""
    maps = list(maps)
    total = sum(m.count for m in maps)
    return sum(m.mean * m.count for m in maps) / total


def spectral_flatness(feature) -> float:
    """Geometric over arithmetic mean of the non-DC spectral magnitudes.

    Close to 1 for white noise, close to 0 when energy sits in a few bins.
    """
    x = np.asarray(feature, dtype=np.float64)
    if x.size < 2 or not np.all(np.isfinite(x)):
        raise MetricError("flatness needs a finite tensor with at least two entries")
    if np.ptp(x) == 0:
        raise MetricError("flatness of a constant tensor is undefined")
    mag = np.abs(np.fft.fftn(x)).ravel()[1:]
    with np.errstate(divide="ignore"):
        geo = np.exp(np.mean(np.log(mag)))
    return float(geo / mag.mean())


class PCAEmbedding(TransformerMixin, BaseEstimator):
    """Projection onto the top principal directions of flattened feature maps.

    Each direction's sign is fixed so its largest-magnitude loading is
    positive, making the output independent of row order.
    """

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        n, d = X.shape
        k = int(self.n_components)
        if k < 1 or k > d:
            raise ParameterError(f"n_components={k} must be in [1, {d}]")
        if k > n:
            raise ParameterError(f"n_components={k} exceeds the number of samples {n}")
        self.mean_ = X.mean(axis=0)
        cov = (X - self.mean_).T @ (X - self.mean_) / max(n - 1, 1)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals, kind="stable")[::-1][:k]
        comps = evecs[:, order].T
        pivot = np.argmax(np.abs(comps), axis=1)
        signs = np.sign(comps[np.arange(k), pivot])
        self.components_ = comps * signs[:, None]
        self.explained_variance_ = evals[order]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        return np.asarray(Z) @ self.components_ + self.mean_


def pca_embed(features, k: int = 2) -> np.ndarray:
    return PCAEmbedding(k).fit_transform(features)


def class_separation(features, labels) -> float:
    """Distance between the two class means over the pooled within-class spread.

    ``||m1 - m0|| / sqrt(sum_j s_j^2)`` where ``s_j^2`` is the pooled
    within-class variance of coordinate ``j`` (``n - 2`` degrees of freedom).
    The denominator is the RMS distance of a sample from its class mean, so
    the statistic is invariant to rescaling and comparable across feature
    types of different sizes.
    """
    X = np.asarray(features, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    y = check_binary_labels(labels, X.shape[0], name="labels")
    groups = [X[y == c] for c in (0, 1)]
    if min(len(g) for g in groups) < 2:
        raise MetricError("each class needs at least two samples")
    means = [g.mean(axis=0) for g in groups]
    ss = sum(np.sum((g - m) ** 2) for g, m in zip(groups, means))
    spread = np.sqrt(ss / (X.shape[0] - 2))
    if spread == 0:
        raise MetricError("features have no within-class variation")
    return float(np.linalg.norm(means[1] - means[0]) / spread)
