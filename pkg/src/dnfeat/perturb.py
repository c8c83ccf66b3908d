"""Image perturbations applied before feature extraction: Gaussian blur and JPEG.

Both operate on ``(H, W)`` or ``(H, W, C)`` images. uint8 inputs give uint8
outputs (round half up, clip to ``[0, 255]``); float inputs to
:func:`gaussian_blur` stay float so intensity bookkeeping is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import ParameterError

BLUR = "blur"
JPEG = "jpeg"

# ITU T.81 Annex K, table K.1 (luminance)
LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D taps ``exp(-i^2 / 2 sigma^2)`` for ``|i| <= ceil(3 sigma)``."""
    radius = int(math.ceil(3 * sigma))
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(i ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _blur_axis(x: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    r = (w.size - 1) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="symmetric")
    n = x.shape[axis]

    def window(offset):
        return np.take(xp, np.arange(r + offset, r + offset + n), axis=axis)

    out = w[r] * window(0)
    for k in range(1, r + 1):
        # mirrored taps are summed first so flipping the image flips the result exactly
        out = out + w[r + k] * (window(k) + window(-k))
    return out


def gaussian_blur(image, sigma: float):
    """Separable Gaussian blur with reflective boundaries; ``sigma = 0`` is the identity."""
    if not sigma >= 0:
        raise ParameterError(f"blur sigma must be >= 0, got {sigma}")
    image = np.asarray(image)
    if image.ndim not in (2, 3):
        raise ParameterError(f"expected (H, W) or (H, W, C) image, got {image.shape}")
    if sigma == 0:
        return image.copy()
    w = gaussian_kernel(sigma)
    x = image.astype(np.float64)
    x = _blur_axis(_blur_axis(x, w, 1), w, 0)
    return _to_uint8(x) if image.dtype == np.uint8 else x


def quantization_table(quality: int) -> np.ndarray:
    """Annex-K luminance table scaled with the usual libjpeg quality mapping."""
    if int(quality) != quality or not 1 <= quality <= 100:
        raise ParameterError(f"JPEG quality must be an integer in [1, 100], got {quality!r}")
    quality = int(quality)
    scale = 200 - 2 * quality if quality >= 50 else 5000 // quality
    return np.clip((LUMINANCE_TABLE * scale + 50) // 100, 1, 255).astype(np.float64)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos((2 * i + 1) * k * np.pi / (2 * n)) * np.sqrt(2.0 / n)
    c[0, :] = np.sqrt(1.0 / n)
    return c


_DCT = _dct_matrix()


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _jpeg_plane(plane: np.ndarray, q: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(plane.astype(np.float64), ((0, ph), (0, pw)), mode="edge") - 128.0
    H, W = x.shape
    blocks = x.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coef = _DCT @ blocks @ _DCT.T
    coef = _round_half_away(coef / q) * q
    rec = (_DCT.T @ coef @ _DCT).transpose(0, 2, 1, 3).reshape(H, W) + 128.0
    return _to_uint8(rec[:h, :w])


def jpeg_roundtrip(image, quality: int) -> np.ndarray:
    """Baseline-JPEG quantization round trip (8x8 DCT, no entropy coding, no chroma subsampling)."""
    q = quantization_table(quality)
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ParameterError("jpeg_roundtrip expects uint8 pixels")
    if image.ndim == 2:
        return _jpeg_plane(image, q)
    if image.ndim == 3:
        return np.stack([_jpeg_plane(image[..., c], q) for c in range(image.shape[2])], axis=-1)
    raise ParameterError(f"expected (H, W) or (H, W, C) image, got {image.shape}")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    param: float

    def __post_init__(self):
        if self.kind == BLUR:
            if not self.param >= 0:
                raise ParameterError(f"blur sigma must be >= 0, got {self.param}")
        elif self.kind == JPEG:
            if int(self.param) != self.param or not 1 <= self.param <= 100:
                raise ParameterError(f"JPEG quality must be an integer in [1, 100], got {self.param}")
            object.__setattr__(self, "param", int(self.param))
        else:
            raise ParameterError(f"unknown perturbation kind {self.kind!r}")

    def apply(self, image):
        if self.kind == BLUR:
            return gaussian_blur(image, self.param)
        return jpeg_roundtrip(image, self.param)

    def to_dict(self):
        return {"kind": self.kind, "param": self.param}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"kind", "param"}
        if unknown:
            raise ParameterError(f"unknown perturbation keys {sorted(unknown)}")
        return cls(d["kind"], d["param"])


DEFAULT_GRID = (
    [PerturbationSpec(BLUR, s) for s in (0, 1, 2, 3)]
    + [PerturbationSpec(JPEG, q) for q in (100, 65, 30)]
)


def _perturbed_feature(args):
    spec, img, dnf_config = args
    from threadpoolctl import threadpool_limits

    from .dnf import extract_dnf

    try:
        with threadpool_limits(1):
            return extract_dnf(spec.apply(img), dnf_config).values, None
    except Exception as exc:  # per-item failure, sweep continues
        return None, f"{type(exc).__name__}: {exc}"


def perturbation_sweep(images, labels, detector, dnf_config, specs, workers: int = 1) -> list[dict]:
    """Perturb, extract, and evaluate once per spec; one report row per spec.

    ``images`` is a uint8 stack ``(n, H, W)``; ``detector`` a fitted
    :class:`~dnfeat.detector.DnfDetector`. Items whose extraction fails are
    recorded in the row's ``failures`` and left out of the metrics. Rows do
    not depend on ``workers``.
    """
    from concurrent.futures import ProcessPoolExecutor

    from .detector import evaluate

    specs = list(specs)
    if not specs:
        raise ParameterError("no perturbation specs given")
    images = np.asarray(images)
    labels = np.asarray(labels)
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    rows = []
    try:
        for spec in specs:
            jobs = [(spec, img, dnf_config) for img in images]
            if pool is None:
                outcomes = [_perturbed_feature(j) for j in jobs]
            else:
                outcomes = list(pool.map(_perturbed_feature, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
            feats = [v for v, _ in outcomes if v is not None]
            kept = [i for i, (v, _) in enumerate(outcomes) if v is not None]
            failures = [{"index": i, "error": e} for i, (_, e) in enumerate(outcomes) if e is not None]
            report = evaluate(detector, np.stack(feats), labels[kept]) if feats else None
            row = {"spec": spec.to_dict(), "failures": failures}
            row.update(report.summary() if report else {"accuracy": None, "average_precision": None, "n": 0})
            rows.append(row)
    finally:
        if pool is not None:
            pool.shutdown()
    return rows


class GaussianBlur(TransformerMixin, BaseEstimator):
    """Blur every image of a stack ``(n, H, W)``."""

    def __init__(self, sigma=0.0):
        self.sigma = sigma

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return np.stack([gaussian_blur(img, self.sigma) for img in np.asarray(X)])


class JpegRoundtrip(TransformerMixin, BaseEstimator):
    """JPEG-quantize every image of a uint8 stack ``(n, H, W)``."""

    def __init__(self, quality=75):
        self.quality = quality

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return np.stack([jpeg_roundtrip(img, self.quality) for img in np.asarray(X)])
