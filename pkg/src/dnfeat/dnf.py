"""Diffusion noise features: fuse the noise predicted during inversion.

The ``first`` strategy needs only one predictor call per image, so
extraction stops after the first inversion step in that case.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import DNFError, ParameterError, check_images
from .diffusion import invert
from .formats import (
    config_hash,
    read_image,
    read_json,
    sha256_hex,
    write_json,
    write_tensor,
)
from .schedule import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_T,
    UNIFORM,
    make_linear_schedule,
    sample_timesteps,
)

log = logging.getLogger(__name__)

STRATEGIES = ("first", "avg", "last")


def fuse(noises, strategy: str = "first") -> np.ndarray:
    """Collapse a noise sequence into one tensor: first element, mean, or last element."""
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown fusion strategy {strategy!r}")
    noises = list(noises)
    if not noises:
        raise ParameterError("cannot fuse an empty noise sequence")
    if strategy == "first":
        return np.asarray(noises[0])
    if strategy == "last":
        return np.asarray(noises[-1])
    acc = np.zeros(np.shape(noises[0]), dtype=np.float64)
    for e in noises:
        acc += e
    return acc / len(noises)


def to_unit_range(img) -> np.ndarray:
    """Map 8-bit pixel values to ``[-1, 1]``."""
    return np.asarray(img, dtype=np.float64) / 127.5 - 1.0


def from_unit_range(x) -> np.ndarray:
    """Inverse of :func:`to_unit_range`, rounded and clipped to uint8."""
    return np.clip(np.floor((np.asarray(x) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def resize_to(img: np.ndarray, resolution: int) -> np.ndarray:
    img = np.asarray(img)
    if img.shape[:2] == (resolution, resolution):
        return img
    if img.dtype != np.uint8:
        img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return np.asarray(Image.fromarray(img).resize((resolution, resolution), Image.BILINEAR))


@dataclass
class DnfConfig:
    """Everything that determines a feature, apart from the image itself."""

    predictor: object
    resolution: int = 32
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    n_steps: int = 20
    timestep_mode: str = UNIFORM
    strategy: str = "first"
    schedule: object = field(init=False, repr=False)
    taus: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown fusion strategy {self.strategy!r}")
        if self.resolution < 1:
            raise ParameterError("resolution must be positive")
        self.schedule = make_linear_schedule(self.T, self.beta_start, self.beta_end)
        self.taus = sample_timesteps(self.T, self.n_steps, self.timestep_mode).tolist()

    def provenance(self) -> dict:
        return {
            "predictor": self.predictor.describe(),
            "schedule": self.schedule.to_dict(),
            "taus": self.taus,
            "timestep_mode": self.timestep_mode,
            "strategy": self.strategy,
            "resolution": self.resolution,
        }

    def hash(self) -> str:
        return config_hash(self.provenance())


@dataclass
class DnfFeature:
    values: np.ndarray
    provenance: dict


def _noise_stats(trace) -> list:
    stats = []
    for tau, e in zip(trace.taus, trace.noises):
        e = np.asarray(e, dtype=np.float64).ravel()
        sd = float(e.std())
        kurt = float(np.mean((e - e.mean()) ** 4) / sd ** 4) if sd > 0 else None
        stats.append({"tau": int(tau), "mean": float(e.mean()), "std": sd, "kurtosis": kurt})
    return stats


def _source_hash(image) -> tuple[np.ndarray, str]:
    if isinstance(image, (str, os.PathLike)):
        data = Path(image).read_bytes()
        return read_image(data), sha256_hex(data)
    if isinstance(image, (bytes, bytearray)):
        return read_image(bytes(image)), sha256_hex(bytes(image))
    arr = np.asarray(image)
    return arr, sha256_hex(repr(arr.shape).encode() + str(arr.dtype).encode() + arr.tobytes())


def extract_dnf(image, config: DnfConfig, *, with_stats: bool = False) -> DnfFeature:
    """Compute the feature of one image (a path, encoded bytes, or a uint8 array)."""
    pixels, content = _source_hash(image)
    if pixels.ndim != 2:
        raise ParameterError(f"expected a single-channel image, got shape {pixels.shape}")
    x0 = to_unit_range(resize_to(pixels, config.resolution))
    max_steps = 1 if config.strategy == "first" else None
    trace = invert(x0, config.taus, config.predictor, config.schedule, max_steps=max_steps)
    values = np.asarray(fuse(trace.noises, config.strategy), dtype=np.float32)
    if not np.all(np.isfinite(values)):
        raise DNFError("predictor produced non-finite noise")
    prov = config.provenance()
    prov["source_sha256"] = content
    if with_stats:
        prov["noise_stats"] = _noise_stats(trace)
    return DnfFeature(values, prov)


def extract_all_strategies(x0, config: DnfConfig) -> dict:
    """One full inversion of an image in ``[-1, 1]``, fused every way."""
    trace = invert(x0, config.taus, config.predictor, config.schedule)
    return {s: np.asarray(fuse(trace.noises, s), dtype=np.float32) for s in STRATEGIES}


def cache_key(content_hash: str, cfg_hash: str) -> str:
    return f"{content_hash}-{cfg_hash}"


@dataclass
class BatchResult:
    """Outcome of :func:`extract_batch`, in dataset order."""

    keys: list = field(default_factory=list)
    paths: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    computed: int = 0
    cached: int = 0

    def report(self) -> dict:
        return {
            "n_items": len(self.keys) + len(self.failures),
            "n_ok": len(self.keys),
            "computed": self.computed,
            "cached": self.cached,
            "failures": self.failures,
        }


def _same_except_strategy(configs) -> bool:
    keys = [{k: v for k, v in c.provenance().items() if k != "strategy"} for c in configs]
    return all(k == keys[0] for k in keys)


def _extract_one(args):
    path, configs, cache_dir = args
    from threadpoolctl import threadpool_limits

    try:
        data = Path(path).read_bytes()
        content = sha256_hex(data)
        keys = [cache_key(content, c.hash()) for c in configs]
        todo = [
            (c, k) for c, k in zip(configs, keys)
            if not ((Path(cache_dir) / f"{k}.dnft").exists() and (Path(cache_dir) / f"{k}.json").exists())
        ]
        if not todo:
            return ("cached", keys, None)
        with threadpool_limits(1):
            pixels = read_image(data)
            base = todo[0][0]
            x0 = to_unit_range(resize_to(pixels, base.resolution))
            full = any(c.strategy != "first" for c, _ in todo)
            trace = invert(x0, base.taus, base.predictor, base.schedule, max_steps=None if full else 1)
        stats = _noise_stats(trace)
        for c, k in todo:
            values = np.asarray(fuse(trace.noises, c.strategy), dtype=np.float32)
            if not np.all(np.isfinite(values)):
                raise DNFError("predictor produced non-finite noise")
            prov = c.provenance()
            prov["source_sha256"] = content
            prov["noise_stats"] = stats if c.strategy != "first" else stats[:1]
            write_tensor(Path(cache_dir) / f"{k}.dnft", values)
            write_json(Path(cache_dir) / f"{k}.json", prov)
        return ("computed", keys, None)
    except Exception as exc:  # recorded per item; the batch carries on
        return ("failed", None, f"{type(exc).__name__}: {exc}")


def extract_batch(dataset, config, cache_dir, workers: int = 1):
    """Extract and cache features for every image of a dataset.

    ``dataset`` is a dataset directory (with ``manifest.tsv``) or a list of
    image paths. Each feature lands in ``cache_dir`` as ``<key>.dnft`` plus a
    ``<key>.json`` provenance sidecar; existing entries are not recomputed.
    Output bytes do not depend on ``workers``.

    ``config`` may also be a list of configs that differ only in fusion
    strategy; each image is then inverted once and one
    :class:`BatchResult` per config is returned.
    """
    from .data import load_manifest

    multi = isinstance(config, (list, tuple))
    configs = list(config) if multi else [config]
    if not configs or not _same_except_strategy(configs):
        raise ParameterError("configs must differ only in fusion strategy")
    if isinstance(dataset, (str, os.PathLike)):
        rows = load_manifest(dataset)
        items = [(Path(dataset) / r.filename, r.label) for r in rows]
    else:
        items = [(Path(p), None) for p in dataset]
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(p, configs, cache_dir) for p, _ in items]
    if workers <= 1:
        outcomes = [_extract_one(j) for j in jobs]
    else:
        chunk = max(1, len(jobs) // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_extract_one, jobs, chunksize=chunk))
    results = [BatchResult() for _ in configs]
    for (path, label), (status, keys, err) in zip(items, outcomes):
        for j, result in enumerate(results):
            if status == "failed":
                result.failures.append({"path": str(path), "error": err})
                continue
            result.keys.append(keys[j])
            result.paths.append(str(path))
            result.labels.append(label)
            if status == "computed":
                result.computed += 1
            else:
                result.cached += 1
        if status == "failed":
            log.warning("feature extraction failed for %s: %s", path, err)
    return results if multi else results[0]


def load_cached_features(cache_dir, keys) -> np.ndarray:
    from .formats import read_tensor

    return np.stack([read_tensor(Path(cache_dir) / f"{k}.dnft") for k in keys])


def load_sidecar(cache_dir, key) -> dict:
    return read_json(Path(cache_dir) / f"{key}.json")


class DNFExtractor(TransformerMixin, BaseEstimator):
    """Transformer mapping uint8 image stacks ``(n, H, W)`` to DNF features.

    Stateless apart from the schedule and timesteps built in ``fit``, so it
    can sit at the front of a :class:`sklearn.pipeline.Pipeline`.
    """

    def __init__(self, predictor=None, resolution=32, T=DEFAULT_T,
                 beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END,
                 n_steps=20, timestep_mode=UNIFORM, strategy="first"):
        self.predictor = predictor
        self.resolution = resolution
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.n_steps = n_steps
        self.timestep_mode = timestep_mode
        self.strategy = strategy

    def _make_config(self) -> DnfConfig:
        if self.predictor is None:
            raise ParameterError("DNFExtractor needs a predictor")
        return DnfConfig(
            predictor=self.predictor, resolution=self.resolution, T=self.T,
            beta_start=self.beta_start, beta_end=self.beta_end, n_steps=self.n_steps,
            timestep_mode=self.timestep_mode, strategy=self.strategy,
        )

    def fit(self, X=None, y=None):
        self.config_ = self._make_config()
        return self

    def transform(self, X):
        if not hasattr(self, "config_"):
            self.fit()
        X = check_images(X, dtype=np.float64)
        out = np.empty((X.shape[0], self.resolution, self.resolution), dtype=np.float32)
        for i, img in enumerate(X):
            out[i] = extract_dnf(np.asarray(img), self.config_).values
        return out
