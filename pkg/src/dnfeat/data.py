"""Synthetic real/generated datasets and the directory layout they live in.

Layout::

    root/
      manifest.tsv        filename<TAB>label<TAB>source, one row per image
      real/*.png          label 0
      generated/*.png     label 1
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._validation import FormatError, ParameterError
from .diffusion import generate
from .dnf import from_unit_range
from .formats import atomic_write_bytes, read_image, write_png

REAL_DIR = "real"
FAKE_DIR = "generated"
MANIFEST = "manifest.tsv"
HEADER = ("filename", "label", "source")


@dataclass(frozen=True)
class ManifestRow:
    filename: str
    label: int
    source: str


def load_manifest(root) -> list[ManifestRow]:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise FormatError(f"no {MANIFEST} in {root}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if tuple(header or ()) != HEADER:
            raise FormatError(f"bad manifest header {header!r}")
        for rec in reader:
            if not rec:
                continue
            if len(rec) != 3 or rec[1] not in ("0", "1"):
                raise FormatError(f"bad manifest row {rec!r}")
            if not (root / rec[0]).is_file():
                raise FormatError(f"manifest row points at missing file {rec[0]}")
            rows.append(ManifestRow(rec[0], int(rec[1]), rec[2]))
    return rows


def _write_manifest(root: Path, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(HEADER)
    for r in sorted(rows, key=lambda r: r.filename):
        writer.writerow((r.filename, r.label, r.source))
    atomic_write_bytes(root / MANIFEST, buf.getvalue().encode("utf-8"))


def _replace_rows(root: Path, subdir: str, new_rows) -> None:
    old = load_manifest(root) if (root / MANIFEST).exists() else []
    kept = [r for r in old if not r.filename.startswith(subdir + "/")]
    _write_manifest(root, kept + list(new_rows))


def load_dataset(root, label: int | None = None):
    """Decode every image of a dataset: returns ``(images uint8 (n,H,W), labels, filenames)``."""
    root = Path(root)
    rows = [r for r in load_manifest(root) if label is None or r.label == label]
    if not rows:
        raise ParameterError(f"dataset {root} has no matching images")
    images = np.stack([read_image(root / r.filename) for r in rows])
    return images, np.array([r.label for r in rows]), [r.filename for r in rows]


def texture_images(n: int, seed: int, resolution: int = 32, correlation_length: float = 1.5,
                   field_amplitude: float = 0.35, n_edges: int = 3, edge_levels: int = 4,
                   edge_amplitude: float = 0.5) -> np.ndarray:
    """Structured textures in ``[-1, 1]``: a correlated Gaussian field plus quantized edges.

    Image ``i`` depends only on ``(seed, i)``, so growing ``n`` keeps the
    earlier images unchanged.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    if correlation_length < 0 or n_edges < 0 or edge_levels < 2:
        raise ParameterError("invalid texture parameters")
    out = np.empty((n, resolution, resolution))
    yy, xx = np.mgrid[0:resolution, 0:resolution] / max(resolution - 1, 1) - 0.5
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        field = rng.standard_normal((resolution, resolution))
        if correlation_length > 0:
            field = ndimage.gaussian_filter(field, correlation_length, mode="wrap")
            field /= field.std()
        img = field_amplitude * field
        if n_edges:
            layer = np.zeros((resolution, resolution))
            for _ in range(n_edges):
                angle = rng.uniform(0, 2 * np.pi)
                offset = rng.uniform(-0.35, 0.35)
                layer += np.where(np.cos(angle) * xx + np.sin(angle) * yy > offset, 1.0, -1.0)
            # quantize the summed half-planes to a few flat levels
            levels = np.linspace(-n_edges, n_edges, edge_levels)
            idx = np.abs(layer[..., None] - levels).argmin(axis=-1)
            img = img + edge_amplitude * levels[idx] / n_edges
        out[i] = img
    return np.clip(out, -1.0, 1.0)


def gen_real_dataset(root, n: int, seed: int = 0, resolution: int = 32, **texture) -> list[ManifestRow]:
    """Write ``n`` texture images under ``root/real`` and update the manifest."""
    root = Path(root)
    imgs = from_unit_range(texture_images(n, seed, resolution, **texture))
    rows = []
    for i, img in enumerate(imgs):
        name = f"{REAL_DIR}/real_{i:05d}.png"
        write_png(root / name, img)
        rows.append(ManifestRow(name, 0, "texture"))
    _replace_rows(root, REAL_DIR, rows)
    return rows


def sample_images(n: int, seed: int, predictor, schedule, taus, resolution: int = 32,
                  batch_size: int = 64) -> np.ndarray:
    """Draw ``n`` images by deterministic sampling from standard-normal latents."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = np.random.default_rng(seed)
    xT = rng.standard_normal((n, resolution, resolution))
    out = np.empty_like(xT)
    for start in range(0, n, batch_size):
        out[start:start + batch_size] = generate(xT[start:start + batch_size], taus, predictor, schedule)
    return out


def gen_fake_dataset(root, n: int, seed: int, predictor, schedule, taus, resolution: int = 32,
                     source: str | None = None) -> list[ManifestRow]:
    """Write ``n`` sampled images under ``root/generated`` and update the manifest."""
    root = Path(root)
    imgs = from_unit_range(sample_images(n, seed, predictor, schedule, taus, resolution))
    tag = source or predictor.predictor_id
    rows = []
    for i, img in enumerate(imgs):
        name = f"{FAKE_DIR}/gen_{i:05d}.png"
        write_png(root / name, img)
        rows.append(ManifestRow(name, 1, tag))
    _replace_rows(root, FAKE_DIR, rows)
    return rows
