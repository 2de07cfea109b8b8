"""Deterministic two-class stand-in images for desk-scale runs.

Every image shares a chest-like background (bright field, two dark lung
lobes). Positive images additionally carry a few Gaussian opacities inside
the lobes. ``difficulty`` shrinks the opacity amplitude and increases the
per-image brightness jitter, lobe displacement and pixel noise, so at 0 the
classes separate on mean intensity alone and at 1 they are indistinguishable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import LABELS, NEGATIVE, POSITIVE, ManifestEntry, write_manifest
from .errors import StoreError, ValidationError


def _render(rng: np.random.Generator, size: int, positive: bool, difficulty: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = 150.0 + 30.0 * yy

    shift = difficulty * 0.06
    for cx in (0.32, 0.68):
        dx, dy = rng.uniform(-shift, shift, size=2)
        lobe = ((xx - cx - dx) / 0.14) ** 2 + ((yy - 0.5 - dy) / 0.3) ** 2
        img -= 70.0 * np.exp(-(lobe**2))

    # drawn for both classes so the generator stream stays aligned across labels
    n_blobs = int(rng.integers(2, 5))
    centres = rng.uniform([0.22, 0.3], [0.78, 0.7], size=(n_blobs, 2))
    widths = rng.uniform(0.06, 0.1, size=n_blobs)
    if positive:
        amp = 80.0 * (1.0 - difficulty)
        for (cx, cy), w in zip(centres, widths):
            img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * w**2))

    img += rng.uniform(-25.0, 25.0) * difficulty
    img += rng.normal(0.0, 4.0 + 16.0 * difficulty, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic(
    out_dir: str | Path,
    n_per_class: int,
    image_size: int = 64,
    seed: int = 0,
    difficulty: float = 0.0,
    *,
    n_test_per_class: int | None = None,
    manifest_name: str = "manifest.tsv",
) -> list[ManifestEntry]:
    """Write ``2 * n_per_class`` PNG images and a TSV manifest to ``out_dir``.

    ``n_test_per_class`` of each class are held out as the test subset
    (default: a quarter, at least one). Returns the manifest entries.
    """
    if n_per_class < 2:
        raise ValidationError(f"n_per_class must be >= 2, got {n_per_class}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValidationError(f"difficulty must lie in [0, 1], got {difficulty}")
    if image_size < 8:
        raise ValidationError(f"image_size must be >= 8, got {image_size}")
    if n_test_per_class is None:
        n_test_per_class = max(1, n_per_class // 4)
    if not 1 <= n_test_per_class < n_per_class:
        raise ValidationError(f"n_test_per_class must lie in [1, {n_per_class - 1}], got {n_test_per_class}")

    out = Path(out_dir)
    img_dir = out / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StoreError(f"cannot create {img_dir}: {e}") from e

    rng = np.random.default_rng(seed)
    entries = []
    n = 0
    for label in LABELS:
        for j in range(n_per_class):
            n += 1
            image_id = f"syn{n:05d}"
            arr = _render(rng, image_size, label == POSITIVE, difficulty)
            path = img_dir / f"{image_id}.png"
            try:
                Image.fromarray(arr, mode="L").save(path, format="PNG")
            except OSError as e:
                raise StoreError(f"cannot write {path}: {e}") from e
            subset = "test" if j >= n_per_class - n_test_per_class else "train"
            entries.append(ManifestEntry(image_id, str(path), label, f"synp{n:05d}", "synthetic", subset))

    try:
        write_manifest(entries, out / manifest_name, relative_to=out)
    except OSError as e:
        raise StoreError(f"cannot write manifest under {out}: {e}") from e
    return entries


__all__ = ["generate_synthetic", "NEGATIVE", "POSITIVE"]
