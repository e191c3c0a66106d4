"""Synthetic identity-coded datasets for tests and demos.

Every identity gets a distinctive base color, a stripe texture and two
coarse-grid rectangles; every rendered image perturbs that pattern with
brightness, translation, an illumination ramp and pixel noise. The variation
is strong enough that an untrained encoder confuses individuals while a
trained one can separate them, which is exactly what the end-to-end tests
need. Identities are shared across the three splits (the point of the fixture
is overfitting, not open-set generalization).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

SPLIT_CODES = {"train": 0, "gallery": 1, "query": 2}


def _identity_pattern(seed: int, identity: int, resolution: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7, identity]))
    canvas = np.empty((resolution, resolution, 3), dtype=np.float64)
    canvas[:] = rng.uniform(0.15, 0.55, size=3)

    yy, xx = np.mgrid[0:resolution, 0:resolution] / resolution
    freq = int(rng.integers(3, 8))
    axis = float(rng.random())
    phase = float(rng.uniform(0, 2 * np.pi))
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (axis * xx + (1 - axis) * yy) + phase)
    canvas += 0.18 * (stripes[..., None] - 0.5) * rng.uniform(0.4, 1.0, size=3)

    # Rectangles snap to a 4x4 grid so coarse pooling still sees them.
    cell = resolution // 4
    for _ in range(2):
        gy, gx = rng.integers(0, 4, size=2)
        color = rng.uniform(0.4, 1.0, size=3)
        canvas[gy * cell : (gy + 1) * cell, gx * cell : (gx + 1) * cell] = color
    return np.clip(canvas, 0.0, 1.0)


def _render(
    pattern: np.ndarray,
    rng: np.random.Generator,
    noise: float,
    brightness: tuple[float, float],
    max_shift_frac: float,
) -> np.ndarray:
    resolution = pattern.shape[0]
    max_shift = max(1, int(resolution * max_shift_frac))
    shift = rng.integers(-max_shift, max_shift + 1, size=2)
    img = np.roll(pattern, shift=tuple(shift), axis=(0, 1))

    ramp_dir = rng.uniform(-1, 1, size=2)
    yy, xx = np.mgrid[0:resolution, 0:resolution] / resolution
    ramp = ramp_dir[0] * (yy - 0.5) + ramp_dir[1] * (xx - 0.5)
    img = img * rng.uniform(*brightness) + 0.15 * ramp[..., None]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_synthetic_dataset(
    root,
    num_identities: int = 8,
    train_per_id: int = 8,
    gallery_per_id: int = 2,
    query_per_id: int = 2,
    resolution: int = 224,
    seed: int = 0,
    noise: float = 0.08,
    brightness: tuple[float, float] = (0.7, 1.3),
    max_shift_frac: float = 1 / 16,
) -> dict:
    """Write a train/gallery/query tree of rendered PNGs; returns split counts.

    ``noise``, ``brightness`` and ``max_shift_frac`` dial how confusable the
    identities are for an untrained encoder.
    """
    root = Path(root)
    per_split = {"train": train_per_id, "gallery": gallery_per_id, "query": query_per_id}
    for split, count in per_split.items():
        for ident in range(num_identities):
            pattern = _identity_pattern(seed, ident, resolution)
            out_dir = root / split / f"id_{ident:02d}"
            out_dir.mkdir(parents=True, exist_ok=True)
            for j in range(count):
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, SPLIT_CODES[split], ident, j])
                )
                img = _render(pattern, rng, noise, brightness, max_shift_frac)
                Image.fromarray((img * 255).round().astype(np.uint8)).save(
                    out_dir / f"img_{j:02d}.png"
                )
    return {
        "num_identities": num_identities,
        "counts": {split: count * num_identities for split, count in per_split.items()},
        "total": sum(per_split.values()) * num_identities,
    }
