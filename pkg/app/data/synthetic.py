"""Procedural 2AFC triplets standing in for human-judged datasets.

Each reference is a mixture of oriented sinusoids and colored blobs. Both
distortions combine blur, a global color shift and pixel noise whose
strengths scale with a severity; the less severe distortion is the one a
judge would pick, so ``y = 1`` iff ``x1`` is the milder one.
"""
import logging
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from app.core.lstn import write_tensor
from app.data.manifest import write_manifest
from app.errors import ConfigurationError
from app.models.models import ManifestEntry

logger = logging.getLogger(__name__)

MIN_SEVERITY_RATIO = 1.5


def render_base(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    image = np.zeros((3, size, size))
    for _ in range(rng.integers(2, 5)):
        theta = rng.uniform(0.0, np.pi)
        frequency = rng.uniform(1.0, 4.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        color = rng.uniform(-1.0, 1.0, 3)
        wave = np.sin(2.0 * np.pi * frequency * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        image += color[:, None, None] * wave
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.0, 1.0, 2)
        radius = rng.uniform(0.1, 0.3)
        color = rng.uniform(-1.0, 1.0, 3)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * radius ** 2))
        image += 1.5 * color[:, None, None] * blob
    image = (image - image.min()) / (image.max() - image.min() + 1e-12)
    return 0.1 + 0.8 * image


def distort(rng: np.random.Generator, image: np.ndarray, severity: float) -> np.ndarray:
    out = gaussian_filter(image, sigma=(0.0, 0.8 * severity, 0.8 * severity), mode="wrap")
    direction = rng.normal(size=3)
    out = out + (0.15 * severity * direction / np.linalg.norm(direction))[:, None, None]
    out = out + rng.normal(0.0, 0.05 * severity, image.shape)
    return np.clip(out, 0.0, 1.0)


def draw_severities(rng: np.random.Generator) -> Tuple[float, float]:
    low = rng.uniform(0.3, 1.0)
    return low, low * rng.uniform(MIN_SEVERITY_RATIO, 3.0)


def generate_synthetic(n: int, size: int, seed: int, out_dir) -> List[ManifestEntry]:
    """Render ``n`` triplets as LSTN files plus ``manifest.jsonl`` under ``out_dir``."""
    if n < 1:
        raise ConfigurationError(f"Need at least one triplet, got n={n}")
    if size < 8:
        raise ConfigurationError(f"Image size must be at least 8, got {size}")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    entries: List[ManifestEntry] = []
    for index in range(n):
        rng = np.random.default_rng([seed, index])
        sample_id = f"syn-{index:05d}"
        reference = render_base(rng, size)
        low, high = draw_severities(rng)
        x1_is_milder = bool(rng.integers(0, 2))
        severity0, severity1 = (high, low) if x1_is_milder else (low, high)
        x0 = distort(rng, reference, severity0)
        x1 = distort(rng, reference, severity1)

        paths = {}
        for role, image in (("ref", reference), ("x0", x0), ("x1", x1)):
            relative = f"images/{sample_id}_{role}.lstn"
            write_tensor(out_dir / relative, image.astype(np.float32))
            paths[role] = relative
        entries.append(ManifestEntry(
            id=sample_id,
            ref_path=paths["ref"],
            x0_path=paths["x0"],
            x1_path=paths["x1"],
            y=1 if severity1 < severity0 else 0,
            severity0=round(float(severity0), 6),
            severity1=round(float(severity1), 6),
        ))

    write_manifest(entries, out_dir / "manifest.jsonl")
    logger.info("✅ Generated %d synthetic triplets (%dx%d) in %s", n, size, size, out_dir)
    return entries
