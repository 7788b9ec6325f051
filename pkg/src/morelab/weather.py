"""Parametric fog and snow corruption generators.

Both are deterministic data-preprocessing transforms (never attacked
through): fog blends each pixel toward an atmospheric light level with a
depth-dependent haze factor, snow overwrites seeded flake streaks with a
brightness derived from the darkness knob.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import InvalidParams
from .hashing import derive_seed

FOG = "fog"
SNOW = "snow"


@dataclass(frozen=True)
class PerturbSpec:
    """Declarative weather threat; only the knobs for its kind are read."""

    kind: str
    t: float = 0.15  # fog thickness
    light: float = 0.6  # atmospheric lightness
    darkness: float = 2.5  # snow brightness knob
    density: float = 0.02  # snow flake density
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (FOG, SNOW):
            raise InvalidParams(f"unknown perturbation kind {self.kind!r}")
        if self.t < 0:
            raise InvalidParams("t must be >= 0")
        if not 0.0 <= self.light <= 1.0:
            raise InvalidParams("light must lie in [0,1]")
        if self.darkness < 0:
            raise InvalidParams("darkness must be >= 0")
        if not 0.0 <= self.density <= 1.0:
            raise InvalidParams("density must lie in [0,1]")


def fog(x: np.ndarray, t: float, light: float) -> np.ndarray:
    """Blend pixels toward `light` with haze growing along the image diagonal.

    Depth d(r,c) = (r+c)/(H+W-2); haze f = 1 - exp(-3 t (1+d)); the output is
    the convex combination (1-f) x + f light, applied identically per channel.
    """
    x = np.asarray(x, dtype=np.float32)
    h, w = x.shape[-2], x.shape[-1]
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    denom = max(h + w - 2, 1)
    depth = (rr + cc).astype(np.float32) / np.float32(denom)
    f = 1.0 - np.exp(-3.0 * np.float32(t) * (1.0 + depth))
    out = (1.0 - f) * x + f * np.float32(light)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def snow_mask(shape: tuple[int, int], density: float, seed: int) -> np.ndarray:
    """Flake mask: Bernoulli(density) centers dilated into 3-pixel vertical streaks."""
    h, w = shape
    rng = np.random.default_rng(np.random.PCG64(seed))
    centers = rng.random((h, w)) < density
    mask = centers.copy()
    mask[1:] |= centers[:-1]  # streak extends one pixel down
    mask[:-1] |= centers[1:]  # and one pixel up
    return mask


def snow(x: np.ndarray, darkness: float, seed: int, density: float = 0.02) -> np.ndarray:
    """Overwrite seeded flake streaks with brightness clamp(0.4*darkness, 0, 1)."""
    x = np.asarray(x, dtype=np.float32)
    h, w = x.shape[-2], x.shape[-1]
    mask = snow_mask((h, w), density, seed).astype(np.float32)
    value = np.float32(np.clip(0.4 * darkness, 0.0, 1.0))
    out = (1.0 - mask) * x + mask * value
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_perturbation(x: np.ndarray, spec: PerturbSpec, seed: int | None = None) -> np.ndarray:
    """Apply one weather spec to a single image [C,H,W]."""
    if spec.kind == FOG:
        return fog(x, spec.t, spec.light)
    return snow(x, spec.darkness, seed if seed is not None else spec.seed, spec.density)


def weatherize_batch(images: np.ndarray, spec: PerturbSpec, indices: np.ndarray) -> np.ndarray:
    """Transform a batch; per-image seeds derive from (spec.seed, dataset index)."""
    if spec.kind == FOG:
        return fog(images, spec.t, spec.light)
    out = np.empty_like(images)
    for k, idx in enumerate(np.asarray(indices)):
        out[k] = snow(images[k], spec.darkness, derive_seed(spec.seed, int(idx)), spec.density)
    return out


def weatherize_dataset(ds: Dataset, spec: PerturbSpec) -> Dataset:
    """Transform every image, labels unchanged, deterministic under spec.seed."""
    images = weatherize_batch(ds.images, spec, np.arange(len(ds)))
    return Dataset(
        images,
        ds.labels.copy(),
        name=f"{ds.name}+{spec.kind}",
        num_classes=ds.num_classes,
    )
