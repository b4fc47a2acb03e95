"""Region masks, region extraction and complement occlusion."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .datagen import Atlas

FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class RegionMask:
    region: int
    mask: np.ndarray
    dilated: np.ndarray


def dilate(mask: np.ndarray) -> np.ndarray:
    """Add the 6-connected one-voxel shell around ``mask``."""
    return ndimage.binary_dilation(mask, structure=FACE_NEIGHBOURS, iterations=1)


def one_hot(atlas: Atlas) -> list[RegionMask]:
    out = []
    for r in range(1, atlas.n_regions + 1):
        m = atlas.labels == r
        out.append(RegionMask(r, m, dilate(m)))
    return out


def _key_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class NoiseSpec:
    """Amplitude and seed of the replacement noise.

    Every call derives its own stream from ``(seed, tag, *key)`` so the same
    subject/region pair is reproducible while extraction and occlusion draw
    independent noise.
    """

    eta: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")

    def stream(self, tag: str, *key) -> np.random.Generator:
        entropy = [int(self.seed) & 0xFFFFFFFF, _key_int(tag), *(_key_int(k) for k in key)]
        return np.random.default_rng(np.random.SeedSequence(entropy))


def _check(volume: np.ndarray, mask: np.ndarray) -> None:
    if volume.shape != mask.shape:
        raise ValueError(f"shape mismatch: volume {volume.shape} vs mask {mask.shape}")


def _replace(volume, keep, noise: NoiseSpec, tag: str, key) -> np.ndarray:
    volume = np.asarray(volume)
    keep = np.asarray(keep, dtype=bool)
    _check(volume, keep)
    out = np.where(keep, volume, 0.0)
    if noise.eta > 0:
        z = noise.stream(tag, *key).standard_normal(volume.shape)
        out = out + np.where(keep, 0.0, noise.eta * z)
    return out.astype(volume.dtype, copy=False)


def extract_region(volume, mask_dilated, noise: NoiseSpec, key=()) -> np.ndarray:
    """Keep voxels inside the (dilated) region mask, fill the rest with eta * N(0, 1)."""
    return _replace(volume, mask_dilated, noise, "extract", key)


def occlude_region(volume, mask, noise: NoiseSpec, key=()) -> np.ndarray:
    """Complement of ``extract_region``: the region itself is replaced by noise."""
    mask = np.asarray(mask, dtype=bool)
    return _replace(volume, ~mask, noise, "occlude", key)


def occlusion_mask(region: RegionMask, dilate_occlusion: bool = False) -> np.ndarray:
    return region.dilated if dilate_occlusion else region.mask
