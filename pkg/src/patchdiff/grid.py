"""Padded grids, offset patch partitions, and block-mean downsampling.

Volumes are numpy arrays of shape (nz, ny, nx) in C order (x fastest when
raveled). Dimension tuples are (nx, ny, nz). A grid with patch size P pads the
volume by P voxels of zeros per side; an offset o = (o1, o2, o3) in {0..P-1}^3
places a disjoint partition of P^3-sized patches into the padded volume so that
every interior voxel is covered and the uncovered border lies inside the pad.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "PatchGrid",
    "PositionalField",
    "pad_volume",
    "crop_volume",
    "extract_patches",
    "insert_patches",
    "downsample",
    "downsample_adjoint",
    "positional_field",
    "positional_patches",
]


@dataclass(frozen=True)
class PatchGrid:
    """Patch partition bookkeeping for one volume size.

    patch_size divides every image dimension. Offset indices are 0-based in
    [0, patch_size^3) with o1 = i % P varying fastest (x axis).
    """

    patch_size: int
    image_dims: tuple[int, int, int]  # (nx, ny, nz)

    def __post_init__(self):
        p = self.patch_size
        if p < 1:
            raise ValueError(f"patch_size must be >= 1, got {p}")
        if len(self.image_dims) != 3 or any(n < 1 for n in self.image_dims):
            raise ValueError(f"bad image_dims {self.image_dims}")
        for n in self.image_dims:
            if n % p != 0:
                raise ValueError(f"patch_size {p} does not divide image dims {self.image_dims}")

    @property
    def padded_dims(self) -> tuple[int, int, int]:
        p = self.patch_size
        return tuple(n + 2 * p for n in self.image_dims)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        """Array shape (nz, ny, nx) of the unpadded volume."""
        return self.image_dims[::-1]

    @property
    def padded_shape(self) -> tuple[int, int, int]:
        return self.padded_dims[::-1]

    @property
    def blocks(self) -> tuple[int, int, int]:
        """Patches that tile each unpadded axis: (k1, k2, k3) = dims / P."""
        p = self.patch_size
        return tuple(n // p for n in self.image_dims)

    @property
    def patches_per_offset(self) -> int:
        k1, k2, k3 = self.blocks
        return (k1 + 1) * (k2 + 1) * (k3 + 1)

    @property
    def n_offsets(self) -> int:
        return self.patch_size**3

    def offset_tuple(self, offset_index: int) -> tuple[int, int, int]:
        p = self.patch_size
        if not 0 <= offset_index < self.n_offsets:
            raise ValueError(f"offset_index {offset_index} outside [0, {self.n_offsets})")
        return (offset_index % p, (offset_index // p) % p, offset_index // (p * p))


class PositionalField(NamedTuple):
    """Voxel coordinates over the padded extent, each axis mapped to [-1, 1]."""

    px: np.ndarray
    py: np.ndarray
    pz: np.ndarray


def pad_volume(v: np.ndarray, patch_size: int) -> np.ndarray:
    """Zero-pad by patch_size voxels on every side."""
    if patch_size <= 0:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"expected a 3d volume, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains non-finite values")
    return np.pad(v, patch_size)


def crop_volume(v_padded: np.ndarray, patch_size: int) -> np.ndarray:
    """Interior of a padded volume; inverse of pad_volume up to the border."""
    p = patch_size
    if p <= 0:
        raise ValueError(f"patch_size must be positive, got {p}")
    if any(n <= 2 * p for n in v_padded.shape):
        raise ValueError(f"volume of shape {v_padded.shape} too small for pad {p}")
    return v_padded[p:-p, p:-p, p:-p]


def _check_padded(v_padded: np.ndarray, grid: PatchGrid) -> None:
    if v_padded.shape != grid.padded_shape:
        raise ValueError(f"volume shape {v_padded.shape} does not match padded grid shape {grid.padded_shape}")


def _patch_axes(grid: PatchGrid, offset_index: int):
    # Per-axis slice starts in padded coordinates, x axis returned first.
    o1, o2, o3 = grid.offset_tuple(offset_index)
    k1, k2, k3 = grid.blocks
    p = grid.patch_size
    return (o1, o2, o3), (k1 + 1, k2 + 1, k3 + 1), p


def extract_patches(v_padded: np.ndarray, grid: PatchGrid, offset_index: int) -> np.ndarray:
    """All disjoint patches of one offset, shape (l, P, P, P), x-block fastest.

    Patch r = a + nb1*b + nb1*nb2*c starts at (o1 + a*P, o2 + b*P, o3 + c*P)
    in padded (x, y, z) coordinates. Adjoint of insert_patches.
    """
    _check_padded(v_padded, grid)
    (o1, o2, o3), (n1, n2, n3), p = _patch_axes(grid, offset_index)
    region = v_padded[o3 : o3 + n3 * p, o2 : o2 + n2 * p, o1 : o1 + n1 * p]
    tiles = region.reshape(n3, p, n2, p, n1, p)
    return np.ascontiguousarray(tiles.transpose(0, 2, 4, 1, 3, 5)).reshape(-1, p, p, p)


def insert_patches(patches: np.ndarray, grid: PatchGrid, offset_index: int) -> np.ndarray:
    """Scatter patches back onto a zero padded volume; adjoint of extract_patches.

    Voxels not covered by the partition (the staggered border) stay zero.
    """
    (o1, o2, o3), (n1, n2, n3), p = _patch_axes(grid, offset_index)
    patches = np.asarray(patches)
    if patches.shape != (grid.patches_per_offset, p, p, p):
        raise ValueError(f"expected {grid.patches_per_offset} patches of shape ({p},{p},{p}), got {patches.shape}")
    out = np.zeros(grid.padded_shape, dtype=patches.dtype)
    tiles = patches.reshape(n3, n2, n1, p, p, p).transpose(0, 3, 1, 4, 2, 5)
    out[o3 : o3 + n3 * p, o2 : o2 + n2 * p, o1 : o1 + n1 * p] = tiles.reshape(n3 * p, n2 * p, n1 * p)
    return out


def downsample(v: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Block-mean the unpadded volume down to one (P, P, P) context cube."""
    if v.shape != grid.image_shape:
        raise ValueError(f"volume shape {v.shape} does not match image shape {grid.image_shape}")
    k1, k2, k3 = grid.blocks
    p = grid.patch_size
    return v.reshape(p, k3, p, k2, p, k1).mean(axis=(1, 3, 5))


def downsample_adjoint(g: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Adjoint of downsample: spread g / blockvolume uniformly over each block."""
    p = grid.patch_size
    if g.shape != (p, p, p):
        raise ValueError(f"expected shape ({p},{p},{p}), got {g.shape}")
    k1, k2, k3 = grid.blocks
    spread = g[:, None, :, None, :, None] / (k1 * k2 * k3)
    return np.broadcast_to(spread, (p, k3, p, k2, p, k1)).reshape(grid.image_shape).copy()


def positional_field(grid: PatchGrid) -> PositionalField:
    """Three padded-size volumes holding the x, y, z coordinate of every voxel.

    Coordinates are affine in the voxel index and span exactly [-1, 1] over the
    padded extent; each volume is constant along the other two axes.
    """
    nzp, nyp, nxp = grid.padded_shape

    def ramp(n):
        if n == 1:
            return np.zeros(1, dtype=np.float32)
        return np.linspace(-1.0, 1.0, n, dtype=np.float32)

    px = np.broadcast_to(ramp(nxp)[None, None, :], (nzp, nyp, nxp)).copy()
    py = np.broadcast_to(ramp(nyp)[None, :, None], (nzp, nyp, nxp)).copy()
    pz = np.broadcast_to(ramp(nzp)[:, None, None], (nzp, nyp, nxp)).copy()
    return PositionalField(px, py, pz)


def positional_patches(field: PositionalField, grid: PatchGrid, offset_index: int) -> np.ndarray:
    """Positional channels sliced like extract_patches, shape (l, 3, P, P, P)."""
    parts = [extract_patches(c, grid, offset_index) for c in field]
    return np.stack(parts, axis=1)


_field_cache: dict[PatchGrid, PositionalField] = {}


def cached_positional_field(grid: PatchGrid) -> PositionalField:
    """Shared positional_field instance per grid; callers must not mutate it."""
    field = _field_cache.get(grid)
    if field is None:
        field = positional_field(grid)
        _field_cache[grid] = field
    return field
