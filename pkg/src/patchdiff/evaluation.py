"""Synthetic ellipsoid phantoms and reconstruction metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PhantomSpec",
    "generate_phantom",
    "psnr",
    "nearest_neighbor",
    "boundary_artifact_metric",
]


@dataclass(frozen=True)
class PhantomSpec:
    """Knobs for the random ellipsoid phantoms.

    Ellipsoid count grows with the z band (lower third gets the fewest), so
    the volume statistics depend on z and positional conditioning has
    something to learn. edge is the soft-boundary width in voxels; larger
    values give smoother, more band-limited phantoms.
    """

    n_ellipsoids: int = 6
    background: float = 0.1
    intensity_low: float = 0.1
    intensity_high: float = 0.4
    edge: float = 1.5
    body: bool = True

    def __post_init__(self):
        if self.n_ellipsoids < 0:
            raise ValueError(f"n_ellipsoids must be >= 0, got {self.n_ellipsoids}")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError(f"background must be in [0, 1], got {self.background}")
        if self.edge <= 0:
            raise ValueError(f"edge must be positive, got {self.edge}")


def _rotation(rng) -> np.ndarray:
    a, b, c = rng.uniform(0.0, np.pi, size=3)
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _add_ellipsoid(vol, coords, center, semi_axes, rot, value, edge):
    # Soft indicator: tanh profile of the approximate signed distance to the surface.
    rel = coords - np.asarray(center)[:, None, None, None]
    local = np.einsum("ij,jzyx->izyx", rot.T, rel)
    q = np.sqrt(np.sum((local / np.asarray(semi_axes)[:, None, None, None]) ** 2, axis=0))
    r_eff = float(np.exp(np.mean(np.log(semi_axes))))
    vol += value * 0.5 * (1.0 - np.tanh((q - 1.0) * r_eff / edge))


def _band_counts(n: int) -> tuple[int, int, int]:
    lo = n // 6
    mid = n * 2 // 6
    return lo, mid, n - lo - mid


def generate_phantom(dims: tuple[int, int, int], spec: PhantomSpec = PhantomSpec(), seed=0) -> np.ndarray:
    """Random ellipsoid volume of dims (nx, ny, nz), values clipped to [0, 1]."""
    nx, ny, nz = dims
    rng = np.random.default_rng(seed)
    zs, ys, xs = np.meshgrid(np.arange(nz) + 0.5, np.arange(ny) + 0.5, np.arange(nx) + 0.5, indexing="ij")
    coords = np.stack([xs, ys, zs])  # (3, nz, ny, nx), x first to match centers
    vol = np.zeros((nz, ny, nx), dtype=np.float64)
    if spec.body:
        jitter = rng.uniform(0.9, 1.0, size=3)
        value = rng.uniform(0.15, 0.25)
        semi = (0.42 * nx * jitter[0], 0.42 * ny * jitter[1], 0.46 * nz * jitter[2])
        _add_ellipsoid(vol, coords, (nx / 2, ny / 2, nz / 2), semi, np.eye(3), value, spec.edge)
    for band, count in enumerate(_band_counts(spec.n_ellipsoids)):
        z_lo, z_hi = nz * band / 3.0, nz * (band + 1) / 3.0
        for _ in range(count):
            center = (
                rng.uniform(0.25 * nx, 0.75 * nx),
                rng.uniform(0.25 * ny, 0.75 * ny),
                rng.uniform(z_lo + 0.1 * nz / 3, z_hi - 0.1 * nz / 3),
            )
            semi = (
                rng.uniform(0.06, 0.16) * nx,
                rng.uniform(0.06, 0.16) * ny,
                rng.uniform(0.05, 0.12) * nz,
            )
            rot = _rotation(rng)
            value = rng.uniform(spec.intensity_low, spec.intensity_high)
            _add_ellipsoid(vol, coords, center, semi, rot, value, spec.edge)
    vol += spec.background
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give +inf."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def nearest_neighbor(query: np.ndarray, dataset) -> tuple[int, float]:
    """Index and L2 distance of the closest volume in dataset; ties pick the lowest index."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    dists = np.empty(len(dataset), dtype=np.float64)
    for i, v in enumerate(dataset):
        if v.shape != query.shape:
            raise ValueError(f"dataset entry {i} has shape {v.shape}, query {query.shape}")
        dists[i] = np.sqrt(np.sum((np.asarray(v, np.float64) - query) ** 2))
    idx = int(np.argmin(dists))
    return idx, float(dists[idx])


def boundary_artifact_metric(v: np.ndarray, patch_size: int) -> float:
    """Mean |step| across offset-0 patch faces over mean |step| elsewhere.

    Values near 1 mean patch faces are statistically invisible; a constant
    volume (no steps anywhere) returns the 1.0 sentinel.
    """
    p = patch_size
    if p < 1:
        raise ValueError(f"patch_size must be >= 1, got {p}")
    if any(n % p != 0 for n in v.shape):
        raise ValueError(f"patch_size {p} does not divide volume shape {v.shape}")
    v = np.asarray(v, dtype=np.float64)
    face_sum = face_cnt = other_sum = other_cnt = 0.0
    for axis, n in enumerate(v.shape):
        d = np.abs(np.diff(v, axis=axis))
        idx = np.arange(n - 1)
        face = (idx + 1) % p == 0  # pair (m*p - 1, m*p) sits at diff index m*p - 1
        face_slab = np.compress(face, d, axis=axis)
        face_sum += face_slab.sum()
        face_cnt += face_slab.size
        other_slab = np.compress(~face, d, axis=axis)
        other_sum += other_slab.sum()
        other_cnt += other_slab.size
    if face_cnt == 0 or other_cnt == 0:
        return 1.0
    face_mean = face_sum / face_cnt
    other_mean = other_sum / other_cnt
    if other_mean == 0.0:
        return 1.0 if face_mean == 0.0 else math.inf
    return float(face_mean / other_mean)
