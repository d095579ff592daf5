"""2D parallel-beam CT applied per axial slice of a volume.

Rays are traced against the voxel grid with exact intersection lengths
(Siddon-style grid walk, vectorized per view), assembled once into a sparse
system matrix per (geometry, slice shape) pair. Backprojection applies the
literal transpose, so <A v, s> = <v, A* s> holds to rounding. Sinograms are
arrays of shape (nz, n_views, n_det); angles are radians in [0, pi).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = ["CTGeometry", "make_geometry", "min_detectors", "project", "backproject", "fbp"]


@dataclass(frozen=True)
class CTGeometry:
    n_views: int
    n_det: int
    det_spacing: float = 1.0
    angles: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_views < 1 or self.n_det < 1:
            raise ValueError(f"n_views and n_det must be >= 1, got {self.n_views}, {self.n_det}")
        if self.det_spacing <= 0:
            raise ValueError(f"det_spacing must be positive, got {self.det_spacing}")
        ang = np.asarray(self.angles, dtype=np.float64)
        if ang.shape != (self.n_views,):
            raise ValueError(f"expected {self.n_views} angles, got shape {ang.shape}")
        if np.any(np.diff(ang) <= 0):
            raise ValueError("angles must be strictly increasing")
        if ang[0] < 0 or ang[-1] >= np.pi:
            raise ValueError("angles must lie in [0, pi)")
        object.__setattr__(self, "angles", ang)


def make_geometry(n_views: int, n_det: int, det_spacing: float = 1.0, angles=None) -> CTGeometry:
    """Geometry with uniformly spaced angles over [0, pi) unless given explicitly."""
    if angles is None:
        if n_views < 1:
            raise ValueError(f"n_views must be >= 1, got {n_views}")
        angles = np.arange(n_views) * (np.pi / n_views)
    return CTGeometry(n_views, n_det, det_spacing, angles)


def min_detectors(nx: int, ny: int, det_spacing: float = 1.0) -> int:
    """Fewest detector bins that cover the slice diagonal."""
    return int(np.ceil(np.hypot(nx, ny) / det_spacing))


_matrix_cache: dict = {}


def _geometry_key(geom: CTGeometry, nx: int, ny: int):
    return (geom.n_views, geom.n_det, geom.det_spacing, geom.angles.tobytes(), nx, ny)


def system_matrix(geom: CTGeometry, nx: int, ny: int):
    """Sparse (n_views*n_det, ny*nx) ray matrix and its transpose, cached."""
    key = _geometry_key(geom, nx, ny)
    hit = _matrix_cache.get(key)
    if hit is not None:
        return hit
    rows, cols, vals = [], [], []
    u = (np.arange(geom.n_det) - (geom.n_det - 1) / 2.0) * geom.det_spacing
    cx, cy = nx / 2.0, ny / 2.0
    # Crossing parameters with the grid lines x = 0..nx and y = 0..ny for every ray.
    grid_x = np.arange(nx + 1, dtype=np.float64)
    grid_y = np.arange(ny + 1, dtype=np.float64)
    for a, theta in enumerate(geom.angles):
        nvx, nvy = np.cos(theta), np.sin(theta)  # detector axis
        dx, dy = -np.sin(theta), np.cos(theta)  # ray direction, unit length
        px = cx + u * nvx
        py = cy + u * nvy
        with np.errstate(divide="ignore", invalid="ignore"):
            sx = (grid_x[None, :] - px[:, None]) / dx if abs(dx) > 1e-12 else np.full((geom.n_det, nx + 1), np.inf)
            sy = (grid_y[None, :] - py[:, None]) / dy if abs(dy) > 1e-12 else np.full((geom.n_det, ny + 1), np.inf)
        if abs(dx) > 1e-12:
            s_in_x, s_out_x = np.minimum(sx[:, 0], sx[:, -1]), np.maximum(sx[:, 0], sx[:, -1])
        else:
            inside = (px >= 0) & (px <= nx)
            s_in_x = np.where(inside, -np.inf, np.inf)
            s_out_x = np.where(inside, np.inf, -np.inf)
        if abs(dy) > 1e-12:
            s_in_y, s_out_y = np.minimum(sy[:, 0], sy[:, -1]), np.maximum(sy[:, 0], sy[:, -1])
        else:
            inside = (py >= 0) & (py <= ny)
            s_in_y = np.where(inside, -np.inf, np.inf)
            s_out_y = np.where(inside, np.inf, -np.inf)
        s_enter = np.maximum(s_in_x, s_in_y)
        s_exit = np.minimum(s_out_x, s_out_y)
        miss = ~(s_enter < s_exit)
        s_enter = np.where(miss, 0.0, s_enter)
        s_exit = np.where(miss, 0.0, s_exit)
        crossings = np.concatenate([sx, sy], axis=1)
        crossings = np.clip(crossings, s_enter[:, None], s_exit[:, None])
        crossings = np.where(np.isfinite(crossings), crossings, s_enter[:, None])
        crossings.sort(axis=1)
        lens = np.diff(crossings, axis=1)
        mids = 0.5 * (crossings[:, :-1] + crossings[:, 1:])
        mx = px[:, None] + mids * dx
        my = py[:, None] + mids * dy
        ix = np.floor(mx).astype(np.int64)
        iy = np.floor(my).astype(np.int64)
        ok = (lens > 1e-12) & (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        det_idx = np.broadcast_to(np.arange(geom.n_det)[:, None], lens.shape)
        rows.append(a * geom.n_det + det_idx[ok])
        cols.append(iy[ok] * nx + ix[ok])
        vals.append(lens[ok])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_views * geom.n_det, ny * nx),
    ).tocsr()
    pair = (mat, mat.T.tocsr())
    _matrix_cache[key] = pair
    return pair


def _check_coverage(geom: CTGeometry, nx: int, ny: int) -> None:
    need = min_detectors(nx, ny, geom.det_spacing)
    if geom.n_det < need:
        raise ValueError(f"n_det {geom.n_det} cannot cover a {nx}x{ny} slice; need >= {need}")


def project(v: np.ndarray, geom: CTGeometry) -> np.ndarray:
    """Sinogram (nz, n_views, n_det) of a volume, slice by slice."""
    if v.ndim != 3:
        raise ValueError(f"expected a 3d volume, got shape {v.shape}")
    nz, ny, nx = v.shape
    _check_coverage(geom, nx, ny)
    mat, _ = system_matrix(geom, nx, ny)
    out = mat @ v.reshape(nz, ny * nx).T
    return np.ascontiguousarray(out.T.reshape(nz, geom.n_views, geom.n_det)).astype(v.dtype, copy=False)


def backproject(s: np.ndarray, geom: CTGeometry, nx: int, ny: int) -> np.ndarray:
    """Adjoint of project: exact transpose of the ray matrix."""
    nz = s.shape[0]
    if s.shape != (nz, geom.n_views, geom.n_det):
        raise ValueError(f"sinogram shape {s.shape} does not match geometry ({geom.n_views}, {geom.n_det})")
    _check_coverage(geom, nx, ny)
    _, mat_t = system_matrix(geom, nx, ny)
    out = mat_t @ s.reshape(nz, -1).T
    return np.ascontiguousarray(out.T.reshape(nz, ny, nx)).astype(s.dtype, copy=False)


def fbp(s: np.ndarray, geom: CTGeometry, nx: int, ny: int) -> np.ndarray:
    """Filtered backprojection: frequency-domain ramp, then scaled adjoint.

    Views are zero-padded to the next power of two at or above 2 * n_det
    before filtering. The pi / n_views factor discretizes the angle integral.
    """
    nz = s.shape[0]
    if s.shape != (nz, geom.n_views, geom.n_det):
        raise ValueError(f"sinogram shape {s.shape} does not match geometry ({geom.n_views}, {geom.n_det})")
    nfft = 1
    while nfft < 2 * geom.n_det:
        nfft *= 2
    ramp = np.abs(np.fft.rfftfreq(nfft, d=geom.det_spacing))
    spec = np.fft.rfft(s, n=nfft, axis=-1) * ramp
    filtered = np.fft.irfft(spec, n=nfft, axis=-1)[..., : geom.n_det]
    rec = backproject(filtered.astype(np.float64), geom, nx, ny)
    rec *= np.pi / geom.n_views * geom.det_spacing
    return rec.astype(s.dtype, copy=False)
