"""Whole-volume sampling and reconstruction built on patch denoising.

Every random draw comes from its own counter-keyed generator derived from
(seed, purpose, step, inner index), so runs are bit-reproducible for a fixed
seed no matter how patch work is chunked or threaded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from patchdiff.ct import CTGeometry, backproject, project
from patchdiff.diffusion import DdimParams, NoiseSchedule, ddim_step, forward_noise, sampling_timesteps
from patchdiff.grid import (
    PatchGrid,
    cached_positional_field,
    crop_volume,
    downsample,
    extract_patches,
    insert_patches,
    positional_patches,
)
from patchdiff.solver import cg_normal
from patchdiff.threads import CHUNK, map_chunks

__all__ = [
    "SamplerConfig",
    "VolumeEstimatePair",
    "denoise_whole_volume",
    "score_full_average",
    "sample_unconditional",
    "reconstruct",
]

log = logging.getLogger("patchdiff.sampler")

# RNG stream purposes
_INIT, _OFFSET, _RENOISE, _FRESH = 0, 1, 2, 3

FULL_AVERAGE_MAX_PATCH = 4  # P^3 offsets; beyond this the full average is not a desk-scale oracle


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 200
    eta: float = 0.8
    k: int = 2  # denoise passes averaged per step during reconstruction
    cg_iters: int = 5
    cg_every: int = 1
    sigma_rule: str = "dds"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.cg_iters < 0:
            raise ValueError(f"cg_iters must be >= 0, got {self.cg_iters}")
        if self.cg_every < 1:
            raise ValueError(f"cg_every must be >= 1, got {self.cg_every}")

    def ddim(self) -> DdimParams:
        return DdimParams(eta=self.eta, steps=self.steps, sigma_rule=self.sigma_rule)


@dataclass(frozen=True)
class VolumeEstimatePair:
    """Patch-assembled denoised volume and noise volume; pad borders are zero."""

    x0: np.ndarray
    eps: np.ndarray


def _rng(seed: int, purpose: int, *indices: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *indices])


def denoise_whole_volume(
    x_t: np.ndarray,
    t: int,
    offset_index: int,
    denoiser,
    grid: PatchGrid,
) -> VolumeEstimatePair:
    """Denoise every patch of one offset partition and reassemble both volumes.

    The context channel is the block-mean of the unpadded interior of x_t,
    shared by all patches. Patches are processed in fixed-size chunks so the
    result is identical however many worker threads are active.
    """
    p = grid.patch_size
    patches = extract_patches(x_t, grid, offset_index)
    context = downsample(crop_volume(x_t, p), grid).astype(x_t.dtype, copy=False)
    pos = positional_patches(cached_positional_field(grid), grid, offset_index).astype(x_t.dtype, copy=False)
    n = patches.shape[0]
    channels = np.empty((n, 5, p, p, p), dtype=x_t.dtype)
    channels[:, 0] = patches
    channels[:, 1] = context
    channels[:, 2:] = pos
    eps_out = np.empty((n, p, p, p), dtype=x_t.dtype)
    x0_out = np.empty((n, p, p, p), dtype=x_t.dtype)

    def run(a, b):
        eps, x0 = denoiser.denoise_batch(channels[a:b], t)
        eps_out[a:b] = eps
        x0_out[a:b] = x0

    map_chunks(run, n, CHUNK)
    return VolumeEstimatePair(
        x0=insert_patches(x0_out, grid, offset_index),
        eps=insert_patches(eps_out, grid, offset_index),
    )


def score_full_average(x_t: np.ndarray, t: int, denoiser, grid: PatchGrid) -> VolumeEstimatePair:
    """Average denoise_whole_volume over every one of the P^3 offsets.

    Reference oracle for offset averaging; rejected for patch sizes above
    FULL_AVERAGE_MAX_PATCH where the sweep stops being desk-scale.
    """
    if grid.patch_size > FULL_AVERAGE_MAX_PATCH:
        raise ValueError(f"patch_size {grid.patch_size} too large for a full offset sweep")
    x0_acc = np.zeros(grid.padded_shape, dtype=np.float64)
    eps_acc = np.zeros(grid.padded_shape, dtype=np.float64)
    for i in range(grid.n_offsets):
        pair = denoise_whole_volume(x_t, t, i, denoiser, grid)
        x0_acc += pair.x0
        eps_acc += pair.eps
    x0_acc /= grid.n_offsets
    eps_acc /= grid.n_offsets
    return VolumeEstimatePair(x0_acc.astype(x_t.dtype), eps_acc.astype(x_t.dtype))


def sample_unconditional(denoiser, grid: PatchGrid, schedule: NoiseSchedule, config: SamplerConfig) -> np.ndarray:
    """Draw one volume from the prior; returns the unpadded interior.

    Starts from standard normal noise over the padded extent; each step
    denoises one randomly chosen offset partition and applies the DDIM
    update with the configured sigma rule.
    """
    params = config.ddim()
    x = _rng(config.seed, _INIT).standard_normal(grid.padded_shape, dtype=np.float32)
    for j, (t, t_prev) in enumerate(sampling_timesteps(schedule.timesteps, config.steps)):
        offset = int(_rng(config.seed, _OFFSET, j).integers(grid.n_offsets))
        log.info("step=%d w=%d offset=%d", t, 0, offset)
        pair = denoise_whole_volume(x, t, offset, denoiser, grid)
        fresh = _rng(config.seed, _FRESH, j).standard_normal(grid.padded_shape, dtype=np.float32)
        x = ddim_step(pair.x0, pair.eps, fresh, t, t_prev, params, schedule)
    return crop_volume(x, grid.patch_size).copy()


def _embed(interior: np.ndarray, grid: PatchGrid) -> np.ndarray:
    p = grid.patch_size
    out = np.zeros(grid.padded_shape, dtype=interior.dtype)
    out[p:-p, p:-p, p:-p] = interior
    return out


def reconstruct(
    denoiser,
    grid: PatchGrid,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    geom: CTGeometry,
    sino: np.ndarray,
) -> np.ndarray:
    """Sparse-view reconstruction: averaged patch denoising with CG data consistency.

    Each step runs k denoise passes over fresh random offsets, renoising back
    to level t after each, then averages the denoised volumes (noise volumes
    are averaged with a 1/sqrt(k) scale to keep unit variance), refines the
    average against the measurements with CG on the normal equations, and
    takes the DDIM step. The state update arithmetic runs on the unpadded
    interior and is re-embedded, so the pad border of the evolving volume is
    exactly zero at every step.
    """
    nz, ny, nx = grid.image_shape
    if sino.shape != (nz, geom.n_views, geom.n_det):
        raise ValueError(f"sinogram shape {sino.shape} does not match grid/geometry ({nz}, {geom.n_views}, {geom.n_det})")
    params = config.ddim()
    p = grid.patch_size

    def apply_a(v):
        return project(v, geom)

    def apply_at(s):
        return backproject(s, geom, nx, ny)

    x = _embed(_rng(config.seed, _INIT).standard_normal(grid.image_shape, dtype=np.float32), grid)
    pairs = sampling_timesteps(schedule.timesteps, config.steps)
    for j, (t, t_prev) in enumerate(pairs):
        x0_acc = np.zeros(grid.image_shape, dtype=np.float32)
        eps_acc = np.zeros(grid.image_shape, dtype=np.float32)
        for w in range(config.k):
            offset = int(_rng(config.seed, _OFFSET, j, w).integers(grid.n_offsets))
            log.info("step=%d w=%d offset=%d", t, w, offset)
            pair = denoise_whole_volume(x, t, offset, denoiser, grid)
            x0_int = crop_volume(pair.x0, p)
            x0_acc += x0_int
            eps_acc += crop_volume(pair.eps, p)
            renoise = _rng(config.seed, _RENOISE, j, w).standard_normal(grid.image_shape, dtype=np.float32)
            x = _embed(forward_noise(x0_int, t, renoise, schedule), grid)
        x0_avg = x0_acc / config.k
        eps_hat = eps_acc / np.sqrt(config.k, dtype=np.float32)
        if config.cg_iters > 0 and j % config.cg_every == 0:
            x0_avg = cg_normal(apply_a, apply_at, sino, x0_avg, config.cg_iters)
        fresh = _rng(config.seed, _FRESH, j).standard_normal(grid.image_shape, dtype=np.float32)
        x = _embed(ddim_step(x0_avg, eps_hat, fresh, t, t_prev, params, schedule), grid)
    return crop_volume(x, p).copy()
