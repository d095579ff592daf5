"""Denoiser training: patch sampling, Adam steps, EMA, checkpoints.

Each training step derives its own generator from (seed, step), so a run can
be stopped at a checkpoint and resumed bit-identically: the optimizer
moments ride along in the checkpoint's raw tensor group under adam.m./adam.v.
prefixes and no generator state needs saving.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from patchdiff.denoiser import ConvDenoiser, ConvDenoiserConfig, PatchInput, init_params, net_backward, net_forward
from patchdiff.diffusion import NoiseSchedule, forward_noise, make_schedule
from patchdiff.grid import PatchGrid, cached_positional_field, crop_volume, downsample, pad_volume
from patchdiff.io import format_config, load_checkpoint, parse_config, save_checkpoint

__all__ = [
    "TrainConfig",
    "TrainState",
    "sample_training_patch",
    "training_batch",
    "train_step",
    "train",
    "denoiser_from_checkpoint",
]

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8
LOSS_EMA_DECAY = 0.99  # smoothing for the ema_loss column of the training curve

_ECHO_EXTRA = {"step": int, "zero_context": False, "dims_x": int, "dims_y": int, "dims_z": int}


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 8
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 1e-3
    batch: int = 16
    train_steps: int = 2000
    ema_decay: float = 0.999
    net_width: int = 32
    net_depth: int = 4
    seed: int = 0
    zero_context: bool = False
    checkpoint_every: int = 0  # 0 saves only at the end

    def __post_init__(self):
        if self.batch < 1 or self.train_steps < 0:
            raise ValueError(f"bad batch {self.batch} or train_steps {self.train_steps}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    def net_config(self) -> ConvDenoiserConfig:
        return ConvDenoiserConfig(width=self.net_width, depth=self.net_depth, seed=self.seed)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.timesteps, self.beta_start, self.beta_end)


@dataclass
class TrainState:
    params: dict
    ema: dict
    m: dict
    v: dict
    step: int


def _init_state(config: TrainConfig) -> TrainState:
    params = init_params(config.net_config())
    zeros = lambda: {k: np.zeros_like(p) for k, p in params.items()}
    return TrainState(params, {k: p.copy() for k, p in params.items()}, zeros(), zeros(), 0)


def _draw(rng, grid: PatchGrid, schedule: NoiseSchedule, volume_padded: np.ndarray, batch: int):
    """Shared-noise draw: one (t, noise field) per call, batch patch starts."""
    p = grid.patch_size
    t = int(rng.integers(1, schedule.timesteps + 1))
    eps = rng.standard_normal(grid.padded_shape, dtype=np.float32)
    x_t = forward_noise(volume_padded, t, eps, schedule)
    context = downsample(crop_volume(x_t, p), grid)
    field = cached_positional_field(grid)
    nx, ny, nz = grid.image_dims
    starts = rng.integers(0, np.array([nx + p, ny + p, nz + p]) + 1, size=(batch, 3))
    channels = np.empty((batch, 5, p, p, p), dtype=np.float32)
    targets = np.empty((batch, p, p, p), dtype=np.float32)
    for i, (sx, sy, sz) in enumerate(starts):
        sl = np.s_[sz : sz + p, sy : sy + p, sx : sx + p]
        channels[i, 0] = x_t[sl]
        channels[i, 1] = context
        channels[i, 2] = field.px[sl]
        channels[i, 3] = field.py[sl]
        channels[i, 4] = field.pz[sl]
        targets[i] = eps[sl]
    return channels, targets, t


def sample_training_patch(volume: np.ndarray, grid: PatchGrid, schedule: NoiseSchedule, rng) -> tuple[PatchInput, np.ndarray]:
    """One training example: a uniformly placed patch of a freshly noised volume.

    The timestep is uniform on {1..T}; the patch start is uniform over the
    whole aligned padded range, which sweeps every offset and grid slot; the
    target is the slice of the same noise field that made the patch noisy.
    """
    channels, targets, t = _draw(rng, grid, schedule, pad_volume(volume, grid.patch_size), 1)
    inp = PatchInput(channels[0, 0], channels[0, 1], channels[0, 2], channels[0, 3], channels[0, 4], t)
    return inp, targets[0]


def training_batch(volume_padded: np.ndarray, grid: PatchGrid, schedule: NoiseSchedule, rng, batch: int):
    """Batch of aligned (channels, target) pairs sharing one noised volume."""
    return _draw(rng, grid, schedule, volume_padded, batch)


def train_step(state: TrainState, channels: np.ndarray, targets: np.ndarray, t: int, config: TrainConfig) -> float:
    """One Adam update on the noise-prediction loss; EMA weights follow along."""
    netcfg = config.net_config()
    eps_pred, cache = net_forward(state.params, netcfg, channels, t)
    diff = eps_pred - targets
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grads = net_backward(state.params, netcfg, cache, (2.0 / diff.size) * diff)
    state.step += 1
    s = state.step
    bc1 = 1.0 - ADAM_B1**s
    bc2 = 1.0 - ADAM_B2**s
    for name, p in state.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - ADAM_B1) * (g - m)
        v += (1.0 - ADAM_B2) * (np.square(g) - v)
        p -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        e = state.ema[name]
        e += (1.0 - config.ema_decay) * (p - e)
    return loss


def _config_echo(config: TrainConfig, dims: tuple[int, int, int], step: int) -> str:
    echo = {
        "patch_size": config.patch_size,
        "timesteps": config.timesteps,
        "beta_start": config.beta_start,
        "beta_end": config.beta_end,
        "lr": config.lr,
        "batch": config.batch,
        "train_steps": config.train_steps,
        "ema_decay": config.ema_decay,
        "net_width": config.net_width,
        "net_depth": config.net_depth,
        "seed": config.seed,
        "zero_context": config.zero_context,
        "dims_x": dims[0],
        "dims_y": dims[1],
        "dims_z": dims[2],
        "step": step,
    }
    return format_config(echo)


def _save_state(path, state: TrainState, config: TrainConfig, dims) -> None:
    raw = dict(state.params)
    raw.update({f"adam.m.{k}": v for k, v in state.m.items()})
    raw.update({f"adam.v.{k}": v for k, v in state.v.items()})
    save_checkpoint(path, _config_echo(config, dims, state.step), raw, state.ema)


def _parse_echo(echo: str) -> dict:
    cfg = parse_config(echo, extra=_ECHO_EXTRA)
    cfg.setdefault("step", 0)
    cfg.setdefault("zero_context", False)
    return cfg


def _state_from_checkpoint(path, config: TrainConfig) -> TrainState:
    echo, raw, ema = load_checkpoint(path)
    meta = _parse_echo(echo)
    for key in ("patch_size", "timesteps", "net_width", "net_depth", "batch", "seed"):
        want = getattr(config, key)
        if meta.get(key, want) != want:
            raise ValueError(f"checkpoint {key}={meta.get(key)} does not match config {key}={want}")
    params = {k: v for k, v in raw.items() if not k.startswith("adam.")}
    m = {k[len("adam.m.") :]: v for k, v in raw.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v.") :]: v for k, v in raw.items() if k.startswith("adam.v.")}
    if set(m) != set(params) or set(v) != set(params) or set(ema) != set(params):
        raise ValueError(f"checkpoint {path} is missing tensors for resume")
    return TrainState(params, ema, m, v, int(meta["step"]))


def train(volumes, config: TrainConfig, ckpt_path=None, curve_path=None, resume=None) -> TrainState:
    """Train on a list of same-shaped volumes; returns the final state.

    Writes a checkpoint to ckpt_path (periodically if checkpoint_every is
    set, always at the end) and the loss curve to curve_path as CSV with
    header step,loss,ema_loss. resume continues from an earlier checkpoint
    of the same run and reproduces the uninterrupted run bit for bit.
    """
    if len(volumes) == 0:
        raise ValueError("no training volumes")
    dims = volumes[0].shape[::-1]
    for i, vol in enumerate(volumes):
        if vol.shape != volumes[0].shape:
            raise ValueError(f"volume {i} shape {vol.shape} differs from {volumes[0].shape}")
    grid = PatchGrid(config.patch_size, dims)
    schedule = config.schedule()
    state = _state_from_checkpoint(resume, config) if resume else _init_state(config)
    padded = [pad_volume(np.asarray(v, dtype=np.float32), config.patch_size) for v in volumes]
    rows = []
    ema_loss = None
    for step in range(state.step, config.train_steps):
        rng = np.random.default_rng([config.seed, 0, step])
        vol = padded[int(rng.integers(len(padded)))]
        channels, targets, t = training_batch(vol, grid, schedule, rng, config.batch)
        if config.zero_context:
            channels[:, 1] = 0.0
        loss = train_step(state, channels, targets, t, config)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss {loss} at step {state.step} (t={t}); aborting")
        ema_loss = loss if ema_loss is None else LOSS_EMA_DECAY * ema_loss + (1.0 - LOSS_EMA_DECAY) * loss
        rows.append(f"{state.step},{loss:.8e},{ema_loss:.8e}")
        if ckpt_path and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            _save_state(ckpt_path, state, config, dims)
    if ckpt_path:
        _save_state(ckpt_path, state, config, dims)
    if curve_path:
        with open(curve_path, "w", encoding="utf-8") as f:
            f.write("step,loss,ema_loss\n")
            f.write("\n".join(rows) + ("\n" if rows else ""))
    return state


def denoiser_from_checkpoint(path, use_ema: bool = True):
    """Rebuild a ConvDenoiser (EMA weights by default) plus the echo metadata."""
    echo, raw, ema = load_checkpoint(path)
    meta = _parse_echo(echo)
    netcfg = ConvDenoiserConfig(width=int(meta["net_width"]), depth=int(meta["net_depth"]), seed=int(meta.get("seed", 0)))
    schedule = make_schedule(int(meta["timesteps"]), float(meta["beta_start"]), float(meta["beta_end"]))
    params = ema if use_ema else {k: v for k, v in raw.items() if not k.startswith("adam.")}
    denoiser = ConvDenoiser(params, netcfg, schedule, zero_context=bool(meta["zero_context"]))
    return denoiser, meta
