"""Patch denoisers: a closed-form Gaussian oracle and a small 3D conv net.

The conv net is a plain stack of SAME-padded 3x3x3 convolutions with SiLU
between them and a sinusoidal timestep embedding projected and added per
channel after the first stage. Forward and backward passes are written out
by hand on top of an im2col GEMM so the gradients are exact and the whole
net stays in numpy. Input is 5 channels (noisy patch, global context, px,
py, pz), output is the predicted noise for channel 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from patchdiff.diffusion import NoiseSchedule, denoised_estimate

__all__ = [
    "PatchInput",
    "DenoiserOutput",
    "ConvDenoiserConfig",
    "ConvDenoiser",
    "GaussianOracleDenoiser",
    "init_params",
    "net_forward",
    "net_backward",
    "sinusoidal_embedding",
]

N_CHANNELS = 5  # noisy patch, context, px, py, pz


@dataclass(frozen=True)
class PatchInput:
    """One denoiser input: 5 aligned (P, P, P) channels and a timestep."""

    patch: np.ndarray
    context: np.ndarray
    px: np.ndarray
    py: np.ndarray
    pz: np.ndarray
    t: int

    def channels(self) -> np.ndarray:
        return np.stack([self.patch, self.context, self.px, self.py, self.pz])


@dataclass(frozen=True)
class DenoiserOutput:
    eps_pred: np.ndarray
    x0_pred: np.ndarray


@dataclass(frozen=True)
class ConvDenoiserConfig:
    width: int = 32
    depth: int = 4  # conv stages total, >= 2
    kernel: int = 3
    temb_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if self.width < 1 or self.temb_dim < 2 or self.temb_dim % 2 != 0:
            raise ValueError(f"bad width {self.width} or temb_dim {self.temb_dim}")


def sinusoidal_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    if half > 1:
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def init_params(config: ConvDenoiserConfig) -> dict[str, np.ndarray]:
    """Uniform +-1/sqrt(fan_in) init for every weight and bias, float32."""
    rng = np.random.default_rng(config.seed)
    w = config.width
    k = config.kernel
    widths = [N_CHANNELS] + [w] * (config.depth - 1) + [1]

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    params: dict[str, np.ndarray] = {}
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
        fan = cin * k**3
        params[f"conv{i}.w"] = uniform((cout, cin, k, k, k), fan)
        params[f"conv{i}.b"] = uniform((cout,), fan)
        if i == 0:
            params["temb.w"] = uniform((w, config.temb_dim), config.temb_dim)
            params["temb.b"] = uniform((w,), config.temb_dim)
    return params


def _wmat(w: np.ndarray) -> np.ndarray:
    # (Cout, Cin, kz, ky, kx) -> (k^3 * Cin, Cout), matching the im2col column order
    cout = w.shape[0]
    return np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0).reshape(-1, cout))


def _conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    """SAME zero-padded stride-1 conv on channels-last activations.

    x is (B, D, H, W, Cin); returns (y, cols) with y channels-last and the
    im2col matrix kept for the backward pass. Keeping the channel axis
    innermost makes the window gather run over contiguous runs, which is
    what the single-core GEMM path is limited by.
    """
    batch, d, h, wd, cin = x.shape
    cout = w.shape[0]
    k = w.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))  # (B, D, H, W, Cin, kz, ky, kx)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(batch * d * h * wd, k**3 * cin)
    y = cols @ _wmat(w)
    if b is not None:
        y += b
    return y.reshape(batch, d, h, wd, cout), cols


def _conv3d_backward(d_y: np.ndarray, cols: np.ndarray, w: np.ndarray):
    """Gradients of _conv3d: returns (d_x, d_w, d_b)."""
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    dymat = d_y.reshape(-1, cout)
    d_w = (cols.T @ dymat).reshape(k, k, k, cin, cout).transpose(4, 3, 0, 1, 2)
    d_b = dymat.sum(axis=0)
    # Input gradient is a SAME conv of d_y with the channel-swapped, flipped kernel.
    w_flip = w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1]
    d_x, _ = _conv3d(d_y, np.ascontiguousarray(w_flip), None)
    return d_x, d_w, d_b


def _silu(z):
    # exp(-z) overflowing to inf for very negative z still yields the right
    # saturated value (0); silence the spurious warning, keep the bits.
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def _silu_grad(z):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def net_forward(params: dict, config: ConvDenoiserConfig, x: np.ndarray, t: int):
    """Predicted noise for a batch x of shape (B, 5, P, P, P) at timestep t.

    Returns (eps, cache); pass cache to net_backward for gradients.
    """
    if x.ndim != 5 or x.shape[1] != N_CHANNELS:
        raise ValueError(f"expected (B, {N_CHANNELS}, P, P, P) input, got {x.shape}")
    emb = sinusoidal_embedding(t, config.temb_dim).astype(x.dtype)
    cache = {"emb": emb, "cols": [], "pre": []}
    # Channels-last internally; the channel axis stays innermost through every GEMM.
    h, cols = _conv3d(np.ascontiguousarray(x.transpose(0, 2, 3, 4, 1)), params["conv0.w"], params["conv0.b"])
    cache["cols"].append(cols)
    h += params["temb.w"] @ emb + params["temb.b"]
    for i in range(1, config.depth):
        cache["pre"].append(h)
        h = _silu(h)
        h, cols = _conv3d(h, params[f"conv{i}.w"], params[f"conv{i}.b"])
        cache["cols"].append(cols)
    return h[..., 0], cache


def net_backward(params: dict, config: ConvDenoiserConfig, cache: dict, d_eps: np.ndarray) -> dict:
    """Parameter gradients given d(loss)/d(eps). Mirrors net_forward in reverse."""
    grads: dict[str, np.ndarray] = {}
    d_h = d_eps[..., None]
    for i in range(config.depth - 1, 0, -1):
        d_act, d_w, d_b = _conv3d_backward(d_h, cache["cols"][i], params[f"conv{i}.w"])
        grads[f"conv{i}.w"] = d_w
        grads[f"conv{i}.b"] = d_b
        d_h = d_act * _silu_grad(cache["pre"][i - 1])
    d_temb = d_h.sum(axis=(0, 1, 2, 3))
    grads["temb.w"] = np.outer(d_temb, cache["emb"])
    grads["temb.b"] = d_temb
    _, d_w, d_b = _conv3d_backward(d_h, cache["cols"][0], params["conv0.w"])
    grads["conv0.w"] = d_w
    grads["conv0.b"] = d_b
    return grads


class GaussianOracleDenoiser:
    """Exact posterior denoiser for an iid N(mu, tau^2) prior on every voxel.

    Closed form, ignores the context and positional channels. Used to exercise
    the sampling machinery independently of any trained network.
    """

    def __init__(self, mu: float, tau: float, schedule: NoiseSchedule):
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.mu = mu
        self.tau = tau
        self.schedule = schedule

    def denoise_batch(self, x: np.ndarray, t: int):
        u = x[:, 0]
        ab = self.schedule.alpha_bar_at(t)
        if ab == 1.0:
            return np.zeros_like(u), u.copy()
        tau2 = self.tau * self.tau
        x0 = (np.sqrt(ab) * tau2 * u + (1.0 - ab) * self.mu) / (ab * tau2 + 1.0 - ab)
        eps = (u - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        return eps.astype(u.dtype, copy=False), x0.astype(u.dtype, copy=False)

    def __call__(self, inp: PatchInput) -> DenoiserOutput:
        eps, x0 = self.denoise_batch(inp.channels()[None], inp.t)
        return DenoiserOutput(eps[0], x0[0])


class ConvDenoiser:
    """Conv-net denoiser bound to a schedule and a parameter set.

    zero_context blanks channel 1 before the net; a model trained that way
    must also be sampled that way.
    """

    def __init__(self, params: dict, config: ConvDenoiserConfig, schedule: NoiseSchedule, zero_context: bool = False):
        self.params = params
        self.config = config
        self.schedule = schedule
        self.zero_context = zero_context

    def denoise_batch(self, x: np.ndarray, t: int):
        if self.zero_context:
            x = x.copy()
            x[:, 1] = 0.0
        eps, _ = net_forward(self.params, self.config, x, t)
        x0 = denoised_estimate(x[:, 0], eps, t, self.schedule)
        return eps, x0

    def __call__(self, inp: PatchInput) -> DenoiserOutput:
        eps, x0 = self.denoise_batch(inp.channels()[None], inp.t)
        return DenoiserOutput(eps[0], x0[0])
