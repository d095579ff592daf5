"""Command line entry points.

Subcommands: phantom, project, fbp, train, sample, reconstruct, eval,
import-raw. Every randomized subcommand is deterministic for a fixed --seed;
PATCHDIFF_THREADS only changes how much work runs in parallel, never the
output bytes. Exit codes: 1 for validation problems, 2 for I/O problems.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys

import numpy as np

from patchdiff import evaluation, io, training
from patchdiff.ct import CTGeometry, make_geometry, min_detectors, project, fbp
from patchdiff.grid import PatchGrid
from patchdiff.sampler import SamplerConfig, reconstruct, sample_unconditional

log = logging.getLogger("patchdiff.cli")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage errors are validation here
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_flags(sub, *keys):
    sub.add_argument("--config", help="key = value config file; flags override it")
    sub.add_argument("--seed", type=int, default=None)
    flag_types = {
        "views": int,
        "noise_sigma": float,
        "eta": float,
        "steps": int,
        "K": int,
        "cg_iters": int,
        "cg_every": int,
        "sigma_rule": str,
        "lr": float,
        "batch": int,
        "train_steps": int,
        "patch_size": int,
        "net_width": int,
        "net_depth": int,
        "ema_decay": float,
        "timesteps": int,
        "beta_start": float,
        "beta_end": float,
    }
    for key in keys:
        sub.add_argument("--" + key.replace("_", "-"), dest=key, type=flag_types[key], default=None)


def _merged_config(args) -> dict:
    cfg = dict(io.CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(io.load_config(args.config))
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="patchdiff")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("phantom", help="write synthetic ellipsoid volumes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--size", type=int, nargs="+", required=True, help="nx [ny nz], cubic if one value")
    p.add_argument("--ellipsoids", type=int, default=6)
    p.add_argument("--edge", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="key = value config file; flags override it")

    p = subs.add_parser("project", help="parallel-beam projection of a volume")
    p.add_argument("--vol", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-det", type=int, default=None)
    p.add_argument("--det-spacing", type=float, default=1.0)
    _add_config_flags(p, "views", "noise_sigma")

    p = subs.add_parser("fbp", help="filtered backprojection of a sinogram")
    p.add_argument("--sino", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, nargs="+", default=None, help="nx [ny]; default inferred from n_det")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="unused here; accepted for uniformity")

    p = subs.add_parser("train", help="train the patch denoiser on a volume directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curve", default=None, help="training curve CSV path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--ckpt-every", type=int, default=0)
    p.add_argument("--zero-context", action="store_true")
    p.add_argument("--steps", dest="train_steps_alias", type=int, default=None, help="alias for --train-steps")
    _add_config_flags(
        p, "train_steps", "lr", "batch", "patch_size", "net_width", "net_depth",
        "ema_decay", "timesteps", "beta_start", "beta_end",
    )

    p = subs.add_parser("sample", help="draw an unconditional volume from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, nargs="+", default=None, help="nx [ny nz]; default from checkpoint")
    _add_config_flags(p, "steps", "eta", "sigma_rule")

    p = subs.add_parser("reconstruct", help="sparse-view reconstruction from a sinogram")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sino", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, nargs="+", default=None, help="nx [ny]; default inferred from n_det")
    _add_config_flags(p, "steps", "eta", "K", "cg_iters", "cg_every", "sigma_rule")

    p = subs.add_parser("eval", help="metrics on volume files")
    esubs = p.add_subparsers(dest="metric", required=True)
    e = esubs.add_parser("psnr")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e.add_argument("--peak", type=float, default=1.0)
    e = esubs.add_parser("nn")
    e.add_argument("--vol", required=True)
    e.add_argument("--data", required=True, help="directory of volume files")
    e = esubs.add_parser("boundary")
    e.add_argument("--vol", required=True)
    e.add_argument("--patch-size", type=int, default=8)

    p = subs.add_parser("import-raw", help="wrap a raw little-endian float32 file as a volume")
    p.add_argument("--raw", required=True)
    p.add_argument("--dims", type=int, nargs=3, required=True, metavar=("NX", "NY", "NZ"))
    p.add_argument("--out", required=True)
    return parser


def _volume_dir(path) -> list:
    names = sorted(n for n in os.listdir(path) if n.endswith(".pdv"))
    if not names:
        raise ValueError(f"no .pdv volumes in {path}")
    return [os.path.join(path, n) for n in names]


def _cube(size, what) -> tuple[int, int, int]:
    if len(size) == 1:
        return (size[0], size[0], size[0])
    if len(size) == 3:
        return tuple(size)
    raise ValueError(f"{what} takes 1 or 3 values, got {len(size)}")


def _infer_slice_size(n_det: int, patch_size: int, size_flag) -> tuple[int, int]:
    if size_flag:
        if len(size_flag) == 1:
            return size_flag[0], size_flag[0]
        if len(size_flag) == 2:
            return size_flag[0], size_flag[1]
        raise ValueError(f"--size takes 1 or 2 values, got {len(size_flag)}")
    n = int(math.floor(n_det / math.sqrt(2.0)))
    n -= n % patch_size
    if n < patch_size:
        raise ValueError(f"cannot infer a slice size from n_det={n_det}; pass --size")
    return n, n


def _cmd_phantom(args) -> int:
    cfg = _merged_config(args)
    dims = _cube(args.size, "--size")
    spec = evaluation.PhantomSpec(n_ellipsoids=args.ellipsoids, edge=args.edge)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.n):
        vol = evaluation.generate_phantom(dims, spec, seed=[cfg["seed"], i])
        io.save_volume(os.path.join(args.out, f"phantom_{i:04d}.pdv"), vol)
    log.info("wrote %d phantom(s) of dims %s to %s", args.n, dims, args.out)
    return 0


def _cmd_project(args) -> int:
    cfg = _merged_config(args)
    vol = io.load_volume(args.vol)
    nz, ny, nx = vol.shape
    n_det = args.n_det if args.n_det is not None else min_detectors(nx, ny, args.det_spacing)
    geom = make_geometry(cfg["views"], n_det, args.det_spacing)
    sino = project(vol, geom)
    if cfg["noise_sigma"] > 0.0:
        noise = np.random.default_rng([cfg["seed"], 10]).standard_normal(sino.shape, dtype=np.float32)
        sino = sino + cfg["noise_sigma"] * noise
    io.save_sinogram(args.out, sino, geom.angles)
    return 0


def _cmd_fbp(args) -> int:
    sino, angles = io.load_sinogram(args.sino)
    nz, n_views, n_det = sino.shape
    geom = CTGeometry(n_views, n_det, 1.0, angles)
    nx, ny = _infer_slice_size(n_det, 1, args.size)
    io.save_volume(args.out, fbp(sino, geom, nx, ny))
    return 0


def _cmd_train(args) -> int:
    cfg = _merged_config(args)
    if args.train_steps_alias is not None:
        cfg["train_steps"] = args.train_steps_alias
    volumes = [io.load_volume(p) for p in _volume_dir(args.data)]
    config = training.TrainConfig(
        patch_size=cfg["patch_size"],
        timesteps=cfg["timesteps"],
        beta_start=cfg["beta_start"],
        beta_end=cfg["beta_end"],
        lr=cfg["lr"],
        batch=cfg["batch"],
        train_steps=cfg["train_steps"],
        ema_decay=cfg["ema_decay"],
        net_width=cfg["net_width"],
        net_depth=cfg["net_depth"],
        seed=cfg["seed"],
        zero_context=args.zero_context,
        checkpoint_every=args.ckpt_every,
    )
    state = training.train(volumes, config, ckpt_path=args.out, curve_path=args.curve, resume=args.resume)
    log.info("trained to step %d", state.step)
    return 0


def _sampler_config(cfg, k_override=None) -> SamplerConfig:
    return SamplerConfig(
        steps=cfg["steps"],
        eta=cfg["eta"],
        k=k_override if k_override is not None else cfg["K"],
        cg_iters=cfg["cg_iters"],
        cg_every=cfg["cg_every"],
        sigma_rule=cfg["sigma_rule"],
        seed=cfg["seed"],
    )


def _cmd_sample(args) -> int:
    cfg = _merged_config(args)
    denoiser, meta = training.denoiser_from_checkpoint(args.ckpt)
    if args.size:
        dims = _cube(args.size, "--size")
    else:
        dims = (meta["dims_x"], meta["dims_y"], meta["dims_z"])
    grid = PatchGrid(int(meta["patch_size"]), dims)
    vol = sample_unconditional(denoiser, grid, denoiser.schedule, _sampler_config(cfg, k_override=1))
    io.save_volume(args.out, vol)
    return 0


def _cmd_reconstruct(args) -> int:
    cfg = _merged_config(args)
    denoiser, meta = training.denoiser_from_checkpoint(args.ckpt)
    sino, angles = io.load_sinogram(args.sino)
    nz, n_views, n_det = sino.shape
    geom = CTGeometry(n_views, n_det, 1.0, angles)
    patch = int(meta["patch_size"])
    nx, ny = _infer_slice_size(n_det, patch, args.size)
    grid = PatchGrid(patch, (nx, ny, nz))
    vol = reconstruct(denoiser, grid, denoiser.schedule, _sampler_config(cfg), geom, sino)
    io.save_volume(args.out, vol)
    return 0


def _cmd_eval(args) -> int:
    if args.metric == "psnr":
        value = evaluation.psnr(io.load_volume(args.a), io.load_volume(args.b), peak=args.peak)
        print(f"psnr={value:.6f}" if math.isfinite(value) else "psnr=inf")
    elif args.metric == "nn":
        query = io.load_volume(args.vol)
        paths = _volume_dir(args.data)
        idx, dist = evaluation.nearest_neighbor(query, [io.load_volume(p) for p in paths])
        print(f"nn_index={idx}")
        print(f"nn_path={paths[idx]}")
        print(f"nn_distance={dist:.6f}")
    else:
        value = evaluation.boundary_artifact_metric(io.load_volume(args.vol), args.patch_size)
        print(f"boundary={value:.6f}" if math.isfinite(value) else "boundary=inf")
    return 0


def _cmd_import_raw(args) -> int:
    nx, ny, nz = args.dims
    if min(args.dims) < 1:
        raise ValueError(f"dims must be positive, got {args.dims}")
    with open(args.raw, "rb") as f:
        payload = f.read()
    if len(payload) != 4 * nx * ny * nz:
        raise io.FormatError(f"{args.raw}: {len(payload)} bytes, expected {4 * nx * ny * nz} for dims {args.dims}")
    vol = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx)
    io.save_volume(args.out, vol)
    return 0


_COMMANDS = {
    "phantom": _cmd_phantom,
    "project": _cmd_project,
    "fbp": _cmd_fbp,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "reconstruct": _cmd_reconstruct,
    "eval": _cmd_eval,
    "import-raw": _cmd_import_raw,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except io.FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
