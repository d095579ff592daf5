"""Conjugate gradient on the normal equations A*A x = A*y."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["CGState", "cg_normal", "cg_normal_state"]


@dataclass
class CGState:
    x: np.ndarray
    iterations: int
    residual_norms: list[float]  # ||A*y - A*A x_k||, including the initial residual


def _dot(a, b) -> float:
    return float(np.sum(a * b, dtype=np.float64))


def cg_normal_state(apply_a, apply_at, y, x_init, max_iters: int, tol: float = 0.0) -> CGState:
    """Run CG from x_init for at most max_iters steps; tol 0 runs them all.

    The iteration state is kept in float64 regardless of input dtype. A zero
    max_iters returns x_init unchanged.
    """
    if max_iters < 0:
        raise ValueError(f"max_iters must be >= 0, got {max_iters}")
    if not np.all(np.isfinite(x_init)) or not np.all(np.isfinite(y)):
        raise ValueError("non-finite input to cg_normal")
    x = np.asarray(x_init, dtype=np.float64).copy()
    if max_iters == 0:
        return CGState(x, 0, [])
    b = np.asarray(apply_at(y), dtype=np.float64)
    r = b - apply_at(apply_a(x))
    p = r.copy()
    rs = _dot(r, r)
    norms = [np.sqrt(rs)]
    b_norm = np.sqrt(_dot(b, b))
    done = 0
    for _ in range(max_iters):
        if np.sqrt(rs) <= tol * b_norm or rs == 0.0:
            break
        ap = np.asarray(apply_at(apply_a(p)), dtype=np.float64)
        denom = _dot(p, ap)
        if denom <= 0.0:
            break  # breakdown: p in the null space of A*A
        alpha = rs / denom
        x += alpha * p
        r -= alpha * ap
        rs_new = _dot(r, r)
        if not np.isfinite(rs_new):
            raise RuntimeError(f"cg_normal diverged at iteration {done + 1}: residual {rs_new}")
        norms.append(np.sqrt(rs_new))
        p = r + (rs_new / rs) * p
        rs = rs_new
        done += 1
    return CGState(x, done, norms)


def cg_normal(apply_a, apply_at, y, x_init, max_iters: int, tol: float = 0.0) -> np.ndarray:
    """Least-squares refinement of x_init; returns the iterate in x_init's dtype."""
    state = cg_normal_state(apply_a, apply_at, y, x_init, max_iters, tol)
    return state.x.astype(np.asarray(x_init).dtype, copy=False)
