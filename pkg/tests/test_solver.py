import numpy as np
import pytest

from patchdiff.solver import CGState, cg_normal, cg_normal_state


def operators(mat):
    return (lambda v: mat @ v.ravel()), (lambda s: (mat.T @ s.ravel()))


def test_exact_solve_matches_pseudoinverse():
    rng = np.random.default_rng(0)
    mat = rng.standard_normal((10, 6)) + 3.0 * np.eye(10, 6)
    x_true = rng.standard_normal(6)
    y = mat @ x_true
    apply_a, apply_at = operators(mat)
    x = cg_normal(apply_a, apply_at, y, np.zeros(6), max_iters=6)
    np.testing.assert_allclose(x, np.linalg.pinv(mat) @ y, atol=1e-6)
    np.testing.assert_allclose(x, x_true, atol=1e-6)


def test_underdetermined_residual_decreases_monotonically():
    # 2 equations, 9 unknowns: CG cannot solve, but each iterate must fit the
    # data no worse than the last.
    rng = np.random.default_rng(1)
    mat = rng.standard_normal((2, 9))
    y = rng.standard_normal(2)
    apply_a, apply_at = operators(mat)
    x0 = rng.standard_normal(9)
    data_residuals = []
    for iters in range(5):
        x = cg_normal(apply_a, apply_at, y, x0, max_iters=iters)
        data_residuals.append(np.linalg.norm(mat @ x - y))
    assert all(b <= a + 1e-12 for a, b in zip(data_residuals, data_residuals[1:]))
    assert data_residuals[-1] < 1e-10  # 2 equations need at most 2 CG steps


def test_normal_residual_history_decreases():
    rng = np.random.default_rng(2)
    mat = rng.standard_normal((8, 5))
    y = rng.standard_normal(8)
    apply_a, apply_at = operators(mat)
    state = cg_normal_state(apply_a, apply_at, y, np.zeros(5), max_iters=5)
    assert isinstance(state, CGState)
    assert state.iterations == len(state.residual_norms) - 1
    assert all(b < a for a, b in zip(state.residual_norms, state.residual_norms[1:]))
    assert state.residual_norms[-1] < 1e-8 * state.residual_norms[0]


def test_zero_iters_returns_init_unchanged():
    rng = np.random.default_rng(3)
    mat = rng.standard_normal((4, 4))
    apply_a, apply_at = operators(mat)
    x0 = rng.standard_normal(4).astype(np.float32)
    state = cg_normal_state(apply_a, apply_at, rng.standard_normal(4), x0, max_iters=0)
    np.testing.assert_array_equal(state.x, x0.astype(np.float64))
    assert state.iterations == 0
    assert state.residual_norms == []
    out = cg_normal(apply_a, apply_at, rng.standard_normal(4), x0, max_iters=0)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, x0)


def test_tolerance_stops_early():
    rng = np.random.default_rng(4)
    mat = rng.standard_normal((6, 4)) + 2.0 * np.eye(6, 4)
    y = rng.standard_normal(6)
    apply_a, apply_at = operators(mat)
    loose = cg_normal_state(apply_a, apply_at, y, np.zeros(4), max_iters=50, tol=1e-2)
    tight = cg_normal_state(apply_a, apply_at, y, np.zeros(4), max_iters=50, tol=0.0)
    assert loose.iterations < tight.iterations or tight.iterations == 4


def test_exact_start_takes_no_steps():
    rng = np.random.default_rng(5)
    mat = rng.standard_normal((5, 3)) + np.eye(5, 3)
    x_true = rng.standard_normal(3)
    state = cg_normal_state(*operators(mat), mat @ x_true, x_true, max_iters=10)
    assert state.iterations == 0
    np.testing.assert_array_equal(state.x, x_true)


def test_input_validation():
    mat = np.eye(3)
    apply_a, apply_at = operators(mat)
    with pytest.raises(ValueError):
        cg_normal(apply_a, apply_at, np.ones(3), np.zeros(3), max_iters=-1)
    bad = np.array([1.0, np.nan, 0.0])
    with pytest.raises(ValueError):
        cg_normal(apply_a, apply_at, bad, np.zeros(3), max_iters=1)
    with pytest.raises(ValueError):
        cg_normal(apply_a, apply_at, np.ones(3), bad, max_iters=1)


def test_divergence_raises():
    # An "adjoint" that is not actually the transpose can push the residual to
    # overflow; the solver must fail loudly instead of returning garbage.
    scale = 1e200
    apply_a = lambda v: scale * v
    apply_bad_at = lambda s: scale * s
    with pytest.raises((RuntimeError, FloatingPointError)):
        with np.errstate(over="raise"):
            cg_normal(apply_a, apply_bad_at, np.ones(4), np.ones(4), max_iters=5)


def test_multidimensional_unknowns_keep_shape():
    rng = np.random.default_rng(6)
    mat = rng.standard_normal((12, 8)) + 2.0 * np.eye(12, 8)
    x_true = rng.standard_normal((2, 2, 2))
    apply_a = lambda v: mat @ v.ravel()
    apply_at = lambda s: (mat.T @ s.ravel()).reshape(2, 2, 2)
    y = apply_a(x_true)
    x = cg_normal(apply_a, apply_at, y, np.zeros((2, 2, 2)), max_iters=8)
    assert x.shape == (2, 2, 2)
    np.testing.assert_allclose(x, x_true, atol=1e-8)
