import numpy as np
import pytest

from conftest import fd_grad
from oracles import jfb_problem
from spi_patterns.core import make_rng, noise_sigma, ssim
from spi_patterns.gradients import (
    fd_oracle_gradient, implicit_gradient_dense, jfb_gradient, upper_loss, upper_objective,
)
from spi_patterns.io import generate_phantoms
from spi_patterns.regularizers import HuberTV
from spi_patterns.solvers import ReconConfig, lipschitz_estimate, solve_smooth_nmapg
from spi_patterns.trainer import default_alpha_grid


def test_upper_loss_examples():
    x = np.array([[0.1, 0.2], [0.3, 0.4]])
    v, g = upper_loss(x, x)
    assert v == 0 and not g.any()
    v, g = upper_loss(np.zeros(4), np.array([1.0, 0, 0, 0]))
    assert v == 0.125 and np.array_equal(g, [0.25, 0, 0, 0])
    with pytest.raises(ValueError):
        upper_loss(np.zeros(4), np.zeros(5))


def test_upper_loss_gradient_fd():
    rng = make_rng(7)
    a, b = rng.uniform(size=(2, 3, 3))
    _, g = upper_loss(a, b)
    assert np.abs(fd_grad(lambda z: upper_loss(a, z)[0], b, h=1e-4) - g).max() < 1e-10


def _solved(seed):
    A, x, noise, alpha = jfb_problem(seed)
    J = HuberTV(0.01)
    _, x_hat = upper_objective(A, alpha, x, noise, J)
    return A, x, noise, alpha, J, x_hat.reshape(4, 4)


def test_jfb_linear_in_upstream():
    A, x, noise, alpha, J, x_hat = _solved(0)
    y = A @ x.ravel() + noise
    zero = jfb_gradient(x_hat, A, y, x, alpha, J, np.zeros((4, 4)))
    assert not zero.grad_A.any() and zero.grad_log_alpha == 0
    up = upper_loss(x, x_hat)[1]
    g1 = jfb_gradient(x_hat, A, y, x, alpha, J, up)
    g2 = jfb_gradient(x_hat, A, y, x, alpha, J, 2 * up)
    assert np.array_equal(g2.grad_A, 2 * g1.grad_A) and g2.grad_log_alpha == 2 * g1.grad_log_alpha
    assert not g1.not_converged


def test_jfb_noise_path_vanishes_when_x_hat_is_truth():
    A, x, noise, alpha, J, x_hat = _solved(1)
    y = A @ x.ravel() + noise
    up = make_rng(2).standard_normal((4, 4))
    with_path = jfb_gradient(x_hat, A, y, x_hat, alpha, J, up)
    without = jfb_gradient(x_hat, A, y, None, alpha, J, up)
    np.testing.assert_array_equal(with_path.grad_A, without.grad_A)
    tau = 0.9 / lipschitz_estimate(A, alpha, J)
    v = -tau * up.ravel()
    np.testing.assert_allclose(without.grad_A, np.outer(A @ x_hat.ravel() - y, v), atol=1e-15)


def test_jfb_flags_unconverged_point():
    A, x, noise, alpha, J, x_hat = _solved(2)
    g = jfb_gradient(x_hat + 0.1, A, A @ x.ravel() + noise, x, alpha, J, np.ones((4, 4)))
    assert g.not_converged


def test_jfb_alpha_path_single_problem():
    # the first instance of the acceptance family, not a hand-picked one
    A, x, noise, alpha, J, x_hat = _solved(0)
    fd = fd_oracle_gradient(A, alpha, x, noise, J, entries=False)
    up = upper_loss(x, x_hat)[1]
    g = jfb_gradient(x_hat, A, A @ x.ravel() + noise, x, alpha, J, up)
    assert abs(g.grad_log_alpha - fd.grad_log_alpha) <= 1e-2 * abs(fd.grad_log_alpha)


def test_fd_oracle_matches_least_squares_sensitivity():
    rng = make_rng(3)
    A = rng.choice([-1.0, 1.0], size=(16, 16)) + 0.5 * np.eye(16)
    x = rng.uniform(size=(4, 4))
    noise = 0.05 * rng.standard_normal(16)
    # the problem is quadratic, so the oracle's Newton polish is exact after a short solve
    fd = fd_oracle_gradient(A, 0.0, x, noise, None, cfg=ReconConfig(max_iters=10, tol=1e-10))
    # x_hat = x + A^{-1} n, loss = 0.5 |A^{-1} n|^2 / N
    e = np.linalg.solve(A, noise)
    exact = -np.outer(np.linalg.solve(A.T, e / 16), e)
    assert np.abs(fd.grad_A - exact).max() <= 1e-5 * np.abs(exact).max()
    assert np.abs(fd.grad_A - exact).max() <= 1e-8
    assert fd.grad_log_alpha == 0


def test_fd_oracle_second_order():
    A, x, noise, alpha, J, _ = _solved(4)
    g = {h: fd_oracle_gradient(A, alpha, x, noise, J, h=h, entries=False).grad_log_alpha for h in (4e-3, 2e-3, 1e-3)}
    ref = (4 * g[1e-3] - g[2e-3]) / 3
    e1, e2 = abs(g[2e-3] - ref), abs(g[1e-3] - ref)
    assert 3.0 < e1 / e2 < 5.0


def test_fd_oracle_deterministic_and_matches_implicit():
    A, x, noise, alpha, J, _ = _solved(5)
    g1 = fd_oracle_gradient(A, alpha, x, noise, J)
    g2 = fd_oracle_gradient(A, alpha, x, noise, J)
    np.testing.assert_array_equal(g1.grad_A, g2.grad_A)
    ref = implicit_gradient_dense(A, alpha, x, noise, J)
    assert np.abs(g1.grad_A - ref.grad_A).max() <= 1e-6 * np.abs(ref.grad_A).max()
    assert abs(g1.grad_log_alpha - ref.grad_log_alpha) <= 1e-6 * abs(ref.grad_log_alpha)


def test_fd_oracle_size_limit():
    with pytest.raises(ValueError):
        fd_oracle_gradient(np.ones((2, 81)), 0.1, np.zeros((9, 9)), np.zeros(2), HuberTV(0.01))


def test_log_alpha_sign_when_over_regularised():
    J = HuberTV(0.01)
    images = generate_phantoms(50, (16, 16), seed=11)
    # nmAPG gets close, the dense Newton polish inside upper_objective finishes the solve
    cfg = ReconConfig(max_iters=20000, tol=1e-7)
    hits = 0
    for seed, x in enumerate(images):
        rng = make_rng(seed, 98)
        A = rng.choice([-1.0, 1.0], size=(64, 256))
        noise = noise_sigma(A @ x.ravel(), 0.05) * rng.standard_normal(64)
        y = A @ x.ravel() + noise
        grid = default_alpha_grid(A, J, 9)
        best = max(grid, key=lambda a: ssim(x, np.clip(
            solve_smooth_nmapg(A, y, a, J, ReconConfig.evaluation()).x_hat, 0, 1)))
        alpha = 100 * best
        _, x_hat = upper_objective(A, alpha, x, noise, J, cfg)
        h = 1e-4
        lp = upper_objective(A, alpha * np.exp(h), x, noise, J, cfg, x0=x_hat)[0]
        lm = upper_objective(A, alpha * np.exp(-h), x, noise, J, cfg, x0=x_hat)[0]
        fd = (lp - lm) / (2 * h)
        g = jfb_gradient(x_hat.reshape(16, 16), A, y, x, alpha, J, upper_loss(x.ravel(), x_hat)[1].reshape(16, 16))
        hits += fd > 0 and g.grad_log_alpha > 0
    assert hits >= 45
