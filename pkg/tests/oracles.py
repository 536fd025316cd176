"""Independent reference computations shared by unit and acceptance tests."""

import numpy as np


def grad2d(x):
    g = np.zeros((2,) + x.shape)
    g[0, ..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    g[1, ..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    return g


def div2d(p):
    d = np.zeros(p.shape[1:])
    d[..., :-1, :] += p[0, ..., :-1, :]
    d[..., 1:, :] -= p[0, ..., :-1, :]
    d[..., :, :-1] += p[1, ..., :, :-1]
    d[..., :, 1:] -= p[1, ..., :, :-1]
    return d


def tv(x):
    g = grad2d(x)
    return np.sqrt(g[0] ** 2 + g[1] ** 2).sum(axis=(-2, -1))


def rof_reference(y, alpha, iters=1_000_000):
    """Chambolle-Pock with the exact data prox for min 0.5||x - y||^2 + alpha TV(x).

    ``y`` has shape (B, H, W); ``alpha`` one weight per image. In-place updates
    keep a million iterations affordable.
    """
    y = np.array(y, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64).reshape(-1, 1, 1)
    tau = sigma = 1.0 / np.sqrt(8.0)
    x = y.copy()
    xbar = x.copy()
    p0 = np.zeros_like(y)
    p1 = np.zeros_like(y)
    nrm = np.empty_like(y)
    d = np.empty_like(y)
    ty = tau * y
    inv = 1.0 / (1.0 + tau)
    for _ in range(iters):
        p0[:, :-1, :] += sigma * (xbar[:, 1:, :] - xbar[:, :-1, :])
        p1[:, :, :-1] += sigma * (xbar[:, :, 1:] - xbar[:, :, :-1])
        np.hypot(p0, p1, out=nrm)
        nrm /= a
        np.maximum(nrm, 1.0, out=nrm)
        p0 /= nrm
        p1 /= nrm
        # d = div p
        d.fill(0.0)
        d[:, :-1, :] += p0[:, :-1, :]
        d[:, 1:, :] -= p0[:, :-1, :]
        d[:, :, :-1] += p1[:, :, :-1]
        d[:, :, 1:] -= p1[:, :, :-1]
        d *= tau
        d += x
        d += ty
        d *= inv
        np.subtract(2.0 * d, x, out=xbar)
        x, d = d, x
    return x


def rof_objective(x, y, alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    return 0.5 * ((x - y) ** 2).sum(axis=(-2, -1)) + alpha * tv(x)


def laplacian_matrix(H, W):
    """Dense D^T D for forward differences with replicate boundary."""
    N = H * W
    rows = []
    for i in range(H):
        for j in range(W):
            if i + 1 < H:
                r = np.zeros(N)
                r[(i + 1) * W + j], r[i * W + j] = 1, -1
                rows.append(r)
            if j + 1 < W:
                r = np.zeros(N)
                r[i * W + j + 1], r[i * W + j] = 1, -1
                rows.append(r)
    D = np.array(rows)
    return D.T @ D


def piecewise_phantoms():
    out = []
    a = np.full((8, 8), 0.2)
    a[2:6, 3:7] = 0.8
    out.append(a)
    b = np.zeros((8, 8))
    b[:, 4:] = 0.6
    b[5:, :] += 0.3
    out.append(b)
    c = np.full((8, 8), 0.5)
    c[1:4, 1:4] = 0.9
    c[5:8, 4:7] = 0.1
    out.append(c)
    return out


def jfb_problem(seed, M=4):
    """4x4 block-averaged phantom, random +-1 A, 5% noise, alpha log-uniform in [0.1, 10]."""
    from spi_patterns.core import make_rng, noise_sigma
    from spi_patterns.io import generate_phantoms
    rng = make_rng(seed, 99)
    x = generate_phantoms(1, (16, 16), seed=seed)[0].reshape(4, 4, 4, 4).mean(axis=(1, 3))
    A = rng.choice([-1.0, 1.0], size=(M, 16))
    noise = noise_sigma(A @ x.ravel(), 0.05) * rng.standard_normal(M)
    alpha = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
    return A, x, noise, alpha
