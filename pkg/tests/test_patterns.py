import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spi_patterns.patterns import (
    PROJECTED_BOX, SIGN_STE, TANH, EpsilonSchedule, LatentPattern, binarisation_backward, binary_penalty,
    finalise_rnp, gaussian_matrix, init_latent, materialise, scrambled_hadamard,
)


def test_gaussian_statistics_and_determinism():
    A = gaussian_matrix(64, 256, seed=0)
    np.testing.assert_array_equal(A.entries, gaussian_matrix(64, 256, seed=0).entries)
    assert abs(A.entries.mean()) < 3 / np.sqrt(64 * 256 * 256)
    assert abs(np.mean(A.entries ** 2) * 256 - 1) < 0.1


def test_sh_examples():
    A = scrambled_hadamard(4, 4, seed=5).entries
    np.testing.assert_array_equal(A @ A.T, 4 * np.eye(4))
    B = scrambled_hadamard(2, 8, seed=1).entries
    assert B[0] @ B[1] == 0
    np.testing.assert_array_equal(scrambled_hadamard(4, 8, 9).entries, scrambled_hadamard(4, 8, 9).entries)
    with pytest.raises(ValueError):
        scrambled_hadamard(2, 6)
    with pytest.raises(ValueError):
        scrambled_hadamard(9, 8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 6), st.data(), st.integers(0, 10_000))
def test_sh_orthogonal(logn, data, seed):
    N = 2 ** logn
    M = data.draw(st.integers(1, N))
    A = scrambled_hadamard(M, N, seed)
    assert A.is_binary
    np.testing.assert_array_equal(A.entries @ A.entries.T, N * np.eye(M))


def test_sh_nested_in_m():
    big = scrambled_hadamard(64, 256, seed=3).entries
    np.testing.assert_array_equal(scrambled_hadamard(16, 256, seed=3).entries, big[:16])


def test_materialise_examples():
    Z = np.array([[0.3, -1.2], [0.0, -1e-4]])
    np.testing.assert_array_equal(materialise(LatentPattern(Z)).entries, [[1, -1], [1, -1]])
    np.testing.assert_array_equal(materialise(LatentPattern(np.zeros((2, 2)), TANH)).entries, 0)
    np.testing.assert_array_equal(materialise(LatentPattern([[2.0, -3.0]], PROJECTED_BOX)).entries, [[1, -1]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([0.0, -0.0, 5e-324, -5e-324, 1e-308, 1.0, -2.5]), min_size=1, max_size=12))
def test_sign_exactly_binary(vals):
    A = materialise(LatentPattern(np.array(vals)[None]))
    assert A.is_binary
    assert set(np.unique(A.entries)) <= {-1.0, 1.0}


def test_backward_examples():
    g = np.array([[0.7, -2.0]])
    np.testing.assert_array_equal(binarisation_backward(LatentPattern(np.zeros((1, 2))), g), g)
    assert np.all(binarisation_backward(LatentPattern(np.full((1, 2), 40.0)), g) == 0)
    # tanh chain rule against finite differences, loss a^2
    z, h = 0.5, 1e-6
    analytic = binarisation_backward(LatentPattern([[z]], TANH), [[2 * np.tanh(z)]])[0, 0]
    fd = (np.tanh(z + h) ** 2 - np.tanh(z - h) ** 2) / (2 * h)
    assert abs(analytic - fd) < 1e-8
    box = binarisation_backward(LatentPattern([[0.5, 1.5]], PROJECTED_BOX), [[1.0, 1.0]])
    np.testing.assert_array_equal(box, [[1.0, 0.0]])
    with pytest.raises(ValueError):
        binarisation_backward(LatentPattern(np.zeros((1, 2))), np.zeros((2, 1)))


def test_ste_backward_equals_tanh_path():
    Z = np.random.default_rng(0).standard_normal((3, 5))
    g = np.random.default_rng(1).standard_normal((3, 5))
    np.testing.assert_array_equal(binarisation_backward(LatentPattern(Z, SIGN_STE), g),
                                  binarisation_backward(LatentPattern(Z, TANH), g))


def test_penalty_examples():
    v, g = binary_penalty(np.array([[1.0, -1.0]]), 0.25)
    assert v == 0
    np.testing.assert_array_equal(g, [[-8, 8]])
    v, g = binary_penalty(np.array([[0.0]]), 0.5)
    assert v == 2.0 and g[0, 0] == 0
    v, g = binary_penalty(np.array([[0.5, -0.5]]), 1.0)
    assert v == 1.5
    np.testing.assert_array_equal(g, [[-1, 1]])
    with pytest.raises(ValueError):
        binary_penalty(np.zeros((1, 1)), 0.0)


def test_penalty_gradient_fd():
    A = np.random.default_rng(4).uniform(-1, 1, (4, 6))
    v, g = binary_penalty(A, 0.3)
    assert v >= 0
    h = 1e-6
    for idx in np.ndindex(A.shape):
        Ap, Am = A.copy(), A.copy()
        Ap[idx] += h
        Am[idx] -= h
        fd = (binary_penalty(Ap, 0.3)[0] - binary_penalty(Am, 0.3)[0]) / (2 * h)
        assert abs(fd - g[idx]) < 1e-8


def test_finalise_examples():
    A, d = finalise_rnp(np.array([[0.999, -0.999]]))
    np.testing.assert_array_equal(A.entries, [[1, -1]])
    assert d == 0.0
    A, d = finalise_rnp(np.array([[0.2]]))
    assert A.entries[0, 0] == 1 and d == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 10), st.floats(0.05, 0.95), st.integers(1, 20), st.floats(1e-6, 1e-2))
def test_schedule_monotone(eps0, decay, period, eps_min):
    s = EpsilonSchedule(eps0, decay, period, eps_min)
    vals = [s(k) for k in range(200)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert min(vals) >= eps_min


def test_schedule_default_and_validation():
    s = EpsilonSchedule.default(80)
    assert s.period == 10 and s(0) == 1.0 and s(10) == 0.5
    with pytest.raises(ValueError):
        EpsilonSchedule(decay=1.0)


def test_latent_init():
    p = init_latent(4, 8, seed=1)
    assert p.shape == (4, 8) and p.parameterisation == SIGN_STE
    assert abs(p.Z.std() - 0.1) < 0.05
    sh = scrambled_hadamard(4, 8, seed=2)
    w = init_latent(4, 8, warm_start=sh)
    assert materialise(w) == sh
    with pytest.raises(ValueError):
        LatentPattern(np.array([[np.inf]]))
