import numpy as np
import pytest

from conftest import fd_grad
from spi_patterns.io import generate_phantoms
from spi_patterns.regularizers import (
    FilterBank, HuberTV, LearnedConv, PretrainConfig, TotalVariation, denoise_mse, huber_tv_grad,
    huber_tv_value, image_gradient, image_gradient_adjoint, learned_value_grad, make_regulariser,
    pretrain_filters, tv_value,
)


def random_bank(rng, F=4, k=3, penalty="log"):
    return FilterBank(rng.standard_normal((F, k, k)), penalty).zero_mean()


def test_tv_examples():
    assert tv_value(np.full((4, 5), 0.3)) == 0
    assert tv_value(np.array([[0.0], [1.0]])) == pytest.approx(1.0)
    x = np.ones((3, 3))
    x[:, 0] = 0
    assert tv_value(x) == pytest.approx(3.0)


def test_tv_nonnegative_zero_iff_constant():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.uniform(size=(5, 6))
        assert tv_value(x) > 0
    assert tv_value(np.full((5, 6), 0.7)) == 0


def test_gradient_adjoint_and_norm():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((7, 9))
    p = rng.standard_normal((2, 7, 9))
    assert abs(np.sum(image_gradient(x) * p) - np.sum(x * image_gradient_adjoint(p))) < 1e-12
    # power iteration stays below the bound 8
    v = rng.standard_normal((16, 16))
    for _ in range(300):
        v = image_gradient_adjoint(image_gradient(v))
        v /= np.linalg.norm(v)
    assert np.sum(image_gradient(v) ** 2) <= 8


def test_huber_examples():
    assert np.all(huber_tv_grad(np.full((4, 4), 0.2)) == 0)
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(8, 8))
    err = np.abs(huber_tv_grad(x, 0.01) - fd_grad(lambda z: huber_tv_value(z, 0.01), x)).max()
    assert err < 1e-6
    # quadratic regime: gradient is the Laplacian-type term divided by delta
    small = 1e-3 * x
    big = 10.0
    np.testing.assert_allclose(huber_tv_grad(small, big),
                               image_gradient_adjoint(image_gradient(small)) / big, rtol=1e-12, atol=1e-15)


def test_learned_examples():
    rng = np.random.default_rng(3)
    fb = random_bank(rng)
    v, g = learned_value_grad(np.full((6, 6), 0.4), fb)
    assert abs(v) < 1e-20 and np.abs(g).max() < 1e-12
    diff = FilterBank(np.array([[[-1.0, 1.0]]]), "quadratic")
    v, g = learned_value_grad(np.array([[0.0, 1.0]]), diff)
    assert v == pytest.approx(0.5)
    np.testing.assert_allclose(g, [[-1.0, 1.0]])
    x = rng.uniform(size=(16, 16))
    err = np.abs(learned_value_grad(x, fb)[1] - fd_grad(lambda z: learned_value_grad(z, fb)[0], x)).max()
    assert err < 1e-6
    with pytest.raises(ValueError):
        learned_value_grad(np.zeros((2, 2)), fb)


def test_correlation_adjoint():
    rng = np.random.default_rng(4)
    fb = random_bank(rng, F=3, k=5)
    x = rng.standard_normal((2, 12, 10))
    u = rng.standard_normal((2, 3, 8, 6))
    assert abs(np.sum(fb.correlate(x) * u) - np.sum(x * fb.correlate_adjoint(u))) < 1e-10


@pytest.mark.parametrize("J", [HuberTV(0.01), LearnedConv(random_bank(np.random.default_rng(5)))])
def test_constant_invariance_and_batching(J):
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(10, 10))
    assert abs(J.value(x + 0.37) - J.value(x)) < 1e-9
    X = rng.uniform(size=(3, 10, 10))
    np.testing.assert_allclose(J.grad(X)[1], J.grad(X[1]), rtol=0, atol=1e-14)
    assert np.all(np.isfinite(J.grad(X)))


@pytest.mark.parametrize("J", [HuberTV(0.05), LearnedConv(random_bank(np.random.default_rng(7)))])
def test_hvp_matches_gradient_differences(J):
    rng = np.random.default_rng(8)
    x = rng.uniform(size=(9, 9))
    v = rng.standard_normal((9, 9))
    h = 1e-6
    fd = (J.grad(x + h * v) - J.grad(x - h * v)) / (2 * h)
    assert np.abs(J.hvp(x, v) - fd).max() < 1e-5 * max(1, np.abs(fd).max())


def test_lipschitz_bounds_hold():
    rng = np.random.default_rng(9)
    for J in (HuberTV(0.02), LearnedConv(random_bank(rng))):
        L = J.lipschitz()
        for _ in range(20):
            x, z = rng.uniform(size=(2, 12, 12))
            assert np.linalg.norm(J.grad(x) - J.grad(z)) <= L * np.linalg.norm(x - z) * (1 + 1e-9)


def test_filterbank_validation():
    with pytest.raises(ValueError):
        FilterBank(np.zeros((1, 3, 3)), "cubic")
    with pytest.raises(ValueError):
        FilterBank(np.full((1, 2, 2), np.nan))
    fb = FilterBank(np.arange(9.0).reshape(1, 3, 3)).zero_mean()
    assert abs(fb.kernels.sum()) < 1e-12


def test_make_regulariser():
    assert isinstance(make_regulariser("tv"), TotalVariation)
    assert make_regulariser("huber", delta=0.1).delta == 0.1
    with pytest.raises(ValueError):
        make_regulariser("learned")
    with pytest.raises(ValueError):
        make_regulariser("wavelet")


def test_pretrain_constant_corpus_errors():
    with pytest.raises(ValueError, match="constant"):
        pretrain_filters([np.full((8, 8), 0.5)] * 3, PretrainConfig(epochs=1))


def _edge_phantoms(count, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        x = np.full((16, 16), rng.uniform(0.1, 0.3))
        c = rng.integers(4, 12)
        x[:, c:] = rng.uniform(0.6, 0.9)
        out.append(x)
    return out


def test_pretrain_improves_held_out_denoising():
    train, held = _edge_phantoms(8, 0), _edge_phantoms(8, 1)
    init = np.array([[[-1.0, 1.0]]])
    cfg = PretrainConfig(n_filters=1, kernel_size=2, epochs=40, init_filters=init, seed=0)
    before = denoise_mse(FilterBank(init), held, cfg)
    fb = pretrain_filters(train, cfg)
    assert denoise_mse(fb, held, cfg) <= before
    assert np.abs(fb.kernels.sum(axis=(1, 2))).max() < 1e-12


def test_pretrain_deterministic():
    imgs = generate_phantoms(4, (12, 12), seed=0)
    cfg = PretrainConfig(n_filters=3, kernel_size=3, epochs=3, seed=4)
    a, b = pretrain_filters(imgs, cfg), pretrain_filters(imgs, cfg)
    assert a.kernels.tobytes() == b.kernels.tobytes()
