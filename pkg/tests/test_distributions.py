import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sosvae.autodiff import ShapeError, Tensor, backward
from sosvae.distributions import (DiagGaussian, kl_between, kl_diag_to_full, kl_to_standard, log_prob,
                                  reparameterize, standard_normal)

E = np.e


def G(m, lv):
    return DiagGaussian(np.atleast_1d(np.asarray(m, float)), np.atleast_1d(np.asarray(lv, float)))


def test_reparameterize_examples():
    assert reparameterize(G(0.3, 0.1), [0.0]).value[0] == 0.3
    assert reparameterize(G(0.5, 0.0), [1.0]).value[0] == 1.5
    assert reparameterize(G(0.0, 2 * np.log(2)), [2.0]).value[0] == pytest.approx(4.0, abs=1e-15)
    with pytest.raises(ShapeError):
        reparameterize(G([0, 0], [0, 0]), [1.0])


def test_log_prob_examples():
    assert log_prob(G(0, 0), [0.0]).item() == pytest.approx(-0.918939, abs=1e-6)
    assert log_prob(G(0, 0), [1.0]).item() == pytest.approx(-1.418939, abs=1e-6)
    assert log_prob(G(1, 2), [1.0]).item() == pytest.approx(-0.5 * np.log(2 * np.pi) - 1, abs=1e-12)


def test_kl_examples():
    assert kl_to_standard(standard_normal(3)).item() == 0.0
    assert kl_to_standard(G([1, 1], [0, 0])).item() == pytest.approx(1.0, abs=1e-12)
    assert kl_to_standard(G(0, 1)).item() == pytest.approx(0.5 * (E - 2), abs=1e-12)
    assert kl_between(G([0.2, 1], [0.3, -1]), G([0.2, 1], [0.3, -1])).item() == 0.0
    assert kl_between(G(1, 0), G(0, 0)).item() == pytest.approx(0.5, abs=1e-12)
    assert kl_between(G(0, 1), G(0, 0)).item() == pytest.approx(0.5 * (E - 2), abs=1e-12)
    with pytest.raises(ShapeError):
        kl_between(G([0, 0], [0, 0]), G(0, 0))


def test_invalid_gaussian_rejected():
    with pytest.raises(ShapeError):
        G([0, 0], [0])
    with pytest.raises(ValueError):
        G([0.0], [np.inf])


gauss = st.integers(0, 100_000).map(lambda s: np.random.default_rng(s).normal(size=(4, 3)))


@settings(max_examples=60, deadline=None)
@given(gauss)
def test_kls_nonnegative_and_consistent(z):
    q1, q2 = G(z[0], z[1]), G(z[2], z[3])
    assert kl_between(q1, q2).item() >= 0
    assert kl_to_standard(q1).item() >= 0
    assert abs(kl_to_standard(q1).item() - kl_between(q1, standard_normal(3)).item()) < 1e-12


def test_kls_nonnegative_on_many_random_gaussians():
    rng = np.random.default_rng(0)
    m1, l1, m2, l2 = rng.normal(size=(4, 10_000, 3))
    kl = kl_between(DiagGaussian(m1, l1), DiagGaussian(m2, l2)).value
    assert kl.shape == (10_000,) and np.all(kl > 0)


def test_batched_kl_matches_rows():
    rng = np.random.default_rng(1)
    q1 = DiagGaussian(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)))
    q2 = DiagGaussian(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)))
    batch = kl_between(q1, q2).value
    for i in range(5):
        assert batch[i] == pytest.approx(kl_between(q1.row(i), q2.row(i)).item(), abs=1e-14)


def test_reparameterize_gradients_match_fd():
    m = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    lv = Tensor(np.array([0.4, -0.7]), requires_grad=True)
    eps = np.array([0.9, -1.1])
    gm, glv = backward((reparameterize(DiagGaussian(m, lv), eps) ** 3).sum(), [m, lv])
    h = 1e-6
    for i in range(2):
        d = np.zeros(2)
        d[i] = h
        f = lambda mm, ll: np.sum((mm + np.exp(ll / 2) * eps) ** 3)
        fd_m = (f(m.value + d, lv.value) - f(m.value - d, lv.value)) / (2 * h)
        fd_l = (f(m.value, lv.value + d) - f(m.value, lv.value - d)) / (2 * h)
        assert gm.value[i] == pytest.approx(fd_m, rel=1e-6)
        assert glv.value[i] == pytest.approx(fd_l, rel=1e-6)


def test_diag_to_full_kl_reduces_to_diag_case():
    rng = np.random.default_rng(2)
    m1, m2 = rng.normal(size=(2, 4, 3))
    v1, v2 = np.exp(rng.normal(size=(2, 4, 3)))
    full = np.array([kl_diag_to_full(m1[i], v1[i], m2[i], np.diag(v2[i]))[0] for i in range(4)])
    diag = kl_between(DiagGaussian(m1, np.log(v1)), DiagGaussian(m2, np.log(v2))).value
    np.testing.assert_allclose(full, diag, rtol=1e-10)
