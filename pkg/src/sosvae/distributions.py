"""Diagonal Gaussians: reparameterized sampling, log-densities and closed-form KLs.

All quantities are in nats. Batched inputs carry the latent dimension on the
last axis; reductions run over that axis only, so a batch of N Gaussians
yields N values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


class NonFiniteError(ValueError):
    pass


@dataclass(frozen=True)
class DiagGaussian:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        object.__setattr__(self, "mean", ad.as_tensor(self.mean))
        object.__setattr__(self, "log_var", ad.as_tensor(self.log_var))
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")
        if not np.all(np.isfinite(self.log_var.value)):
            raise NonFiniteError("log_var must be finite")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_var.value)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(Tensor(self.mean.value), Tensor(self.log_var.value))

    def row(self, i: int) -> "DiagGaussian":
        return DiagGaussian(Tensor(self.mean.value[i]), Tensor(self.log_var.value[i]))


def standard_normal(dim: int) -> DiagGaussian:
    return DiagGaussian(Tensor(np.zeros(dim)), Tensor(np.zeros(dim)))


def reparameterize(q: DiagGaussian, eps) -> Tensor:
    eps = ad.as_tensor(eps)
    if eps.shape != q.mean.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match mean {q.mean.shape}")
    return q.mean + ad.exp(q.log_var * 0.5) * eps


def log_prob(q: DiagGaussian, s) -> Tensor:
    s = ad.as_tensor(s)
    if s.shape != q.mean.shape:
        raise ShapeError(f"sample shape {s.shape} does not match mean {q.mean.shape}")
    z = ad.square(s - q.mean) / ad.exp(q.log_var)
    return ad.reduce_sum((z + q.log_var + LOG_2PI) * -0.5, axis=-1)


def kl_to_standard(q: DiagGaussian) -> Tensor:
    terms = ad.exp(q.log_var) + ad.square(q.mean) - 1.0 - q.log_var
    return ad.reduce_sum(terms, axis=-1) * 0.5


def kl_between(q1: DiagGaussian, q2: DiagGaussian) -> Tensor:
    """KL(q1 || q2), per row for batched Gaussians."""
    if q1.mean.shape != q2.mean.shape:
        raise ShapeError(f"dimension mismatch: {q1.mean.shape} vs {q2.mean.shape}")
    ratio = (ad.exp(q1.log_var) + ad.square(q1.mean - q2.mean)) / ad.exp(q2.log_var)
    return ad.reduce_sum((q2.log_var - q1.log_var) * 0.5 + ratio * 0.5 - 0.5, axis=-1)


def kl_diag_to_full(mean_q: np.ndarray, var_q: np.ndarray, mean_p: np.ndarray, cov_p: np.ndarray) -> np.ndarray:
    """KL(N(mean_q, diag var_q) || N(mean_p, cov_p)) in plain numpy.

    ``mean_q``/``var_q``/``mean_p`` may be (N, L) batches sharing one ``cov_p``.
    """
    mean_q = np.atleast_2d(mean_q)
    var_q = np.atleast_2d(var_q)
    mean_p = np.atleast_2d(mean_p)
    L = cov_p.shape[0]
    chol = np.linalg.cholesky(cov_p)
    prec = np.linalg.inv(cov_p)
    logdet_p = 2.0 * np.sum(np.log(np.diag(chol)))
    d = mean_p - mean_q
    trace = var_q @ np.diag(prec)
    maha = np.einsum("ni,ij,nj->n", d, prec, d)
    return 0.5 * (trace + maha - L + logdet_p - np.sum(np.log(var_q), axis=1))
