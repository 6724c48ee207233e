"""Scalar training objectives (to be maximized), averaged over the batch.

Each loss returns a :class:`LossBreakdown` whose components are batch-mean
Tensors in nats per datum; ``total`` is the signed weighted sum

    recon - prior_kl + lam * supervised - mu * coupling_kl
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .distributions import kl_between, kl_to_standard, reparameterize
from .networks import Architecture, classify, decode, encode, recon_loglik

ZERO = Tensor(0.0)


@dataclass
class LossBreakdown:
    recon: Tensor = ZERO
    prior_kl: Tensor = ZERO
    supervised: Tensor = ZERO
    coupling_kl: Tensor = ZERO
    lam: float = 0.0
    mu: float = 0.0

    @property
    def total(self) -> Tensor:
        t = self.recon - self.prior_kl
        if self.lam:
            t = t + self.supervised * self.lam
        if self.mu:
            t = t - self.coupling_kl * self.mu
        return t

    def as_floats(self) -> dict[str, float]:
        return {
            "recon": self.recon.item(),
            "prior_kl": self.prior_kl.item(),
            "supervised": self.supervised.item(),
            "coupling_kl": self.coupling_kl.item(),
            "total": self.total.item(),
        }


def supervised_loglik(psi, s, y) -> Tensor:
    """Batch-mean log p_psi(y | s)."""
    return ad.mean(-ad.softmax_cross_entropy(classify(psi, s), y))


def elbo(theta, phi, x, eps, arch: Architecture, mask=None) -> LossBreakdown:
    """Single-sample reparameterized ELBO: E[log p(x|s)] - KL(q(s|x) || N(0, I)).

    With ``mask`` (observed coordinate indices) ``x`` holds only the observed
    values and the reconstruction term covers just those coordinates.
    """
    q = encode(phi, x)
    s = reparameterize(q, eps)
    recon = ad.mean(masked_recon_loglik(theta, s, x, mask, arch))
    return LossBreakdown(recon=recon, prior_kl=ad.mean(kl_to_standard(q)))


def svae_loss(theta, phi, psi, x, y, eps, lam: float, arch: Architecture) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    q = encode(phi, x)
    s = reparameterize(q, eps)
    recon = ad.mean(recon_loglik(decode(theta, s, arch), x, arch))
    out = LossBreakdown(recon=recon, prior_kl=ad.mean(kl_to_standard(q)), lam=lam)
    if lam:
        out.supervised = supervised_loglik(psi, s, y)
    return out


def dvae_loss(theta, phi1, phi2, psi, x, y, eps, lam: float, mu: float, arch: Architecture,
              include_recon: bool = True) -> LossBreakdown:
    """Predictive-encoder objective: lam*log p(y|s2) + log p(x|s2) - mu*KL(q2 || q1).

    ``q1`` enters as a constant (the generative encoder is not trained by this
    loss). ``include_recon=False`` keeps only the supervised and coupling terms.
    """
    if lam < 0 or mu < 0:
        raise ValueError("lam and mu must be nonnegative")
    q1 = encode(phi1, x).detach()
    q2 = encode(phi2, x)
    if q1.dim != q2.dim:
        raise ShapeError(f"encoder latent dims differ: {q1.dim} vs {q2.dim}")
    s2 = reparameterize(q2, eps)
    out = LossBreakdown(lam=lam, mu=mu)
    out.supervised = supervised_loglik(psi, s2, y)
    out.coupling_kl = ad.mean(kl_between(q2, q1))
    if include_recon:
        out.recon = ad.mean(recon_loglik(decode(theta, s2, arch), x, arch))
    return out


def masked_recon_loglik(theta, s, x_t, mask_t, arch: Architecture) -> Tensor:
    """Per-row reconstruction log-likelihood over observed coordinates only.

    ``mask_t`` lists observed coordinate indices into the full output;
    ``x_t`` holds the values at exactly those coordinates. ``None`` means all.
    """
    out = decode(theta, s, arch)
    if mask_t is None:
        return recon_loglik(out, x_t, arch)
    mask_t = np.asarray(mask_t, dtype=np.int64)
    if mask_t.size and (mask_t.min() < 0 or mask_t.max() >= arch.input_dim):
        raise IndexError(f"mask index out of range [0, {arch.input_dim})")
    if mask_t.size == 0:
        n = out.shape[0] if out.ndim == 2 else None
        return Tensor(np.zeros(n)) if n is not None else Tensor(0.0)
    axis = out.ndim - 1
    return recon_loglik(ad.take(out, mask_t, axis=axis), x_t, arch)
