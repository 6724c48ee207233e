"""Encoder, decoders, classifier and the Adam optimizer.

Networks are plain functions of a :class:`ParamSet`, which keeps it easy to
evaluate the same function at perturbed or symbolically-updated parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, ShapeError, Tensor
from .distributions import LOG_2PI, DiagGaussian

DECODER_KINDS = ("mlp", "nmf", "linear")
LIKELIHOODS = ("gaussian", "bernoulli")


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    latent_dim: int = 20
    n_classes: int = 2
    encoder_hidden: int = 512
    decoder: str = "mlp"
    decoder_hidden: int = 512
    likelihood: str = "gaussian"

    def __post_init__(self):
        if self.decoder not in DECODER_KINDS:
            raise ValueError(f"decoder must be one of {DECODER_KINDS}, got {self.decoder!r}")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}, got {self.likelihood!r}")
        if self.decoder == "nmf" and self.likelihood != "gaussian":
            raise ValueError("the NMF decoder is paired with the gaussian likelihood")
        if min(self.input_dim, self.latent_dim, self.n_classes) < 1:
            raise ValueError("dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(input_dim: int, latent_dim: int, hidden: int, rng: np.random.Generator) -> ParamSet:
    return ParamSet.from_arrays({
        "w1": _uniform(rng, input_dim, (input_dim, hidden)),
        "b1": _uniform(rng, input_dim, (hidden,)),
        "w_mu": _uniform(rng, hidden, (hidden, latent_dim)),
        "b_mu": _uniform(rng, hidden, (latent_dim,)),
        "w_lv": _uniform(rng, hidden, (hidden, latent_dim)),
        "b_lv": _uniform(rng, hidden, (latent_dim,)),
    })


def init_decoder(arch: Architecture, rng: np.random.Generator) -> ParamSet:
    L, p, h = arch.latent_dim, arch.input_dim, arch.decoder_hidden
    if arch.decoder == "mlp":
        arrays = {
            "w1": _uniform(rng, L, (L, h)),
            "b1": _uniform(rng, L, (h,)),
            "w2": _uniform(rng, h, (h, p)),
            "b2": _uniform(rng, h, (p,)),
        }
    elif arch.decoder == "nmf":
        arrays = {"w_raw": _uniform(rng, L, (p, L))}
    else:
        arrays = {"w": _uniform(rng, L, (p, L)), "b": np.zeros(p)}
    return ParamSet.from_arrays(arrays)


def init_classifier(latent_dim: int, n_classes: int, rng: np.random.Generator) -> ParamSet:
    return ParamSet.from_arrays({
        "w": _uniform(rng, latent_dim, (n_classes, latent_dim)),
        "b": np.zeros(n_classes),
    })


def _as_batch(x) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        return ad.reshape(x, (1, x.shape[0])), True
    return x, False


def encode(phi, x) -> DiagGaussian:
    """hidden = relu(x W1 + b1); mean and log-variance are affine heads."""
    xb, single = _as_batch(x)
    if xb.shape[1] != phi["w1"].shape[0]:
        raise ShapeError(f"encoder expects input dim {phi['w1'].shape[0]}, got {xb.shape[1]}")
    h = ad.relu(xb @ phi["w1"] + phi["b1"])
    mean = h @ phi["w_mu"] + phi["b_mu"]
    log_var = h @ phi["w_lv"] + phi["b_lv"]
    if single:
        L = mean.shape[1]
        mean, log_var = ad.reshape(mean, (L,)), ad.reshape(log_var, (L,))
    return DiagGaussian(mean, log_var)


def decode(theta, s, arch: Architecture) -> Tensor:
    """Decoder output: logits for the bernoulli head, means for the gaussian head."""
    sb, single = _as_batch(s)
    if sb.shape[1] != arch.latent_dim:
        raise ShapeError(f"decoder expects latent dim {arch.latent_dim}, got {sb.shape[1]}")
    if arch.decoder == "mlp":
        h = ad.relu(sb @ theta["w1"] + theta["b1"])
        out = h @ theta["w2"] + theta["b2"]
    elif arch.decoder == "nmf":
        out = ad.softplus(sb) @ ad.transpose(ad.softplus(theta["w_raw"]))
    else:
        out = sb @ ad.transpose(theta["w"]) + theta["b"]
    if single:
        out = ad.reshape(out, (out.shape[1],))
    return out


def reconstruction_mean(out, arch: Architecture) -> np.ndarray:
    out = ad.as_tensor(out)
    if arch.likelihood == "bernoulli":
        return ad.sigmoid(out).value
    return out.value


def recon_loglik(out, x, arch: Architecture) -> Tensor:
    """Per-row log p(x | decoder output), summed over coordinates."""
    out = ad.as_tensor(out)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != out.shape:
        raise ShapeError(f"data shape {x.shape} does not match decoder output {out.shape}")
    if arch.likelihood == "bernoulli":
        ll = out * x - ad.softplus(out)
    else:
        ll = (ad.square(out - x) + LOG_2PI) * -0.5
    return ad.reduce_sum(ll, axis=-1)


def classify(psi, s) -> Tensor:
    """Class log-probabilities under multinomial logistic regression."""
    sb, single = _as_batch(s)
    if sb.shape[1] != psi["w"].shape[1]:
        raise ShapeError(f"classifier expects latent dim {psi['w'].shape[1]}, got {sb.shape[1]}")
    out = ad.log_softmax(sb @ ad.transpose(psi["w"]) + psi["b"])
    if single:
        out = ad.reshape(out, (out.shape[1],))
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_epoch: int | None = 50
    decay_factor: float = 0.5
    decay_repeat: bool = False
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def effective_rate(self, epoch: int) -> float:
        return self.lr * decay_multiplier(epoch, self.decay_epoch, self.decay_factor, self.decay_repeat)


def decay_multiplier(epoch: int, decay_epoch: int | None, factor: float = 0.5, repeat: bool = False) -> float:
    """Step schedule over 1-based epochs: halve once after ``decay_epoch`` epochs."""
    if not decay_epoch:
        return 1.0
    if repeat:
        return factor ** ((epoch - 1) // decay_epoch)
    return factor if epoch > decay_epoch else 1.0


def adam_step(state: AdamState, params: ParamSet, grads, epoch: int = 1) -> ParamSet:
    """One bias-corrected Adam step *descending* ``grads``; returns fresh leaves."""
    state.step += 1
    t = state.step
    lr = state.effective_rate(epoch)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new = {}
    for k, p in params.items():
        g = grads[k]
        g = g.value if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[k] = m
        state.v[k] = v
        new[k] = p.value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return ParamSet.from_arrays(new)
