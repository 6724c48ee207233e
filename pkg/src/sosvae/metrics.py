"""Evaluation metrics and stationary-point probes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from .autodiff import Tensor, gradient, no_grad
from .data import seeded_rng
from .data import GaussianPosterior
from .distributions import DiagGaussian, kl_between, kl_diag_to_full
from .networks import encode
from .objectives import elbo, supervised_loglik
from .trainers import ModelBundle, TrainConfig, _second_order_direction, refit_encoder

PSNR_CAP = 99.0
SSIM_WINDOW = 8


def accuracy(predicted, labels) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {labels.shape}")
    if labels.size == 0:
        raise ValueError("empty input")
    return float(np.mean(predicted == labels))


def binary_auc(scores, positive) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_macro(scores, labels) -> float:
    """Mean one-vs-rest AUC. 1-D scores are read as the positive-class score of a binary task."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim == 1:
        return binary_auc(scores, labels == 1)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise ValueError("scores must be (N, C) with one label per row")
    if scores.shape[1] < 2:
        raise ValueError("need at least two classes")
    aucs = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if pos.any() and not pos.all():
            aucs.append(binary_auc(scores[:, c], pos))
    if not aucs:
        raise ValueError("no one-vs-rest task has both classes present")
    return float(np.mean(aucs))


def psnr(x, x_hat, max_value: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(max_value ** 2 / mse))


def ssim(x, x_hat, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window``-square patches (stride 1, population moments)."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.ndim != 2 or x.shape != x_hat.shape:
        raise ValueError(f"need two 2-D images of equal shape, got {x.shape} and {x_hat.shape}")
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} is smaller than the {window}x{window} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    a = sliding_window_view(x, (window, window))
    b = sliding_window_view(x_hat, (window, window))
    mu_a = a.mean(axis=(-2, -1))
    mu_b = b.mean(axis=(-2, -1))
    var_a = (a * a).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (b * b).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (a * b).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _encode_const(phi, X) -> DiagGaussian:
    with no_grad():
        return encode(phi.constants(), np.asarray(X, dtype=np.float64))


def encoder_kl(phi_a, phi_b, X) -> np.ndarray:
    """Per-row KL(q_a(.|x) || q_b(.|x))."""
    with no_grad():
        return kl_between(_encode_const(phi_a, X), _encode_const(phi_b, X)).value


def scientific_utility(bundle: ModelBundle, X_train, X_eval=None, config: TrainConfig | None = None,
                       experiment: int | None = None, epochs: int | None = None) -> float:
    """Mean KL between the predictive encoder and a freshly refit generative encoder.

    The refit holds the decoder fixed and is trained on ``X_train``; the KL is
    averaged over ``X_eval`` (defaults to the training rows). Lower is better.
    """
    X_eval = X_train if X_eval is None else X_eval
    refit = refit_encoder(bundle, X_train, config, mask=bundle.mask(experiment), epochs=epochs)
    kl = encoder_kl(bundle.encoder("predictive", experiment), refit, X_eval)
    return float(max(np.mean(kl), 0.0))


def linear_decoder_posterior(bundle: ModelBundle, X) -> GaussianPosterior:
    """Exact posterior of a linear decoder with unit-variance gaussian noise."""
    if bundle.arch.decoder != "linear" or bundle.arch.likelihood != "gaussian":
        raise ValueError("exact posterior needs the linear decoder with the gaussian likelihood")
    W = bundle.decoder["w"].value
    b = bundle.decoder["b"].value
    cov = np.linalg.inv(np.eye(W.shape[1]) + W.T @ W)
    cov = 0.5 * (cov + cov.T)
    return GaussianPosterior((np.asarray(X, dtype=np.float64) - b) @ W @ cov, cov)


def posterior_kl(bundle: ModelBundle, X, role: str = "predictive") -> float:
    """Mean KL(q(s|x) || p_theta(s|x)) under the bundle's own linear decoder."""
    post = linear_decoder_posterior(bundle, X)
    q = _encode_const(bundle.encoder(role), X)
    return float(np.mean(kl_diag_to_full(q.mean.value, q.variance, post.mean, post.cov)))


@dataclass
class Residuals:
    phi: float
    theta: float
    psi: float
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


def stationary_residuals(bundle: ModelBundle, X, y, eps=None, n_draws: int = 16, seed: int = 0) -> Residuals:
    """Sup-norm gradients of the batch-mean losses at the bundle's parameters.

    ``phi``: ELBO w.r.t. the generative encoder. ``theta``: ELBO plus the
    lam-weighted second-order supervised path w.r.t. the decoder. ``psi``:
    supervised log-likelihood w.r.t. the classifier. The probe batch is ``X``
    repeated once per noise draw; ``eps`` may be passed explicitly as an
    (n_draws, N, L) array.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    arch, cfg = bundle.arch, bundle.config
    L = arch.latent_dim
    if eps is None:
        eps = seeded_rng(seed, "probe").standard_normal((n_draws, len(X), L))
    eps = np.asarray(eps, dtype=np.float64)
    n_draws = eps.shape[0]
    xb = np.tile(X, (n_draws, 1))
    yb = np.tile(y, n_draws)
    eb = eps.reshape(n_draws * len(X), L)
    phi = bundle.encoder("generative").fresh()
    theta = bundle.decoder.fresh()
    psi = bundle.classifier.fresh()
    g_phi = gradient(elbo(theta, phi, xb, eb, arch).total, phi)
    g_theta = gradient(elbo(theta, phi.fresh(), xb, eb, arch).total, theta)
    total_theta = {k: g.value for k, g in g_theta.items()}
    if cfg.lam > 0:
        direction = _second_order_direction(theta, phi, psi, xb, yb, eb, arch, cfg)
        total_theta = {k: v + direction[k] for k, v in total_theta.items()}
    q = _encode_const(phi, xb)
    s = Tensor(q.mean.value + np.sqrt(q.variance) * eb)
    g_psi = gradient(supervised_loglik(psi, s, yb), psi)

    def sup(d):
        return max(float(np.max(np.abs(v.value if isinstance(v, Tensor) else v))) for v in d.values())

    return Residuals(phi=sup(g_phi), theta=sup(total_theta), psi=sup(g_psi), n=len(xb))


@dataclass
class MetricsReport:
    values: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, value: float, n: int):
        self.values[name] = float(value)
        self.counts[name] = int(n)

    def __post_init__(self):
        self.validate()

    def validate(self):
        v = self.values
        for k in ("acc", "auc"):
            if k in v and not 0.0 <= v[k] <= 1.0:
                raise ValueError(f"{k} outside [0, 1]: {v[k]}")
        if "ssim" in v and v["ssim"] > 1.0 + 1e-12:
            raise ValueError(f"ssim above 1: {v['ssim']}")
        if "utility_kl" in v and v["utility_kl"] < 0:
            raise ValueError("utility_kl must be nonnegative")

    def to_dict(self) -> dict:
        self.validate()
        return {"metrics": dict(self.values), "counts": dict(self.counts)}
