"""Training procedures: VAE, SVAE, SOS-VAE, SDVAE, SOS-DVAE, refits and the
multi-experiment (missing coordinates) trainer.

Every trainer is a pure function of (data, config): all randomness comes from
named streams derived from ``config.seed``. The procedures share their step
functions, so deleting a step (``beta=0``, ``second_order=False``) yields
exactly the reduced method's update sequence.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .autodiff import ParamSet, Tensor, gradient, gradients, grad_through_update, no_grad
from .data import ExperimentMask, LabeledDataset, batches, seeded_rng
from .distributions import NonFiniteError, reparameterize
from .networks import (AdamState, Architecture, adam_step, classify, decay_multiplier, decode,
                       encode, init_classifier, init_decoder, init_encoder, reconstruction_mean)
from .objectives import LossBreakdown, dvae_loss, elbo, masked_recon_loglik, supervised_loglik, svae_loss

METHODS = ("vae", "svae", "svae-refit", "vae-refit", "sos-vae", "sdvae", "sos-dvae", "missing")


class TrainingDivergedError(FloatingPointError):
    """Raised when a loss turns non-finite; training is aborted, not continued."""


@dataclass
class TrainConfig:
    method: str = "vae"
    lam: float = 1.0
    mu: float = 1.0
    alpha: float = 1e-3
    beta: float | None = None  # None: same as alpha
    inner_lr: float | None = None  # rate of the recorded encoder step; None: alpha
    epochs: int = 10
    batch_size: int = 100
    latent_dim: int = 20
    encoder_hidden: int = 512
    decoder: str = "mlp"
    decoder_hidden: int = 512
    likelihood: str = "gaussian"
    seed: int = 0
    decay_epoch: int | None = 50
    decay_factor: float = 0.5
    decay_repeat: bool = False
    inner_steps: int = 1
    second_order: bool = True
    hypergrad_backend: str = "exact"
    refit_epochs: int | None = None
    classifier_epochs: int | None = None
    classifier_lr: float | None = None
    tie_encoders: bool = False  # start the predictive encoder as a copy of the generative one

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lam and mu must be nonnegative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1 or self.inner_steps < 1:
            raise ValueError("epochs, batch_size and inner_steps must be >= 1")
        if self.hypergrad_backend not in ("exact", "fd"):
            raise ValueError("hypergrad_backend must be 'exact' or 'fd'")

    @property
    def beta_value(self) -> float:
        return self.alpha if self.beta is None else self.beta

    @property
    def inner_rate(self) -> float:
        return self.alpha if self.inner_lr is None else self.inner_lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class ModelBundle:
    method: str
    arch: Architecture
    encoders: dict[str, ParamSet]
    decoder: ParamSet
    classifier: ParamSet
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    masks: list[ExperimentMask] | None = None
    optimizers: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        L = self.arch.latent_dim
        for k, phi in self.encoders.items():
            if phi["w_mu"].shape[1] != L:
                raise ValueError(f"encoder {k!r} latent dim {phi['w_mu'].shape[1]} != {L}")
        if self.classifier["w"].shape[1] != L:
            raise ValueError("classifier latent dim does not match the architecture")

    @property
    def n_experiments(self) -> int:
        return 1 if self.masks is None else len(self.masks)

    def encoder_key(self, role: str = "predictive", experiment: int | None = None) -> str:
        if "phi" in self.encoders:
            return "phi"
        base = "phi2" if role == "predictive" else "phi1"
        if self.masks is not None and len(self.masks) > 1:
            return f"{base}/{0 if experiment is None else experiment}"
        return base

    def encoder(self, role: str = "predictive", experiment: int | None = None) -> ParamSet:
        return self.encoders[self.encoder_key(role, experiment)]

    def mask(self, experiment: int | None = None):
        if self.masks is None:
            return None
        m = self.masks[0 if experiment is None else experiment]
        return None if m.is_full else m.indices


# ---------------------------------------------------------------- helpers


def architecture_for(data: LabeledDataset, cfg: TrainConfig) -> Architecture:
    return Architecture(input_dim=data.dim, latent_dim=cfg.latent_dim, n_classes=data.n_classes,
                        encoder_hidden=cfg.encoder_hidden, decoder=cfg.decoder,
                        decoder_hidden=cfg.decoder_hidden, likelihood=cfg.likelihood)


def _adam(cfg: TrainConfig, lr: float | None = None) -> AdamState:
    return AdamState(lr=cfg.alpha if lr is None else lr, decay_epoch=cfg.decay_epoch,
                     decay_factor=cfg.decay_factor, decay_repeat=cfg.decay_repeat)


def _check_finite(br: LossBreakdown, epoch: int, batch: int):
    vals = br.as_floats()
    if not all(np.isfinite(v) for v in vals.values()):
        detail = ", ".join(f"{k}={v:.4g}" for k, v in vals.items())
        raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")


def _check_labeled(data: LabeledDataset):
    if len(data) == 0:
        raise ValueError("empty dataset")


def _ascend(params: ParamSet, direction: dict, rate: float) -> ParamSet:
    return ParamSet.from_arrays({k: params[k].value + rate * direction[k] for k in params})


class _EpochLog:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.count = 0

    def add(self, n: int, **vals: float):
        for k, v in vals.items():
            self.sums[k] = self.sums.get(k, 0.0) + n * v
        self.count += n

    def means(self) -> dict[str, float]:
        return {k: v / self.count for k, v in self.sums.items()}


def mean_code_recon(theta, phi, X, arch: Architecture, mask=None) -> float:
    """Mean over rows of log p(x | decoder(encoder mean)); deterministic."""
    with no_grad():
        q = encode(phi.constants(), X)
        ll = masked_recon_loglik(theta.constants(), q.mean, X, mask, arch)
    return float(np.mean(ll.value))


HISTORY_FIELDS = ("epoch", "recon", "prior_kl", "supervised", "coupling_kl", "objective", "recon_eval", "seconds")


def _history_row(epoch: int, log: _EpochLog, recon_eval: float, t0: float) -> dict:
    m = log.means()
    return {
        "epoch": epoch,
        "recon": m.get("recon", 0.0),
        "prior_kl": m.get("prior_kl", 0.0),
        "supervised": m.get("supervised", 0.0),
        "coupling_kl": m.get("coupling_kl", 0.0),
        "objective": m.get("total", 0.0),
        "recon_eval": recon_eval,
        "seconds": time.perf_counter() - t0,
    }


# ---------------------------------------------------------------- single-encoder family


def _generative_step(theta, phi, x, eps, arch, opt_theta, opt_phi, epoch, inner_steps=1, mask=None):
    """Steps 1-2: Adam ascent of the ELBO for the decoder and the encoder."""
    br = elbo(theta, phi, x, eps, arch, mask)
    g_theta, g_phi = gradients(-br.total, theta, phi)
    theta_plus = adam_step(opt_theta, theta, g_theta, epoch)
    phi_plus = adam_step(opt_phi, phi, g_phi, epoch)
    for _ in range(inner_steps - 1):
        g_phi = gradient(-elbo(theta, phi_plus, x, eps, arch, mask).total, phi_plus)
        phi_plus = adam_step(opt_phi, phi_plus, g_phi, epoch)
    return br, theta_plus, phi_plus


def _second_order_direction(theta_plus, phi, psi, x, y, eps, arch, cfg, mask=None) -> dict:
    """d/dtheta of lam * log p_psi(y | g(phi + a * grad_phi ELBO(theta, phi)))."""
    psi_c = psi.constants()
    lam = cfg.lam

    def inner(th, ph):
        return elbo(th, ph, x, eps, arch, mask).total

    def outer(th, ph):
        s = reparameterize(encode(ph, x), eps)
        return supervised_loglik(psi_c, s, y) * lam

    return grad_through_update(inner, outer, theta_plus, phi, cfg.inner_rate, backend=cfg.hypergrad_backend)


def _fit_single(data: LabeledDataset, cfg: TrainConfig, kind: str) -> ModelBundle:
    _check_labeled(data)
    arch = architecture_for(data, cfg)
    seed = cfg.seed
    phi = init_encoder(arch.input_dim, arch.latent_dim, arch.encoder_hidden, seeded_rng(seed, "encoder", 0))
    theta = init_decoder(arch, seeded_rng(seed, "decoder"))
    psi = init_classifier(arch.latent_dim, arch.n_classes, seeded_rng(seed, "classifier"))
    opts = {"theta": _adam(cfg), "phi": _adam(cfg), "psi": _adam(cfg)}
    noise = seeded_rng(seed, "noise")
    X, y = data.X, data.y
    history = []
    t0 = time.perf_counter()
    b = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            log = _EpochLog()
            beta = cfg.beta_value * decay_multiplier(epoch, cfg.decay_epoch, cfg.decay_factor, cfg.decay_repeat)
            for b, idx in enumerate(batches(len(data), cfg.batch_size, seed, epoch)):
                xb, yb = X[idx], y[idx]
                eps = noise.standard_normal((len(idx), arch.latent_dim))
                if kind == "vae":
                    br, theta, phi = _generative_step(theta, phi, xb, eps, arch, opts["theta"], opts["phi"], epoch,
                                                      cfg.inner_steps)
                elif kind == "svae":
                    br = svae_loss(theta, phi, psi, xb, yb, eps, cfg.lam, arch)
                    g_t, g_p, g_c = gradients(-br.total, theta, phi, psi)
                    theta = adam_step(opts["theta"], theta, g_t, epoch)
                    phi = adam_step(opts["phi"], phi, g_p, epoch)
                    psi = adam_step(opts["psi"], psi, g_c, epoch)
                else:  # sos-vae
                    br, theta_plus, phi_plus = _generative_step(theta, phi, xb, eps, arch, opts["theta"], opts["phi"],
                                                                epoch, cfg.inner_steps)
                    if cfg.lam:
                        s = reparameterize(encode(phi_plus.constants(), xb), eps)
                        sup = supervised_loglik(psi, s, yb)
                        br.supervised, br.lam = sup, cfg.lam
                        psi = adam_step(opts["psi"], psi, gradient(sup * -cfg.lam, psi), epoch)
                    if cfg.second_order and beta > 0 and cfg.lam > 0:
                        direction = _second_order_direction(theta_plus, phi, psi, xb, yb, eps, arch, cfg)
                        theta_plus = _ascend(theta_plus, direction, beta)
                    theta, phi = theta_plus, phi_plus
                _check_finite(br, epoch, b)
                log.add(len(idx), **br.as_floats())
            history.append(_history_row(epoch, log, mean_code_recon(theta, phi, X, arch), t0))
    except NonFiniteError as err:
        raise TrainingDivergedError(f"non-finite values at epoch {epoch}, batch {b}: {err}") from err
    return ModelBundle(method=cfg.method, arch=arch, encoders={"phi": phi}, decoder=theta, classifier=psi,
                       config=cfg, history=history, optimizers=opts)


def train_vae(data: LabeledDataset, config: TrainConfig) -> ModelBundle:
    """Adam ascent of the single-sample ELBO; labels are ignored."""
    return _fit_single(data, config, "vae")


def train_svae(data: LabeledDataset, config: TrainConfig) -> ModelBundle:
    """Joint ascent of ELBO + lam * log p(y|s) over encoder, decoder and classifier."""
    return _fit_single(data, config, "svae")


def train_sosvae(data: LabeledDataset, config: TrainConfig) -> ModelBundle:
    """Second-order supervision: labels reach the decoder only through the
    encoder's own ELBO update, so the encoder stays a generative posterior fit."""
    return _fit_single(data, config, "sos-vae")


# ---------------------------------------------------------------- double-encoder family


@dataclass
class _Experiment:
    X: np.ndarray
    y: np.ndarray
    mask: np.ndarray | None  # None: all coordinates observed


def _enc_name(base: str, t: int, T: int) -> str:
    return base if T == 1 else f"{base}/{t}"


def _fit_double(experiments: list[_Experiment], arch: Architecture, cfg: TrainConfig) -> tuple[dict, ParamSet, ParamSet, list, dict]:
    seed = cfg.seed
    T = len(experiments)
    enc, opts = {}, {}
    for t, ex in enumerate(experiments):
        d = ex.X.shape[1]
        for base, tag in (("phi1", "encoder"), ("phi2", "encoder2")):
            name = _enc_name(base, t, T)
            if base == "phi2" and cfg.tie_encoders:
                enc[name] = enc[_enc_name("phi1", t, T)].fresh()
            else:
                enc[name] = init_encoder(d, arch.latent_dim, arch.encoder_hidden, seeded_rng(seed, tag, t))
            opts[name] = _adam(cfg)
    theta = init_decoder(arch, seeded_rng(seed, "decoder"))
    psi = init_classifier(arch.latent_dim, arch.n_classes, seeded_rng(seed, "classifier"))
    opts["theta"] = _adam(cfg)
    opts["psi"] = _adam(cfg)
    noise = seeded_rng(seed, "noise")
    history = []
    t0 = time.perf_counter()
    b = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            log = _EpochLog()
            beta = cfg.beta_value * decay_multiplier(epoch, cfg.decay_epoch, cfg.decay_factor, cfg.decay_repeat)
            per_exp = [batches(len(ex.y), cfg.batch_size, seed, epoch, t) for t, ex in enumerate(experiments)]
            schedule = [(t, idx) for k in range(max(map(len, per_exp)))
                        for t, bl in enumerate(per_exp) if k < len(bl) for idx in (bl[k],)]
            for b, (t, idx) in enumerate(schedule):
                ex = experiments[t]
                k1, k2 = _enc_name("phi1", t, T), _enc_name("phi2", t, T)
                xb, yb = ex.X[idx], ex.y[idx]
                eps = noise.standard_normal((len(idx), arch.latent_dim))
                phi1, phi2 = enc[k1], enc[k2]
                br, theta_plus, phi1_plus = _generative_step(theta, phi1, xb, eps, arch, opts["theta"], opts[k1],
                                                             epoch, cfg.inner_steps, ex.mask)
                pred = dvae_loss(theta, phi1_plus.constants(), phi2, psi, xb, yb, eps, cfg.lam, cfg.mu, arch,
                                 include_recon=False)
                g_psi, g_phi2 = gradients(-pred.total, psi, phi2)
                psi_next = adam_step(opts["psi"], psi, g_psi, epoch)
                enc[k2] = adam_step(opts[k2], phi2, g_phi2, epoch)
                if cfg.second_order and beta > 0 and cfg.lam > 0:
                    direction = _second_order_direction(theta_plus, phi1, psi, xb, yb, eps, arch, cfg, ex.mask)
                    theta_plus = _ascend(theta_plus, direction, beta)
                theta, psi, enc[k1] = theta_plus, psi_next, phi1_plus
                br.supervised, br.coupling_kl, br.lam, br.mu = pred.supervised, pred.coupling_kl, cfg.lam, cfg.mu
                _check_finite(br, epoch, b)
                log.add(len(idx), **br.as_floats())
            rec = [mean_code_recon(theta, enc[_enc_name("phi1", t, T)], ex.X, arch, ex.mask) * len(ex.y)
                   for t, ex in enumerate(experiments)]
            recon_eval = float(sum(rec) / sum(len(ex.y) for ex in experiments))
            history.append(_history_row(epoch, log, recon_eval, t0))
    except NonFiniteError as err:
        raise TrainingDivergedError(f"non-finite values at epoch {epoch}, batch {b}: {err}") from err
    return enc, theta, psi, history, opts


def train_sdvae(data: LabeledDataset, config: TrainConfig) -> ModelBundle:
    """Double encoder without the second-order decoder step."""
    return _train_double_full(data, replace(config, second_order=False))


def train_sosdvae(data: LabeledDataset, config: TrainConfig) -> ModelBundle:
    """Double encoder with the second-order decoder step through the generative encoder."""
    return _train_double_full(data, config)


def _train_double_full(data: LabeledDataset, cfg: TrainConfig) -> ModelBundle:
    _check_labeled(data)
    arch = architecture_for(data, cfg)
    enc, theta, psi, history, opts = _fit_double([_Experiment(data.X, data.y, None)], arch, cfg)
    return ModelBundle(method=cfg.method, arch=arch, encoders=enc, decoder=theta, classifier=psi,
                       config=cfg, history=history, optimizers=opts)


def train_missing(datasets, config: TrainConfig, n_classes: int | None = None) -> ModelBundle:
    """One generative/predictive encoder pair per experiment, shared decoder and classifier.

    ``datasets`` holds ``(X_t, mask_t, y_t)`` triples (or ExperimentView objects)
    where ``X_t`` carries only the coordinates listed by ``mask_t``.
    """
    triples = [(d.X, d.mask, d.y) if hasattr(d, "rows") else tuple(d) for d in datasets]
    if not triples:
        raise ValueError("need at least one experiment")
    qs = {m.q for _, m, _ in triples}
    if len(qs) != 1:
        raise ValueError(f"inconsistent coordinate spaces across experiments: {sorted(qs)}")
    q = qs.pop()
    experiments = []
    for X, m, y in triples:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != m.indices.size:
            raise ValueError(f"experiment {m.experiment}: {X.shape[1]} columns but mask lists {m.indices.size}")
        if len(y) == 0:
            raise ValueError("empty dataset")
        experiments.append(_Experiment(X, np.asarray(y, dtype=np.int64), None if m.is_full else m.indices))
    C = n_classes if n_classes is not None else int(max(ex.y.max() for ex in experiments)) + 1
    arch = Architecture(input_dim=q, latent_dim=config.latent_dim, n_classes=C,
                        encoder_hidden=config.encoder_hidden, decoder=config.decoder,
                        decoder_hidden=config.decoder_hidden, likelihood=config.likelihood)
    enc, theta, psi, history, opts = _fit_double(experiments, arch, config)
    return ModelBundle(method=config.method, arch=arch, encoders=enc, decoder=theta, classifier=psi,
                       config=config, history=history, masks=[m for _, m, _ in triples], optimizers=opts)


# ---------------------------------------------------------------- refits and baselines


def refit_encoder(bundle: ModelBundle, X, config: TrainConfig | None = None, mask=None,
                  epochs: int | None = None) -> ParamSet:
    """Fresh encoder maximizing the ELBO with the decoder held fixed."""
    cfg = bundle.config if config is None else config
    arch = bundle.arch
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty dataset")
    key, axis = {"mlp": ("w1", 0), "nmf": ("w_raw", 1), "linear": ("w", 1)}[arch.decoder]
    if bundle.decoder[key].shape[axis] != arch.latent_dim:
        raise ValueError("decoder latent dim does not match the architecture")
    width = arch.input_dim if mask is None else len(mask)
    if X.shape[1] != width:
        raise ValueError(f"refit data has {X.shape[1]} columns, expected {width}")
    theta = bundle.decoder.constants()
    seed = cfg.seed
    phi = init_encoder(width, arch.latent_dim, arch.encoder_hidden, seeded_rng(seed, "refit"))
    opt = _adam(cfg)
    noise = seeded_rng(seed, "refit-noise")
    n_epochs = epochs or cfg.refit_epochs or cfg.epochs
    for epoch in range(1, n_epochs + 1):
        for b, idx in enumerate(batches(len(X), cfg.batch_size, seed, epoch, tag="refit-shuffle")):
            eps = noise.standard_normal((len(idx), arch.latent_dim))
            br = elbo(theta, phi, X[idx], eps, arch, mask)
            _check_finite(br, epoch, b)
            phi = adam_step(opt, phi, gradient(-br.total, phi), epoch)
    return phi


def mean_codes(phi, X) -> np.ndarray:
    with no_grad():
        return encode(phi.constants(), np.asarray(X, dtype=np.float64)).mean.value


def fit_classifier(codes: np.ndarray, y, n_classes: int, cfg: TrainConfig) -> ParamSet:
    """Logistic regression on frozen codes by Adam on the mean log-likelihood."""
    psi = init_classifier(codes.shape[1], n_classes, seeded_rng(cfg.seed, "classifier"))
    opt = _adam(cfg, cfg.classifier_lr)
    y = np.asarray(y, dtype=np.int64)
    for epoch in range(1, (cfg.classifier_epochs or cfg.epochs) + 1):
        for idx in batches(len(y), cfg.batch_size, cfg.seed, epoch, tag="classifier-shuffle"):
            ll = supervised_loglik(psi, codes[idx], y[idx])
            psi = adam_step(opt, psi, gradient(-ll, psi), epoch)
    return psi


def train_vae_refit(data: LabeledDataset, config: TrainConfig) -> ModelBundle:
    """Cutting-the-feedback baseline: VAE first, then a classifier on frozen mean codes."""
    b = train_vae(data, replace(config, method="vae"))
    psi = fit_classifier(mean_codes(b.encoders["phi"], data.X), data.y, data.n_classes, config)
    return replace(b, method="vae-refit", classifier=psi, config=config)


def train_svae_refit(data: LabeledDataset, config: TrainConfig) -> ModelBundle:
    """SVAE, then a generative-only refit of the encoder with decoder and classifier frozen."""
    b = train_svae(data, replace(config, method="svae"))
    phi = refit_encoder(b, data.X, config)
    return replace(b, method="svae-refit", encoders={"phi": phi}, config=config)


TRAINERS = {
    "vae": train_vae,
    "svae": train_svae,
    "sos-vae": train_sosvae,
    "sdvae": train_sdvae,
    "sos-dvae": train_sosdvae,
    "vae-refit": train_vae_refit,
    "svae-refit": train_svae_refit,
}


def train(data, config: TrainConfig) -> ModelBundle:
    if config.method == "missing":
        return train_missing(data, config)
    return TRAINERS[config.method](data, config)


# ---------------------------------------------------------------- prediction


def predict_log_proba(bundle: ModelBundle, X, experiment: int | None = None) -> np.ndarray:
    """Class log-probabilities from the predictive encoder's mean code."""
    codes = mean_codes(bundle.encoder("predictive", experiment), X)
    with no_grad():
        return classify(bundle.classifier.constants(), codes).value


def predict(bundle: ModelBundle, X, experiment: int | None = None) -> np.ndarray:
    return np.argmax(predict_log_proba(bundle, X, experiment), axis=1)


def reconstruct(bundle: ModelBundle, X, experiment: int | None = None) -> np.ndarray:
    """Decoder mean at the generative encoder's mean code (full coordinate space)."""
    codes = mean_codes(bundle.encoder("generative", experiment), X)
    with no_grad():
        return reconstruction_mean(decode(bundle.decoder.constants(), Tensor(codes), bundle.arch), bundle.arch)
