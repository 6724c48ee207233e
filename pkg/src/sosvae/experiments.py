"""Desk-scale experiment protocols shared by the scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (LabeledDataset, apply_mask, bias_testbed_spec, gen_linear_gaussian, gen_spectral_surrogate,
                   random_coordinate_masks)
from .metrics import accuracy, encoder_kl, posterior_kl, scientific_utility, stationary_residuals
from .trainers import ModelBundle, TrainConfig, predict, refit_encoder, train, train_missing


def _acc(bundle: ModelBundle, ds: LabeledDataset, experiment: int | None = None) -> float:
    return accuracy(predict(bundle, ds.X, experiment), ds.y)


# ---------------------------------------------------------------- linear-Gaussian bias testbed


@dataclass
class BiasSetup:
    n_train: int = 5000
    n_test: int = 1000
    p: int = 30
    true_latent: int = 5
    training: TrainConfig = field(default_factory=lambda: TrainConfig(
        lam=100.0, beta=3e-3, alpha=1e-3, epochs=60, decay_epoch=40, batch_size=100, latent_dim=4,
        encoder_hidden=128, decoder="linear"))


def testbed(seed: int, setup: BiasSetup | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    setup = setup or BiasSetup()
    spec = bias_testbed_spec(p=setup.p, latent_dim=setup.true_latent, seed=seed)
    ds, _ = gen_linear_gaussian(spec, setup.n_train + setup.n_test, seed=seed)
    return ds.split(setup.n_train)


def bias_run(seed: int, setup: BiasSetup | None = None, methods=("vae", "svae", "sos-vae")) -> dict:
    """Train each method on one testbed draw and collect the bias diagnostics.

    Per method: test accuracy, KL to the decoder's exact posterior and
    scientific utility. SVAE also reports the accuracy after refitting its
    encoder.
    """
    setup = setup or BiasSetup()
    tr, te = testbed(seed, setup)
    out = {}
    for method in methods:
        t0 = time.perf_counter()
        cfg = replace(setup.training, method=method, seed=seed)
        b = train(tr, cfg)
        row = {
            "acc": _acc(b, te),
            "posterior_kl": posterior_kl(b, te.X),
            "utility": scientific_utility(b, tr.X, te.X),
        }
        if method == "svae":
            refit = replace(b, encoders={"phi": refit_encoder(b, tr.X)})
            row["refit_acc"] = _acc(refit, te)
        row["seconds"] = time.perf_counter() - t0
        out[method] = row
    return out


def annealed_setup() -> BiasSetup:
    """Testbed protocol trained long enough, with a halving rate, to sit at a stationary point."""
    setup = BiasSetup()
    setup.training = replace(setup.training, epochs=100, decay_epoch=8, decay_repeat=True)
    return setup


def residual_run(seed: int, setup: BiasSetup | None = None, methods=("vae", "svae", "sos-vae")) -> dict:
    """Sup-norm encoder gradient of the generative-only loss on the training rows, per method."""
    setup = setup or annealed_setup()
    tr, _ = testbed(seed, setup)
    out = {}
    for method in methods:
        b = train(tr, replace(setup.training, method=method, seed=seed))
        out[method] = stationary_residuals(b, tr.X, tr.y).phi
    return out


# ---------------------------------------------------------------- coupling strength sweep


@dataclass
class CouplingSetup:
    n_train: int = 2000
    n_test: int = 1000
    p: int = 30
    true_latent: int = 5
    mus: tuple = (0.01, 0.1, 1.0, 10.0, 100.0)
    training: TrainConfig = field(default_factory=lambda: TrainConfig(
        lam=100.0, beta=3e-3, alpha=1e-3, epochs=30, decay_epoch=20, batch_size=100, latent_dim=4,
        encoder_hidden=64, decoder="linear"))


def coupling_sweep(seed: int, setup: CouplingSetup | None = None) -> list[dict]:
    """SOS-DVAE and SDVAE over a grid of coupling weights; held-out KL and accuracy."""
    setup = setup or CouplingSetup()
    spec = bias_testbed_spec(p=setup.p, latent_dim=setup.true_latent, seed=seed)
    ds, _ = gen_linear_gaussian(spec, setup.n_train + setup.n_test, seed=seed)
    tr, te = ds.split(setup.n_train)
    rows = []
    for method in ("sos-dvae", "sdvae"):
        for mu in setup.mus:
            b = train(tr, replace(setup.training, method=method, mu=mu, seed=seed))
            kl = float(np.mean(encoder_kl(b.encoders["phi2"], b.encoders["phi1"], te.X)))
            rows.append({"method": method, "mu": mu, "seed": seed, "coupling_kl": kl, "acc": _acc(b, te)})
    return rows


# ---------------------------------------------------------------- missing coordinates


@dataclass
class MissingSetup:
    p: int = 200
    n_classes: int = 3
    n_train: int = 3000
    n_test: int = 1500
    frac_missing: float = 0.2
    experiments: int = 3
    training: TrainConfig = field(default_factory=lambda: TrainConfig(
        method="missing", lam=100.0, beta=3e-3, mu=1.0, alpha=1e-3, inner_lr=1e-5, epochs=30, decay_epoch=20,
        batch_size=100, latent_dim=10, encoder_hidden=128, decoder="nmf"))


def missing_run(seed: int, setup: MissingSetup | None = None) -> dict:
    """Per-experiment encoders on masked spectral data, with and without the second-order step."""
    setup = setup or MissingSetup()
    ds = gen_spectral_surrogate(setup.p, setup.n_classes, setup.n_train + setup.n_test, seed)
    tr, te = ds.split(setup.n_train)
    masks = random_coordinate_masks(setup.p, setup.frac_missing, setup.experiments, seed)
    train_views = apply_mask(tr, masks, np.arange(len(tr)) % setup.experiments)
    test_views = apply_mask(te, masks, np.arange(len(te)) % setup.experiments)
    out = {}
    for name, second in (("sos-dvae", True), ("sdvae", False)):
        b = train_missing(train_views, replace(setup.training, second_order=second, seed=seed),
                          n_classes=setup.n_classes)
        hits = sum(int(np.sum(predict(b, v.X, t) == v.y)) for t, v in enumerate(test_views))
        out[name] = hits / len(te)
    return out


# ---------------------------------------------------------------- MNIST


@dataclass
class DigitsSetup:
    n_train: int = 8000
    n_test: int = 2000
    split_seed: int = 0
    root: str = "."
    training: TrainConfig = field(default_factory=lambda: TrainConfig(
        lam=100.0, beta=3e-3, mu=1.0, alpha=2e-3, epochs=10, batch_size=128, latent_dim=20, decoder="mlp",
        likelihood="bernoulli"))


def digits_run(seed: int, setup: DigitsSetup | None = None,
               methods=("svae", "svae-refit", "sos-vae", "sos-dvae")) -> dict:
    """Test accuracy per method on the scaled digit task."""
    from .cli import prepare_data

    setup = setup or DigitsSetup()
    data = prepare_data({"name": "mnist", "n_train": setup.n_train, "n_test": setup.n_test,
                         "seed": setup.split_seed}, setup.root)
    out = {}
    svae = None
    for method in methods:
        t0 = time.perf_counter()
        if method == "svae-refit" and svae is not None:
            # reuse the trained SVAE rather than fitting it twice
            b = replace(svae, method="svae-refit", encoders={"phi": refit_encoder(svae, data.train.X)})
        else:
            b = train(data.train, replace(setup.training, method=method, seed=seed))
        if method == "svae":
            svae = b
        out[method] = {"acc": _acc(b, data.test), "seconds": time.perf_counter() - t0}
    return out
