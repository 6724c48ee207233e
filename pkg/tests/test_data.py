import gzip
import os
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sosvae.data import (ExperimentMask, LabeledDataset, LinearGaussianSpec, SpectralLayout, analytic_posterior,
                         apply_mask, batches, bias_testbed_spec, channel_block_mask, full_mask, gen_linear_gaussian,
                         gen_spectral_surrogate, load_idx, random_coordinate_masks, write_idx)
from sosvae.trainers import TrainConfig, fit_classifier, train


def test_noiseless_identity_model():
    spec = LinearGaussianSpec(A=np.eye(3), sigma=1e-12)
    ds, s = gen_linear_gaussian(spec, 50, seed=0)
    np.testing.assert_allclose(ds.X, s, atol=1e-10)


def test_sample_covariance_converges():
    rng = np.random.default_rng(0)
    spec = LinearGaussianSpec(A=rng.normal(size=(6, 3)), sigma=0.7)
    ds, _ = gen_linear_gaussian(spec, 100_000, seed=1)
    target = spec.A @ spec.A.T + 0.49 * np.eye(6)
    err = np.linalg.norm(np.cov(ds.X.T) - target) / np.linalg.norm(target)
    assert err < 0.02


def test_symmetric_label_weights_give_balanced_classes():
    ds, _ = gen_linear_gaussian(bias_testbed_spec(seed=3), 20_000, seed=3)
    assert abs(np.mean(ds.y) - 0.5) < 0.02


def test_testbed_label_is_sign_of_low_variance_latent():
    spec = bias_testbed_spec(seed=0)
    ds, s = gen_linear_gaussian(spec, 500, seed=0)
    np.testing.assert_array_equal(ds.y, (s[:, -1] > 0).astype(int))
    norms = np.linalg.norm(spec.A, axis=0)
    np.testing.assert_allclose(norms, [10, 9, 8, 7, 4])
    np.testing.assert_allclose(spec.A.T @ spec.A, np.diag(norms ** 2), atol=1e-10)


def test_posterior_one_dimensional():
    post = analytic_posterior(LinearGaussianSpec(A=[[1.0]]), np.array([[1.3]]))
    assert post.mean[0, 0] == pytest.approx(0.65, abs=1e-15)
    assert post.cov[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_posterior_uninformative_model_is_prior():
    post = analytic_posterior(LinearGaussianSpec(A=np.zeros((4, 2))), np.ones((3, 4)))
    np.testing.assert_array_equal(post.mean, np.zeros((3, 2)))
    np.testing.assert_array_equal(post.cov, np.eye(2))


def test_posterior_matches_grid_quadrature():
    rng = np.random.default_rng(5)
    spec = LinearGaussianSpec(A=rng.normal(size=(5, 3)) * 0.6, sigma=1.0, offset=rng.normal(size=5))
    x = rng.normal(size=5)
    post = analytic_posterior(spec, x[None])
    g = np.linspace(-5, 5, 121)
    S = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    resid = x - spec.offset - S @ spec.A.T
    logw = -0.5 * np.sum(S ** 2, axis=1) - 0.5 * np.sum(resid ** 2, axis=1) / spec.sigma ** 2
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = w @ S
    cov = (S - mean).T @ ((S - mean) * w[:, None])
    np.testing.assert_allclose(mean, post.mean[0], atol=1e-3)
    np.testing.assert_allclose(cov, post.cov, atol=1e-3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_spectral_features_nonnegative(seed):
    assert np.all(gen_spectral_surrogate(60, 3, 50, seed).X >= 0)


def test_spectral_layout_dimensions():
    layout = SpectralLayout.for_dim(200)
    assert layout.dim == 200
    m = layout.manifest()
    covered = np.concatenate([np.arange(b["start"], b["stop"]) for b in m["blocks"]])
    np.testing.assert_array_equal(np.sort(covered), np.arange(200))


def test_spectral_labels_visible_to_a_linear_probe():
    ds = gen_spectral_surrogate(200, 3, 6000, seed=0)
    tr, te = ds.split(5000)
    mu, sd = tr.X.mean(0), tr.X.std(0)
    cfg = TrainConfig(method="vae", epochs=20, batch_size=100, classifier_lr=1e-2)
    psi = fit_classifier((tr.X - mu) / sd, tr.y, 3, cfg)
    pred = np.argmax(((te.X - mu) / sd) @ psi["w"].value.T + psi["b"].value, axis=1)
    assert np.mean(pred == te.y) > 1 / 3 + 0.1


@pytest.mark.slow
def test_nmf_decoder_recovers_class_templates():
    ds = gen_spectral_surrogate(200, 3, 3000, seed=0)
    b = train(ds, TrainConfig(method="vae", decoder="nmf", latent_dim=10, encoder_hidden=64, epochs=60,
                              alpha=1e-2, batch_size=100))
    W = np.logaddexp(0, b.decoder["w_raw"].value)
    T = ds.meta["templates"][:3]
    cos = (T / np.linalg.norm(T, axis=1, keepdims=True)) @ (W / np.linalg.norm(W, axis=0))
    assert np.all(cos.max(axis=1) > 0.8)


# ---------------------------------------------------------------- IDX


def read_idx_reference(path):
    """Straight-line IDX reader used as an independent oracle."""
    with gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb") as fh:
        raw = fh.read()
    zero, dtype, ndim = raw[0] * 256 + raw[1], raw[2], raw[3]
    assert zero == 0 and dtype == 0x08
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    return np.array(list(raw[4 + 4 * ndim:]), dtype=np.uint8).reshape(dims)


def test_idx_round_trip_against_reference_reader(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    labels = np.array([7, 2, 1, 0, 4], dtype=np.uint8)
    ip, lp = tmp_path / "img-idx3-ubyte.gz", tmp_path / "lab-idx1-ubyte"
    write_idx(imgs, labels, ip, lp)
    np.testing.assert_array_equal(read_idx_reference(ip), imgs)
    ds = load_idx(ip, lp)
    assert ds.y[0] == 7
    assert ds.image_shape == (4, 3)
    np.testing.assert_allclose(ds.X, imgs.reshape(5, -1) / 255.0)
    assert ds.X.min() >= 0 and ds.X.max() <= 1


def test_bundled_digits_agree_with_reference_reader():
    ip = "data/mnist/digits-images-idx3-ubyte.gz"
    lp = "data/mnist/digits-labels-idx1-ubyte.gz"
    if not os.path.exists(ip):
        pytest.skip("digit files not present")
    ds = load_idx(ip, lp)
    np.testing.assert_array_equal(ds.y, read_idx_reference(lp))
    np.testing.assert_allclose(ds.X[:50], read_idx_reference(ip)[:50].reshape(50, -1) / 255.0)
    assert ds.X.min() >= 0 and ds.X.max() <= 1
    assert set(np.unique(ds.y)) == set(range(10))


def test_idx_bad_magic_and_truncation(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    write_idx(np.zeros((2, 2, 2)), np.zeros(2), ip, lp)
    raw = ip.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">i", 2049) + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_idx(bad, lp)
    with pytest.raises(ValueError, match="magic"):
        load_idx(ip, ip)
    short = tmp_path / "short"
    short.write_bytes(raw[:-1])
    with pytest.raises(ValueError, match="truncated"):
        load_idx(short, lp)


# ---------------------------------------------------------------- masks and batching


def test_full_mask_view_is_identity():
    ds = LabeledDataset(np.arange(12.0).reshape(4, 3), np.array([0, 1, 0, 1]), 2)
    (view,) = apply_mask(ds, [full_mask(3)], np.zeros(4))
    np.testing.assert_array_equal(view.X, ds.X)
    np.testing.assert_array_equal(view.rows, np.arange(4))


def test_channel_block_removal_matches_layout():
    layout = SpectralLayout(n_channels=4, n_freqs=3)
    mask = channel_block_mask(layout, [1])
    removed = set(range(layout.dim)) - set(mask.indices.tolist())
    expected = set()
    for block in layout.manifest()["blocks"]:
        if block.get("channel") == 1 or 1 in block.get("channels", []):
            expected.update(range(block["start"], block["stop"]))
    assert removed == expected
    assert len(removed) == 3 * (1 + 3)


def test_disjoint_masks_partition():
    perm = np.random.default_rng(0).permutation(20)
    a, b = ExperimentMask(0, perm[:8], 20), ExperimentMask(1, perm[8:], 20)
    assert not set(a.indices) & set(b.indices)
    assert sorted(set(a.indices) | set(b.indices)) == list(range(20))
    np.testing.assert_array_equal(a.complement(), b.indices)


def test_random_masks_drop_requested_fraction():
    for m in random_coordinate_masks(200, 0.2, 3, seed=0):
        assert m.indices.size == 160


def test_mask_validation():
    with pytest.raises(IndexError):
        ExperimentMask(0, np.array([0, 5]), 5)
    ds = LabeledDataset(np.zeros((2, 3)), np.zeros(2, int), 2)
    with pytest.raises(IndexError):
        apply_mask(ds, [full_mask(4)], np.zeros(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 1000), st.integers(1, 5))
def test_batches_partition_rows(n, bs, seed, epoch):
    parts = batches(n, bs, seed, epoch)
    flat = np.concatenate(parts)
    assert Counter(flat.tolist()) == Counter(range(n))
    assert all(len(p) == bs for p in parts[:-1])
    again = batches(n, bs, seed, epoch)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))


def test_single_batch_and_epoch_variation():
    (only,) = batches(10, 10, 0, 1)
    assert sorted(only.tolist()) == list(range(10))
    assert not np.array_equal(batches(50, 50, 0, 1)[0], batches(50, 50, 0, 2)[0])
    with pytest.raises(ValueError):
        batches(0, 4, 0, 1)
