"""Datasets: the linear-Gaussian bias testbed and its analytic posterior, the
nonnegative spectral-feature surrogate, IDX (MNIST) ingestion, experiment
masks for the missing-data setting, and seeded minibatching.
"""

from __future__ import annotations

import gzip
import itertools
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


def seeded_rng(seed: int, tag: str, *keys: int) -> np.random.Generator:
    """Independent, reproducible stream per (seed, tag, keys)."""
    return np.random.default_rng([int(seed), zlib.crc32(tag.encode()), *map(int, keys)])


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = "data"
    value_range: float | None = None
    image_shape: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"X must be (N, p) and y (N,), got {self.X.shape} and {self.y.shape}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features must be finite")
        if self.value_range is None and self.X.size:
            self.value_range = float(self.X.max() - self.X.min())

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.X[idx], self.y[idx], self.n_classes, self.name,
                              self.value_range, self.image_shape, dict(self.meta))

    def split(self, n_train: int, seed: int | None = None) -> tuple["LabeledDataset", "LabeledDataset"]:
        """First ``n_train`` rows (after an optional seeded shuffle) vs the rest."""
        idx = np.arange(len(self))
        if seed is not None:
            idx = seeded_rng(seed, "split").permutation(len(self))
        return self.subset(idx[:n_train]), self.subset(idx[n_train:])


# ---------------------------------------------------------------- linear-Gaussian testbed


@dataclass
class LinearGaussianSpec:
    """x = offset + A s + sigma * noise with s ~ N(0, I); class scores s W^T + label noise."""

    A: np.ndarray
    sigma: float = 1.0
    label_weights: np.ndarray | None = None
    label_noise: float = 0.0
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        p, L = self.A.shape
        if self.offset is None:
            self.offset = np.zeros(p)
        if self.label_weights is None:
            self.label_weights = np.zeros((2, L))
        self.label_weights = np.atleast_2d(np.asarray(self.label_weights, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_classes(self) -> int:
        return self.label_weights.shape[0]

    def check_rank(self):
        if np.linalg.matrix_rank(self.A) < self.latent_dim:
            raise ValueError("loading matrix A must have full column rank")


def bias_testbed_spec(p: int = 30, latent_dim: int = 5, nuisance_scale=(10.0, 9.0, 8.0, 7.0),
                      label_scale: float = 4.0, sigma: float = 1.0, label_noise: float = 0.0,
                      seed: int = 0) -> LinearGaussianSpec:
    """Binary label on a single low-variance latent; the others are high-variance nuisance.

    Columns of A are orthogonal with norms ``nuisance_scale + (label_scale,)``;
    the label is the sign of the last latent (plus optional noise).
    """
    scales = np.array(list(nuisance_scale)[: latent_dim - 1] + [label_scale], dtype=np.float64)
    if scales.size != latent_dim:
        raise ValueError("need latent_dim - 1 nuisance scales")
    q, _ = np.linalg.qr(seeded_rng(seed, "testbed").standard_normal((p, latent_dim)))
    w = np.zeros(latent_dim)
    w[-1] = 1.0
    return LinearGaussianSpec(A=q * scales, sigma=sigma, label_weights=np.stack([-w, w]),
                              label_noise=label_noise)


def gen_linear_gaussian(spec: LinearGaussianSpec, n: int, seed: int) -> tuple[LabeledDataset, np.ndarray]:
    """Sample (dataset, latents)."""
    spec.check_rank()
    rng = seeded_rng(seed, "linear-gaussian")
    s = rng.standard_normal((n, spec.latent_dim))
    X = spec.offset + s @ spec.A.T + spec.sigma * rng.standard_normal((n, spec.dim))
    scores = s @ spec.label_weights.T + spec.label_noise * rng.standard_normal((n, spec.n_classes))
    y = np.argmax(scores, axis=1)
    ds = LabeledDataset(X, y, spec.n_classes, name="linear_gaussian")
    return ds, s


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray

    def diagonal(self):
        from .distributions import DiagGaussian

        lv = np.broadcast_to(np.log(np.diag(self.cov)), self.mean.shape)
        return DiagGaussian(self.mean, lv.copy())


def analytic_posterior(spec: LinearGaussianSpec, x) -> GaussianPosterior:
    """p(s | x) for the linear-Gaussian model: cov = (I + A^T A / sigma^2)^-1."""
    x = np.asarray(x, dtype=np.float64)
    A, s2 = spec.A, spec.sigma ** 2
    precision = np.eye(spec.latent_dim) + A.T @ A / s2
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean = (x - spec.offset) @ A @ cov / s2
    return GaussianPosterior(mean, cov)


# ---------------------------------------------------------------- spectral surrogate


@dataclass(frozen=True)
class SpectralLayout:
    """Channel-block-major feature layout.

    Power features come first, F per channel; then coherence features, F per
    unordered channel pair (i < j, lexicographic).
    """

    n_channels: int
    n_freqs: int

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(itertools.combinations(range(self.n_channels), 2))

    @property
    def dim(self) -> int:
        return self.n_freqs * (self.n_channels + len(self.pairs))

    def power_slice(self, ch: int) -> slice:
        return slice(ch * self.n_freqs, (ch + 1) * self.n_freqs)

    def coherence_slice(self, i: int, j: int) -> slice:
        k = self.pairs.index((min(i, j), max(i, j)))
        start = (self.n_channels + k) * self.n_freqs
        return slice(start, start + self.n_freqs)

    def channel_coordinates(self, ch: int) -> np.ndarray:
        """Every coordinate that involves channel ``ch`` (its power and coherences)."""
        idx = [np.arange(self.n_freqs * ch, self.n_freqs * (ch + 1))]
        for i, j in self.pairs:
            if ch in (i, j):
                sl = self.coherence_slice(i, j)
                idx.append(np.arange(sl.start, sl.stop))
        return np.sort(np.concatenate(idx))

    def manifest(self) -> dict:
        blocks = [{"kind": "power", "channel": c, "start": self.power_slice(c).start,
                   "stop": self.power_slice(c).stop} for c in range(self.n_channels)]
        for i, j in self.pairs:
            sl = self.coherence_slice(i, j)
            blocks.append({"kind": "coherence", "channels": [i, j], "start": sl.start, "stop": sl.stop})
        return {"n_channels": self.n_channels, "n_freqs": self.n_freqs, "dim": self.dim, "blocks": blocks}

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2) + "\n")

    @classmethod
    def for_dim(cls, p: int, n_channels: int | None = None) -> "SpectralLayout":
        if n_channels is None:
            candidates = [r for r in range(1, 21) if p % (r * (r + 1) // 2) == 0]
            n_channels = max(candidates)
        tri = n_channels * (n_channels + 1) // 2
        if p % tri:
            raise ValueError(f"p={p} is not a multiple of {tri} for {n_channels} channels")
        return cls(n_channels, p // tri)


def gen_spectral_surrogate(p: int, n_classes: int, n: int, seed: int, n_extra: int = 4,
                           class_strength: float = 0.6, noise: float = 0.15,
                           n_channels: int | None = None) -> LabeledDataset:
    """Nonnegative features as positive mixtures of C + K nonnegative templates.

    Class templates are weaker than the nuisance templates; the label is the
    class template with the largest activation.
    """
    if min(p, n_classes, n) < 1:
        raise ValueError("p, n_classes and n must be positive")
    layout = SpectralLayout.for_dim(p, n_channels)
    rng = seeded_rng(seed, "spectral")
    k = n_classes + n_extra
    templates = np.logaddexp(0.0, 2.0 * rng.standard_normal((k, p)) - 1.0)
    templates /= templates.mean(axis=1, keepdims=True)
    scale = np.ones(k)
    scale[:n_classes] = class_strength
    z = rng.standard_normal((n, k))
    act = np.logaddexp(0.0, z) * scale
    y = np.argmax(z[:, :n_classes], axis=1)
    X = (act @ templates) * np.exp(noise * rng.standard_normal((n, p)))
    meta = {"layout": layout.manifest(), "templates": templates, "n_class_templates": n_classes}
    return LabeledDataset(X, y, n_classes, name="spectral", meta=meta)


# ---------------------------------------------------------------- IDX


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise ValueError(f"{path}: truncated header")
    got = struct.unpack(">i", raw[:4])[0]
    if got != magic:
        raise ValueError(f"{path}: bad magic number {got}, expected {magic}")
    dims = struct.unpack(">" + "i" * ndim, raw[4: 4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise ValueError(f"{path}: truncated payload ({len(payload)} bytes, expected {expected})")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(X, labels.astype(np.int64), 10, name="mnist", value_range=1.0,
                          image_shape=tuple(images.shape[1:]))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    for path, header, body in (
        (images_path, struct.pack(">iiii", IMAGE_MAGIC, n, r, c), images.tobytes()),
        (labels_path, struct.pack(">ii", LABEL_MAGIC, len(labels)), labels.tobytes()),
    ):
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wb") as fh:
            fh.write(header + body)


# ---------------------------------------------------------------- masks


@dataclass(frozen=True)
class ExperimentMask:
    experiment: int
    indices: np.ndarray
    q: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.q):
            raise IndexError(f"mask index out of range [0, {self.q})")
        if np.unique(idx).size != idx.size:
            raise ValueError("mask indices must be unique")
        object.__setattr__(self, "indices", np.sort(idx))

    @property
    def is_full(self) -> bool:
        return self.indices.size == self.q

    def complement(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.q), self.indices)


def full_mask(q: int, experiment: int = 0) -> ExperimentMask:
    return ExperimentMask(experiment, np.arange(q), q)


def channel_block_mask(layout: SpectralLayout, removed_channels, experiment: int = 0) -> ExperimentMask:
    drop = set()
    for ch in removed_channels:
        drop.update(layout.channel_coordinates(ch).tolist())
    keep = np.array(sorted(set(range(layout.dim)) - drop), dtype=np.int64)
    return ExperimentMask(experiment, keep, layout.dim)


def random_coordinate_masks(q: int, frac_missing: float, n_experiments: int, seed: int) -> list[ExperimentMask]:
    rng = seeded_rng(seed, "masks")
    n_drop = int(round(frac_missing * q))
    masks = []
    for t in range(n_experiments):
        drop = rng.choice(q, size=n_drop, replace=False)
        masks.append(ExperimentMask(t, np.setdiff1d(np.arange(q), drop), q))
    return masks


@dataclass
class ExperimentView:
    mask: ExperimentMask
    X: np.ndarray
    y: np.ndarray
    rows: np.ndarray


def apply_mask(dataset: LabeledDataset, masks: list[ExperimentMask], assignment) -> list[ExperimentView]:
    """Group rows by experiment; each group exposes only its observed coordinates."""
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (len(dataset),):
        raise ValueError("need one experiment id per row")
    views = []
    for t, m in enumerate(masks):
        if m.q != dataset.dim:
            raise IndexError(f"mask over {m.q} coordinates applied to {dataset.dim}-dim data")
        rows = np.flatnonzero(assignment == t)
        views.append(ExperimentView(m, dataset.X[np.ix_(rows, m.indices)], dataset.y[rows], rows))
    return views


# ---------------------------------------------------------------- batching


def batches(n: int, batch_size: int, seed: int, epoch: int, *keys: int, tag: str = "shuffle") -> list[np.ndarray]:
    """Seeded per-epoch shuffle split into minibatches (the last may be short)."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    if n < 1:
        raise ValueError("empty dataset")
    perm = seeded_rng(seed, tag, epoch, *keys).permutation(n)
    return [perm[i: i + batch_size] for i in range(0, n, batch_size)]
