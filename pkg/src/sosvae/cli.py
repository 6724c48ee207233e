"""Command-line interface: ``sosvae train | eval | sweep``.

A run is described by one JSON file with four blocks::

    {"dataset": {...}, "model": {...}, "training": {...}, "evaluation": {...}}

``model`` and ``training`` both feed :class:`TrainConfig`; ``dataset`` names a
generator or files; ``evaluation`` lists metrics for ``eval`` and ``sweep``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import ArchitectureMismatchError, CheckpointError, load_checkpoint, save_checkpoint
from .data import (ExperimentMask, LabeledDataset, LinearGaussianSpec, SpectralLayout, bias_testbed_spec,
                   channel_block_mask, full_mask, gen_linear_gaussian, gen_spectral_surrogate, load_idx,
                   random_coordinate_masks, seeded_rng)
from .metrics import (MetricsReport, accuracy, auc_macro, encoder_kl, posterior_kl, psnr,
                      scientific_utility, ssim)
from .trainers import (HISTORY_FIELDS, METHODS, ModelBundle, TrainConfig, mean_code_recon, predict,
                       predict_log_proba, reconstruct, train, train_missing)

# Training presets per dataset (batch size, base rate, supervision weight).
PRESETS = {
    "mnist": {"batch_size": 128, "alpha": 1e-3, "lam": 1e-3},
    "lfp": {"batch_size": 100, "alpha": 1e-4, "lam": 100.0},
    "seed": {"batch_size": 64, "alpha": 1e-5, "lam": 1.0},
}
MODEL_KEYS = ("method", "decoder", "latent_dim", "encoder_hidden", "decoder_hidden", "likelihood")
ALL_METRICS = ("acc", "auc", "recon", "psnr", "ssim", "utility", "coupling_kl", "posterior_kl")
EVAL_FIELDS = ("checkpoint", "method", "split", "n") + ALL_METRICS
SWEEP_PARAMS = {"lambda": "lam", "mu": "mu", "alpha": "alpha", "batch": "batch_size"}
SWEEP_FIELDS = ("param", "value", "seed") + ALL_METRICS
COLUMN_DOC = {
    "checkpoint": "checkpoint path",
    "method": "training method tag",
    "split": "evaluated split (train or test)",
    "n": "number of evaluated rows",
    "param": "swept training parameter",
    "value": "value of the swept parameter",
    "seed": "training seed",
    "acc": "classification accuracy (fraction)",
    "auc": "macro one-vs-rest AUC",
    "recon": "mean log p(x | decoder(encoder mean)), nats per row",
    "psnr": "mean per-row PSNR of mean-code reconstructions, dB (99 = exact)",
    "ssim": "mean per-image SSIM of mean-code reconstructions",
    "utility": "scientific utility: mean KL(predictive encoder || refit encoder), nats per row",
    "coupling_kl": "mean KL(predictive encoder || generative encoder), nats per row",
    "posterior_kl": "mean KL(encoder || exact linear-decoder posterior), nats per row",
}
for _f in HISTORY_FIELDS:
    COLUMN_DOC.setdefault(_f, {"epoch": "1-based epoch", "recon": "epoch-mean reconstruction log-likelihood",
                               "prior_kl": "epoch-mean KL to the prior", "supervised": "epoch-mean log p(y|s)",
                               "objective": "epoch-mean weighted objective",
                               "recon_eval": "end-of-epoch mean-code reconstruction on the training rows",
                               "seconds": "elapsed wall time"}.get(_f, _f))


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


def load_config(path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    cfg.setdefault("dataset", {})
    cfg.setdefault("model", {})
    cfg.setdefault("training", {})
    cfg.setdefault("evaluation", {})
    cfg["_root"] = str(path.resolve().parent)
    return cfg


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    merged = dict(PRESETS.get(cfg["dataset"].get("preset", ""), {}))
    merged.update({k: v for k, v in cfg["model"].items() if k in MODEL_KEYS})
    extra = set(cfg["model"]) - set(MODEL_KEYS)
    if extra:
        raise ConfigError(f"unknown model fields: {sorted(extra)}")
    merged.update(cfg["training"])
    if seed is not None:
        merged["seed"] = seed
    method = merged.get("method", "vae")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    known = {f.name for f in fields(TrainConfig)}
    bad = set(merged) - known
    if bad:
        raise ConfigError(f"unknown training fields: {sorted(bad)}")
    return TrainConfig(**merged)


# ---------------------------------------------------------------- datasets


@dataclass
class PreparedData:
    train: LabeledDataset
    test: LabeledDataset
    masks: list[ExperimentMask] | None = None
    oracle: LinearGaussianSpec | None = None

    def split(self, name: str) -> LabeledDataset:
        if name not in ("train", "test"):
            raise ConfigError("split must be 'train' or 'test'")
        return self.train if name == "train" else self.test

    def experiment_rows(self, ds: LabeledDataset) -> list[np.ndarray]:
        """Row indices per experiment; rows cycle through experiments in order."""
        T = 1 if self.masks is None else len(self.masks)
        idx = np.arange(len(ds))
        return [idx[idx % T == t] for t in range(T)]

    def views(self, ds: LabeledDataset):
        masks = self.masks or [full_mask(ds.dim)]
        return [(ds.X[np.ix_(rows, m.indices)], m, ds.y[rows])
                for rows, m in zip(self.experiment_rows(ds), masks)]


def _resolve(root: str, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(root) / p


def _mnist_pairs(directory: Path) -> list[tuple[Path, Path]]:
    pairs = []
    for stem in ("train", "t10k", "digits"):
        for suffix in ("", ".gz"):
            img = directory / f"{stem}-images-idx3-ubyte{suffix}"
            lab = directory / f"{stem}-labels-idx1-ubyte{suffix}"
            if img.exists() and lab.exists():
                pairs.append((img, lab))
                break
    return pairs


def _load_mnist(block: dict, root: str) -> LabeledDataset:
    if "images" in block:
        pairs = [(_resolve(root, block["images"]), _resolve(root, block["labels"]))]
    else:
        directory = _resolve(root, block.get("path", os.environ.get("SOSVAE_MNIST_DIR", "data/mnist")))
        pairs = _mnist_pairs(directory)
        if not pairs:
            raise ConfigError(f"no IDX image/label files found in {directory}")
    parts = [load_idx(i, l) for i, l in pairs]
    X = np.concatenate([d.X for d in parts])
    y = np.concatenate([d.y for d in parts])
    return LabeledDataset(X, y, 10, name="mnist", value_range=1.0, image_shape=parts[0].image_shape)


def prepare_data(block: dict, root: str = ".") -> PreparedData:
    kind = block.get("name")
    seed = int(block.get("seed", 0))
    oracle = None
    masks = None
    if kind == "linear_gaussian":
        n, n_test = int(block.get("n", 5000)), int(block.get("n_test", 1000))
        oracle = bias_testbed_spec(p=int(block.get("p", 30)), latent_dim=int(block.get("latent_dim", 5)),
                                   sigma=float(block.get("sigma", 1.0)), seed=seed)
        full, _ = gen_linear_gaussian(oracle, n + n_test, seed)
        train_ds, test_ds = full.split(n)
    elif kind == "spectral":
        n, n_test = int(block.get("n", 3000)), int(block.get("n_test", 1000))
        full = gen_spectral_surrogate(int(block.get("p", 200)), int(block.get("n_classes", 3)), n + n_test, seed)
        train_ds, test_ds = full.split(n)
        miss = block.get("missing")
        if miss:
            T = int(miss.get("experiments", 3))
            if "remove_channels" in miss:
                layout = SpectralLayout.for_dim(full.dim)
                rng = seeded_rng(seed, "channels")
                masks = [channel_block_mask(layout, rng.choice(layout.n_channels, int(miss["remove_channels"]),
                                                               replace=False), t) for t in range(T)]
            else:
                masks = random_coordinate_masks(full.dim, float(miss.get("frac", 0.2)), T, seed)
    elif kind in ("mnist", "idx"):
        full = _load_mnist(block, root)
        n = int(block.get("n_train", 8000))
        n_test = int(block.get("n_test", 2000))
        if n + n_test > len(full):
            raise ConfigError(f"requested {n + n_test} rows, only {len(full)} available")
        train_ds, rest = full.split(n, seed=seed)
        test_ds = rest.subset(np.arange(n_test))
    elif kind == "npz":
        with np.load(_resolve(root, block["path"])) as z:
            C = int(block.get("n_classes", int(max(z["y"].max(), z["y_test"].max())) + 1))
            train_ds = LabeledDataset(z["X"], z["y"], C, name="npz")
            test_ds = LabeledDataset(z["X_test"], z["y_test"], C, name="npz")
    else:
        raise ConfigError(f"unknown dataset {kind!r}; use linear_gaussian, spectral, mnist, idx or npz")
    return PreparedData(train_ds, test_ds, masks, oracle)


# ---------------------------------------------------------------- outputs


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows, append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    manifest = path.with_suffix(".columns.json")
    manifest.write_text(json.dumps({c: COLUMN_DOC.get(c, c) for c in columns}, indent=2) + "\n")
    return path


# ---------------------------------------------------------------- commands


def fit(cfg: dict, seed: int | None = None) -> tuple[ModelBundle, PreparedData]:
    tc = train_config(cfg, seed)
    data = prepare_data(cfg["dataset"], cfg.get("_root", "."))
    if tc.method == "missing":
        bundle = train_missing(data.views(data.train), tc, n_classes=data.train.n_classes)
    else:
        bundle = train(data.train, tc)
    return bundle, data


def cmd_train(config_path, seed: int | None = None, out=None) -> tuple[Path, Path]:
    cfg = load_config(config_path)
    bundle, _ = fit(cfg, seed)
    out = Path(out) if out else Path(cfg["_root"]) / "runs" / f"{Path(config_path).stem}-seed{bundle.config.seed}"
    out.mkdir(parents=True, exist_ok=True)
    ckpt = save_checkpoint(bundle, out / "model.ckpt")
    hist = write_csv(out / "history.csv", HISTORY_FIELDS, bundle.history)
    resolved = {k: v for k, v in cfg.items() if k != "_root"}
    resolved["training"] = bundle.config.to_dict()
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    return ckpt, hist


def evaluate_bundle(bundle: ModelBundle, data: PreparedData, metrics, split: str = "test") -> MetricsReport:
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {', '.join(ALL_METRICS)}")
    ds = data.split(split)
    if ds.dim != bundle.arch.input_dim:
        raise ArchitectureMismatchError(f"data has {ds.dim} features, checkpoint expects {bundle.arch.input_dim}")
    if bundle.masks is not None:
        data = replace(data, masks=bundle.masks)
    views = data.views(ds) if bundle.masks is not None else [(ds.X, None, ds.y)]
    rep = MetricsReport()
    n = len(ds)

    def per_experiment(fn):
        vals = [fn(X, t, y) for t, (X, _, y) in enumerate(views) if len(y)]
        w = [len(y) for _, _, y in views if len(y)]
        return float(np.average(vals, weights=w))

    if "acc" in metrics:
        rep.add("acc", per_experiment(lambda X, t, y: accuracy(predict(bundle, X, t), y)), n)
    if "auc" in metrics:
        scores = np.zeros((n, bundle.arch.n_classes))
        for t, rows in enumerate(data.experiment_rows(ds) if bundle.masks is not None else [np.arange(n)]):
            scores[rows] = predict_log_proba(bundle, views[t][0], t)
        rep.add("auc", auc_macro(scores, ds.y), n)
    if "recon" in metrics:
        rep.add("recon", per_experiment(lambda X, t, y: mean_code_recon(
            bundle.decoder, bundle.encoder("generative", t), X, bundle.arch, bundle.mask(t))), n)
    if "psnr" in metrics or "ssim" in metrics:
        if bundle.masks is not None and any(not m.is_full for m in bundle.masks):
            raise ConfigError("psnr/ssim need fully observed rows")
        rec = reconstruct(bundle, ds.X)
        if "psnr" in metrics:
            peak = ds.value_range or 1.0
            rep.add("psnr", float(np.mean([psnr(a, b, peak) for a, b in zip(ds.X, rec)])), n)
        if "ssim" in metrics:
            if ds.image_shape is None:
                raise ConfigError("ssim needs image data")
            shape = ds.image_shape
            rep.add("ssim", float(np.mean([ssim(a.reshape(shape), b.reshape(shape), ds.value_range or 1.0)
                                           for a, b in zip(ds.X, rec)])), n)
    if "utility" in metrics:
        train_views = data.views(data.train) if bundle.masks is not None else [(data.train.X, None, data.train.y)]
        rep.add("utility", per_experiment(lambda X, t, y: scientific_utility(bundle, train_views[t][0], X,
                                                                             experiment=t)), n)
    if "coupling_kl" in metrics:
        if "phi" in bundle.encoders:
            rep.add("coupling_kl", 0.0, n)
        else:
            rep.add("coupling_kl", per_experiment(lambda X, t, y: float(np.mean(encoder_kl(
                bundle.encoder("predictive", t), bundle.encoder("generative", t), X)))), n)
    if "posterior_kl" in metrics:
        rep.add("posterior_kl", posterior_kl(bundle, ds.X), n)
    return rep


def _metrics_list(spec) -> list[str]:
    if isinstance(spec, str):
        spec = [m for m in spec.split(",") if m]
    return list(spec)


def cmd_eval(ckpt, data_config, metrics, split: str = "test", out=None) -> dict:
    cfg = load_config(data_config)
    expect = {k: v for k, v in cfg["model"].items() if k in ("decoder", "likelihood", "latent_dim")}
    bundle = load_checkpoint(ckpt, expect_arch=expect)
    data = prepare_data(cfg["dataset"], cfg["_root"])
    metrics = _metrics_list(metrics)
    rep = evaluate_bundle(bundle, data, metrics, split)
    result = {"checkpoint": str(ckpt), "method": bundle.method, "split": split, **rep.to_dict()}
    out = Path(out) if out else Path(ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    row = {"checkpoint": str(ckpt), "method": bundle.method, "split": split, "n": len(data.split(split)),
           **rep.values}
    write_csv(out / "eval.csv", EVAL_FIELDS, [row], append=True)
    return result


def _sweep_cell(args) -> dict:
    cfg, param, value, seed, metrics, tmpdir, i = args
    cfg = json.loads(json.dumps(cfg))
    cfg["training"][SWEEP_PARAMS[param]] = value
    bundle, data = fit(cfg, seed)
    rep = evaluate_bundle(bundle, data, metrics, "test")
    row = {"param": param, "value": value, "seed": seed, **rep.values}
    Path(tmpdir, f"cell-{i:05d}.json").write_text(json.dumps(row))
    return row


def cmd_sweep(config_path, param: str, values, seeds=None, out=None, metrics=None) -> Path:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"parameter must be one of {', '.join(SWEEP_PARAMS)}")
    values = [int(v) if param == "batch" else float(v) for v in values]
    if not values:
        raise ConfigError("empty value list")
    cfg = load_config(config_path)
    seeds = list(seeds) if seeds else [train_config(cfg).seed]
    metrics = _metrics_list(metrics or cfg["evaluation"].get("metrics", ["acc", "coupling_kl"]))
    out = Path(out) if out else Path(cfg["_root"]) / "runs" / f"{Path(config_path).stem}-sweep-{param}.csv"
    workers = max(1, int(os.environ.get("SOSVAE_THREADS", "1")))
    with tempfile.TemporaryDirectory() as tmp:
        cells = [(cfg, param, v, s, metrics, tmp, i)
                 for i, (v, s) in enumerate((v, s) for v in values for s in seeds)]
        if workers == 1 or len(cells) == 1:
            for c in cells:
                _sweep_cell(c)
        else:
            with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
                list(pool.map(_sweep_cell, cells))
        rows = [json.loads(p.read_text()) for p in sorted(Path(tmp).glob("cell-*.json"))]
    return write_csv(out, SWEEP_FIELDS, rows)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sosvae", description="Train and evaluate supervised VAEs.")
    sub = ap.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train one model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="JSON config whose dataset block names the data")
    e.add_argument("--metrics", default="acc,auc")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--out")
    s = sub.add_parser("sweep", help="train and evaluate over a grid of one parameter")
    s.add_argument("--config", required=True)
    s.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", default="", help="comma-separated seeds (default: config seed)")
    s.add_argument("--metrics")
    s.add_argument("--out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            ckpt, hist = cmd_train(args.config, args.seed, args.out)
            print(f"checkpoint: {ckpt}\nhistory: {hist}")
        elif args.command == "eval":
            print(json.dumps(cmd_eval(args.ckpt, args.data, args.metrics, args.split, args.out), indent=2,
                             sort_keys=True))
        else:
            values = [v for v in args.values.split(",") if v.strip()]
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            print(cmd_sweep(args.config, args.param, values, seeds, args.out, args.metrics))
    except (ValueError, CheckpointError, OSError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
