"""Command-line harness: configs, experiments, and report files.

Subcommands
-----------
analyze          per-layer receptive-field table + stripe feasibility grid
train            seeded training run: checkpoint, log CSV, metrics JSON
eval             retrieval metrics for a checkpoint over a manifest
augment-preview  sample shift transforms, write PPMs + a transform CSV
abp-demo         max-activation histogram and balanced cuts for a random map
gradcheck        finite-difference check of every differentiable kernel
heatmap          channel-summed response grids per branch/path/stripe

Every run is reproducible from (config file, seed): rerunning writes
byte-identical artifacts. Failures exit nonzero after printing a single
``error-class: message`` line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, gradcheck as gradcheck_mod
from .augment import (
    RSAParams,
    apply_shift,
    image_rng,
    read_ppm,
    sample_shift,
    write_ppm,
)
from .data import Dataset, load_dataset, make_synthetic_dataset, save_dataset, to_model_batch
from .evaluation import evaluate_retrieval, extract_embeddings, write_report
from .model import ModelConfig, build_model, forward_features, path_stripe_maps
from .partition import (
    PartitionError,
    abp_boundaries,
    max_activation_histogram,
)
from .receptive import (
    ArchSpec,
    ArchSpecError,
    analyze,
    bundled_archspec_path,
    feature_size,
    load_archspec,
    restricted_region,
)
from .tensor import ShapeError, Tensor
from .train import TrainConfig, TrainSchedule, load_checkpoint, save_checkpoint, train_model

__all__ = ["ExperimentConfig", "ConfigError", "ablation_presets", "main"]


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a training run needs, flat and JSON-serializable.

    ``manifest`` selects an on-disk dataset; when empty, a synthetic dataset
    is generated from the ``dataset_*`` fields (and saved with the run). The
    ablation toggles express the standard rows: baseline (all off), +RP,
    only-RP (``rp_only``), +RSA, +ABP, and full (all on).
    """

    seed: int = 0
    out_dir: str = "run"
    manifest: str = ""
    # synthetic dataset (used when manifest is empty)
    dataset_seed: int = 7
    n_identities: int = 16
    n_cameras: int = 2
    train_per_camera: int = 4
    eval_per_camera: int = 2
    # ablation toggles
    with_rp: bool = True
    rp_only: bool = False
    with_rsa: bool = True
    with_abp: bool = True
    stripe_counts: tuple[int, ...] = (2, 3)
    # model
    reduced_dim: int = 16
    margin: float = 0.6
    # optimization
    epochs: int = 40
    batch_p: int = 8
    batch_k: int = 4
    steps_per_epoch: int = 4
    base_lr: float = 0.01
    warmup_start: float = 1e-5
    warmup_epochs: int = 3
    decay_epochs: tuple[int, ...] = (24, 34)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    head_lr_scale: float = 10.0
    # augmentation
    rsa_p: float = 0.5
    rsa_p_c: float = 0.5
    rsa_r_c_min: float = 0.7
    rsa_r_h_min: float = 0.5
    rsa_r_w_min: float = 0.5
    flip_prob: float = 0.5

    def validate(self) -> None:
        """Collect every problem before any compute starts."""
        errors = []
        if self.epochs < 0:
            errors.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_p < 2 or self.batch_k < 2:
            errors.append(
                f"identity-balanced batches need batch_p >= 2 and batch_k >= 2, "
                f"got p={self.batch_p} k={self.batch_k}"
            )
        if self.steps_per_epoch < 0:
            errors.append(f"steps_per_epoch must be >= 0, got {self.steps_per_epoch}")
        if not self.stripe_counts or any(k < 1 for k in self.stripe_counts):
            errors.append(f"stripe_counts must be >= 1 each, got {self.stripe_counts}")
        if self.rp_only and not self.with_rp:
            errors.append("rp_only requires with_rp")
        if self.reduced_dim < 1:
            errors.append(f"reduced_dim must be >= 1, got {self.reduced_dim}")
        if self.margin < 0:
            errors.append(f"margin must be >= 0, got {self.margin}")
        if not self.manifest:
            if self.n_identities < self.batch_p:
                errors.append(
                    f"n_identities {self.n_identities} < batch_p {self.batch_p}"
                )
            if self.n_cameras < 2:
                errors.append(f"n_cameras must be >= 2, got {self.n_cameras}")
        try:
            self.schedule()
        except ValueError as e:
            errors.append(str(e))
        try:
            self.rsa_params()
        except ValueError as e:
            errors.append(str(e))
        if not 0 <= self.flip_prob <= 1:
            errors.append(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if errors:
            raise ConfigError("; ".join(errors))

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            base_lr=self.base_lr,
            warmup_start=self.warmup_start,
            warmup_epochs=self.warmup_epochs,
            decay_epochs=tuple(self.decay_epochs),
            decay_factor=self.decay_factor,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            head_lr_scale=self.head_lr_scale,
        )

    def rsa_params(self) -> RSAParams:
        return RSAParams(
            p=self.rsa_p,
            p_c=self.rsa_p_c,
            r_c_min=self.rsa_r_c_min,
            r_h_min=self.rsa_r_h_min,
            r_w_min=self.rsa_r_w_min,
        )

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            stripe_counts=tuple(self.stripe_counts),
            num_classes=num_classes,
            reduced_dim=self.reduced_dim,
            margin=self.margin,
            with_original=not self.rp_only,
            with_rp=self.with_rp,
            abp_at_inference=self.with_abp,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_p=self.batch_p,
            batch_k=self.batch_k,
            steps_per_epoch=self.steps_per_epoch,
            schedule=self.schedule(),
            rsa=self.rsa_params() if self.with_rsa else None,
            flip_prob=self.flip_prob,
        )


_TUPLE_FIELDS = {"stripe_counts", "decay_epochs"}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from parsed JSON, reporting every bad key at once."""
    known = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    errors = [f"unknown config key {k!r}" for k in raw if k not in known]
    values = {}
    for key, value in raw.items():
        if key not in known:
            continue
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            ):
                errors.append(f"config key {key!r} must be a list of integers")
                continue
            value = tuple(value)
        values[key] = value
    if errors:
        raise ConfigError("; ".join(errors))
    return ExperimentConfig(**values)


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(raw)


def dump_effective_config(config: ExperimentConfig, path: str | Path) -> None:
    """Write the fully-defaulted config; reloading it reproduces the run."""
    with open(path, "w") as fh:
        json.dump(dataclasses.asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def ablation_presets() -> dict[str, dict]:
    """Field overrides for the standard ablation rows."""
    return {
        "baseline": {"with_rp": False, "with_rsa": False, "with_abp": False},
        "rp": {"with_rp": True, "with_rsa": False, "with_abp": False},
        "only-rp": {"with_rp": True, "rp_only": True, "with_rsa": False, "with_abp": False},
        "rsa": {"with_rp": False, "with_rsa": True, "with_abp": False},
        "abp": {"with_rp": False, "with_rsa": False, "with_abp": True},
        "full": {"with_rp": True, "with_rsa": True, "with_abp": True},
    }


# ---------------------------------------------------------------------------
# subcommands


def _resolve_archspec(name_or_path: str) -> ArchSpec:
    p = Path(name_or_path)
    if p.exists():
        return load_archspec(p)
    return load_archspec(bundled_archspec_path(name_or_path))


def cmd_analyze(args) -> int:
    arch = _resolve_archspec(args.archspec)
    report = analyze(arch)
    print(report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rf_path = out / "receptive_field.csv"
    rf_path.write_text(report.to_csv())
    grid_path = out / "partition_grid.csv"
    n_layers = len(arch.layers)
    with open(grid_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["layer", "map_height", "n_s", "stripe_height",
             "restricted_region", "tail_rf", "effective"]
        )
        for j in range(n_layers + 1):
            name = "input" if j == 0 else arch.layers[j - 1].name
            height = feature_size(arch, j)[0]
            for n_s in range(1, args.max_stripes + 1):
                if n_s > height or height % n_s != 0:
                    continue
                plan = restricted_region(arch, j, n_s)
                writer.writerow(
                    [name, height, n_s, plan.stripe_height,
                     plan.restricted_region, plan.tail_rf,
                     "yes" if plan.effective else "no"]
                )
    print(f"wrote {rf_path} and {grid_path}")
    return 0


def _load_run_dataset(config: ExperimentConfig) -> Dataset:
    if config.manifest:
        return load_dataset(config.manifest)
    return make_synthetic_dataset(
        n_identities=config.n_identities,
        n_cameras=config.n_cameras,
        train_per_camera=config.train_per_camera,
        eval_per_camera=config.eval_per_camera,
        seed=config.dataset_seed,
    )


def _evaluate_to_result(model, dataset: Dataset, flip_mean: bool = True):
    query = dataset.subset("query")
    gallery = dataset.subset("gallery")
    qf = extract_embeddings(model, query.images, flip_mean=flip_mean)
    gf = extract_embeddings(model, gallery.images, flip_mean=flip_mean)
    return evaluate_retrieval(qf, query.pids, query.cams, gf, gallery.pids, gallery.cams)


def cmd_train(args) -> int:
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.out is not None:
        config = dataclasses.replace(config, out_dir=args.out)
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_effective_config(config, out / "effective_config.json")
    dataset = _load_run_dataset(config)
    if not config.manifest:
        save_dataset(dataset, out / "data")
    num_classes = len(np.unique(dataset.subset("train").pids))
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    model = build_model(config.model_config(num_classes), np.random.default_rng(seeds[0]))
    print(f"model: {model.config.head_count} heads, {model.parameter_count} parameters")
    result = train_model(
        model,
        dataset,
        config.train_config(),
        np.random.default_rng(seeds[1]),
        out_dir=out,
        eval_fn=lambda m: _evaluate_to_result(m, dataset).cmc[1],
        augment_seed=config.seed,
    )
    metrics = _evaluate_to_result(model, dataset)
    write_report(out / "metrics.json", metrics, extra={"seed": config.seed})
    summary = " ".join(f"rank{r}={v:.4f}" for r, v in sorted(metrics.cmc.items()))
    print(f"final: {summary} mAP={metrics.mean_ap:.4f}")
    print(f"wrote {result.log_path}, {result.checkpoint_path}, {out / 'metrics.json'}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.manifest)
    query = dataset.subset(args.query_split)
    gallery = dataset.subset(args.gallery_split)
    if len(query) == 0 or len(gallery) == 0:
        raise ConfigError(
            f"empty split: query={args.query_split!r} has {len(query)}, "
            f"gallery={args.gallery_split!r} has {len(gallery)}"
        )
    flip_mean = not args.no_flip_mean
    qf = extract_embeddings(model, query.images, flip_mean=flip_mean)
    gf = extract_embeddings(model, gallery.images, flip_mean=flip_mean)
    result = evaluate_retrieval(
        qf, query.pids, query.cams, gf, gallery.pids, gallery.cams,
        ranks=tuple(args.ranks), cross_camera=not args.no_protocol,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "metrics.json", result)
    summary = " ".join(f"rank{r}={v:.4f}" for r, v in sorted(result.cmc.items()))
    print(f"{summary} mAP={result.mean_ap:.4f} "
          f"({result.n_queries} queries, {len(result.excluded_queries)} excluded)")
    return 0


def cmd_augment_preview(args) -> int:
    if args.image:
        img = read_ppm(args.image)
    else:
        sample = make_synthetic_dataset(
            n_identities=1, n_cameras=2, train_per_camera=1, eval_per_camera=0,
            seed=args.seed,
        )
        img = sample.images[0]
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    params = config.rsa_params()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = img.shape[:2]
    rows = []
    for i in range(args.count):
        rng = image_rng(args.seed, i)
        t = sample_shift(params, h, w, rng)
        write_ppm(out / f"preview_{i:03d}.ppm", apply_shift(img, t))
        if t is None:
            rows.append([i, 0, 1.0, 1.0, 1.0, 0, 0])
        else:
            rows.append([i, int(t.cropped), t.r_c, t.r_h, t.r_w,
                         t.offset[0], t.offset[1]])
    csv_path = out / "transforms.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "cropped", "r_c", "r_h", "r_w", "oy", "ox"])
        writer.writerows(rows)
    write_ppm(out / "original.ppm", img)
    print(f"wrote {args.count} previews and {csv_path}")
    return 0


def cmd_abp_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    fmap = rng.normal(size=(1, args.channels, args.height, args.width))
    hist = max_activation_histogram(fmap)
    bounds = abp_boundaries(hist, args.stripes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hist_path = out / "histogram.csv"
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "cumulative_count"])
        for row, cum in enumerate(hist.cumulative):
            writer.writerow([row, cum])
    counts = hist.counts()
    print(f"map: {args.channels} channels, {args.height}x{args.width}; "
          f"{args.stripes} stripes")
    print("cuts:", " ".join(str(c) for c in bounds.cuts))
    for s in range(bounds.n_s):
        lo, hi = bounds.cuts[s], bounds.cuts[s + 1]
        stripe_count = int(sum(counts[lo:hi]))
        bar = "#" * stripe_count
        print(f"stripe {s}: rows {lo:2d}..{hi - 1:2d}  maxima {stripe_count:3d} {bar}")
    print(f"wrote {hist_path}")
    return 0


def cmd_gradcheck(args) -> int:
    failures = gradcheck_mod.run_battery(seed=args.seed, verbose=True)
    return 1 if failures else 0


def cmd_heatmap(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    img = read_ppm(args.image)
    batch = Tensor(to_model_batch(img[None]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem_out = model.stem(batch)
    written = []
    for b, branch in enumerate(model.branches):
        maps = path_stripe_maps(branch, stem_out)
        for path, stripe_maps in maps.items():
            for s, fmap in enumerate(stripe_maps):
                grid = fmap.data[0].sum(axis=0)
                name = f"heatmap_b{b}_{path}_s{s}.csv"
                with open(out / name, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    for row in grid:
                        writer.writerow([f"{v:.10g}" for v in row])
                written.append(name)
    print(f"wrote {len(written)} grids to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stripenet",
        description="stripe-based multi-granularity feature learning toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="receptive-field table + stripe feasibility grid")
    p.add_argument("archspec", help="architecture file path or bundled name")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--max-stripes", type=int, default=8)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="run a seeded training experiment")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the config output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--ranks", type=lambda s: [int(r) for r in s.split(",")],
                   default=[1, 5, 10])
    p.add_argument("--query-split", default="query", choices=["train", "query", "gallery"])
    p.add_argument("--gallery-split", default="gallery", choices=["train", "query", "gallery"])
    p.add_argument("--no-protocol", action="store_true",
                   help="keep same-identity same-camera gallery entries")
    p.add_argument("--no-flip-mean", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment-preview", help="sample and render shift transforms")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", default="preview")
    p.add_argument("--image", help="input PPM (default: a synthetic identity image)")
    p.add_argument("--config", help="experiment config JSON supplying RSA parameters")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("abp-demo", help="balanced stripe cuts on a random map")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--height", type=int, default=12)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--stripes", type=int, default=3)
    p.set_defaults(func=cmd_abp_demo)

    p = sub.add_parser("gradcheck", help="finite-difference kernel checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("heatmap", help="channel-summed response grids for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_heatmap)

    return parser


_ERROR_CLASSES: tuple[tuple[type, str], ...] = (
    (ConfigError, "config-error"),
    (ArchSpecError, "archspec-error"),
    (PartitionError, "partition-error"),
    (ShapeError, "shape-error"),
    (FileNotFoundError, "missing-file-error"),
    (json.JSONDecodeError, "config-error"),
    (OSError, "io-error"),
    (KeyError, "state-error"),
    (ValueError, "value-error"),
    (RuntimeError, "runtime-error"),
)


def _classify(exc: BaseException) -> str:
    for etype, label in _ERROR_CLASSES:
        if isinstance(exc, etype):
            return label
    return "internal-error"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        message = str(exc).replace("\n", " ")
        print(f"{_classify(exc)}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
