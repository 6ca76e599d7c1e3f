"""Command-line front end: train, eval, sweep, diagnose.

Commands resolve their configuration from defaults, then an optional JSON
config file (``--config``), then explicit flags (highest precedence). All
artifacts are written under the output directory and are byte-identical
across runs with the same config and seed; per-episode wall-clock timings go
to ``timings.log`` (not a CSV) precisely because they are the one
non-deterministic output.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data, diagnostics, embednet, episodic, metrics
from .errors import (
    CapacityError,
    ConfigError,
    DataLoadError,
    DegenerateInputError,
    ShapeError,
    TrainingDiverged,
)


def _merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _add_common_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--seed", type=int, help="master RNG seed")
    p.add_argument("--out", help="output directory for all artifacts")
    p.add_argument(
        "--dataset", choices=config_mod.DATASET_KINDS, help="dataset kind"
    )
    p.add_argument("--root", help="dataset root directory")
    p.add_argument("--train-split", help="split file for the training partition")
    p.add_argument("--val-split", help="split file for the validation partition")
    p.add_argument("--test-split", help="split file for the test partition")
    p.add_argument("--variant", choices=config_mod.VARIANTS, help="embedding network variant")
    p.add_argument(
        "--metric", choices=sorted(metrics.KIND_ALIASES), help="distance metric"
    )
    p.add_argument("--s", type=float, help="leak threshold (squared-distance units)")
    p.add_argument("--r", type=float, help="leak rate in (0, 1]")
    p.add_argument("--n-way", type=int, help="classes per episode")
    p.add_argument("--k-shot", type=int, help="support examples per class")
    p.add_argument("--q-query", type=int, help="query examples per class")
    p.add_argument("--episodes", type=int, help="episode budget for this command")
    p.add_argument("--synth-classes", type=int, help="synthetic: number of classes")
    p.add_argument("--synth-dim", type=int, help="synthetic: vector dimension")
    p.add_argument("--synth-per-class", type=int, help="synthetic: samples per class")
    p.add_argument("--synth-std", type=float, help="synthetic: cluster standard deviation")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="leakyproto",
        description="Few-shot classification with pluggable distance metrics "
        "and gradient-sparsity diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="episodic training run")
    _add_common_flags(p_train)
    p_train.add_argument("--eval-n-way", type=int, help="validation episode way count")
    p_train.add_argument("--eval-k-shot", type=int)
    p_train.add_argument("--eval-q-query", type=int)
    p_train.add_argument("--lr", type=float, help="Adam learning rate")
    p_train.add_argument("--halve-every", type=int, help="halve the lr every N episodes")
    p_train.add_argument("--val-every", type=int, help="validate every N episodes")
    p_train.add_argument("--val-episodes", type=int, help="episodes per validation round")
    p_train.add_argument("--snapshots", help="comma-separated snapshot iterations")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on test episodes")
    _add_common_flags(p_eval)
    p_eval.add_argument("--checkpoint", help="checkpoint file to evaluate")

    p_sweep = sub.add_parser("sweep", help="grid sweep over the metric parameters s and r")
    _add_common_flags(p_sweep)
    p_sweep.add_argument("--s-grid", help="comma-separated s values", default=None)
    p_sweep.add_argument("--r-grid", help="comma-separated r values", default=None)
    p_sweep.add_argument("--val-every", type=int, help="validate every N episodes")
    p_sweep.add_argument("--val-episodes", type=int, help="episodes per validation round")

    p_diag = sub.add_parser(
        "diagnose", help="capture distance/gradient snapshots during early training"
    )
    _add_common_flags(p_diag)
    p_diag.add_argument("--checkpoint", help="resume from a checkpoint instead of fresh init")
    p_diag.add_argument("--snapshots", help="comma-separated snapshot iterations")

    return parser


def _parse_int_list(text, flag):
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"{flag}: expected comma-separated integers, got {text!r}") from exc


def _parse_float_list(text, flag):
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"{flag}: expected comma-separated numbers, got {text!r}") from exc


def _flag_overrides(args):
    """Translate explicitly passed flags into a config-dict override."""
    o: dict = {}

    def put(path, value):
        if value is None:
            return
        node = o
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value

    put(("dataset", "kind"), getattr(args, "dataset", None))
    put(("dataset", "root"), getattr(args, "root", None))
    put(("dataset", "train_split"), getattr(args, "train_split", None))
    put(("dataset", "val_split"), getattr(args, "val_split", None))
    put(("dataset", "test_split"), getattr(args, "test_split", None))
    put(("dataset", "synthetic", "n_classes"), getattr(args, "synth_classes", None))
    put(("dataset", "synthetic", "dim"), getattr(args, "synth_dim", None))
    put(("dataset", "synthetic", "per_class"), getattr(args, "synth_per_class", None))
    put(("dataset", "synthetic", "std"), getattr(args, "synth_std", None))
    put(("variant",), getattr(args, "variant", None))
    if getattr(args, "metric", None) is not None:
        put(("metric", "kind"), metrics.resolve_kind(args.metric))
    put(("metric", "s"), getattr(args, "s", None))
    put(("metric", "r"), getattr(args, "r", None))

    # Episode-shape flags apply to the shape the command actually runs with:
    # training episodes for train/sweep/diagnose, test episodes for eval.
    shape_target = "eval_shape" if args.command == "eval" else "train_shape"
    put((shape_target, "n_way"), getattr(args, "n_way", None))
    put((shape_target, "k_shot"), getattr(args, "k_shot", None))
    put((shape_target, "q_query"), getattr(args, "q_query", None))
    put(("eval_shape", "n_way"), getattr(args, "eval_n_way", None))
    put(("eval_shape", "k_shot"), getattr(args, "eval_k_shot", None))
    put(("eval_shape", "q_query"), getattr(args, "eval_q_query", None))

    episodes = getattr(args, "episodes", None)
    if episodes is not None:
        if args.command == "eval":
            put(("budget", "eval_episodes"), episodes)
        else:
            put(("budget", "train_episodes"), episodes)
    put(("optimizer", "lr"), getattr(args, "lr", None))
    put(("optimizer", "halve_every"), getattr(args, "halve_every", None))
    put(("validate_every",), getattr(args, "val_every", None))
    put(("val_episodes",), getattr(args, "val_episodes", None))
    put(("seed",), getattr(args, "seed", None))
    put(("out_dir",), getattr(args, "out", None))
    if getattr(args, "snapshots", None) is not None:
        put(("snapshot_iterations",), _parse_int_list(args.snapshots, "--snapshots"))
    return o


def resolve_config(args):
    """defaults -> config file -> flags, then validate into a RunConfig."""
    file_dict = config_mod.load_config_file(args.config) if args.config else {}
    kind = (
        getattr(args, "dataset", None)
        or file_dict.get("dataset", {}).get("kind")
        or "synthetic"
    )
    merged = _merge(config_mod.default_config(kind).to_dict(), file_dict)
    merged = _merge(merged, _flag_overrides(args))
    if merged.get("dataset", {}).get("kind") != "synthetic":
        merged.get("dataset", {}).pop("synthetic", None)
    return config_mod.from_dict(merged)


def load_dataset(cfg, partitions=("train", "val", "test")):
    """Load the requested partitions as DatasetSplit objects."""
    ds = cfg.dataset
    splits = {}
    if ds.kind == "synthetic":
        base = ds.synthetic
        for offset, name in enumerate(("train", "val", "test")):
            if name in partitions:
                splits[name] = data.synth_gaussian(
                    dataclasses.replace(base, seed=base.seed + offset)
                )
        return splits
    if ds.root is None:
        raise ConfigError(f"dataset.root: required for kind {ds.kind!r}")
    if ds.kind == "omniglot":
        files = {"train": ds.train_split, "val": ds.val_split, "test": ds.test_split}
        if any(files[p] is None for p in partitions):
            # No explicit split files: partition the discovered characters with
            # the reference proportions (deterministic, sorted order).
            derived = data.default_character_split(data.discover_characters(ds.root))
            for name in partitions:
                chars = derived[name] if files[name] is None else files[name]
                splits[name] = data.load_omniglot(ds.root, chars)
        else:
            for name in partitions:
                splits[name] = data.load_omniglot(ds.root, files[name])
        return splits
    for name in partitions:
        split_file = getattr(ds, f"{name}_split")
        splits[name] = data.load_image_folder(ds.root, split_file)
    return splits


def make_embedder(cfg, rng):
    if cfg.variant == "identity":
        return embednet.IdentityEmbedder()
    channels = 1 if cfg.variant == "omniglot" else 3
    return embednet.ConvEmbedder(embednet.init_params(cfg.variant, channels, rng))


def _train_settings(cfg):
    return episodic.TrainSettings(
        metric=cfg.metric,
        train_shape=cfg.train_shape,
        eval_shape=cfg.eval_shape,
        episodes=cfg.budget.train_episodes,
        lr=cfg.optimizer.lr,
        lr_halve_every=cfg.optimizer.halve_every,
        validate_every=cfg.validate_every,
        val_episodes=cfg.val_episodes,
        seed=cfg.seed,
    )


def write_train_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "loss", "train_acc", "val_acc"])
        for row in rows:
            writer.writerow(
                [
                    row.episode,
                    repr(row.loss),
                    repr(row.train_acc),
                    "" if row.val_acc is None else repr(row.val_acc),
                ]
            )


def write_timings(rows, path):
    with open(path, "w") as fh:
        fh.write("episode wall_ms\n")
        for row in rows:
            fh.write(f"{row.episode} {row.wall_ms:.3f}\n")


def mean_ci95(accs):
    accs = np.asarray(accs, dtype=np.float64)
    mean = float(accs.mean())
    if accs.size < 2:
        return mean, 0.0
    half = 1.96 * float(accs.std(ddof=1)) / float(np.sqrt(accs.size))
    return mean, half


def run_training(cfg, out, embedder=None, recorder=None, partitions=("train", "val")):
    """Shared train-command body; returns the TrainResult."""
    splits = load_dataset(cfg, partitions)
    if embedder is None:
        embedder = make_embedder(cfg, np.random.default_rng(cfg.seed))
    try:
        result = episodic.train(
            embedder, splits["train"], splits.get("val"), _train_settings(cfg), recorder
        )
    except TrainingDiverged as exc:
        snap = getattr(exc, "snapshot", None)
        if snap is not None:
            diagnostics.write_snapshot_csv(snap, out / "diverged_snapshot.csv")
        raise
    write_train_log(result.rows, out / "train_log.csv")
    write_timings(result.rows, out / "timings.log")
    if isinstance(result.best_embedder, embednet.ConvEmbedder):
        embednet.save_checkpoint(result.best_embedder.params, out / "best.ckpt")
        embednet.save_checkpoint(result.final_embedder.params, out / "final.ckpt")
    return result


def cmd_train(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, out / "config.json")
    recorder = None
    if cfg.snapshot_iterations:
        recorder = diagnostics.SnapshotRecorder(
            cfg.snapshot_iterations, diagnostics.CsvSnapshotSink(out / "snapshots")
        )
    result = run_training(cfg, out, recorder=recorder)
    if result.rows:
        best = f"{result.best_val_acc:.4f}" if result.best_val_acc >= 0 else "n/a"
        print(
            f"trained {len(result.rows)} episodes; final loss "
            f"{result.rows[-1].loss:.4f}, best validation accuracy {best}"
        )
    print(f"artifacts written to {out}")
    return 0


def cmd_eval(cfg, checkpoint):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, out / "config.json")
    if cfg.variant == "identity":
        embedder = embednet.IdentityEmbedder()
    else:
        if checkpoint is None:
            raise ConfigError("--checkpoint: required for convolutional variants")
        params = embednet.load_checkpoint(checkpoint)
        if params.variant != cfg.variant:
            raise ConfigError(
                f"variant: checkpoint is {params.variant!r} but config says {cfg.variant!r}"
            )
        embedder = embednet.ConvEmbedder(params)
    splits = load_dataset(cfg, partitions=("test",))
    rng = np.random.default_rng([cfg.seed, 2])
    accs = episodic.evaluate(
        embedder, splits["test"], cfg.eval_shape, cfg.budget.eval_episodes, cfg.metric, rng
    )
    mean, half = mean_ci95(accs)
    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "accuracy"])
        for i, acc in enumerate(accs):
            writer.writerow([i + 1, repr(float(acc))])
    with open(out / "eval_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episodes", "mean_accuracy", "ci95_halfwidth"])
        writer.writerow([accs.size, repr(mean), repr(half)])
    print(
        f"accuracy {mean:.4f} +/- {half:.4f} (95% CI over {accs.size} episodes, "
        f"{cfg.eval_shape.n_way}-way {cfg.eval_shape.k_shot}-shot)"
    )
    return 0


def cmd_sweep(cfg, s_grid, r_grid):
    if not s_grid or not r_grid:
        raise ConfigError("--s-grid/--r-grid: sweep requires a non-empty grid")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, out / "config.json")
    results = []
    for i, s in enumerate(s_grid):
        for j, r in enumerate(r_grid):
            metric = metrics.MetricConfig(
                kind=metrics.LEAKY_SQUARED_EUCLIDEAN, s=s, r=r
            )
            cell_cfg = dataclasses.replace(cfg, metric=metric)
            cell_dir = out / f"cell_s{s:g}_r{r:g}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            config_mod.save_config(cell_cfg, cell_dir / "config.json")
            result = run_training(cell_cfg, cell_dir)
            splits = load_dataset(cell_cfg, partitions=("val",))
            vrng = np.random.default_rng([cfg.seed, 3, i, j])
            accs = episodic.evaluate(
                result.best_embedder, splits["val"], cfg.eval_shape,
                max(cfg.val_episodes, 1), cfg.metric, vrng,
            )
            val_acc = float(accs.mean())
            results.append((s, r, val_acc))
            print(f"s={s:g} r={r:g}: validation accuracy {val_acc:.4f}")
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "r", "val_accuracy"])
        for s, r, acc in results:
            writer.writerow([repr(float(s)), repr(float(r)), repr(acc)])
    print(f"sweep table written to {out / 'sweep.csv'}")
    return 0


def cmd_diagnose(cfg, checkpoint):
    if not cfg.snapshot_iterations:
        raise ConfigError("snapshot_iterations: diagnose requires at least one iteration")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, out / "config.json")
    rng = np.random.default_rng(cfg.seed)
    if checkpoint is not None:
        params = embednet.load_checkpoint(checkpoint)
        if cfg.variant != "identity" and params.variant != cfg.variant:
            raise ConfigError(
                f"variant: checkpoint is {params.variant!r} but config says {cfg.variant!r}"
            )
        embedder = embednet.ConvEmbedder(params)
    else:
        embedder = make_embedder(cfg, rng)
    recorder = diagnostics.SnapshotRecorder(
        cfg.snapshot_iterations, diagnostics.CsvSnapshotSink(out)
    )
    diag_cfg = dataclasses.replace(
        cfg,
        budget=dataclasses.replace(
            cfg.budget, train_episodes=max(cfg.snapshot_iterations) + 1
        ),
        validate_every=0,
    )
    run_training(diag_cfg, out, embedder=embedder, recorder=recorder, partitions=("train",))
    with open(out / "sparsity.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "n_values", "sparsity_index", "mean_dist_euc", "mean_dist_metric"]
        )
        for snap in recorder.snapshots:
            idx = diagnostics.sparsity_index(snap)
            writer.writerow(
                [
                    snap.iteration,
                    snap.grad_values.size,
                    repr(idx),
                    repr(float(snap.dist_euc.mean())),
                    repr(float(snap.dist_metric.mean())),
                ]
            )
            print(
                f"iteration {snap.iteration}: sparsity {idx:.4f}, "
                f"mean base distance {snap.dist_euc.mean():.2f}, "
                f"mean softmax distance {snap.dist_metric.mean():.2f}"
            )
    print(f"snapshots written to {out}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "sweep":
            s_grid = _parse_float_list(args.s_grid, "--s-grid") if args.s_grid else []
            r_grid = _parse_float_list(args.r_grid, "--r-grid") if args.r_grid else []
            return cmd_sweep(cfg, s_grid, r_grid)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (
        DataLoadError,
        TrainingDiverged,
        CapacityError,
        ShapeError,
        DegenerateInputError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
