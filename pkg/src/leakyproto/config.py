"""Run configuration: schema, defaults, JSON round-trip, validation.

A :class:`RunConfig` pins everything a command needs — dataset, model
variant, metric, episode shapes, optimizer, budgets, seed, output directory —
so a persisted config re-runs to identical results. The file format is JSON
with exactly the field names below; unknown fields are rejected with the
offending name. Resolution order for the CLI is defaults, then config file,
then command-line flags.

Per-dataset defaults carry the reference settings: the leaky metric uses
(s=0, r=0.01) for the omniglot variant and (s=4, r=0.01) for 84x84 image
folders.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import SyntheticSpec
from .episodic import EpisodeShape
from .errors import ConfigError
from .metrics import LEAKY_SQUARED_EUCLIDEAN, SQUARED_EUCLIDEAN, MetricConfig

DATASET_KINDS = ("omniglot", "image_folder", "synthetic")
VARIANTS = ("omniglot", "standard", "identity")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    root: str | None = None
    train_split: str | None = None
    val_split: str | None = None
    test_split: str | None = None
    synthetic: SyntheticSpec | None = None


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    halve_every: int = 2000


@dataclass
class BudgetConfig:
    train_episodes: int = 2000
    eval_episodes: int = 600


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    variant: str = "identity"
    metric: MetricConfig = field(default_factory=MetricConfig)
    train_shape: EpisodeShape = field(default_factory=lambda: EpisodeShape(5, 1, 5))
    eval_shape: EpisodeShape = field(default_factory=lambda: EpisodeShape(5, 1, 5))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    validate_every: int = 200
    val_episodes: int = 200
    seed: int = 0
    snapshot_iterations: list[int] = field(default_factory=list)
    out_dir: str = "runs/run"

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def default_config(dataset_kind):
    """Baseline configuration for a dataset kind, before file/flag overrides."""
    if dataset_kind == "omniglot":
        return RunConfig(
            dataset=DatasetConfig(kind="omniglot"),
            variant="omniglot",
            metric=MetricConfig(kind=LEAKY_SQUARED_EUCLIDEAN, s=0.0, r=0.01),
            train_shape=EpisodeShape(60, 1, 5),
            eval_shape=EpisodeShape(20, 1, 5),
        )
    if dataset_kind == "image_folder":
        return RunConfig(
            dataset=DatasetConfig(kind="image_folder"),
            variant="standard",
            metric=MetricConfig(kind=LEAKY_SQUARED_EUCLIDEAN, s=4.0, r=0.01),
            train_shape=EpisodeShape(30, 1, 15),
            eval_shape=EpisodeShape(5, 1, 15),
        )
    if dataset_kind == "synthetic":
        return RunConfig(
            dataset=DatasetConfig(
                kind="synthetic",
                synthetic=SyntheticSpec(
                    n_classes=20, dim=16, per_class=20, std=0.1, seed=0
                ),
            ),
            variant="identity",
            metric=MetricConfig(kind=SQUARED_EUCLIDEAN),
            budget=BudgetConfig(train_episodes=200, eval_episodes=200),
            validate_every=50,
            val_episodes=50,
        )
    raise ConfigError(f"dataset.kind: {dataset_kind!r} is not one of {DATASET_KINDS}")


def _check_fields(d, cls, path):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown field")


def _shape_from_dict(d, path):
    _check_fields(d, EpisodeShape, path)
    try:
        shape = EpisodeShape(**{k: int(v) for k, v in d.items()})
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for name in ("n_way", "k_shot", "q_query"):
        if getattr(shape, name) < 1:
            raise ConfigError(f"{path}.{name}: must be >= 1, got {getattr(shape, name)}")
    return shape


def from_dict(d):
    """Build and validate a :class:`RunConfig` from a plain dict."""
    _check_fields(d, RunConfig, "config")
    cfg = RunConfig()

    ds = dict(d.get("dataset", {}))
    _check_fields(ds, DatasetConfig, "dataset")
    synth = ds.pop("synthetic", None)
    if synth is not None:
        _check_fields(synth, SyntheticSpec, "dataset.synthetic")
        try:
            synth = SyntheticSpec(**synth)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dataset.synthetic: {exc}") from exc
    cfg.dataset = DatasetConfig(synthetic=synth, **ds)
    if cfg.dataset.kind not in DATASET_KINDS:
        raise ConfigError(
            f"dataset.kind: {cfg.dataset.kind!r} is not one of {DATASET_KINDS}"
        )
    if cfg.dataset.kind == "synthetic" and cfg.dataset.synthetic is None:
        raise ConfigError("dataset.synthetic: required when dataset.kind is 'synthetic'")

    if "metric" in d:
        _check_fields(d["metric"], MetricConfig, "metric")
        cfg.metric = MetricConfig(**d["metric"])  # validates kind/s/r
    if "train_shape" in d:
        cfg.train_shape = _shape_from_dict(d["train_shape"], "train_shape")
    if "eval_shape" in d:
        cfg.eval_shape = _shape_from_dict(d["eval_shape"], "eval_shape")
    if "optimizer" in d:
        _check_fields(d["optimizer"], OptimizerConfig, "optimizer")
        cfg.optimizer = OptimizerConfig(**d["optimizer"])
        if cfg.optimizer.lr < 0:
            raise ConfigError(f"optimizer.lr: must be >= 0, got {cfg.optimizer.lr}")
        if cfg.optimizer.halve_every < 1:
            raise ConfigError(
                f"optimizer.halve_every: must be >= 1, got {cfg.optimizer.halve_every}"
            )
    if "budget" in d:
        _check_fields(d["budget"], BudgetConfig, "budget")
        cfg.budget = BudgetConfig(**d["budget"])
        for name in ("train_episodes", "eval_episodes"):
            if getattr(cfg.budget, name) < 0:
                raise ConfigError(f"budget.{name}: must be >= 0")

    cfg.variant = d.get("variant", cfg.variant)
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant: {cfg.variant!r} is not one of {VARIANTS}")
    cfg.validate_every = int(d.get("validate_every", cfg.validate_every))
    cfg.val_episodes = int(d.get("val_episodes", cfg.val_episodes))
    cfg.seed = int(d.get("seed", cfg.seed))
    snaps = d.get("snapshot_iterations", [])
    cfg.snapshot_iterations = [int(x) for x in snaps]
    if len(set(cfg.snapshot_iterations)) != len(cfg.snapshot_iterations):
        raise ConfigError("snapshot_iterations: duplicate entries")
    cfg.out_dir = str(d.get("out_dir", cfg.out_dir))
    return cfg


def load_config_file(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    return raw


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(cfg.to_json())


def roundtrip(cfg):
    """parse(serialize(config)); used by tests to pin the round-trip contract."""
    return from_dict(json.loads(cfg.to_json()))
