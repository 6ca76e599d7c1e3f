"""CLI tests: config resolution, commands, artifacts, exit codes, determinism."""

import json

import numpy as np
import pytest
from PIL import Image

from leakyproto import config as C
from leakyproto import data as D
from leakyproto import embednet as EN
from leakyproto.cli import main
from leakyproto.errors import ConfigError


def _synth_args(out, episodes=12, extra=()):
    return [
        "train",
        "--dataset", "synthetic",
        "--episodes", str(episodes),
        "--val-every", "6",
        "--val-episodes", "5",
        "--out", str(out),
        *extra,
    ]


# -- config handling -----------------------------------------------------------


def test_config_roundtrip_equality():
    for kind in ("omniglot", "image_folder", "synthetic"):
        cfg = C.default_config(kind)
        assert C.roundtrip(cfg) == cfg


def test_unknown_config_field_is_rejected_by_name():
    with pytest.raises(ConfigError, match="not_a_field"):
        C.from_dict({"not_a_field": 1})
    with pytest.raises(ConfigError, match="metric.warp"):
        C.from_dict({"metric": {"kind": "squared_euclidean", "warp": 2}})


def test_flag_precedence_over_file_over_defaults(tmp_path):
    cfg_file = tmp_path / "run.json"
    base = C.default_config("synthetic")
    d = base.to_dict()
    d["seed"] = 3
    d["metric"] = {"kind": "leaky_squared_euclidean", "s": 2.0, "r": 0.5}
    cfg_file.write_text(json.dumps(d))

    out = tmp_path / "o1"
    code = main(_synth_args(out, extra=["--config", str(cfg_file), "--seed", "9", "--r", "0.25"]))
    assert code == 0
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["seed"] == 9  # flag beats file
    assert resolved["metric"]["r"] == 0.25  # flag beats file
    assert resolved["metric"]["s"] == 2.0  # file beats default
    assert resolved["metric"]["kind"] == "leaky_squared_euclidean"


def test_default_metric_settings_per_dataset():
    omni = C.default_config("omniglot")
    assert (omni.metric.kind, omni.metric.s, omni.metric.r) == (
        "leaky_squared_euclidean", 0.0, 0.01,
    )
    img = C.default_config("image_folder")
    assert (img.metric.kind, img.metric.s, img.metric.r) == (
        "leaky_squared_euclidean", 4.0, 0.01,
    )


def test_invalid_metric_r_exits_2(tmp_path):
    code = main(_synth_args(tmp_path / "o", extra=["--metric", "lsed", "--r", "1.5"]))
    assert code == 2


def test_missing_root_exits_2(tmp_path):
    code = main(["train", "--dataset", "omniglot", "--out", str(tmp_path / "o")])
    assert code == 2


def test_nonexistent_root_exits_3(tmp_path):
    code = main(
        ["train", "--dataset", "omniglot", "--root", str(tmp_path / "missing"),
         "--out", str(tmp_path / "o")]
    )
    assert code == 3


# -- train ---------------------------------------------------------------------


def test_train_writes_expected_artifacts(tmp_path):
    out = tmp_path / "run"
    assert main(_synth_args(out)) == 0
    assert (out / "config.json").exists()
    assert (out / "train_log.csv").exists()
    assert (out / "timings.log").exists()
    header = (out / "train_log.csv").read_text().splitlines()[0]
    assert header == "episode,loss,train_acc,val_acc"


def test_train_same_seed_is_byte_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(_synth_args(out1, extra=["--seed", "7"])) == 0
    assert main(_synth_args(out2, extra=["--seed", "7"])) == 0
    for name in ("train_log.csv", "config.json"):
        a = (out1 / name).read_bytes().replace(str(out1).encode(), b"OUT")
        b = (out2 / name).read_bytes().replace(str(out2).encode(), b"OUT")
        assert a == b, name


def test_euc_equals_lsed_with_r_one(tmp_path):
    out1, out2 = tmp_path / "euc", tmp_path / "lsed1"
    assert main(_synth_args(out1, extra=["--metric", "euc", "--seed", "5"])) == 0
    assert main(
        _synth_args(out2, extra=["--metric", "lsed", "--s", "4", "--r", "1.0", "--seed", "5"])
    ) == 0
    assert (out1 / "train_log.csv").read_bytes() == (out2 / "train_log.csv").read_bytes()


def test_train_conv_variant_saves_checkpoints(tmp_path, glyph_corpus):
    root, characters = glyph_corpus
    splits = D.default_character_split(characters)
    paths = D.write_split_files(splits, tmp_path / "splits")
    out = tmp_path / "run"
    code = main(
        [
            "train",
            "--dataset", "omniglot",
            "--root", str(root),
            "--train-split", str(paths["train"]),
            "--val-split", str(paths["val"]),
            "--test-split", str(paths["test"]),
            "--episodes", "4",
            "--n-way", "4", "--k-shot", "1", "--q-query", "2",
            "--eval-n-way", "4", "--eval-k-shot", "1", "--eval-q-query", "2",
            "--val-every", "2", "--val-episodes", "2",
            "--out", str(out),
        ]
    )
    assert code == 0
    assert (out / "best.ckpt").exists()
    assert (out / "final.ckpt").exists()
    params = EN.load_checkpoint(out / "best.ckpt")
    assert params.variant == "omniglot"


# -- eval ----------------------------------------------------------------------


def _noise_character_tree(root, n_chars, per_char, seed=0):
    """Omniglot-layout tree of pure-noise 28x28 characters: no class signal."""
    rng = np.random.default_rng(seed)
    names = []
    for i in range(n_chars):
        name = f"alpha/char{i:03d}"
        d = root / name
        d.mkdir(parents=True)
        for j in range(per_char):
            arr = rng.integers(0, 255, size=(28, 28), dtype=np.uint8)
            Image.fromarray(arr, "L").save(d / f"{j}.png")
        names.append(name)
    return names


def test_eval_untrained_checkpoint_is_at_chance(tmp_path):
    # classes of pure noise: accuracy is chance no matter the embedding
    names = _noise_character_tree(tmp_path / "chars", n_chars=12, per_char=7)
    split_file = tmp_path / "test.txt"
    split_file.write_text("".join(n + "\n" for n in names))
    params = EN.init_params("omniglot", 1, np.random.default_rng(0))
    ckpt = tmp_path / "init.ckpt"
    EN.save_checkpoint(params, ckpt)

    def run(n_way, episodes, out):
        code = main(
            [
                "eval",
                "--dataset", "omniglot",
                "--root", str(tmp_path / "chars"),
                "--test-split", str(split_file),
                "--checkpoint", str(ckpt),
                "--n-way", str(n_way), "--k-shot", "1", "--q-query", "5",
                "--episodes", str(episodes),
                "--out", str(out),
                "--seed", "1",
            ]
        )
        assert code == 0
        summary = (out / "eval_summary.csv").read_text().splitlines()[1].split(",")
        return float(summary[1])

    acc20 = run(20, 60, tmp_path / "e20")
    assert abs(acc20 - 0.05) < 0.02
    acc5 = run(5, 60, tmp_path / "e5")
    assert abs(acc5 - 0.20) < 0.05


def test_eval_variant_mismatch_exits_2(tmp_path):
    names = _noise_character_tree(tmp_path / "chars", n_chars=6, per_char=7)
    split_file = tmp_path / "test.txt"
    split_file.write_text("".join(n + "\n" for n in names))
    params = EN.init_params("standard", 3, np.random.default_rng(0))
    ckpt = tmp_path / "std.ckpt"
    EN.save_checkpoint(params, ckpt)
    code = main(
        [
            "eval",
            "--dataset", "omniglot",
            "--root", str(tmp_path / "chars"),
            "--test-split", str(split_file),
            "--checkpoint", str(ckpt),
            "--n-way", "5", "--k-shot", "1", "--q-query", "2",
            "--episodes", "3",
            "--out", str(tmp_path / "e"),
        ]
    )
    assert code == 2


# -- sweep ----------------------------------------------------------------------


def test_sweep_emits_one_row_per_cell(tmp_path):
    out = tmp_path / "sweep"
    code = main(
        [
            "sweep",
            "--dataset", "synthetic",
            "--episodes", "6",
            "--val-every", "3", "--val-episodes", "4",
            "--s-grid", "0,2,4,8",
            "--r-grid", "0.01",
            "--out", str(out),
        ]
    )
    assert code == 0
    lines = (out / "sweep.csv").read_text().strip().splitlines()
    assert lines[0] == "s,r,val_accuracy"
    assert len(lines) == 5
    assert len(list(out.glob("cell_*"))) == 4


def test_sweep_rejects_invalid_r_grid(tmp_path):
    code = main(
        ["sweep", "--dataset", "synthetic", "--episodes", "2",
         "--s-grid", "0", "--r-grid", "0.0,2.0", "--out", str(tmp_path / "s")]
    )
    assert code == 2


def test_sweep_rejects_empty_grid(tmp_path):
    code = main(["sweep", "--dataset", "synthetic", "--out", str(tmp_path / "s")])
    assert code == 2


# -- diagnose --------------------------------------------------------------------


def test_diagnose_writes_snapshots_histograms_and_sparsity(tmp_path):
    out = tmp_path / "diag"
    code = main(
        [
            "diagnose",
            "--dataset", "synthetic",
            "--snapshots", "0,2,4",
            "--out", str(out),
        ]
    )
    assert code == 0
    assert len(list(out.glob("snapshot_*.csv"))) == 3
    assert len(list(out.glob("hist_grad_*.csv"))) == 3
    assert len(list(out.glob("hist_dist_*.csv"))) == 3
    assert len(list(out.glob("*.svg"))) == 6
    lines = (out / "sparsity.csv").read_text().strip().splitlines()
    assert lines[0].startswith("iteration,")
    assert len(lines) == 4


def test_diagnose_requires_snapshots(tmp_path):
    code = main(["diagnose", "--dataset", "synthetic", "--out", str(tmp_path / "d")])
    assert code == 2
