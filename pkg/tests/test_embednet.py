"""Embedding network tests: shape theorems, init conventions, checkpoint format."""

import numpy as np
import pytest

from leakyproto import embednet as E
from leakyproto import tensor as T
from leakyproto.errors import ShapeError


def test_omniglot_variant_yields_576():
    rng = np.random.default_rng(0)
    params = E.init_params("omniglot", 1, rng)
    out = E.embed(params, rng.uniform(0, 1, (2, 1, 28, 28)), "train")
    assert out.shape == (2, 576)


def test_standard_variant_yields_1600():
    rng = np.random.default_rng(1)
    params = E.init_params("standard", 3, rng)
    out = E.embed(params, rng.uniform(0, 1, (2, 3, 84, 84)), "train")
    assert out.shape == (2, 1600)


@pytest.mark.parametrize("batch", [1, 3, 5])
def test_shape_theorem_holds_for_any_batch_and_params(batch):
    rng = np.random.default_rng(batch)
    params = E.init_params("omniglot", 1, rng)
    for blk in params.blocks:  # arbitrary parameter values, same shapes
        blk.conv_w.data *= rng.uniform(0.1, 3.0)
    out = E.embed(params, rng.normal(size=(batch, 1, 28, 28)), "eval")
    assert out.shape == (batch, 576)


def test_init_is_deterministic_per_seed():
    a = E.init_params("omniglot", 1, np.random.default_rng(42))
    b = E.init_params("omniglot", 1, np.random.default_rng(42))
    for ba, bb in zip(a.blocks, b.blocks):
        assert ba.conv_w.data.tobytes() == bb.conv_w.data.tobytes()


def test_init_conventions():
    params = E.init_params("standard", 3, np.random.default_rng(7))
    c_in = 3
    for blk in params.blocks:
        bound = np.sqrt(6.0 / (c_in * 9))
        assert np.abs(blk.conv_w.data).max() <= bound
        assert np.array_equal(blk.conv_b.data, np.zeros(64))
        assert np.array_equal(blk.gamma.data, np.ones(64))
        assert np.array_equal(blk.beta.data, np.zeros(64))
        assert np.array_equal(blk.bn_state.running_mean, np.zeros(64))
        assert np.array_equal(blk.bn_state.running_var, np.ones(64))
        c_in = 64


def test_embed_rejects_wrong_spatial_size():
    rng = np.random.default_rng(2)
    params = E.init_params("omniglot", 1, rng)
    with pytest.raises(ShapeError):
        E.embed(params, np.zeros((1, 1, 32, 32)), "eval")
    with pytest.raises(ShapeError):
        E.embed(params, np.zeros((1, 3, 28, 28)), "eval")


def test_eval_mode_is_pure_function():
    rng = np.random.default_rng(3)
    params = E.init_params("omniglot", 1, rng)
    x = rng.uniform(0, 1, (2, 1, 28, 28))
    first = E.embed(params, x, "eval").data
    second = E.embed(params, x, "eval").data
    assert first.tobytes() == second.tobytes()


def test_train_mode_updates_running_stats_eval_does_not():
    rng = np.random.default_rng(4)
    params = E.init_params("omniglot", 1, rng)
    x = rng.uniform(0, 1, (2, 1, 28, 28))
    before = params.blocks[0].bn_state.running_mean.copy()
    E.embed(params, x, "eval")
    assert np.array_equal(params.blocks[0].bn_state.running_mean, before)
    E.embed(params, x, "train")
    assert not np.array_equal(params.blocks[0].bn_state.running_mean, before)


def test_random_init_distances_grow_with_dimension():
    # the distance-scale premise behind the sparse-gradient regime: record the
    # mean pairwise squared Euclidean distance at random init (no fixed target)
    rng = np.random.default_rng(5)
    means = {}
    for variant, channels, size in (("omniglot", 1, 28), ("standard", 3, 84)):
        params = E.init_params(variant, channels, rng)
        x = rng.uniform(0, 1, (8, channels, size, size))
        emb = E.embed(params, x, "train").data
        diffs = emb[:, None, :] - emb[None, :, :]
        d = (diffs**2).sum(-1)
        means[variant] = d[np.triu_indices(8, 1)].mean()
        assert np.isfinite(means[variant]) and means[variant] > 0
    # 1600-dim embeddings sit at a larger distance scale than 576-dim ones
    assert means["standard"] > means["omniglot"]


def test_identity_embedder_passthrough():
    emb = E.IdentityEmbedder()
    x = np.arange(12, dtype=np.float64).reshape(3, 4)
    out = emb.embed(x, "train")
    assert np.array_equal(out.data, x)
    assert emb.parameters() == []


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    params = E.init_params("standard", 3, rng)
    # perturb stats so the round trip covers non-initial values
    E.embed(params, rng.uniform(0, 1, (2, 3, 84, 84)), "train")
    path = tmp_path / "net.ckpt"
    E.save_checkpoint(params, path)
    loaded = E.load_checkpoint(path)
    assert loaded.variant == params.variant
    assert loaded.in_channels == params.in_channels
    for a, b in zip(params.blocks, loaded.blocks):
        assert a.conv_w.data.tobytes() == b.conv_w.data.tobytes()
        assert a.conv_b.data.tobytes() == b.conv_b.data.tobytes()
        assert a.gamma.data.tobytes() == b.gamma.data.tobytes()
        assert a.beta.data.tobytes() == b.beta.data.tobytes()
        assert a.bn_state.running_mean.tobytes() == b.bn_state.running_mean.tobytes()
        assert a.bn_state.running_var.tobytes() == b.bn_state.running_var.tobytes()
    # and the file itself re-saves identically
    path2 = tmp_path / "net2.ckpt"
    E.save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError):
        E.load_checkpoint(path)


def test_omniglot_spatial_trace():
    # 28 -> 14 -> 7 -> 3 with the final block unpooled at 3x3: 64*3*3 = 576
    rng = np.random.default_rng(8)
    params = E.init_params("omniglot", 1, rng)
    x = T.Tensor(rng.uniform(0, 1, (1, 1, 28, 28)))
    sizes = []
    for i, blk in enumerate(params.blocks):
        x = T.relu(T.batchnorm2d(T.conv2d(x, blk.conv_w, blk.conv_b), blk.gamma, blk.beta, blk.bn_state, "eval"))
        if i < 3:
            x = T.maxpool2x2(x)
        sizes.append(x.shape[2])
    assert sizes == [14, 7, 3, 3]
