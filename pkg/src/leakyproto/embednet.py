"""The 4-block convolutional embedding network and its checkpoint format.

Each block is conv3x3(64) -> batchnorm -> relu -> maxpool2x2. Two variants:

* ``omniglot`` — pooling removed on block 4; a 1x28x28 input traces
  28 -> 14 -> 7 -> 3 -> 3 and flattens to a 576-dim embedding.
* ``standard`` — pooling on all four blocks; a 3x84x84 input traces
  84 -> 42 -> 21 -> 10 -> 5 and flattens to 1600 dims.

An ``identity`` embedder is also provided for vector-valued (synthetic)
datasets: it has no parameters and returns its input unchanged, which keeps
the episodic machinery uniform across image and vector data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import (
    BatchNormState,
    Tensor,
    batchnorm2d_nhwc,
    conv2d_nhwc,
    flatten,
    maxpool2x2_nhwc,
    relu,
    transpose_to_nhwc,
)

VARIANT_OMNIGLOT = "omniglot"
VARIANT_STANDARD = "standard"

_FILTERS = 64
_INPUT_SIZE = {VARIANT_OMNIGLOT: 28, VARIANT_STANDARD: 84}
_EMBED_DIM = {VARIANT_OMNIGLOT: 576, VARIANT_STANDARD: 1600}

_CKPT_MAGIC = b"LPEN"
_CKPT_VERSION = 1
_VARIANT_CODES = {VARIANT_OMNIGLOT: 0, VARIANT_STANDARD: 1}
_VARIANT_NAMES = {v: k for k, v in _VARIANT_CODES.items()}


@dataclass
class BlockParams:
    conv_w: Tensor
    conv_b: Tensor
    gamma: Tensor
    beta: Tensor
    bn_state: BatchNormState


@dataclass
class EmbedNetParams:
    """All learnable parameters plus batchnorm running stats, in block order."""

    variant: str
    in_channels: int
    blocks: list[BlockParams] = field(default_factory=list)

    def parameters(self):
        """Learnable tensors in fixed order (conv w/b, gamma, beta per block)."""
        out = []
        for blk in self.blocks:
            out.extend([blk.conv_w, blk.conv_b, blk.gamma, blk.beta])
        return out

    def embed_dim(self):
        return _EMBED_DIM[self.variant]

    def copy(self):
        """Deep copy for best-model snapshots; tape state is not carried over."""
        dup = EmbedNetParams(self.variant, self.in_channels)
        for blk in self.blocks:
            dup.blocks.append(
                BlockParams(
                    Tensor(blk.conv_w.data.copy()),
                    Tensor(blk.conv_b.data.copy()),
                    Tensor(blk.gamma.data.copy()),
                    Tensor(blk.beta.data.copy()),
                    blk.bn_state.copy(),
                )
            )
        return dup


def init_params(variant, channels, rng):
    """Fresh network parameters, deterministic for a given ``rng`` seed.

    Conv weights are He-uniform (bound sqrt(6 / fan_in)), biases zero, gamma
    one, beta zero, running stats mean 0 / var 1.
    """
    if variant not in _INPUT_SIZE:
        raise ValueError(f"unknown embednet variant {variant!r}")
    params = EmbedNetParams(variant, channels)
    c_in = channels
    for _ in range(4):
        fan_in = c_in * 9
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(_FILTERS, c_in, 3, 3))
        params.blocks.append(
            BlockParams(
                Tensor(w),
                Tensor(np.zeros(_FILTERS)),
                Tensor(np.ones(_FILTERS)),
                Tensor(np.zeros(_FILTERS)),
                BatchNormState(_FILTERS),
            )
        )
        c_in = _FILTERS
    return params


def embed(params, images, mode):
    """Embed a batch of images: four conv blocks, then flatten to [B, D].

    ``images`` may be a numpy array or a Tensor of shape [B, C, H, W] with the
    spatial size fixed by the variant. ``mode`` selects batchnorm behavior;
    eval mode is a pure function of (params, images). Internally the blocks
    run on channels-last activations (the layout the convolution GEMM is
    fastest in); the flattened feature order is fixed, just permuted relative
    to a channels-first flatten, which no distance can observe.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4:
        raise ShapeError(f"embed expects [B,C,H,W] images, got {x.shape}")
    size = _INPUT_SIZE[params.variant]
    b, c, h, w = x.shape
    if c != params.in_channels:
        raise ShapeError(
            f"embed: {params.variant} variant expects {params.in_channels} channels, got {c}"
        )
    if h != size or w != size:
        raise ShapeError(
            f"embed: {params.variant} variant expects {size}x{size} inputs, got {h}x{w}"
        )
    x = transpose_to_nhwc(x)
    for i, blk in enumerate(params.blocks):
        x = conv2d_nhwc(x, blk.conv_w, blk.conv_b)
        x = batchnorm2d_nhwc(x, blk.gamma, blk.beta, blk.bn_state, mode)
        x = relu(x)
        if params.variant == VARIANT_STANDARD or i < 3:
            x = maxpool2x2_nhwc(x)
    return flatten(x)


class ConvEmbedder:
    """Embedder facade over :class:`EmbedNetParams` used by the training loop."""

    def __init__(self, params):
        self.params = params

    def embed(self, images, mode):
        return embed(self.params, images, mode)

    def parameters(self):
        return self.params.parameters()

    def snapshot(self):
        return ConvEmbedder(self.params.copy())


class IdentityEmbedder:
    """Pass-through embedder for vector datasets; has no parameters."""

    params = None

    def embed(self, vectors, mode):
        x = vectors if isinstance(vectors, Tensor) else Tensor(vectors)
        if x.ndim != 2:
            raise ShapeError(f"identity embedder expects [B, D] vectors, got {x.shape}")
        return x

    def parameters(self):
        return []

    def snapshot(self):
        return self


# -- checkpoint format ----------------------------------------------------------
#
# Little-endian binary layout:
#   bytes 0..3   magic "LPEN"
#   byte  4      format version (1)
#   byte  5      variant code (0 = omniglot, 1 = standard)
#   byte  6      input channel count
#   byte  7      reserved (0)
# then, for blocks 1..4 in order, raw float64 little-endian arrays:
#   conv_w [64, C_b, 3, 3], conv_b [64], gamma [64], beta [64],
#   running_mean [64], running_var [64]
# The layout is fully determined by the header, and a save/load round trip is
# bit-exact.


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(
            struct.pack(
                "<BBBB", _CKPT_VERSION, _VARIANT_CODES[params.variant], params.in_channels, 0
            )
        )
        for blk in params.blocks:
            for arr in (
                blk.conv_w.data,
                blk.conv_b.data,
                blk.gamma.data,
                blk.beta.data,
                blk.bn_state.running_mean,
                blk.bn_state.running_var,
            ):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, variant_code, channels, _ = struct.unpack("<BBBB", fh.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        if variant_code not in _VARIANT_NAMES:
            raise ValueError(f"{path}: unknown variant code {variant_code}")
        variant = _VARIANT_NAMES[variant_code]
        params = EmbedNetParams(variant, channels)
        c_in = channels
        for _ in range(4):
            shapes = [
                (_FILTERS, c_in, 3, 3),
                (_FILTERS,),
                (_FILTERS,),
                (_FILTERS,),
                (_FILTERS,),
                (_FILTERS,),
            ]
            arrays = []
            for shape in shapes:
                n = int(np.prod(shape))
                buf = fh.read(8 * n)
                if len(buf) != 8 * n:
                    raise ValueError(f"{path}: truncated checkpoint")
                arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
            state = BatchNormState(_FILTERS)
            state.running_mean = arrays[4]
            state.running_var = arrays[5]
            params.blocks.append(
                BlockParams(
                    Tensor(arrays[0]),
                    Tensor(arrays[1]),
                    Tensor(arrays[2]),
                    Tensor(arrays[3]),
                    state,
                )
            )
            c_in = _FILTERS
    return params
