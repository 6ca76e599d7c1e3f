"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a contiguous numpy float64 array. Operations build a tape
(a DAG of ``Tensor`` nodes holding backward closures); calling ``backward()``
on a scalar loss walks the tape in reverse topological order and accumulates
``dloss/dx`` into each node's ``grad``. A tensor consumed by several ops
receives the sum of all contributions.

Everything runs in 64-bit floats: the point of this package is gradient
analysis, so precision beats speed. There is no broadcasting beyond the
documented bias/constant additions, no graph optimization, and no views that
outlive an op.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

# Upper bound on im2col buffer size (float64 elements, ~384 MB). Convolutions
# over larger batches are processed in fixed batch chunks so peak memory stays
# bounded; the chunking is deterministic, so results are reproducible.
_COLS_BUDGET = 48_000_000


class Tensor:
    """A dense float64 array with an optional gradient slot.

    ``data`` is the value, ``grad`` (same shape, lazily allocated) accumulates
    the gradient of the scalar loss with respect to each element. Leaf tensors
    are built directly from arrays; op results carry a backward closure and
    references to their parents.
    """

    __slots__ = ("data", "grad", "_prev", "_backward", "_backward_ran")

    def __init__(self, data, _prev=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._prev = tuple(_prev)
        self._backward = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Propagate gradients from this scalar back through the tape.

        Rejects non-scalar roots and a second call on the same root (the tape
        is single-use; rebuild the graph for another pass).
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar root, got shape {self.data.shape}"
            )
        if self._backward_ran:
            raise RuntimeError(
                "backward was already called on this root; rebuild the graph first"
            )
        self._backward_ran = True

        # Iterative DFS post-order: reverse gives a topological order with the
        # root first, so every node's grad is complete before it is consumed.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic sugar (same-shape only; scalars allowed for mul/add) -----

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def from_op(data, parents, backward):
    """Build an op-result tensor: value, parent references, backward closure.

    ``backward`` receives the output gradient array and must push gradients
    into the parents via :func:`accumulate_grad`.
    """
    t = Tensor(data, _prev=parents)
    t._backward = backward
    return t


def accumulate_grad(t, g):
    """Add ``g`` into ``t.grad``, allocating the slot on first touch."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"{opname}: operand shapes {a.data.shape} and {b.data.shape} differ"
        )


# -- elementwise and reduction primitives ------------------------------------


def add(a, b):
    """Elementwise sum. Python scalars are promoted; arrays must match shapes."""
    if isinstance(b, (int, float)):
        ad = a.data

        def backward(g):
            accumulate_grad(a, g)

        return from_op(ad + float(b), (a,), backward)
    b = _as_tensor(b)
    _check_same_shape(a, b, "add")

    def backward(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return from_op(a.data + b.data, (a, b), backward)


def sub(a, b):
    b = _as_tensor(b)
    _check_same_shape(a, b, "sub")

    def backward(g):
        accumulate_grad(a, g)
        accumulate_grad(b, -g)

    return from_op(a.data - b.data, (a, b), backward)


def mul(a, b):
    """Elementwise product, or scaling by a python number."""
    if isinstance(b, (int, float)):
        c = float(b)

        def backward(g):
            accumulate_grad(a, g * c)

        return from_op(a.data * c, (a,), backward)
    b = _as_tensor(b)
    _check_same_shape(a, b, "mul")

    def backward(g):
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return from_op(a.data * b.data, (a, b), backward)


def neg(a):
    def backward(g):
        accumulate_grad(a, -g)

    return from_op(-a.data, (a,), backward)


def add_const(a, c):
    """Add a constant array (broadcast against ``a``); no gradient flows to ``c``.

    The result keeps ``a``'s shape, so the only broadcasting on the tape is of
    constants (and the conv bias) onto an existing operand.
    """
    out = a.data + np.asarray(c, dtype=np.float64)
    if out.shape != a.data.shape:
        raise ShapeError(
            f"add_const: constant of shape {np.shape(c)} does not broadcast onto {a.data.shape}"
        )

    def backward(g):
        accumulate_grad(a, g)

    return from_op(out, (a,), backward)


def texp(a):
    out = np.exp(a.data)

    def backward(g):
        accumulate_grad(a, g * out)

    return from_op(out, (a,), backward)


def tlog(a):
    def backward(g):
        accumulate_grad(a, g / a.data)

    return from_op(np.log(a.data), (a,), backward)


def tsum(a):
    def backward(g):
        accumulate_grad(a, np.full_like(a.data, float(g)))

    return from_op(a.data.sum(), (a,), backward)


def tmean(a):
    n = a.data.size

    def backward(g):
        accumulate_grad(a, np.full_like(a.data, float(g) / n))

    return from_op(a.data.mean(), (a,), backward)


def sum_rows(a):
    """Row sums of a 2-D tensor: ``[Q, K] -> [Q]``."""
    if a.ndim != 2:
        raise ShapeError(f"sum_rows expects a 2-D tensor, got {a.data.shape}")

    def backward(g):
        accumulate_grad(a, np.repeat(g[:, None], a.data.shape[1], axis=1))

    return from_op(a.data.sum(axis=1), (a,), backward)


def pick_rows(a, idx):
    """Select one entry per row: ``out[q] = a[q, idx[q]]``."""
    if a.ndim != 2:
        raise ShapeError(f"pick_rows expects a 2-D tensor, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (a.data.shape[0],):
        raise ShapeError(
            f"pick_rows: index shape {idx.shape} does not match row count {a.data.shape[0]}"
        )
    rows = np.arange(a.data.shape[0])

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[rows, idx] = g
        accumulate_grad(a, buf)

    return from_op(a.data[rows, idx], (a,), backward)


# -- network layers -----------------------------------------------------------


def _conv_batch_chunks(batch, c9, hw):
    per = max(1, _COLS_BUDGET // max(1, c9 * hw))
    return [(s, min(s + per, batch)) for s in range(0, batch, per)]


def _im2col(xp, n0, n1, h, w):
    """Patch matrix of padded input rows ``[n0:n1]``: shape ``[C*9, n*H*W]``.

    Row index is ``c*9 + di*3 + dj``; column index runs over (image, i, j) in
    row-major order, matching ``weight.reshape(F, C*9)``.
    """
    win = np.lib.stride_tricks.sliding_window_view(xp[n0:n1], (3, 3), axis=(2, 3))
    c = xp.shape[1]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * 9, (n1 - n0) * h * w)


def conv2d(x, weight, bias):
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial size preserved).

    ``x`` is [B, C, H, W], ``weight`` [F, C, 3, 3], ``bias`` [F]. Backward
    produces gradients for all three inputs. Implemented as im2col + one GEMM
    per batch chunk; patch matrices are rebuilt in backward instead of cached,
    so graph memory stays proportional to the activations.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,C,H,W], got {x.data.shape}")
    if weight.ndim != 4 or weight.data.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d weight must be [F,C,3,3], got {weight.data.shape}")
    b_, c, h, w = x.data.shape
    f = weight.data.shape[0]
    if weight.data.shape[1] != c:
        raise ShapeError(
            f"conv2d: input has {c} channels but weight expects {weight.data.shape[1]}"
        )
    if bias.data.shape != (f,):
        raise ShapeError(f"conv2d bias must be [{f}], got {bias.data.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wr = weight.data.reshape(f, c * 9)
    chunks = _conv_batch_chunks(b_, c * 9, h * w)

    out = np.empty((b_, f, h, w))
    for s, e in chunks:
        cols = _im2col(xp, s, e, h, w)
        out[s:e] = (wr @ cols).reshape(f, e - s, h, w).transpose(1, 0, 2, 3)
    out += bias.data[None, :, None, None]

    def backward(g):
        accumulate_grad(bias, g.sum(axis=(0, 2, 3)))
        gw = np.zeros((f, c * 9))
        dxp = np.zeros_like(xp)
        for s, e in chunks:
            cols = _im2col(xp, s, e, h, w)
            gm = g[s:e].transpose(1, 0, 2, 3).reshape(f, (e - s) * h * w)
            gw += gm @ cols.T
            dcols = (wr.T @ gm).reshape(c, 3, 3, e - s, h, w)
            for di in range(3):
                for dj in range(3):
                    dxp[s:e, :, di : di + h, dj : dj + w] += dcols[
                        :, di, dj
                    ].transpose(1, 0, 2, 3)
        accumulate_grad(weight, gw.reshape(f, c, 3, 3))
        accumulate_grad(x, dxp[:, :, 1 : h + 1, 1 : w + 1])

    return from_op(out, (x, weight, bias), backward)


class BatchNormState:
    """Per-channel running statistics for one batchnorm layer.

    Initialized to mean 0 / variance 1, so eval mode before any train step is
    well defined. Momentum 0.1 and epsilon 1e-5 are fixed defaults; the
    running variance update uses the unbiased estimate, normalization inside
    a batch uses the biased one (the usual convention).
    """

    momentum = 0.1
    eps = 1e-5

    def __init__(self, channels):
        self.channels = channels
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def copy(self):
        dup = BatchNormState(self.channels)
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        return dup


def batchnorm2d(x, gamma, beta, state, mode):
    """Per-channel batch normalization over [B, C, H, W].

    Train mode normalizes by batch statistics (requires at least two values
    per channel) and updates ``state`` in place; eval mode normalizes by the
    running statistics. Backward implements the full batch-statistics chain
    rule in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d input must be [B,C,H,W], got {x.data.shape}")
    b_, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: gamma/beta must be [{c}], got {gamma.data.shape}/{beta.data.shape}"
        )
    m = b_ * h * w

    if mode == "train":
        if m < 2:
            raise ShapeError(
                f"batchnorm2d train mode needs at least 2 values per channel, got {m}"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean[None, :, None, None]
        var = np.mean(xc * xc, axis=(0, 2, 3))
        state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * (
            var * (m / (m - 1))
        )
    else:
        mean = state.running_mean
        xc = x.data - mean[None, :, None, None]
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
        accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        dxhat = g * gamma.data[None, :, None, None]
        if mode == "train":
            dx = inv_std[None, :, None, None] * (
                dxhat
                - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
            accumulate_grad(x, dx)
        else:
            accumulate_grad(x, dxhat * inv_std[None, :, None, None])

    return from_op(out, (x, gamma, beta), backward)


def relu(x):
    """max(x, 0); the subgradient at exactly 0 is 0."""
    out = np.maximum(x.data, 0.0)

    def backward(g):
        accumulate_grad(x, g * (x.data > 0.0))

    return from_op(out, (x,), backward)


def maxpool2x2(x):
    """2x2 max pooling, stride 2. Odd extents are floor-truncated (e.g. 21 -> 10).

    Backward routes the gradient to the argmax element of each window only;
    ties go to the first element in row-major window order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 input must be [B,C,H,W], got {x.data.shape}")
    b_, c, h, w = x.data.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2x2: spatial extents {h}x{w} are too small")

    windows = (
        x.data[:, :, : h2 * 2, : w2 * 2]
        .reshape(b_, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b_, c, h2, w2, 4)
    )
    idx = windows.argmax(axis=4)
    out = np.take_along_axis(windows, idx[..., None], axis=4)[..., 0]

    def backward(g):
        dwin = np.zeros((b_, c, h2, w2, 4))
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=4)
        dx = np.zeros_like(x.data)
        dx[:, :, : h2 * 2, : w2 * 2] = (
            dwin.reshape(b_, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b_, c, h2 * 2, w2 * 2)
        )
        accumulate_grad(x, dx)

    return from_op(out, (x,), backward)


def flatten(x):
    """Collapse all non-batch axes: ``[B, ...] -> [B, D]``."""
    if x.ndim < 2:
        raise ShapeError(f"flatten expects a batched tensor, got {x.data.shape}")
    b_ = x.data.shape[0]

    def backward(g):
        accumulate_grad(x, g.reshape(x.data.shape))

    return from_op(x.data.reshape(b_, -1), (x,), backward)


# -- channels-last layer twins --------------------------------------------------
#
# The network layers above use the [B, C, H, W] layout. The *_nhwc twins below
# compute the same functions on [B, H, W, C] activations (weights and stats
# keep their [F, C, 3, 3] / per-channel formats). With the channel axis
# innermost, the im2col patch matrix is assembled from contiguous runs and the
# whole convolution collapses into a single well-shaped GEMM, which is several
# times faster on one core; the embedding network runs on these. Consistency
# with the channels-first ops is pinned by tests.


def _im2col_nhwc(xp, n0, n1, h, w):
    """Patch matrix of padded NHWC rows [n0:n1]: shape [n*H*W, 9*C].

    Column index is ``(di*3 + dj)*C + c``; rows run over (image, i, j).
    """
    n = n1 - n0
    c = xp.shape[3]
    cols = np.empty((n * h * w, 9 * c))
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, k * c : (k + 1) * c] = xp[
                n0:n1, di : di + h, dj : dj + w, :
            ].reshape(n * h * w, c)
            k += 1
    return cols


def conv2d_nhwc(x, weight, bias):
    """3x3 same-convolution on [B, H, W, C] activations; weight is [F, C, 3, 3]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d_nhwc input must be [B,H,W,C], got {x.data.shape}")
    if weight.ndim != 4 or weight.data.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_nhwc weight must be [F,C,3,3], got {weight.data.shape}")
    b_, h, w, c = x.data.shape
    f = weight.data.shape[0]
    if weight.data.shape[1] != c:
        raise ShapeError(
            f"conv2d_nhwc: input has {c} channels but weight expects {weight.data.shape[1]}"
        )
    if bias.data.shape != (f,):
        raise ShapeError(f"conv2d_nhwc bias must be [{f}], got {bias.data.shape}")

    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # wflat[f, (di*3+dj)*C + c] = weight[f, c, di, dj]
    wflat = weight.data.transpose(0, 2, 3, 1).reshape(f, 9 * c)
    chunks = _conv_batch_chunks(b_, 9 * c, h * w)

    out = np.empty((b_, h, w, f))
    for s, e in chunks:
        cols = _im2col_nhwc(xp, s, e, h, w)
        out[s:e] = (cols @ wflat.T).reshape(e - s, h, w, f)
    out += bias.data

    def backward(g):
        accumulate_grad(bias, g.sum(axis=(0, 1, 2)))
        gw = np.zeros((f, 9 * c))
        dxp = np.zeros_like(xp)
        for s, e in chunks:
            cols = _im2col_nhwc(xp, s, e, h, w)
            gm = g[s:e].reshape((e - s) * h * w, f)
            gw += gm.T @ cols
            dcols = gm @ wflat
            k = 0
            for di in range(3):
                for dj in range(3):
                    dxp[s:e, di : di + h, dj : dj + w, :] += dcols[
                        :, k * c : (k + 1) * c
                    ].reshape(e - s, h, w, c)
                    k += 1
        accumulate_grad(weight, gw.reshape(f, 3, 3, c).transpose(0, 3, 1, 2))
        accumulate_grad(x, dxp[:, 1 : h + 1, 1 : w + 1, :])

    return from_op(out, (x, weight, bias), backward)


def batchnorm2d_nhwc(x, gamma, beta, state, mode):
    """Per-channel batch normalization on [B, H, W, C]; same math as batchnorm2d."""
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d_nhwc mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d_nhwc input must be [B,H,W,C], got {x.data.shape}")
    b_, h, w, c = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batchnorm2d_nhwc: gamma/beta must be [{c}], got {gamma.data.shape}/{beta.data.shape}"
        )
    m = b_ * h * w

    if mode == "train":
        if m < 2:
            raise ShapeError(
                f"batchnorm2d_nhwc train mode needs at least 2 values per channel, got {m}"
            )
        mean = x.data.mean(axis=(0, 1, 2))
        var = np.mean(np.square(x.data - mean), axis=(0, 1, 2))
        state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * (
            var * (m / (m - 1))
        )
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    # out = a*x + b with per-channel a, b: two broadcast passes instead of four
    scale = gamma.data * inv_std
    out = x.data * scale + (beta.data - mean * scale)

    def backward(g):
        accumulate_grad(beta, g.sum(axis=(0, 1, 2)))
        xhat = (x.data - mean) * inv_std
        accumulate_grad(gamma, (g * xhat).sum(axis=(0, 1, 2)))
        dxhat = g * gamma.data
        if mode == "train":
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=(0, 1, 2))
                - xhat * (dxhat * xhat).mean(axis=(0, 1, 2))
            )
            accumulate_grad(x, dx)
        else:
            accumulate_grad(x, dxhat * inv_std)

    return from_op(out, (x, gamma, beta), backward)


def transpose_to_nhwc(x):
    """Tape op: [B, C, H, W] -> [B, H, W, C] (used once at the network input)."""
    if x.ndim != 4:
        raise ShapeError(f"transpose_to_nhwc expects [B,C,H,W], got {x.data.shape}")

    def backward(g):
        accumulate_grad(x, np.ascontiguousarray(g.transpose(0, 3, 1, 2)))

    return from_op(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)), (x,), backward)


def maxpool2x2_nhwc(x):
    """2x2 max pooling on [B, H, W, C]; same truncation and tie rules as maxpool2x2."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2_nhwc input must be [B,H,W,C], got {x.data.shape}")
    b_, h, w, c = x.data.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2x2_nhwc: spatial extents {h}x{w} are too small")

    windows = (
        x.data[:, : h2 * 2, : w2 * 2, :]
        .reshape(b_, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b_, h2, w2, 4, c)
    )
    idx = windows.argmax(axis=3)
    out = np.take_along_axis(windows, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        dwin = np.zeros((b_, h2, w2, 4, c))
        np.put_along_axis(dwin, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        dx = np.zeros_like(x.data)
        dx[:, : h2 * 2, : w2 * 2, :] = (
            dwin.reshape(b_, h2, w2, 2, 2, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b_, h2 * 2, w2 * 2, c)
        )
        accumulate_grad(x, dx)

    return from_op(out, (x,), backward)
