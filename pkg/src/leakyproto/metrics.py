"""Distance metrics and softmax over negative distances.

Three metrics are supported: plain squared Euclidean distance, a leaky
variant that compresses distances above a threshold ``s`` by a rate
``r`` (identity below the threshold, slope ``r`` above it), and cosine
distance as a comparator. The leaky transform with ``r = 1`` is exactly the
plain squared Euclidean distance; with a small ``r`` it squashes exploded
distances back into the range where the softmax still produces informative
gradients.

Scalar functions here carry their analytic derivatives; the ``pairwise_*``
and ``leaky`` functions are tape ops over :class:`~leakyproto.tensor.Tensor`
batches used by the episodic loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError
from .tensor import Tensor, accumulate_grad, from_op

SQUARED_EUCLIDEAN = "squared_euclidean"
LEAKY_SQUARED_EUCLIDEAN = "leaky_squared_euclidean"
COSINE = "cosine"

_KINDS = (SQUARED_EUCLIDEAN, LEAKY_SQUARED_EUCLIDEAN, COSINE)

# Short aliases accepted on the command line and in config files.
KIND_ALIASES = {
    "euc": SQUARED_EUCLIDEAN,
    "lsed": LEAKY_SQUARED_EUCLIDEAN,
    "cosine": COSINE,
}


@dataclass(frozen=True)
class MetricConfig:
    """Distance-metric selector.

    ``s`` is the leak threshold in squared-distance units, ``r`` the leak
    rate in (0, 1]. Both only take effect for the leaky kind; a config of
    kind ``squared_euclidean`` behaves identically to leaky with ``r = 1``.
    """

    kind: str = SQUARED_EUCLIDEAN
    s: float = 0.0
    r: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(
                f"metric.kind: {self.kind!r} is not one of {', '.join(_KINDS)}"
            )
        if not (0.0 < self.r <= 1.0):
            raise ConfigError(f"metric.r: must lie in (0, 1], got {self.r}")
        if self.s < 0.0:
            raise ConfigError(f"metric.s: must be non-negative, got {self.s}")

    @property
    def applies_leak(self):
        return self.kind == LEAKY_SQUARED_EUCLIDEAN


def resolve_kind(name):
    """Map a CLI alias or full kind name to the canonical kind string."""
    if name in KIND_ALIASES:
        return KIND_ALIASES[name]
    if name in _KINDS:
        return name
    raise ConfigError(
        f"metric.kind: {name!r} is not one of {', '.join(KIND_ALIASES)} "
        f"(or {', '.join(_KINDS)})"
    )


# -- scalar metric functions ---------------------------------------------------


def squared_euclidean(a, b):
    """Sum of squared coordinate differences between two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(
            f"squared_euclidean expects equal-length vectors, got {a.shape} and {b.shape}"
        )
    d = a - b
    return float(d @ d)


def squared_euclidean_grad(a, b):
    """Gradient of ``squared_euclidean(a, b)`` with respect to ``a``: ``2(a - b)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return 2.0 * (a - b)


def leaky_squared_euclidean(d_euc, cfg):
    """Piecewise-linear compression of a squared Euclidean distance.

    Identity below the threshold ``cfg.s``, slope ``cfg.r`` above it. With
    ``r = 1`` the value is returned unchanged (bitwise), making the plain
    metric a special case.
    """
    if d_euc < 0.0:
        raise ValueError(f"leaky_squared_euclidean: distance must be >= 0, got {d_euc}")
    if cfg.r == 1.0 or d_euc <= cfg.s:
        return float(d_euc)
    return float(cfg.s + (d_euc - cfg.s) * cfg.r)


def leaky_squared_euclidean_deriv(d_euc, cfg):
    """Derivative of the leaky transform: 1 up to and including the kink, ``r`` above."""
    if cfg.r == 1.0 or d_euc <= cfg.s:
        return 1.0
    return float(cfg.r)


def cosine_distance(a, b):
    """1 minus the cosine of the angle between two vectors, in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(
            f"cosine_distance expects equal-length vectors, got {a.shape} and {b.shape}"
        )
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= 1e-12 or nb <= 1e-12:
        raise DegenerateInputError(
            f"cosine_distance: vector norms {na:.3e}, {nb:.3e} are too small"
        )
    return float(1.0 - (a @ b) / (na * nb))


def cosine_distance_grad(a, b):
    """Gradient of ``cosine_distance(a, b)`` with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= 1e-12 or nb <= 1e-12:
        raise DegenerateInputError("cosine_distance_grad: near-zero norm")
    dot = a @ b
    return -(b / (na * nb) - dot * a / (na**3 * nb))


def softmax_over_neg_distances(d):
    """Probabilities ``p_i = exp(-d_i) / sum_j exp(-d_j)``, computed stably.

    Shifting every distance by the row minimum keeps the largest exponent at
    exactly 0, so the result never overflows even at distance scales in the
    thousands; the shift cancels in the ratio. The argmax of the result is
    the argmin of the distances.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        raise ShapeError("softmax_over_neg_distances: empty distance vector")
    shift = d.min(axis=-1, keepdims=True)
    e = np.exp(shift - d)
    return e / e.sum(axis=-1, keepdims=True)


# -- tape ops over embedding batches -------------------------------------------


def pairwise_sqeuclidean(queries, prototypes):
    """Tape op: squared Euclidean distance matrix ``[Q, K]``.

    Computed from explicit differences (not the expanded dot-product form),
    so entries are exactly zero iff query equals prototype and are never
    negative.
    """
    if queries.ndim != 2 or prototypes.ndim != 2:
        raise ShapeError(
            f"pairwise_sqeuclidean expects 2-D batches, got {queries.shape} and {prototypes.shape}"
        )
    if queries.shape[1] != prototypes.shape[1]:
        raise ShapeError(
            f"pairwise_sqeuclidean: dimension mismatch {queries.shape[1]} vs {prototypes.shape[1]}"
        )
    diff = queries.data[:, None, :] - prototypes.data[None, :, :]
    out = np.einsum("qkd,qkd->qk", diff, diff)

    def backward(g):
        gd = 2.0 * g[:, :, None] * diff
        accumulate_grad(queries, gd.sum(axis=1))
        accumulate_grad(prototypes, -gd.sum(axis=0))

    return from_op(out, (queries, prototypes), backward)


def pairwise_cosine(queries, prototypes):
    """Tape op: cosine distance matrix ``[Q, K]``; rejects near-zero vectors."""
    if queries.ndim != 2 or prototypes.ndim != 2:
        raise ShapeError(
            f"pairwise_cosine expects 2-D batches, got {queries.shape} and {prototypes.shape}"
        )
    if queries.shape[1] != prototypes.shape[1]:
        raise ShapeError(
            f"pairwise_cosine: dimension mismatch {queries.shape[1]} vs {prototypes.shape[1]}"
        )
    qn = np.linalg.norm(queries.data, axis=1)
    pn = np.linalg.norm(prototypes.data, axis=1)
    if qn.min(initial=np.inf) <= 1e-12 or pn.min(initial=np.inf) <= 1e-12:
        raise DegenerateInputError("pairwise_cosine: a vector has near-zero norm")
    dots = queries.data @ prototypes.data.T
    inv = 1.0 / (qn[:, None] * pn[None, :])
    out = 1.0 - dots * inv

    def backward(g):
        dcos = -g
        a = dcos * inv
        accumulate_grad(
            queries,
            a @ prototypes.data
            - ((dcos * dots * inv).sum(axis=1) / (qn * qn))[:, None] * queries.data,
        )
        accumulate_grad(
            prototypes,
            a.T @ queries.data
            - ((dcos * dots * inv).sum(axis=0) / (pn * pn))[:, None] * prototypes.data,
        )

    return from_op(out, (queries, prototypes), backward)


def leaky(distances, cfg):
    """Tape op: apply the leaky compression elementwise to a distance tensor.

    With ``r = 1`` the input values pass through bitwise unchanged; otherwise
    entries above ``s`` become ``s + (d - s) * r``. The transform is strictly
    increasing, so argmin ordering is preserved. Derivative at the kink is 1
    (the left branch wins).
    """
    if cfg.r == 1.0:

        def backward_identity(g):
            accumulate_grad(distances, g)

        return from_op(distances.data, (distances,), backward_identity)

    mask = distances.data > cfg.s
    out = np.where(mask, cfg.s + (distances.data - cfg.s) * cfg.r, distances.data)
    slope = np.where(mask, cfg.r, 1.0)

    def backward(g):
        accumulate_grad(distances, g * slope)

    return from_op(out, (distances,), backward)


def metric_distances(queries, prototypes, cfg):
    """Base and metric-transformed distance tensors for a query/prototype batch.

    Returns ``(base, transformed)``; for the squared-Euclidean family the base
    is the raw squared Euclidean matrix, for cosine it is the cosine matrix.
    ``transformed`` is the tensor actually fed to the softmax (identical to
    ``base`` unless the leaky kind is selected).
    """
    if cfg.kind == COSINE:
        base = pairwise_cosine(queries, prototypes)
        return base, base
    base = pairwise_sqeuclidean(queries, prototypes)
    if cfg.applies_leak:
        return base, leaky(base, cfg)
    return base, base
