"""N-way K-shot episodes: sampling, prototypes, the episodic loss, training.

An episode is one self-contained classification task: ``n_way`` classes, each
contributing ``k_shot`` support examples (averaged into prototypes) and
``q_query`` query examples (classified against the prototypes by softmax over
negative distances). The loss is the mean negative log-probability of the
correct class over the queries.

The per-query gradient of the loss with respect to each distance has the
closed form ``p - 1{correct}``; :func:`episode_loss` reports those values and
also keeps the distance matrix on the tape, so the same quantities are
obtainable through reverse-mode differentiation. Tests hold the two routes to
1e-10 agreement.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics, metrics
from .errors import CapacityError, ShapeError, TrainingDiverged
from .tensor import Tensor, accumulate_grad, add_const, from_op, neg, pick_rows, sub, sum_rows, texp, tlog, tmean


@dataclass
class Episode:
    """One sampled N-way K-shot task. Labels are episode-local, in [0, n_way)."""

    n_way: int
    k_shot: int
    q_query: int
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    class_ids: np.ndarray  # dataset-level class id per episode label


@dataclass
class DistanceMatrix:
    """Pairwise query-to-prototype distances under a given metric config."""

    values: Tensor  # [Q, K], the tensor fed to the softmax (post-transform)
    metric: metrics.MetricConfig


@dataclass
class EpisodeResult:
    loss: Tensor  # scalar, still attached to the tape
    probs: np.ndarray  # [Q, K]
    distance_grads: np.ndarray  # [Q, K] closed-form p - 1{correct}, pre-averaging
    accuracy: float
    distances: DistanceMatrix
    base_distances: np.ndarray  # [Q, K] pre-transform (raw squared Euclidean / cosine)
    neg_distances: Tensor = None  # the logit node (-distances); grad = distance_grads / Q


def compute_prototypes(support_embeddings, labels, n_way):
    """Tape op: per-class mean of support embeddings -> ``[n_way, D]``.

    Every class must contribute at least one support embedding.
    """
    if support_embeddings.ndim != 2:
        raise ShapeError(
            f"compute_prototypes expects [N, D] embeddings, got {support_embeddings.shape}"
        )
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (support_embeddings.shape[0],):
        raise ShapeError(
            f"compute_prototypes: {labels.shape[0] if labels.ndim else 0} labels for "
            f"{support_embeddings.shape[0]} embeddings"
        )
    counts = np.bincount(labels, minlength=n_way)
    if counts.size > n_way:
        raise ShapeError(f"compute_prototypes: label {labels.max()} >= n_way {n_way}")
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise CapacityError(f"compute_prototypes: class {missing[0]} has no support examples")

    # Averaging matrix M[k, i] = 1/|S_k| if label_i == k; prototypes = M @ E.
    m = np.zeros((n_way, labels.size))
    m[labels, np.arange(labels.size)] = 1.0 / counts[labels]
    out = m @ support_embeddings.data

    def backward(g):
        accumulate_grad(support_embeddings, m.T @ g)

    return from_op(out, (support_embeddings,), backward)


def episode_loss(query_embeddings, prototypes, labels, metric):
    """Episodic loss, probabilities, and closed-form distance gradients.

    ``distance_grads[q, j]`` is the closed form ``p[q, j] - 1{labels[q] == j}``
    per query, before the 1/N averaging: the gradient of the per-query loss
    with respect to the negated distance fed to the softmax (so the one
    negative entry per row sits at the true class, and saturated predictions
    drive every entry to 0 or -1). The loss itself is built from primitive
    tape ops (exp / log / row-sum / pick), so after ``loss.backward()`` the
    ``neg_distances`` node carries a genuine reverse-mode gradient equal to
    ``distance_grads / Q``; tests hold the two routes to 1e-10.
    """
    labels = np.asarray(labels, dtype=np.intp)
    q = query_embeddings.shape[0]
    if labels.shape != (q,):
        raise ShapeError(f"episode_loss: {labels.shape} labels for {q} queries")
    if not np.all(np.isfinite(query_embeddings.data)) or not np.all(
        np.isfinite(prototypes.data)
    ):
        raise ValueError("episode_loss: non-finite embedding values")
    k = prototypes.shape[0]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ShapeError(f"episode_loss: labels must lie in [0, {k})")

    base, transformed = metrics.metric_distances(query_embeddings, prototypes, metric)

    # Stable log-softmax over negative distances: shift each row so the
    # smallest distance maps to exponent zero. The shift is a constant on the
    # tape; it cancels exactly in the normalized probabilities.
    neg_d = neg(transformed)
    shift = transformed.data.min(axis=1, keepdims=True)
    z = add_const(neg_d, shift)  # z = shift - d, row max exactly 0
    ez = texp(z)
    log_norm = tlog(sum_rows(ez))
    per_query_nll = sub(log_norm, pick_rows(z, labels))
    loss = tmean(per_query_nll)

    probs = metrics.softmax_over_neg_distances(transformed.data)
    grads = probs.copy()
    grads[np.arange(q), labels] -= 1.0
    accuracy = float(np.mean(np.argmin(transformed.data, axis=1) == labels))

    return EpisodeResult(
        loss=loss,
        probs=probs,
        distance_grads=grads,
        accuracy=accuracy,
        distances=DistanceMatrix(values=transformed, metric=metric),
        base_distances=base.data,
        neg_distances=neg_d,
    )


def sample_episode(split, n_way, k_shot, q_query, rng):
    """Draw one episode from a dataset split, without replacement at both levels.

    Classes are sampled without replacement, then ``k_shot + q_query`` samples
    per class without replacement; deterministic for a given ``rng`` state.
    """
    n_classes = split.n_classes
    if n_way > n_classes:
        raise CapacityError(
            f"sample_episode: requested {n_way}-way but split has {n_classes} classes"
        )
    need = k_shot + q_query
    class_idx = rng.choice(n_classes, size=n_way, replace=False)
    support, query = [], []
    for record in (split.classes[i] for i in class_idx):
        n = record.samples.shape[0]
        if n < need:
            raise CapacityError(
                f"sample_episode: class {record.name!r} has {n} samples, "
                f"needs {need} (k_shot + q_query)"
            )
        pick = rng.choice(n, size=need, replace=False)
        support.append(record.samples[pick[:k_shot]])
        query.append(record.samples[pick[k_shot:]])
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        q_query=q_query,
        support=np.concatenate(support, axis=0),
        support_labels=np.repeat(np.arange(n_way), k_shot),
        query=np.concatenate(query, axis=0),
        query_labels=np.repeat(np.arange(n_way), q_query),
        class_ids=np.array([split.classes[i].class_id for i in class_idx]),
    )


def run_episode(embedder, episode, metric, mode):
    """Embed an episode's images and evaluate the episodic loss."""
    n_support = episode.support.shape[0]
    stacked = np.concatenate([episode.support, episode.query], axis=0)
    embeddings = embedder.embed(stacked, mode)

    # Split the embedding tensor into support/query views on the tape.
    def backward_support(g):
        full = np.zeros_like(embeddings.data)
        full[:n_support] = g
        accumulate_grad(embeddings, full)

    def backward_query(g):
        full = np.zeros_like(embeddings.data)
        full[n_support:] = g
        accumulate_grad(embeddings, full)

    support_emb = from_op(embeddings.data[:n_support], (embeddings,), backward_support)
    query_emb = from_op(embeddings.data[n_support:], (embeddings,), backward_query)

    protos = compute_prototypes(support_emb, episode.support_labels, episode.n_way)
    return episode_loss(query_emb, protos, episode.query_labels, metric)


class Adam:
    """Adam with per-step learning-rate override (used for the halving schedule)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p.data -= lr * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class EpisodeShape:
    n_way: int
    k_shot: int
    q_query: int


@dataclass
class TrainSettings:
    """Everything the training loop needs beyond the data and the embedder."""

    metric: metrics.MetricConfig
    train_shape: EpisodeShape
    eval_shape: EpisodeShape
    episodes: int
    lr: float = 1e-3
    lr_halve_every: int = 2000
    validate_every: int = 200
    val_episodes: int = 200
    seed: int = 0


@dataclass
class LogRow:
    episode: int  # 1-based
    loss: float
    train_acc: float
    val_acc: float | None
    wall_ms: float


@dataclass
class TrainResult:
    rows: list[LogRow]
    best_embedder: object
    best_val_acc: float
    final_embedder: object
    snapshots: list = field(default_factory=list)


def evaluate(embedder, split, shape, episodes, metric, rng):
    """Accuracy per evaluation episode (batchnorm in eval mode)."""
    accs = np.empty(episodes)
    for i in range(episodes):
        ep = sample_episode(split, shape.n_way, shape.k_shot, shape.q_query, rng)
        accs[i] = run_episode(embedder, ep, metric, mode="eval").accuracy
    return accs


def train(embedder, train_split, val_split, settings, recorder=None):
    """Episodic training: sample, embed, prototypes, loss, backward, Adam step.

    Validation runs every ``validate_every`` episodes on ``val_episodes``
    fresh episodes from ``val_split`` (batchnorm in eval mode), and the
    best-validation parameter snapshot is retained. A ``recorder`` (see
    :mod:`leakyproto.diagnostics`) captures distance/gradient snapshots before
    the optimizer step of its configured iterations. Identical seeds yield
    bitwise-identical logs.

    Raises :class:`TrainingDiverged` if the loss goes non-finite.
    """
    rng = np.random.default_rng(settings.seed)
    optimizer = Adam(embedder.parameters(), lr=settings.lr)
    rows = []
    best_acc = -1.0
    best_embedder = embedder.snapshot()

    for i in range(settings.episodes):
        t0 = time.perf_counter()
        ep = sample_episode(
            train_split,
            settings.train_shape.n_way,
            settings.train_shape.k_shot,
            settings.train_shape.q_query,
            rng,
        )
        result = run_episode(embedder, ep, settings.metric, mode="train")
        loss_val = result.loss.item()
        if not np.isfinite(loss_val):
            if recorder is not None:
                snap = recorder.capture(i, result, forced=True)
            else:
                snap = diagnostics.snapshot_from_result(i, result)
            err = TrainingDiverged(f"non-finite loss {loss_val} at episode {i}")
            err.snapshot = snap
            raise err
        if recorder is not None and recorder.active_at(i):
            recorder.capture(i, result)
        result.loss.backward()
        lr = settings.lr * 0.5 ** (i // settings.lr_halve_every)
        optimizer.step(lr=lr)
        optimizer.zero_grad()

        val_acc = None
        if (
            val_split is not None
            and settings.validate_every > 0
            and settings.val_episodes > 0
            and (i + 1) % settings.validate_every == 0
        ):
            # Fresh generator per validation round: the validation stream must
            # not perturb the training sample sequence.
            vrng = np.random.default_rng([settings.seed, i + 1])
            accs = evaluate(
                embedder, val_split, settings.eval_shape, settings.val_episodes,
                settings.metric, vrng,
            )
            val_acc = float(accs.mean())
            if val_acc > best_acc:
                best_acc = val_acc
                best_embedder = embedder.snapshot()

        rows.append(
            LogRow(
                episode=i + 1,
                loss=loss_val,
                train_acc=result.accuracy,
                val_acc=val_acc,
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
        )

    if best_acc < 0.0:
        best_embedder = embedder.snapshot()
    return TrainResult(
        rows=rows,
        best_embedder=best_embedder,
        best_val_acc=best_acc,
        final_embedder=embedder,
        snapshots=list(recorder.snapshots) if recorder is not None else [],
    )
