"""Gradient-sparsity diagnostics: snapshots, histograms, sparsity index, export.

At the start of training, softmax over exploded squared Euclidean distances
pushes almost every per-query distance gradient to 0 or -1, so the learning
signal carries little per-sample information. This module captures the raw
distance and gradient values at selected training iterations, summarizes them
as histograms (the gradient histogram uses the ``log10(|g| + 1e-5)`` transform
so exact zeros land at -5), and reduces each snapshot to a single sparsity
index: the fraction of gradient entries within ``tau`` of the saturated values
0 and +-1.

Exports are plain CSV plus optional static SVG bar charts; both are
byte-deterministic for a fixed run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import MetricConfig

GRAD_BIAS = 1e-5
GRAD_HIST_RANGE = (-5.0, 0.01)
DEFAULT_BINS = 60
DEFAULT_TAU = 1e-4

TRANSFORM_IDENTITY = "identity"
TRANSFORM_LOG10_ABS_BIASED = "log10_abs_biased"


@dataclass
class GradSnapshot:
    """Distances and per-query distance gradients of one training iteration.

    ``dist_euc`` holds the pre-transform distances, ``dist_metric`` the values
    actually fed to the softmax; both are kept so exploded and compressed
    scales can be compared. ``grad_values`` are the closed-form per-query
    gradients, all in [-1, 1].
    """

    iteration: int
    dist_euc: np.ndarray
    dist_metric: np.ndarray
    grad_values: np.ndarray
    metric: MetricConfig

    def __post_init__(self):
        self.dist_euc = np.asarray(self.dist_euc, dtype=np.float64).ravel()
        self.dist_metric = np.asarray(self.dist_metric, dtype=np.float64).ravel()
        self.grad_values = np.asarray(self.grad_values, dtype=np.float64).ravel()
        if not (
            self.dist_euc.size == self.dist_metric.size == self.grad_values.size
        ):
            raise ValueError(
                "GradSnapshot arrays must have equal length, got "
                f"{self.dist_euc.size}/{self.dist_metric.size}/{self.grad_values.size}"
            )
        if self.grad_values.size and (
            self.grad_values.min() < -1.0 - 1e-12 or self.grad_values.max() > 1.0 + 1e-12
        ):
            raise ValueError("GradSnapshot gradient values must lie in [-1, 1]")


@dataclass
class Histogram:
    bin_edges: np.ndarray  # strictly ascending, len(counts) + 1
    counts: np.ndarray  # non-negative integers summing to the input size
    transform: str


def snapshot_from_result(iteration, result):
    """Build a snapshot from an :class:`~leakyproto.episodic.EpisodeResult`."""
    return GradSnapshot(
        iteration=iteration,
        dist_euc=result.base_distances,
        dist_metric=result.distances.values.data,
        grad_values=result.distance_grads,
        metric=result.distances.metric,
    )


def grad_histogram(snapshot, bins=DEFAULT_BINS):
    """Histogram of ``log10(|g| + 1e-5)`` over fixed range [-5, 0.01].

    A gradient of exactly 0 maps to -5 (the leftmost bin); saturated
    gradients of magnitude 1 map just above 0. Bin count defaults to 60.
    """
    if snapshot.grad_values.size == 0:
        raise ValueError("grad_histogram: empty snapshot")
    if bins < 1:
        raise ValueError(f"grad_histogram: bins must be positive, got {bins}")
    transformed = np.log10(np.abs(snapshot.grad_values) + GRAD_BIAS)
    counts, edges = np.histogram(transformed, bins=bins, range=GRAD_HIST_RANGE)
    return Histogram(bin_edges=edges, counts=counts, transform=TRANSFORM_LOG10_ABS_BIASED)


def distance_histogram(values, bins=DEFAULT_BINS):
    """Identity-transform histogram of distance values (lower edge pinned at 0)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("distance_histogram: empty value array")
    lo = min(0.0, float(values.min()))
    hi = float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return Histogram(bin_edges=edges, counts=counts, transform=TRANSFORM_IDENTITY)


def sparsity_index(snapshot, tau=DEFAULT_TAU):
    """Fraction of gradient entries within ``tau`` of the saturated values {0, +-1}.

    1.0 means every entry is (numerically) 0 or -1: the regime where the
    softmax passes almost no per-sample information back through the
    distances. Non-decreasing in ``tau``.
    """
    if not (0.0 < tau < 0.5):
        raise ConfigError(f"sparsity tau must lie in (0, 0.5), got {tau}")
    g = np.abs(snapshot.grad_values)
    if g.size == 0:
        return 0.0
    return float(np.mean((g <= tau) | (g >= 1.0 - tau)))


class SnapshotRecorder:
    """Training-loop hook that captures snapshots at chosen iterations.

    ``iterations`` are 0-based episode indices; the capture happens before
    that episode's optimizer step, so iteration 0 sees the freshly
    initialized model. ``sink`` (optional) is called with each finished
    snapshot; captured snapshots also stay on ``self.snapshots``. An empty
    iteration list produces a recorder that never fires.
    """

    def __init__(self, iterations, sink=None):
        iterations = [int(i) for i in iterations]
        if len(set(iterations)) != len(iterations):
            raise ConfigError(f"snapshot iterations contain duplicates: {iterations}")
        if any(i < 0 for i in iterations):
            raise ConfigError(f"snapshot iterations must be >= 0: {iterations}")
        self.iterations = tuple(sorted(iterations))
        self._wanted = frozenset(self.iterations)
        self.sink = sink
        self.snapshots = []

    def active_at(self, iteration):
        return iteration in self._wanted

    def capture(self, iteration, result, forced=False):
        """Record a snapshot of ``result``; ``forced`` marks divergence dumps."""
        snap = snapshot_from_result(iteration, result)
        self.snapshots.append(snap)
        if self.sink is not None:
            self.sink(snap)
        return snap


# -- persistence -------------------------------------------------------------------


def write_snapshot_csv(snapshot, path):
    """One row per scalar: ``iteration, kind, value`` with kinds
    grad / dist_euc / dist_metric."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "kind", "value"])
        for kind, values in (
            ("grad", snapshot.grad_values),
            ("dist_euc", snapshot.dist_euc),
            ("dist_metric", snapshot.dist_metric),
        ):
            for v in values:
                writer.writerow([snapshot.iteration, kind, repr(float(v))])


def read_snapshot_csv(path):
    """Inverse of :func:`write_snapshot_csv` (metric config is not stored)."""
    kinds = {"grad": [], "dist_euc": [], "dist_metric": []}
    iteration = 0
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            iteration = int(row["iteration"])
            kinds[row["kind"]].append(float(row["value"]))
    return GradSnapshot(
        iteration=iteration,
        dist_euc=np.array(kinds["dist_euc"]),
        dist_metric=np.array(kinds["dist_metric"]),
        grad_values=np.array(kinds["grad"]),
        metric=MetricConfig(),
    )


def write_histogram_csv(hist, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, count in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(count)])


def write_histogram_svg(hist, path, title="", width=640, height=360):
    """Static SVG bar chart of a histogram; byte-deterministic output."""
    margin = 46
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    n = len(hist.counts)
    peak = max(1, int(hist.counts.max()))
    bar_w = plot_w / n

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{title}</text>',
    ]
    for i, count in enumerate(hist.counts):
        h = plot_h * (int(count) / peak)
        x = margin + i * bar_w
        y = height - margin - h
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{max(bar_w - 1.0, 0.5):.2f}" '
            f'height="{h:.2f}" fill="#3b6ea5"/>'
        )
    axis = (
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>'
    )
    labels = (
        f'<text x="{margin}" y="{height - margin + 16}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11">{hist.bin_edges[0]:.3g}</text>'
        f'<text x="{width - margin}" y="{height - margin + 16}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11">{hist.bin_edges[-1]:.3g}</text>'
        f'<text x="{margin - 6}" y="{margin + 4}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11">{peak}</text>'
        f'<text x="{margin - 6}" y="{height - margin}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11">0</text>'
    )
    parts.extend([axis, labels, "</svg>"])
    Path(path).write_text("\n".join(parts))


class CsvSnapshotSink:
    """Sink that persists each snapshot (values, histograms, SVGs) to a directory."""

    def __init__(self, out_dir, bins=DEFAULT_BINS, svg=True):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.bins = bins
        self.svg = svg
        self.written = []

    def __call__(self, snapshot):
        i = snapshot.iteration
        base = self.out_dir
        write_snapshot_csv(snapshot, base / f"snapshot_{i:04d}.csv")
        ghist = grad_histogram(snapshot, self.bins)
        dhist = distance_histogram(snapshot.dist_metric, self.bins)
        write_histogram_csv(ghist, base / f"hist_grad_{i:04d}.csv")
        write_histogram_csv(dhist, base / f"hist_dist_{i:04d}.csv")
        if self.svg:
            write_histogram_svg(
                ghist, base / f"hist_grad_{i:04d}.svg",
                title=f"log10(|grad| + 1e-5), iteration {i}",
            )
            write_histogram_svg(
                dhist, base / f"hist_dist_{i:04d}.svg",
                title=f"distances fed to softmax, iteration {i}",
            )
        self.written.append(i)
