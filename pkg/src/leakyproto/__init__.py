"""Few-shot classification by softmax over distances to class prototypes.

The package provides a float64 tensor core with reverse-mode automatic
differentiation, pluggable distance metrics (squared Euclidean, a leaky
compressed variant, cosine), the episodic prototype loss, a 4-block
convolutional embedding network, dataset loaders, and diagnostics that
quantify how distance explosion at random initialization saturates the
softmax and sparsifies the distance gradients.
"""

from .data import DatasetSplit, SyntheticSpec, load_image_folder, load_omniglot, synth_gaussian
from .diagnostics import GradSnapshot, Histogram, SnapshotRecorder, grad_histogram, sparsity_index
from .embednet import ConvEmbedder, EmbedNetParams, IdentityEmbedder, embed, init_params
from .episodic import (
    Episode,
    EpisodeResult,
    EpisodeShape,
    TrainSettings,
    compute_prototypes,
    episode_loss,
    run_episode,
    sample_episode,
    train,
)
from .metrics import (
    MetricConfig,
    cosine_distance,
    leaky_squared_euclidean,
    softmax_over_neg_distances,
    squared_euclidean,
)
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ConvEmbedder",
    "DatasetSplit",
    "Episode",
    "EpisodeResult",
    "EpisodeShape",
    "EmbedNetParams",
    "GradSnapshot",
    "Histogram",
    "IdentityEmbedder",
    "MetricConfig",
    "SnapshotRecorder",
    "SyntheticSpec",
    "Tensor",
    "TrainSettings",
    "compute_prototypes",
    "cosine_distance",
    "embed",
    "episode_loss",
    "grad_histogram",
    "init_params",
    "leaky_squared_euclidean",
    "load_image_folder",
    "load_omniglot",
    "run_episode",
    "sample_episode",
    "softmax_over_neg_distances",
    "sparsity_index",
    "squared_euclidean",
    "synth_gaussian",
    "train",
]
