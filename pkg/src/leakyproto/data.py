"""Dataset ingestion: Omniglot-style trees, generic image folders, synthetic data.

The Omniglot loader expects the ``root/alphabet/character/*.png`` layout and a
split file listing one ``alphabet/character`` identifier per line. Images are
decoded grayscale, resized to 28x28 by area (box) interpolation, inverted so
strokes are bright on a dark background, and normalized to [0, 1]. Every
character is expanded into four classes, one per 90-degree rotation, so the
full dataset's 1623 characters yield 6492 classes (4112 / 688 / 1692 across
the usual train / validation / test character splits).

The image-folder loader handles ``root/class_name/*.png`` layouts (the
miniImageNet shape), resizing to 84x84 RGB with no augmentation. The
synthetic generator produces labeled Gaussian clusters around class means on
a sphere; it is the fast oracle dataset for tests and sanity runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataLoadError

ROTATIONS = (0, 90, 180, 270)

# Character counts of the reference Omniglot split (train / val / test of
# 1623). Used by default_character_split to partition proportionally.
_SPLIT_COUNTS = (1028, 172, 423)


@dataclass
class ClassRecord:
    """One episode-samplable class: all decoded samples of one (character, rotation)."""

    class_id: int
    name: str
    source_character: str
    rotation: int
    samples: np.ndarray  # [n, *sample_shape], float64


@dataclass
class DatasetSplit:
    classes: list[ClassRecord] = field(default_factory=list)
    sample_shape: tuple = ()

    @property
    def n_classes(self):
        return len(self.classes)

    def min_samples_per_class(self):
        return min(c.samples.shape[0] for c in self.classes)


def _decode_image(path, size, mode):
    try:
        with Image.open(path) as img:
            img = img.convert(mode)
            if img.size != (size, size):
                img = img.resize((size, size), Image.Resampling.BOX)
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataLoadError(f"cannot decode image {path}: {exc}") from exc
    return arr


def load_omniglot(root, split, size=28):
    """Load the characters of one partition as a rotation-augmented split.

    ``split`` is either a split-file path (one ``alphabet/character`` per
    line) or an iterable of such identifiers. Returns a :class:`DatasetSplit`
    with ``4 * len(characters)`` classes of shape (1, 28, 28); rotations are
    pixel-exact multiples of 90 degrees. Class ordering follows the sorted
    character list, so the split is independent of filesystem enumeration
    order.
    """
    root = Path(root)
    characters = read_split_file(split) if isinstance(split, (str, Path)) else list(split)
    split = DatasetSplit(sample_shape=(1, size, size))
    class_id = 0
    for character in sorted(characters):
        char_dir = root / character
        if not char_dir.is_dir():
            raise DataLoadError(f"missing character directory: {character}")
        files = sorted(p for p in char_dir.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DataLoadError(f"character {character} has no png images")
        stack = np.empty((len(files), size, size))
        for i, path in enumerate(files):
            # Invert: Omniglot pens are dark on light; strokes become ~1.
            stack[i] = 1.0 - _decode_image(path, size, "L")
        for rotation in ROTATIONS:
            rotated = np.rot90(stack, k=rotation // 90, axes=(1, 2))
            split.classes.append(
                ClassRecord(
                    class_id=class_id,
                    name=f"{character}/rot{rotation:03d}",
                    source_character=character,
                    rotation=rotation,
                    samples=np.ascontiguousarray(rotated[:, None, :, :]),
                )
            )
            class_id += 1
    return split


def load_image_folder(root, split_file=None, size=84):
    """Load a ``root/class_name/*.png|jpg`` tree as an RGB split, no augmentation.

    ``split_file`` (one class name per line) restricts and orders the classes;
    without it, all subdirectories are loaded in sorted order. Images are
    resized to ``size`` x ``size`` and normalized to [0, 1]; shape (3, H, W).
    """
    root = Path(root)
    if split_file is not None:
        names = sorted(read_split_file(split_file))
    else:
        if not root.is_dir():
            raise DataLoadError(f"missing dataset root: {root}")
        names = sorted(p.name for p in root.iterdir() if p.is_dir())
    split = DatasetSplit(sample_shape=(3, size, size))
    for class_id, name in enumerate(names):
        class_dir = root / name
        if not class_dir.is_dir():
            raise DataLoadError(f"missing class directory: {name}")
        files = sorted(
            p for p in class_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
        )
        if not files:
            raise DataLoadError(f"class {name} has no images")
        stack = np.empty((len(files), 3, size, size))
        for i, path in enumerate(files):
            stack[i] = _decode_image(path, size, "RGB").transpose(2, 0, 1)
        split.classes.append(
            ClassRecord(
                class_id=class_id,
                name=name,
                source_character=name,
                rotation=0,
                samples=stack,
            )
        )
    return split


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-cluster dataset: class means uniform on a sphere, iid noise."""

    n_classes: int
    dim: int
    per_class: int
    std: float
    seed: int
    radius: float = 10.0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"SyntheticSpec.dim must be >= 2, got {self.dim}")


def synth_gaussian(spec):
    """Generate a vector-valued split per ``spec``; bitwise-deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    means = rng.standard_normal((spec.n_classes, spec.dim))
    means *= spec.radius / np.linalg.norm(means, axis=1, keepdims=True)
    split = DatasetSplit(sample_shape=(spec.dim,))
    for class_id in range(spec.n_classes):
        noise = rng.standard_normal((spec.per_class, spec.dim))
        split.classes.append(
            ClassRecord(
                class_id=class_id,
                name=f"cluster{class_id:03d}",
                source_character=f"cluster{class_id:03d}",
                rotation=0,
                samples=means[class_id] + spec.std * noise,
            )
        )
    return split


# -- split files -----------------------------------------------------------------


def read_split_file(path):
    """Read one identifier per line; blank lines and '#' comments are skipped."""
    path = Path(path)
    if not path.is_file():
        raise DataLoadError(f"missing split file: {path}")
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out


def discover_characters(root):
    """All ``alphabet/character`` identifiers under an Omniglot-style root, sorted."""
    root = Path(root)
    if not root.is_dir():
        raise DataLoadError(f"missing dataset root: {root}")
    out = []
    for alphabet in sorted(p for p in root.iterdir() if p.is_dir()):
        for character in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            out.append(f"{alphabet.name}/{character.name}")
    return out


def default_character_split(characters):
    """Partition characters into train/val/test with the reference proportions.

    On the full 1623-character dataset this reproduces the 1028 / 172 / 423
    character counts (4112 / 688 / 1692 classes after rotation). For other
    corpus sizes the same proportions are applied to the sorted character
    list. Supply explicit split files instead to reproduce a published
    character-level assignment.
    """
    chars = sorted(characters)
    n = len(chars)
    total = sum(_SPLIT_COUNTS)
    n_train = round(n * _SPLIT_COUNTS[0] / total)
    n_val = round(n * _SPLIT_COUNTS[1] / total)
    return {
        "train": chars[:n_train],
        "val": chars[n_train : n_train + n_val],
        "test": chars[n_train + n_val :],
    }


def write_split_files(splits, out_dir):
    """Write ``{name}.txt`` split files (one identifier per line) into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, chars in splits.items():
        path = out_dir / f"{name}.txt"
        path.write_text("".join(c + "\n" for c in chars))
        paths[name] = path
    return paths
