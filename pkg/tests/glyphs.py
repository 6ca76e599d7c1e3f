"""Procedural stroke-glyph corpus for tests.

Generates small handwriting-like character classes in the standard
``root/alphabet/character/*.png`` layout: each character is a fixed template
of 3-5 random strokes, each sample a jittered rendering of that template.
Dark strokes on a white background, 28x28, so the loaders treat the files
exactly like scanned characters. Fully deterministic per seed.
"""

from pathlib import Path

import numpy as np
from PIL import Image

_SUPER = 2  # supersampling factor for slightly soft stroke edges


def _draw_stroke(canvas, p0, p1, bend, radius):
    """Stamp a quadratic stroke from p0 to p1 (control offset ``bend``)."""
    size = canvas.shape[0]
    n_steps = int(3 * size)
    t = np.linspace(0.0, 1.0, n_steps)[:, None]
    mid = (p0 + p1) / 2.0 + bend
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * mid + t**2 * p1
    yy, xx = np.mgrid[0:size, 0:size]
    for py, px in pts:
        mask = (yy - py) ** 2 + (xx - px) ** 2 <= radius**2
        canvas[mask] = 1.0


def _render(template, jitter_rng, jitter, size=28):
    big = size * _SUPER
    canvas = np.zeros((big, big))
    for p0, p1, bend in template:
        j = jitter_rng.normal(0.0, jitter, size=(3, 2)) * _SUPER
        _draw_stroke(
            canvas,
            p0 * _SUPER + j[0],
            p1 * _SUPER + j[1],
            bend * _SUPER + j[2],
            radius=1.6 * _SUPER / 2,
        )
    img = canvas.reshape(size, _SUPER, size, _SUPER).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def make_glyph_corpus(root, n_chars, samples_per_char, seed, n_alphabets=4, jitter=1.0):
    """Write a glyph corpus under ``root``; returns the character identifiers."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    characters = []
    for idx in range(n_chars):
        alphabet = f"alphabet{idx % n_alphabets:02d}"
        name = f"{alphabet}/character{idx:03d}"
        char_dir = root / name
        char_dir.mkdir(parents=True, exist_ok=True)
        n_strokes = int(rng.integers(3, 6))
        template = []
        for _ in range(n_strokes):
            p0 = rng.uniform(5, 23, size=2)
            p1 = rng.uniform(5, 23, size=2)
            bend = rng.normal(0.0, 4.0, size=2)
            template.append((p0, p1, bend))
        for s in range(samples_per_char):
            img = _render(template, rng, jitter)
            # dark ink on white paper, like the source scans
            pixels = np.round(255.0 * (1.0 - img)).astype(np.uint8)
            Image.fromarray(pixels, mode="L").save(char_dir / f"{s:02d}.png")
        characters.append(name)
    return characters
