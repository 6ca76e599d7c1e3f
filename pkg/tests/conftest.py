"""Shared test fixtures and the finite-difference gradient oracle."""

import numpy as np
import pytest

from glyphs import make_glyph_corpus


def rel_error(analytic, numeric):
    """Max-norm relative error between an analytic and a numeric gradient."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale


def numeric_grad(make_loss, leaf_data, h=1e-5):
    """Central finite differences of ``make_loss()`` w.r.t. ``leaf_data``.

    ``make_loss`` must rebuild the forward pass from the current contents of
    ``leaf_data`` (leaf tensors share the caller's float64 array, so in-place
    perturbation is visible) and return the scalar loss value.
    """
    grad = np.zeros_like(leaf_data)
    flat = leaf_data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = make_loss()
        flat[i] = orig - h
        fm = make_loss()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(make_graph, leaves, h=1e-5):
    """Analytic-vs-numeric relative error for each leaf of a scalar graph.

    ``make_graph()`` builds the graph from the leaves' current data and
    returns the scalar root. Returns one relative error per leaf.
    """
    for leaf in leaves:
        leaf.grad = None
    root = make_graph()
    root.backward()
    errors = []
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        numeric = numeric_grad(lambda: make_graph().item(), leaf.data, h=h)
        errors.append(rel_error(analytic, numeric))
    for leaf in leaves:
        leaf.grad = None
    return errors


@pytest.fixture(scope="session")
def glyph_corpus(tmp_path_factory):
    """Small procedural stroke-glyph corpus in the alphabet/character layout.

    12 characters x 12 samples: enough for loader mechanics and quick episodic
    runs without touching the heavyweight corpus used by the acceptance suite.
    """
    root = tmp_path_factory.mktemp("glyphs_small")
    characters = make_glyph_corpus(root, n_chars=12, samples_per_char=12, seed=11)
    return root, characters


@pytest.fixture(scope="session")
def glyph_corpus_large(tmp_path_factory):
    """Corpus sized for the desk-scale training criterion: 80 characters
    (320 classes after rotation), 20 samples each."""
    root = tmp_path_factory.mktemp("glyphs_large")
    characters = make_glyph_corpus(root, n_chars=80, samples_per_char=20, seed=7)
    return root, characters
