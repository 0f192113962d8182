"""Factor-wise contrastive objectives over edge-dropped graph views.

Two self-supervised signals: node discrimination matches a node's per-factor
embedding across two independently edge-dropped views of the training graph
against embeddings of other nodes; edge discrimination matches an
interaction's per-factor feature with its own review's factor projection
against projections from other interactions.

Both losses take the objective literally: mean(-log D(positive)) plus
mean(+log D(negative)), with the discriminator output clamped away from
{0, 1} so the second term stays bounded.  A stabilized variant replaces the
negative term with the usual -log(1 - D(negative)).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import RatingGraph
from .validation import check_unit_interval

DISCRIMINATOR_CLAMP = 1e-7


def drop_edges(graph: RatingGraph, p: float, seed: int) -> RatingGraph:
    """Independently remove each edge with probability p (seeded).

    Node vocabularies are untouched; review vectors follow surviving edges.
    """
    check_unit_interval("p", p)
    keep = np.random.default_rng(seed).random(graph.n_edges) >= p
    return graph.subgraph(keep)


def discriminate(a: Tensor, b: Tensor, weight: Tensor) -> Tensor:
    """Bilinear probability-ish score sigmoid(a^T W b), clamped to (0, 1).

    Operates row-wise on (..., c) stacks sharing the last axis with `weight`.
    """
    logits = (ad.matmul(a, weight) * b).sum(axis=-1)
    return ad.clip(ad.sigmoid(logits), DISCRIMINATOR_CLAMP, 1.0 - DISCRIMINATOR_CLAMP)


def _sample_negatives(n: int, cols: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform negatives per (row, col) cell, avoiding self-collision.

    Collisions are redrawn once; cells that collide again are flagged invalid.
    Returns (indices (n, cols), valid mask).
    """
    own = np.broadcast_to(np.arange(n)[:, None], (n, cols))
    neg = rng.integers(0, n, size=(n, cols))
    collide = neg == own
    if collide.any():
        neg = np.where(collide, rng.integers(0, n, size=(n, cols)), neg)
        collide = neg == own
    return neg, ~collide


def _contrast(anchor: Tensor, positive: Tensor, weight: Tensor,
              rng: np.random.Generator, stabilized: bool) -> Tensor:
    """Mean over (row, factor) cells of -log D(pos) + log D(neg).

    Negatives are other rows of `positive`, one per cell.  A cell whose
    redrawn negative still self-collides falls back to its own positive pair,
    so its two log terms cancel exactly and the cell contributes zero; this
    keeps the loss identically zero at the symmetric point regardless of
    sampling.  The stabilized variant swaps the negative term for
    -log(1 - D(neg)) and zeroes collided cells via a mask instead.
    """
    n, k, c = anchor.shape
    pos = discriminate(anchor, positive, weight)
    neg_idx, valid = _sample_negatives(n, k, rng)
    own = np.broadcast_to(np.arange(n)[:, None], (n, k))
    idx = np.where(valid, neg_idx, own)
    flat = (idx * k + np.arange(k)[None, :]).ravel()
    neg_rows = ad.gather_rows(positive.reshape(n * k, c), flat).reshape(n, k, c)
    neg = discriminate(anchor, neg_rows, weight)
    if stabilized:
        mask = Tensor(valid, dtype=anchor.dtype)
        cells = -ad.log(pos) - ad.log(1.0 - neg) * mask
    else:
        cells = ad.log(neg) - ad.log(pos)
    return cells.mean()


def node_discrimination_loss(u1: Tensor, u2: Tensor, v1: Tensor, v2: Tensor,
                             w_user: Tensor, w_item: Tensor,
                             rng: np.random.Generator,
                             holistic: bool = False, stabilized: bool = False) -> Tensor:
    """FND: user-side plus item-side contrastive losses across two views.

    Inputs are the layer-combined (n, K, d/K) embeddings of each view.  The
    holistic variant concatenates the factor chunks and discriminates whole
    vectors.
    """
    if holistic:
        u1, u2 = (t.reshape(t.shape[0], 1, -1) for t in (u1, u2))
        v1, v2 = (t.reshape(t.shape[0], 1, -1) for t in (v1, v2))
    user_loss = _contrast(u1, u2, w_user, rng, stabilized)
    item_loss = _contrast(v1, v2, w_item, rng, stabilized)
    return user_loss + item_loss


def edge_discrimination_loss(features: Tensor, review_factors: Tensor,
                             w_fed: Tensor, rng: np.random.Generator,
                             holistic_reviews: np.ndarray | None = None,
                             stabilized: bool = False) -> Tensor:
    """FED: interaction features vs. their own review projections.

    `features` are the (E, K, d/K) interaction features of the train edges;
    negatives are other edges' review projections, sampled uniformly from the
    same edge set.  Passing `holistic_reviews` (raw (E, d) review vectors)
    switches to whole-vector discrimination against unprojected reviews.
    """
    n = features.shape[0]
    if n < 2:
        raise ValueError("edge discrimination needs at least 2 edges")
    if holistic_reviews is not None:
        features = features.reshape(n, 1, -1)
        reviews = Tensor(holistic_reviews, dtype=features.dtype).reshape(n, 1, -1)
    else:
        reviews = review_factors
    return _contrast(features, reviews, w_fed, rng, stabilized)
