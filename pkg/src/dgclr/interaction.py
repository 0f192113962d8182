"""Attention-based interaction: per-factor rating votes fused by attention.

For a (user, item) pair, each factor's chunks are concatenated and passed
through a one-layer ReLU MLP into an interaction feature; a shared weight
vector scores each factor's rating vote, and a temperature softmax over
ReLU-activated attention logits decides how much each factor's vote counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .validation import check_positive


@dataclass
class InteractionHead:
    mlp_w: Tensor     # (2*d/K, d/K)
    mlp_b: Tensor     # (d/K,)
    score_w: Tensor   # (d/K,)
    attn_w: Tensor | None   # (d/K,); None for the single-head variant
    attn_b: Tensor | None   # (1,)


def interaction_features(u_sel: Tensor, v_sel: Tensor, head: InteractionHead) -> Tensor:
    """ReLU MLP over concatenated chunks: (P, K, d/K)."""
    joint = ad.concat([u_sel, v_sel], axis=-1)
    return ad.relu(ad.matmul(joint, head.mlp_w) + head.mlp_b)


def factor_ratings(features: Tensor, head: InteractionHead) -> Tensor:
    """Per-factor rating votes, inner product with the shared weight: (P, K)."""
    return (features * head.score_w).sum(axis=-1)


def attention_weights(features: Tensor, head: InteractionHead, tau: float) -> Tensor:
    """Temperature softmax over ReLU attention logits: (P, K), rows sum to 1."""
    check_positive("tau", tau)
    logits = ad.relu((features * head.attn_w).sum(axis=-1) + head.attn_b)
    return ad.softmax_t(logits, tau, axis=-1)


def fuse_ratings(alpha: Tensor, votes: Tensor) -> Tensor:
    """Attention-weighted sum of factor votes: (P,)."""
    return (alpha * votes).sum(axis=-1)


def predict_pairs(u_final: Tensor, v_final: Tensor, user_idx: np.ndarray,
                  item_idx: np.ndarray, head: InteractionHead, tau: float,
                  single_head: bool = False, scatter_u=None, scatter_i=None):
    """Predictions for index pairs.

    Returns (ratings (P,), alpha (P, K), votes (P, K), features).  The
    single-head variant flattens the factor chunks and predicts with one MLP,
    in which case K collapses to one column.  `scatter_u`/`scatter_i` are
    optional CSR matrices speeding up the backward gather when the pairs are
    the training edges.
    """
    u_sel = ad.gather_rows(u_final, user_idx, scatter=scatter_u)
    v_sel = ad.gather_rows(v_final, item_idx, scatter=scatter_i)
    if single_head:
        p = len(user_idx)
        u_sel = u_sel.reshape(p, 1, -1)
        v_sel = v_sel.reshape(p, 1, -1)
        features = interaction_features(u_sel, v_sel, head)
        votes = factor_ratings(features, head)
        alpha = Tensor(np.ones((p, 1)), dtype=u_final.dtype)
        return fuse_ratings(alpha, votes), alpha, votes, features
    features = interaction_features(u_sel, v_sel, head)
    votes = factor_ratings(features, head)
    alpha = attention_weights(features, head, tau)
    return fuse_ratings(alpha, votes), alpha, votes, features
