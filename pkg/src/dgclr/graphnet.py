"""Disentangled graph learning: factor scores and factorized message passing.

Node embeddings are chunked into K per-factor channels.  Each training edge
gets, per factor, a semantic score (its review's projection vs. a learned
prototype), a structural score (user chunk vs. item chunk from the previous
layer), and their convex combination, which weights the edge inside that
factor's propagation channel.  Messages are symmetrically degree-normalized
with degrees summed over all neighbors, then aggregated per rating group and
mixed by a per-layer output transform shared across factors and node sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import RatingGraph
from .validation import check_positive, check_unit_interval

SCORE_MODES = ("combined", "uniform", "semantic", "structural")


@dataclass
class DGLWeights:
    """Tape tensors for the graph side, grouped per layer/factor/rating."""

    user_embed: Tensor                  # (M, d)
    item_embed: Tensor                  # (N, d)
    proj_w: list[Tensor]                # K x (d, d/K)
    proj_b: list[Tensor]                # K x (d/K,)
    prototypes: list[Tensor]            # K x (d/K,)
    review_w: list[list[list[Tensor]]]  # [layer][rating][factor] -> (d/K, d/K)
    out_w: list[Tensor]                 # L x (d/K, d/K)

    @property
    def n_factors(self) -> int:
        return len(self.proj_w)

    @property
    def n_layers(self) -> int:
        return len(self.out_w)


@dataclass
class DGLOutput:
    """Final per-channel embeddings plus everything needed downstream."""

    u_final: Tensor            # (M, K, d/K)
    v_final: Tensor            # (N, K, d/K)
    review_factors: Tensor     # (E, K, d/K)
    semantic: Tensor           # (E, K), layer-invariant
    structural: list[Tensor]   # per layer, (E, K)
    combined: list[Tensor]     # per layer, (E, K)


def project_reviews(reviews: Tensor, proj_w: list[Tensor], proj_b: list[Tensor]) -> Tensor:
    """Project review vectors into K factor subspaces with a ReLU: (E, K, d/K)."""
    per_factor = [ad.relu(ad.matmul(reviews, w) + b) for w, b in zip(proj_w, proj_b)]
    return ad.stack(per_factor, axis=1)


def semantic_scores(review_factors: Tensor, prototypes: Tensor, tau: float) -> Tensor:
    """Softmax over factors of cosine(review projection, factor prototype)."""
    check_positive("tau", tau)
    logits = ad.cosine_rows(review_factors, prototypes)
    return ad.softmax_t(logits, tau, axis=-1)


def structural_scores(u_prev: Tensor, v_prev: Tensor, graph: RatingGraph, tau: float) -> Tensor:
    """Softmax over factors of cosine(user chunk, item chunk) per edge."""
    check_positive("tau", tau)
    scatter_u, _, scatter_i, _ = graph.csr_matrices()
    u_e = ad.gather_rows(u_prev, graph.edge_user, scatter=scatter_u)
    v_e = ad.gather_rows(v_prev, graph.edge_item, scatter=scatter_i)
    logits = ad.cosine_rows(u_e, v_e)
    return ad.softmax_t(logits, tau, axis=-1)


def combine_scores(semantic: Tensor, structural: Tensor, eta: float) -> Tensor:
    """Convex combination eta*semantic + (1-eta)*structural."""
    check_unit_interval("eta", eta)
    return semantic * eta + structural * (1.0 - eta)


def transform_reviews(review_factors: Tensor, graph: RatingGraph,
                      layer_review_w: list[list[Tensor]]) -> Tensor:
    """Apply the rating-specific per-factor review transform edgewise.

    Edges are stored sorted by rating, so each rating's weight stack acts on
    a contiguous row block; blocks are concatenated back in edge order.
    """
    blocks = []
    for (rating, sl), w_factors in zip(graph.rating_slices(), layer_review_w):
        w_stack = ad.stack(w_factors, axis=0)          # (K, d/K, d/K)
        blocks.append(ad.batched_matmul(review_factors[sl], w_stack))
    return ad.concat(blocks, axis=0)


def message_passing_layer(graph: RatingGraph, scores: Tensor,
                          u_prev: Tensor, v_prev: Tensor, review_factors: Tensor,
                          layer_review_w: list[list[Tensor]], out_w: Tensor,
                          degree_eps: float = 1e-12) -> tuple[Tensor, Tensor]:
    """One propagation layer; returns (u_next, v_next) of shape (n, K, d/K).

    Per edge and factor the message is
    score * (review_transform + opposite_chunk) / sqrt(user_degree * item_degree)
    where degrees sum the factor's scores over all of a node's edges
    regardless of rating.  Nodes whose degree falls below `degree_eps`
    (isolated ones included) receive zeros.
    """
    n_users, n_items, n_factors = graph.n_users, graph.n_items, scores.shape[1]
    chunk = u_prev.shape[-1]
    scatter_u, gather_u, scatter_i, gather_i = graph.csr_matrices()

    d_user = ad.sparse_matmul(scatter_u, gather_u, scores)   # (M, K)
    d_item = ad.sparse_matmul(scatter_i, gather_i, scores)   # (N, K)
    inv_u = ad.masked_rsqrt(d_user, degree_eps)
    inv_i = ad.masked_rsqrt(d_item, degree_eps)
    inv_u_e = ad.gather_rows(inv_u, graph.edge_user, scatter=scatter_u)
    inv_i_e = ad.gather_rows(inv_i, graph.edge_item, scatter=scatter_i)
    coef = (scores * inv_u_e * inv_i_e).reshape(graph.n_edges, n_factors, 1)

    transformed = transform_reviews(review_factors, graph, layer_review_w)

    v_e = ad.gather_rows(v_prev, graph.edge_item, scatter=scatter_i)
    msg_to_user = ((transformed + v_e) * coef).reshape(graph.n_edges, n_factors * chunk)
    u_sum = ad.sparse_matmul(scatter_u, gather_u, msg_to_user)
    u_next = ad.matmul(u_sum.reshape(n_users, n_factors, chunk), out_w)

    u_e = ad.gather_rows(u_prev, graph.edge_user, scatter=scatter_u)
    msg_to_item = ((transformed + u_e) * coef).reshape(graph.n_edges, n_factors * chunk)
    v_sum = ad.sparse_matmul(scatter_i, gather_i, msg_to_item)
    v_next = ad.matmul(v_sum.reshape(n_items, n_factors, chunk), out_w)
    return u_next, v_next


def layer_combine(per_layer: list[Tensor]) -> Tensor:
    """Arithmetic mean of the L layer outputs (layer 0 excluded by caller)."""
    if not per_layer:
        raise ValueError("need at least one layer output")
    total = per_layer[0]
    for t in per_layer[1:]:
        total = total + t
    return total * (1.0 / len(per_layer))


def forward_dgl(weights: DGLWeights, graph: RatingGraph, tau: float, eta: float,
                score_mode: str = "combined") -> DGLOutput:
    """Full graph pass: scores once per layer, L propagations, layer mean.

    `score_mode` selects how the edge coefficient is formed: the default
    semantic/structural blend, a forced uniform 1/K, or either single source.
    """
    if score_mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode {score_mode!r}")
    n_factors = weights.n_factors
    m, n = graph.n_users, graph.n_items
    chunk = weights.user_embed.shape[1] // n_factors
    dtype = weights.user_embed.dtype

    reviews = Tensor(graph.reviews, dtype=dtype)
    review_factors = project_reviews(reviews, weights.proj_w, weights.proj_b)
    proto = ad.stack(weights.prototypes, axis=0)
    semantic = semantic_scores(review_factors, proto, tau)

    u_prev = weights.user_embed.reshape(m, n_factors, chunk)
    v_prev = weights.item_embed.reshape(n, n_factors, chunk)

    structural_layers: list[Tensor] = []
    combined_layers: list[Tensor] = []
    u_layers: list[Tensor] = []
    v_layers: list[Tensor] = []
    for layer in range(weights.n_layers):
        structural = structural_scores(u_prev, v_prev, graph, tau)
        if score_mode == "combined":
            scores = combine_scores(semantic, structural, eta)
        elif score_mode == "semantic":
            scores = semantic
        elif score_mode == "structural":
            scores = structural
        else:
            scores = Tensor(np.full((graph.n_edges, n_factors), 1.0 / n_factors), dtype=dtype)
        structural_layers.append(structural)
        combined_layers.append(scores)

        u_prev, v_prev = message_passing_layer(
            graph, scores, u_prev, v_prev, review_factors,
            weights.review_w[layer], weights.out_w[layer])
        u_layers.append(u_prev)
        v_layers.append(v_prev)

    return DGLOutput(
        u_final=layer_combine(u_layers),
        v_final=layer_combine(v_layers),
        review_factors=review_factors,
        semantic=semantic,
        structural=structural_layers,
        combined=combined_layers,
    )
