"""Independent naive implementations used as oracles by the test suite.

Everything here favors per-edge / per-factor python loops over vectorized
kernels so that it shares no code path with the production implementation.
The single exception is `single_channel_forward`, which intentionally mirrors
the production operation order on plain (n, d) arrays to support an exact
bit-level comparison for the one-factor collapse.
"""

from __future__ import annotations

import math

import numpy as np


def softmax_tau(logits, tau):
    z = [x / tau for x in logits]
    m = max(z)
    e = [math.exp(x - m) for x in z]
    s = sum(e)
    return [x / s for x in e]


def cosine(a, b, eps=1e-12):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na < eps or nb < eps:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def project_reviews(reviews, proj_w, proj_b):
    """(E, K, chunk) by explicit loops: relu(W_k^T e + b_k)."""
    e_cnt, _ = reviews.shape
    k_cnt = len(proj_w)
    chunk = proj_w[0].shape[1]
    out = np.zeros((e_cnt, k_cnt, chunk))
    for e in range(e_cnt):
        for k in range(k_cnt):
            for c in range(chunk):
                acc = proj_b[k][c]
                for j in range(reviews.shape[1]):
                    acc += reviews[e, j] * proj_w[k][j, c]
                out[e, k, c] = max(acc, 0.0)
    return out


def semantic_scores(review_factors, prototypes, tau):
    e_cnt, k_cnt, _ = review_factors.shape
    out = np.zeros((e_cnt, k_cnt))
    for e in range(e_cnt):
        logits = [cosine(review_factors[e, k], prototypes[k]) for k in range(k_cnt)]
        out[e] = softmax_tau(logits, tau)
    return out


def structural_scores(u_prev, v_prev, edge_user, edge_item, tau):
    e_cnt = len(edge_user)
    k_cnt = u_prev.shape[1]
    out = np.zeros((e_cnt, k_cnt))
    for e in range(e_cnt):
        logits = [cosine(u_prev[edge_user[e], k], v_prev[edge_item[e], k])
                  for k in range(k_cnt)]
        out[e] = softmax_tau(logits, tau)
    return out


def message_passing(edge_user, edge_item, edge_rating, scores,
                    u_prev, v_prev, review_factors, review_w, out_w,
                    n_users, n_items, eps=1e-12):
    """Edge-loop message passing oracle.

    review_w maps rating value -> list over factors of (chunk, chunk).
    Returns (u_next, v_next) of shape (n, K, chunk).
    """
    e_cnt = len(edge_user)
    k_cnt = scores.shape[1]
    chunk = u_prev.shape[2]

    deg_u = np.zeros((n_users, k_cnt))
    deg_v = np.zeros((n_items, k_cnt))
    for e in range(e_cnt):
        for k in range(k_cnt):
            deg_u[edge_user[e], k] += scores[e, k]
            deg_v[edge_item[e], k] += scores[e, k]

    u_sum = np.zeros((n_users, k_cnt, chunk))
    v_sum = np.zeros((n_items, k_cnt, chunk))
    for e in range(e_cnt):
        u, i, r = edge_user[e], edge_item[e], edge_rating[e]
        for k in range(k_cnt):
            du, di = deg_u[u, k], deg_v[i, k]
            if du < eps or di < eps:
                continue
            norm = math.sqrt(du * di)
            transformed = review_factors[e, k] @ review_w[r][k]
            u_sum[u, k] += scores[e, k] * (transformed + v_prev[i, k]) / norm
            v_sum[i, k] += scores[e, k] * (transformed + u_prev[u, k]) / norm

    u_next = np.zeros_like(u_sum)
    v_next = np.zeros_like(v_sum)
    for k in range(k_cnt):
        u_next[:, k] = u_sum[:, k] @ out_w
        v_next[:, k] = v_sum[:, k] @ out_w
    return u_next, v_next


def mlp_features(u_rows, v_rows, mlp_w, mlp_b):
    """(P, K, chunk) interaction features by scalar loops."""
    p_cnt, k_cnt, chunk = u_rows.shape
    out = np.zeros((p_cnt, k_cnt, mlp_w.shape[1]))
    for p in range(p_cnt):
        for k in range(k_cnt):
            joint = list(u_rows[p, k]) + list(v_rows[p, k])
            for c in range(mlp_w.shape[1]):
                acc = mlp_b[c]
                for j, x in enumerate(joint):
                    acc += x * mlp_w[j, c]
                out[p, k, c] = max(acc, 0.0)
    return out


def single_channel_forward(graph, user_embed, item_embed, proj_w, proj_b,
                           w_review, w_out, n_layers):
    """One-factor forward on flat (n, d) arrays, mirroring production op order.

    With a single factor every score is exactly 1.0, so scores drop out of
    the arithmetic entirely; `w_review` maps rating -> (d, d) per layer:
    w_review[layer][rating].
    """
    e_cnt = graph.n_edges
    reviews = graph.reviews
    ef = np.maximum(reviews @ proj_w + proj_b, 0.0)

    scatter_u, _, scatter_i, _ = graph.csr_matrices()
    deg_u = scatter_u @ np.ones((e_cnt, 1))
    deg_v = scatter_i @ np.ones((e_cnt, 1))
    inv_u = np.where(deg_u >= 1e-12, 1.0 / np.sqrt(np.where(deg_u >= 1e-12, deg_u, 1.0)), 0.0)
    inv_v = np.where(deg_v >= 1e-12, 1.0 / np.sqrt(np.where(deg_v >= 1e-12, deg_v, 1.0)), 0.0)
    ones_e = np.ones((e_cnt, 1))
    coef = ones_e * inv_u[graph.edge_user] * inv_v[graph.edge_item]

    u_prev, v_prev = user_embed, item_embed
    u_layers, v_layers = [], []
    for layer in range(n_layers):
        blocks = []
        for rating, sl in graph.rating_slices():
            blocks.append(ef[sl] @ w_review[layer][rating])
        rv = np.concatenate(blocks, axis=0)
        v_e = v_prev[graph.edge_item]
        u_next = (scatter_u @ ((rv + v_e) * coef)) @ w_out[layer]
        u_e = u_prev[graph.edge_user]
        v_next = (scatter_i @ ((rv + u_e) * coef)) @ w_out[layer]
        u_prev, v_prev = u_next, v_next
        u_layers.append(u_next)
        v_layers.append(v_next)

    def combine(layers):
        total = layers[0]
        for t in layers[1:]:
            total = total + t
        return total * (1.0 / len(layers))

    return combine(u_layers), combine(v_layers)
