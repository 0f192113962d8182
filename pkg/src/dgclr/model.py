"""Parameter registration and the end-to-end network.

`DGCLRNet` owns the names and shapes of every trainable tensor and stitches
the graph side (graphnet) to the prediction side (interaction).  Ablation
variants reuse the same machinery with a forced score mode, a single
prediction head over concatenated chunks, or whole-vector contrastive terms.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ParameterStore, Tensor
from .datasets import RatingGraph, _format_rating
from .graphnet import DGLOutput, DGLWeights, forward_dgl
from .interaction import InteractionHead, predict_pairs
from .validation import check_divisible, check_positive, check_unit_interval

VARIANTS = ("full", "uniform_s", "semantic_only", "structural_only",
            "holistic_nd", "holistic_ed", "no_ai", "no_dcl")

_SCORE_MODE = {
    "uniform_s": "uniform",
    "semantic_only": "semantic",
    "structural_only": "structural",
}


class DGCLRNet:
    """The trainable model: chunked embeddings, K projection heads, learned
    factor prototypes, per-(layer, rating, factor) review transforms, the
    interaction head, and three bilinear discriminators."""

    def __init__(self, store: ParameterStore, n_users: int, n_items: int,
                 rating_values: tuple[float, ...], d: int, n_factors: int,
                 n_layers: int, tau: float, eta: float, variant: str = "full"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        check_divisible("d", d, "n_factors", n_factors)
        check_positive("tau", tau)
        check_unit_interval("eta", eta)
        check_positive("n_layers", n_layers)

        self.store = store
        self.n_users = n_users
        self.n_items = n_items
        self.rating_values = tuple(sorted(rating_values))
        self.d = d
        self.n_factors = n_factors
        self.n_layers = n_layers
        self.tau = tau
        self.eta = eta
        self.variant = variant
        self.chunk = d // n_factors

        self.score_mode = _SCORE_MODE.get(variant, "combined")
        self.single_head = variant == "no_ai"
        self.holistic_nd = variant == "holistic_nd"
        self.holistic_ed = variant in ("holistic_ed", "no_ai")

        self._register()

    # ---- registration ----------------------------------------------------

    def _register(self) -> None:
        store, d, k, chunk = self.store, self.d, self.n_factors, self.chunk
        store.register_xavier("embed/user", (self.n_users, d))
        store.register_xavier("embed/item", (self.n_items, d))
        for f in range(k):
            store.register_xavier(f"proj/w/k{f}", (d, chunk))
            store.register_xavier(f"proj/b/k{f}", (chunk,))
        for f in range(k):
            store.register_xavier(f"proto/k{f}", (chunk,))
        for layer in range(self.n_layers):
            for r in self.rating_values:
                for f in range(k):
                    store.register_xavier(
                        f"mp/review/l{layer}/r{_format_rating(r)}/k{f}", (chunk, chunk))
            store.register_xavier(f"mp/out/l{layer}", (chunk, chunk))

        head_in = 2 * d if self.single_head else 2 * chunk
        head_out = d if self.single_head else chunk
        store.register_xavier("ai/mlp_w", (head_in, head_out))
        store.register_xavier("ai/mlp_b", (head_out,))
        store.register_xavier("ai/score_w", (head_out,))
        if not self.single_head:
            store.register_xavier("ai/attn_w", (chunk,))
            store.register_xavier("ai/attn_b", (1,))

        nd_dim = d if self.holistic_nd else chunk
        ed_dim = d if self.holistic_ed else chunk
        store.register_xavier("dcl/fnd_user", (nd_dim, nd_dim))
        store.register_xavier("dcl/fnd_item", (nd_dim, nd_dim))
        store.register_xavier("dcl/fed", (ed_dim, ed_dim))

    # ---- tensor views ------------------------------------------------------

    def dgl_weights(self) -> DGLWeights:
        store, k = self.store, self.n_factors
        return DGLWeights(
            user_embed=store.tensor("embed/user"),
            item_embed=store.tensor("embed/item"),
            proj_w=[store.tensor(f"proj/w/k{f}") for f in range(k)],
            proj_b=[store.tensor(f"proj/b/k{f}") for f in range(k)],
            prototypes=[store.tensor(f"proto/k{f}") for f in range(k)],
            review_w=[
                [[store.tensor(f"mp/review/l{layer}/r{_format_rating(r)}/k{f}")
                  for f in range(k)]
                 for r in self.rating_values]
                for layer in range(self.n_layers)],
            out_w=[store.tensor(f"mp/out/l{layer}") for layer in range(self.n_layers)],
        )

    def interaction_head(self) -> InteractionHead:
        store = self.store
        return InteractionHead(
            mlp_w=store.tensor("ai/mlp_w"),
            mlp_b=store.tensor("ai/mlp_b"),
            score_w=store.tensor("ai/score_w"),
            attn_w=None if self.single_head else store.tensor("ai/attn_w"),
            attn_b=None if self.single_head else store.tensor("ai/attn_b"),
        )

    @property
    def w_fnd_user(self) -> Tensor:
        return self.store.tensor("dcl/fnd_user")

    @property
    def w_fnd_item(self) -> Tensor:
        return self.store.tensor("dcl/fnd_item")

    @property
    def w_fed(self) -> Tensor:
        return self.store.tensor("dcl/fed")

    # ---- forward passes ----------------------------------------------------

    def forward(self, graph: RatingGraph) -> DGLOutput:
        return forward_dgl(self.dgl_weights(), graph, self.tau, self.eta, self.score_mode)

    def predict(self, out: DGLOutput, user_idx: np.ndarray, item_idx: np.ndarray,
                scatter_u=None, scatter_i=None):
        """(ratings, alpha, votes, features) for given index pairs."""
        return predict_pairs(out.u_final, out.v_final, user_idx, item_idx,
                             self.interaction_head(), self.tau,
                             single_head=self.single_head,
                             scatter_u=scatter_u, scatter_i=scatter_i)
