"""Scikit-learn style estimator wrapping the training and prediction stack.

`DGCLRRegressor` exposes the model through the familiar fit/predict surface
(plus `get_params`/`set_params` via BaseEstimator) so it can sit in
pipelines, grid searches, and cross-validation harnesses.  `fit` accepts
either an `InteractionDataset` or raw (user_id, item_id, review_vector)
triples with a rating target vector.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .datasets import Interaction, InteractionDataset, split_dataset
from .evaluation import evaluate_mse, predict_pairs_arrays
from .training import TrainConfig, fit as train_fit


class DGCLRRegressor(BaseEstimator, RegressorMixin):
    """Review-based rating predictor with K disentangled latent factors."""

    def __init__(self, d: int = 32, K: int = 2, L: int = 2, tau: float = 0.5,
                 eta: float = 0.7, edge_keep_ratio: float = 0.8,
                 lambda1: float = 0.5, lambda2: float = 0.5, lr: float = 0.01,
                 epochs: int = 200, batch_size: int = 0, seed: int = 0,
                 patience: int = 20, precision: str = "float64",
                 variant: str = "full", stabilized_cl: bool = False):
        self.d = d
        self.K = K
        self.L = L
        self.tau = tau
        self.eta = eta
        self.edge_keep_ratio = edge_keep_ratio
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.patience = patience
        self.precision = precision
        self.variant = variant
        self.stabilized_cl = stabilized_cl

    # ---- sklearn plumbing --------------------------------------------------

    def _config(self) -> TrainConfig:
        keys = [f.name for f in dataclasses.fields(TrainConfig)]
        return TrainConfig(**{k: getattr(self, k) for k in keys})

    def _as_dataset(self, X, y) -> InteractionDataset:
        if isinstance(X, InteractionDataset):
            if y is not None:
                raise ValueError("y must be None when X is an InteractionDataset")
            return X
        if y is None:
            raise ValueError("ratings y are required with triple input")
        triples = list(X)
        y = np.asarray(y, dtype=np.float64)
        if len(triples) != len(y):
            raise ValueError(f"X has {len(triples)} rows but y has {len(y)}")
        users: list[str] = []
        items: list[str] = []
        seen_u: dict[str, int] = {}
        seen_i: dict[str, int] = {}
        interactions = []
        d = None
        for (user, item, vec), rating in zip(triples, y):
            vec = np.asarray(vec, dtype=np.float64)
            if d is None:
                d = vec.shape[0]
            elif vec.shape[0] != d:
                raise ValueError("review vectors must share one dimension")
            if user not in seen_u:
                seen_u[user] = len(users)
                users.append(user)
            if item not in seen_i:
                seen_i[item] = len(items)
                items.append(item)
            interactions.append(Interaction(str(user), str(item), float(rating), vec))
        rating_values = tuple(sorted(set(float(r) for r in y)))
        return InteractionDataset(users, items, interactions, int(d), rating_values)

    # ---- estimator API -------------------------------------------------------

    def fit(self, X, y=None):
        """Train on an InteractionDataset or (user, item, vector) triples.

        An unsplit dataset is split 80/10/10 with this estimator's seed.
        """
        dataset = self._as_dataset(X, y)
        if dataset.split is None:
            split_dataset(dataset, self.seed)
        result = train_fit(dataset, self._config())
        self.dataset_ = dataset
        self.result_ = result
        self.net_ = result.net
        self.graph_ = result.graph
        self.history_ = result.history
        self.best_val_mse_ = result.best_val_mse
        return self

    def _pair_indices(self, X) -> tuple[np.ndarray, np.ndarray]:
        users, items = [], []
        for user, item in X:
            if user not in self.dataset_.user_index:
                raise KeyError(f"unknown user id {user!r}")
            if item not in self.dataset_.item_index:
                raise KeyError(f"unknown item id {item!r}")
            users.append(self.dataset_.user_index[user])
            items.append(self.dataset_.item_index[item])
        return np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64)

    def predict(self, X, clip: bool = False) -> np.ndarray:
        """Predicted ratings for (user_id, item_id) pairs."""
        if not hasattr(self, "net_"):
            raise RuntimeError("estimator is not fitted yet")
        users, items = self._pair_indices(X)
        pred, _, _ = predict_pairs_arrays(self.net_, self.graph_, users, items, clip=clip)
        return pred

    def mse(self, X, y) -> float:
        """Mean squared error on (user_id, item_id) pairs with true ratings y."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=np.float64)
        return float(np.mean((pred - y) ** 2))

    def split_mse(self, split_code: int) -> float:
        """MSE over one split of the fitted dataset."""
        return evaluate_mse(self.net_, self.graph_, self.dataset_, split_code)
