"""Interaction data: file ingestion, whitening, splits, and the rating graph.

The on-disk interaction format is line-oriented text.  The first line is a
header declaring the review-vector dimension and the admissible rating set:

    d=4<TAB>ratings=1,2,3,4,5

Every following line is one interaction:

    user_id<TAB>item_id<TAB>rating<TAB>v1 v2 v3 v4

When review vectors are shipped separately (binary sidecar, magic "DGCLRV1"),
rows carry only the first three fields and vectors are matched by row order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")
SPLIT_CODES = {name: code for code, name in enumerate(SPLIT_NAMES)}

VECTOR_MAGIC = b"DGCLRV1"


class DataFormatError(ValueError):
    """Raised for malformed interaction or vector files."""


@dataclass
class Interaction:
    user_id: str
    item_id: str
    rating: float
    review_vec: np.ndarray


@dataclass
class InteractionDataset:
    """Users, items, interactions, and (after splitting) split labels."""

    users: list[str]
    items: list[str]
    interactions: list[Interaction]
    d: int
    rating_values: tuple[float, ...]
    split: np.ndarray | None = None
    user_index: dict[str, int] = field(default_factory=dict)
    item_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.user_index:
            self.user_index = {u: i for i, u in enumerate(self.users)}
        if not self.item_index:
            self.item_index = {v: i for i, v in enumerate(self.items)}

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def __len__(self) -> int:
        return len(self.interactions)

    def indices_of(self, split_code: int) -> np.ndarray:
        if self.split is None:
            raise ValueError("dataset has not been split yet")
        return np.flatnonzero(self.split == split_code)

    def pairs(self, split_code: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(user_idx, item_idx, rating, interaction_idx) arrays for a split."""
        idx = self.indices_of(split_code)
        ui = np.array([self.user_index[self.interactions[i].user_id] for i in idx], dtype=np.int64)
        vi = np.array([self.item_index[self.interactions[i].item_id] for i in idx], dtype=np.int64)
        r = np.array([self.interactions[i].rating for i in idx], dtype=np.float64)
        return ui, vi, r, idx


def _parse_header(line: str) -> tuple[int, tuple[float, ...]]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 2 or not parts[0].startswith("d=") or not parts[1].startswith("ratings="):
        raise DataFormatError(f"bad header line: {line!r} (expected 'd=<int>\\tratings=<r1,r2,...>')")
    try:
        d = int(parts[0][2:])
        ratings = tuple(float(tok) for tok in parts[1][len("ratings="):].split(","))
    except ValueError as exc:
        raise DataFormatError(f"bad header line: {line!r}") from exc
    if d <= 0 or not ratings:
        raise DataFormatError(f"bad header line: {line!r}")
    return d, ratings


def load_interactions(path, vectors_path=None) -> InteractionDataset:
    """Parse an interaction file into an (unsplit) dataset.

    Vocabularies are built in first-appearance order.  Duplicate (user, item)
    pairs, unknown ratings, and review-vector dimension mismatches are
    rejected with the offending row named.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file, expected a header line")
    d, rating_values = _parse_header(lines[0])
    rating_set = set(rating_values)

    sidecar = read_review_vectors(vectors_path) if vectors_path is not None else None
    if sidecar is not None and sidecar.shape[1] != d:
        raise DataFormatError(
            f"vector file dimension {sidecar.shape[1]} != header dimension {d}")

    users: list[str] = []
    items: list[str] = []
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    seen_pairs: set[tuple[str, str]] = set()
    interactions: list[Interaction] = []

    n_fields = 3 if sidecar is not None else 4
    for row, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != n_fields:
            raise DataFormatError(f"{path}:{row}: expected {n_fields} fields, got {len(parts)}")
        user, item, rating_tok = parts[0], parts[1], parts[2]
        try:
            rating = float(rating_tok)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{row}: unparseable rating {rating_tok!r}") from exc
        if rating not in rating_set:
            raise DataFormatError(
                f"{path}:{row}: rating {rating_tok} not in declared set {sorted(rating_set)}")
        if (user, item) in seen_pairs:
            raise DataFormatError(f"{path}:{row}: duplicate pair ({user!r}, {item!r})")
        seen_pairs.add((user, item))

        if sidecar is not None:
            vec_row = len(interactions)
            if vec_row >= sidecar.shape[0]:
                raise DataFormatError(f"{path}:{row}: vector file has too few rows")
            vec = sidecar[vec_row].astype(np.float64)
        else:
            try:
                vec = np.array(parts[3].split(), dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{row}: unparseable review vector") from exc
            if vec.shape[0] != d:
                raise DataFormatError(
                    f"{path}:{row}: review vector has {vec.shape[0]} values, expected {d}")

        if user not in user_index:
            user_index[user] = len(users)
            users.append(user)
        if item not in item_index:
            item_index[item] = len(items)
            items.append(item)
        interactions.append(Interaction(user, item, rating, vec))

    if sidecar is not None and len(interactions) != sidecar.shape[0]:
        raise DataFormatError(
            f"{path}: {len(interactions)} rows but vector file has {sidecar.shape[0]}")
    return InteractionDataset(users, items, interactions, d, rating_values)


def save_interactions(dataset: InteractionDataset, path) -> None:
    """Write a dataset back out in the inline-vector text format."""
    with open(path, "w", encoding="utf-8") as fh:
        ratings = ",".join(_format_rating(r) for r in dataset.rating_values)
        fh.write(f"d={dataset.d}\tratings={ratings}\n")
        for it in dataset.interactions:
            vec = " ".join(repr(float(x)) for x in it.review_vec)
            fh.write(f"{it.user_id}\t{it.item_id}\t{_format_rating(it.rating)}\t{vec}\n")


def _format_rating(r: float) -> str:
    return str(int(r)) if float(r).is_integer() else repr(float(r))


# -------------------------------------------------------------- vector binary


def write_review_vectors(vectors: np.ndarray, path) -> None:
    vectors = np.asarray(vectors, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(VECTOR_MAGIC)
        fh.write(struct.pack("<II", vectors.shape[0], vectors.shape[1]))
        fh.write(vectors.astype("<f4").tobytes())


def read_review_vectors(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(VECTOR_MAGIC):
        raise DataFormatError(f"{path}: bad magic, not a review-vector file")
    if len(blob) < len(VECTOR_MAGIC) + 8:
        raise DataFormatError(f"{path}: truncated header")
    count, d = struct.unpack_from("<II", blob, len(VECTOR_MAGIC))
    expected = len(VECTOR_MAGIC) + 8 + count * d * 4
    if len(blob) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=len(VECTOR_MAGIC) + 8)
    return data.reshape(count, d)


# ------------------------------------------------------------------ whitening


def whiten_vectors(raw: np.ndarray, target_dim: int) -> np.ndarray:
    """Center and decorrelate vectors onto `target_dim` principal directions.

    The output has empirical mean 0 and empirical covariance (1/n scaling)
    equal to the identity.  Raises when the centered data has rank below
    `target_dim`.
    """
    X = np.asarray(raw, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("whitening needs at least 2 vectors")
    n, d0 = X.shape
    if target_dim > d0:
        raise ValueError(f"target_dim {target_dim} exceeds input dimension {d0}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    tol = S.max(initial=0.0) * max(n, d0) * np.finfo(np.float64).eps
    rank = int((S > tol).sum())
    if rank < target_dim:
        raise ValueError(
            f"data rank {rank} is below requested dimension {target_dim}")
    W = Vt[:target_dim].T * (np.sqrt(n) / S[:target_dim])
    return Xc @ W


class ReviewWhitener(BaseEstimator, TransformerMixin):
    """Fit/transform wrapper around `whiten_vectors` for pipeline use."""

    def __init__(self, target_dim: int = 32):
        self.target_dim = target_dim

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 2:
            raise ValueError("whitening needs at least 2 vectors")
        n, d0 = X.shape
        if self.target_dim > d0:
            raise ValueError(f"target_dim {self.target_dim} exceeds input dimension {d0}")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
        tol = S.max(initial=0.0) * max(n, d0) * np.finfo(np.float64).eps
        rank = int((S > tol).sum())
        if rank < self.target_dim:
            raise ValueError(f"data rank {rank} is below requested dimension {self.target_dim}")
        self.components_ = Vt[: self.target_dim].T * (np.sqrt(n) / S[: self.target_dim])
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_


# -------------------------------------------------------------------- splits


def split_dataset(dataset: InteractionDataset, seed: int) -> np.ndarray:
    """Assign train/val/test labels by a seeded shuffle (80/10/10 floors).

    The first floor(0.8 n) shuffled interactions go to train, the next
    floor(0.1 n) to validation, and the remainder to test.
    """
    if dataset.split is not None:
        raise ValueError("dataset already split")
    n = len(dataset)
    if n < 3:
        raise ValueError(f"cannot split {n} interactions into three parts")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(0.8 * n))
    n_val = int(np.floor(0.1 * n))
    labels = np.empty(n, dtype=np.uint8)
    labels[perm[:n_train]] = TRAIN
    labels[perm[n_train:n_train + n_val]] = VAL
    labels[perm[n_train + n_val:]] = TEST
    dataset.split = labels
    return labels


def write_split_manifest(dataset: InteractionDataset, path) -> None:
    if dataset.split is None:
        raise ValueError("dataset has not been split yet")
    with open(path, "w", encoding="utf-8") as fh:
        for i, code in enumerate(dataset.split):
            fh.write(f"{i}\t{SPLIT_NAMES[code]}\n")


def read_split_manifest(path, n: int) -> np.ndarray:
    labels = np.empty(n, dtype=np.uint8)
    seen = np.zeros(n, dtype=bool)
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            idx_tok, name = line.rstrip("\n").split("\t")
            idx = int(idx_tok)
            if idx >= n or seen[idx]:
                raise DataFormatError(f"{path}: bad or repeated index {idx}")
            labels[idx] = SPLIT_CODES[name]
            seen[idx] = True
    if not seen.all():
        raise DataFormatError(f"{path}: manifest does not cover all {n} interactions")
    return labels


# --------------------------------------------------------------- rating graph


class RatingGraph:
    """Bipartite training edges grouped by rating value.

    Edges are stored in flat arrays sorted by (rating, original order); this
    canonical order is what the per-rating message-passing kernels slice.
    Gather/scatter CSR matrices for graph propagation are built lazily and
    cached.
    """

    def __init__(self, n_users: int, n_items: int, rating_values: tuple[float, ...],
                 edge_user: np.ndarray, edge_item: np.ndarray, edge_rating: np.ndarray,
                 reviews: np.ndarray, interaction_idx: np.ndarray):
        order = np.lexsort((interaction_idx, edge_rating))
        self.n_users = n_users
        self.n_items = n_items
        self.rating_values = tuple(sorted(rating_values))
        self.edge_user = np.ascontiguousarray(edge_user[order])
        self.edge_item = np.ascontiguousarray(edge_item[order])
        self.edge_rating = np.ascontiguousarray(edge_rating[order])
        self.reviews = np.ascontiguousarray(reviews[order])
        self.interaction_idx = np.ascontiguousarray(interaction_idx[order])
        self._csr = None

    @property
    def n_edges(self) -> int:
        return len(self.edge_user)

    def rating_slices(self) -> list[tuple[float, slice]]:
        """Contiguous edge ranges per rating value, in rating order."""
        out = []
        start = 0
        for r in self.rating_values:
            count = int((self.edge_rating == r).sum())
            out.append((r, slice(start, start + count)))
            start += count
        return out

    def items_rated_by(self, user_idx: int, rating: float) -> list[int]:
        mask = (self.edge_user == user_idx) & (self.edge_rating == rating)
        return sorted(int(i) for i in self.edge_item[mask])

    def users_who_rated(self, item_idx: int, rating: float) -> list[int]:
        mask = (self.edge_item == item_idx) & (self.edge_rating == rating)
        return sorted(int(i) for i in self.edge_user[mask])

    def user_degree_counts(self) -> np.ndarray:
        return np.bincount(self.edge_user, minlength=self.n_users)

    def item_degree_counts(self) -> np.ndarray:
        return np.bincount(self.edge_item, minlength=self.n_items)

    def csr_matrices(self):
        """(scatter_user, gather_user, scatter_item, gather_item).

        scatter_* is (n_nodes x n_edges): summing per-edge rows into node
        rows.  gather_* is its transpose, used on the backward pass and for
        selecting node rows per edge.
        """
        if self._csr is None:
            import scipy.sparse as sp

            e = self.n_edges
            ones = np.ones(e, dtype=np.float64)
            arange = np.arange(e)
            scatter_user = sp.csr_matrix((ones, (self.edge_user, arange)),
                                         shape=(self.n_users, e))
            scatter_item = sp.csr_matrix((ones, (self.edge_item, arange)),
                                         shape=(self.n_items, e))
            self._csr = (scatter_user, scatter_user.T.tocsr(),
                         scatter_item, scatter_item.T.tocsr())
        return self._csr

    def subgraph(self, keep_mask: np.ndarray) -> "RatingGraph":
        """New graph with the masked subset of edges; node sets unchanged."""
        return RatingGraph(
            self.n_users, self.n_items, self.rating_values,
            self.edge_user[keep_mask], self.edge_item[keep_mask],
            self.edge_rating[keep_mask], self.reviews[keep_mask],
            self.interaction_idx[keep_mask])


def build_graph(dataset: InteractionDataset) -> RatingGraph:
    """Rating graph over the training split only (both directions)."""
    ui, vi, ratings, idx = dataset.pairs(TRAIN)
    reviews = np.stack([dataset.interactions[i].review_vec for i in idx]) \
        if len(idx) else np.zeros((0, dataset.d))
    return RatingGraph(dataset.n_users, dataset.n_items, dataset.rating_values,
                       ui, vi, ratings, reviews, idx)


# -------------------------------------------------------------- degree groups


def bucket_users_by_degree(dataset: InteractionDataset,
                           boundaries: tuple[int, ...]) -> dict[tuple, list[str]]:
    """Group users into half-open degree intervals by train-edge count.

    Boundaries (b1, .., bm) produce buckets [0, b1), [b1, b2), ..,
    [bm, inf).  No boundaries means a single bucket holding everyone.
    """
    boundaries = tuple(boundaries)
    if any(b2 <= b1 for b1, b2 in zip(boundaries, boundaries[1:])):
        raise ValueError(f"boundaries must be strictly increasing, got {boundaries}")
    ui, _, _, _ = dataset.pairs(TRAIN)
    degree = np.bincount(ui, minlength=dataset.n_users)

    edges = (0,) + boundaries + (None,)
    buckets: dict[tuple, list[str]] = {
        (lo, hi): [] for lo, hi in zip(edges[:-1], edges[1:])}
    keys = list(buckets)
    for u, user in enumerate(dataset.users):
        deg = int(degree[u])
        for lo, hi in keys:
            if deg >= lo and (hi is None or deg < hi):
                buckets[(lo, hi)].append(user)
                break
    return buckets


def bucket_label(key: tuple) -> str:
    lo, hi = key
    return f"[{lo},{hi})" if hi is not None else f"[{lo},inf)"


# ------------------------------------------------------------- synthetic data


def make_synthetic_dataset(n_users: int, n_items: int, n_interactions: int,
                           d: int = 16, n_factors: int = 2, noise: float = 0.1,
                           seed: int = 0) -> InteractionDataset:
    """Planted-factor synthetic interactions for tests and benchmarks.

    Every user cares (almost) exclusively about one latent factor; items have
    independent per-factor qualities in [1, 5].  The observed rating is the
    user-weighted quality plus Gaussian noise, rounded into {1..5}.  Review
    vectors carry a noisy indicator of the user's dominant factor.
    """
    if n_interactions > n_users * n_items:
        raise ValueError("more interactions than available (user, item) pairs")
    if d < n_factors:
        raise ValueError("d must be at least n_factors")
    rng = np.random.default_rng(seed)

    user_factor = rng.integers(0, n_factors, size=n_users)
    affinity = np.full((n_users, n_factors), 0.1 / max(n_factors - 1, 1))
    affinity[np.arange(n_users), user_factor] = 0.9
    if n_factors == 1:
        affinity[:] = 1.0
    quality = rng.uniform(1.0, 5.0, size=(n_items, n_factors))

    pairs: set[tuple[int, int]] = set()
    while len(pairs) < n_interactions:
        u = int(rng.integers(0, n_users))
        i = int(rng.integers(0, n_items))
        pairs.add((u, i))
    pair_list = sorted(pairs)
    rng.shuffle(pair_list)

    interactions = []
    for u, i in pair_list:
        value = float(affinity[u] @ quality[i]) + float(rng.normal(0.0, noise))
        rating = float(np.clip(np.rint(value), 1, 5))
        vec = rng.normal(0.0, 0.1, size=d)
        vec[user_factor[u]] += 1.0
        interactions.append(
            Interaction(f"u{u}", f"i{i}", rating, vec))

    users = [f"u{u}" for u in range(n_users)]
    items = [f"i{i}" for i in range(n_items)]
    return InteractionDataset(users, items, interactions, d,
                              tuple(float(r) for r in range(1, 6)))
