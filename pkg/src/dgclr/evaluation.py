"""Evaluation, sparsity breakdowns, ablations, explainability, and benchmarks.

Prediction always runs over the training graph only: held-out review vectors
never enter the forward pass, so evaluating a split consumes nothing beyond
its (user, item, rating) triples.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datasets import (
    TEST,
    SPLIT_NAMES,
    InteractionDataset,
    RatingGraph,
    bucket_label,
    bucket_users_by_degree,
    build_graph,
    make_synthetic_dataset,
    split_dataset,
)
from .ioutil import atomic_write_text
from .model import VARIANTS, DGCLRNet
from .training import TrainConfig, TrainResult, build_net, fit, training_step_loss


# ----------------------------------------------------------------- prediction


def predict_pairs_arrays(net: DGCLRNet, graph: RatingGraph,
                         user_idx: np.ndarray, item_idx: np.ndarray,
                         clip: bool = False):
    """(predictions, alpha, votes) as plain arrays, computed without a tape."""
    with ad.no_grad():
        out = net.forward(graph)
        pred, alpha, votes, _ = net.predict(out, user_idx, item_idx)
    ratings = pred.data
    if clip:
        lo, hi = min(net.rating_values), max(net.rating_values)
        ratings = np.clip(ratings, lo, hi)
    return ratings, alpha.data, votes.data


def evaluate_mse(net: DGCLRNet, graph: RatingGraph, dataset: InteractionDataset,
                 split_code: int, clip: bool = False) -> float:
    """Mean squared error over one split's interactions."""
    users, items, ratings, _ = dataset.pairs(split_code)
    if len(users) == 0:
        raise ValueError(f"split {SPLIT_NAMES[split_code]!r} is empty")
    pred, _, _ = predict_pairs_arrays(net, graph, users, items, clip=clip)
    return float(np.mean((pred - ratings) ** 2))


# ------------------------------------------------------------ sparsity report


@dataclass
class BucketStat:
    key: tuple
    label: str
    n_users: int
    n_interactions: int
    mse: float | None


@dataclass
class EvalReport:
    split: str
    overall_mse: float
    n_interactions: int
    buckets: list[BucketStat] = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["bucket\tn_users\tn_interactions\tmse"]
        for b in self.buckets:
            mse = "" if b.mse is None else repr(b.mse)
            lines.append(f"{b.label}\t{b.n_users}\t{b.n_interactions}\t{mse}")
        lines.append(f"overall\t\t{self.n_interactions}\t{self.overall_mse!r}")
        return "\n".join(lines) + "\n"


def sparsity_report(net: DGCLRNet, graph: RatingGraph, dataset: InteractionDataset,
                    boundaries: tuple[int, ...], split_code: int = TEST,
                    clip: bool = False) -> EvalReport:
    """Per-degree-bucket MSE over a split, bucketing users by train degree."""
    users, items, ratings, _ = dataset.pairs(split_code)
    if len(users) == 0:
        raise ValueError(f"split {SPLIT_NAMES[split_code]!r} is empty")
    pred, _, _ = predict_pairs_arrays(net, graph, users, items, clip=clip)
    sq_err = (pred - ratings) ** 2

    buckets = bucket_users_by_degree(dataset, boundaries)
    evaluated_users = set(int(u) for u in users)
    report = EvalReport(split=SPLIT_NAMES[split_code],
                        overall_mse=float(sq_err.mean()),
                        n_interactions=len(users))
    for key, members in buckets.items():
        member_idx = {dataset.user_index[u] for u in members}
        mask = np.array([int(u) in member_idx for u in users])
        count = int(mask.sum())
        report.buckets.append(BucketStat(
            key=key, label=bucket_label(key),
            n_users=len(evaluated_users & member_idx),
            n_interactions=count,
            mse=float(sq_err[mask].mean()) if count else None))
    return report


# ------------------------------------------------------------------ ablations


def run_ablation(dataset: InteractionDataset, config: TrainConfig,
                 variant: str) -> tuple[TrainResult, float]:
    """Train one ablation variant and return (result, test MSE)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    cfg = config.replace(variant=variant)
    if variant == "no_dcl":
        cfg = cfg.replace(lambda1=0.0, lambda2=0.0)
    result = fit(dataset, cfg)
    test_mse = evaluate_mse(result.net, result.graph, dataset, TEST)
    return result, test_mse


# -------------------------------------------------------------------- exports


def write_predictions(path, dataset: InteractionDataset, split_code: int,
                      users: np.ndarray, items: np.ndarray, ratings: np.ndarray,
                      pred: np.ndarray, alpha: np.ndarray, votes: np.ndarray) -> None:
    """Per-pair record with per-factor attention weights and votes."""
    k = alpha.shape[1]
    header = ["user_id", "item_id", "true_rating", "predicted"]
    for f in range(k):
        header += [f"alpha_{f}", f"vote_{f}"]
    lines = ["\t".join(header)]
    for row in range(len(users)):
        cells = [dataset.users[users[row]], dataset.items[items[row]],
                 repr(float(ratings[row])), repr(float(pred[row]))]
        for f in range(k):
            cells += [repr(float(alpha[row, f])), repr(float(votes[row, f]))]
        lines.append("\t".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def export_factor_scores(path, net: DGCLRNet, graph: RatingGraph,
                         dataset: InteractionDataset) -> None:
    """Per train edge and layer: semantic, structural, combined factor scores."""
    with ad.no_grad():
        out = net.forward(graph)
    se = out.semantic.data
    lines = ["user_id\titem_id\trating\tlayer\tk\tse\tst\ts"]
    for layer in range(net.n_layers):
        st = out.structural[layer].data
        s = out.combined[layer].data
        for e in range(graph.n_edges):
            user = dataset.users[graph.edge_user[e]]
            item = dataset.items[graph.edge_item[e]]
            for f in range(net.n_factors):
                lines.append(
                    f"{user}\t{item}\t{graph.edge_rating[e]:g}\t{layer + 1}\t{f}"
                    f"\t{se[e, f]!r}\t{st[e, f]!r}\t{s[e, f]!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass
class FactorReviewSample:
    factor: int
    rating: float
    user_id: str
    item_id: str
    score: float
    interaction_idx: int


def factor_review_report(net: DGCLRNet, graph: RatingGraph, dataset: InteractionDataset,
                         threshold: float = 0.5, ratings: tuple[float, ...] = (1.0, 3.0, 5.0),
                         samples_per_cell: int = 1, seed: int = 0) -> list[FactorReviewSample]:
    """Sample high-confidence train edges per (factor, rating) cell.

    Confidence is the final layer's combined score exceeding `threshold`;
    cells with no qualifying edge are simply absent from the output.
    """
    with ad.no_grad():
        out = net.forward(graph)
    final_scores = out.combined[-1].data
    rng = np.random.default_rng(seed)
    records: list[FactorReviewSample] = []
    for f in range(net.n_factors):
        for r in ratings:
            mask = (graph.edge_rating == r) & (final_scores[:, f] > threshold)
            candidates = np.flatnonzero(mask)
            if len(candidates) == 0:
                continue
            chosen = rng.choice(candidates, size=min(samples_per_cell, len(candidates)),
                                replace=False)
            for e in np.sort(chosen):
                records.append(FactorReviewSample(
                    factor=f, rating=float(r),
                    user_id=dataset.users[graph.edge_user[e]],
                    item_id=dataset.items[graph.edge_item[e]],
                    score=float(final_scores[e, f]),
                    interaction_idx=int(graph.interaction_idx[e])))
    return records


def write_factor_review_report(path, records: list[FactorReviewSample]) -> None:
    lines = ["k\trating\tuser_id\titem_id\tscore\tinteraction_idx"]
    for rec in records:
        lines.append(f"{rec.factor}\t{rec.rating:g}\t{rec.user_id}\t{rec.item_id}"
                     f"\t{rec.score!r}\t{rec.interaction_idx}")
    atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass
class PredictionExplanation:
    user_id: str
    item_id: str
    predicted: float
    alpha: list[float]
    votes: list[float]
    dominant_factor: int | None   # argmax factor when its weight exceeds 0.5

    def to_text(self) -> str:
        lines = [f"user={self.user_id} item={self.item_id} predicted={self.predicted:.4f}"]
        for f, (a, v) in enumerate(zip(self.alpha, self.votes)):
            marker = "  <-- dominant" if f == self.dominant_factor else ""
            lines.append(f"  factor {f}: alpha={a:.4f} vote={v:.4f}{marker}")
        if self.dominant_factor is None:
            lines.append("  no factor exceeds attention 0.5")
        return "\n".join(lines)


def explain_prediction(net: DGCLRNet, graph: RatingGraph, dataset: InteractionDataset,
                       user_id: str, item_id: str) -> PredictionExplanation:
    """Per-factor attention and votes for one pair, flagging a dominant factor."""
    if user_id not in dataset.user_index:
        raise KeyError(f"unknown user id {user_id!r}")
    if item_id not in dataset.item_index:
        raise KeyError(f"unknown item id {item_id!r}")
    users = np.array([dataset.user_index[user_id]])
    items = np.array([dataset.item_index[item_id]])
    pred, alpha, votes = predict_pairs_arrays(net, graph, users, items)
    best = int(np.argmax(alpha[0]))
    dominant = best if alpha[0, best] > 0.5 else None
    return PredictionExplanation(
        user_id=user_id, item_id=item_id, predicted=float(pred[0]),
        alpha=[float(a) for a in alpha[0]], votes=[float(v) for v in votes[0]],
        dominant_factor=dominant)


# ------------------------------------------------------------------ benchmark


@dataclass
class BenchRow:
    n_edges: int
    n_users: int
    n_items: int
    seconds: float


@dataclass
class BenchResult:
    rows: list[BenchRow]
    exponent: float

    def to_text(self) -> str:
        lines = ["n_edges\tn_users\tn_items\tseconds"]
        for r in self.rows:
            lines.append(f"{r.n_edges}\t{r.n_users}\t{r.n_items}\t{r.seconds:.6f}")
        lines.append(f"# log-log fit exponent: {self.exponent:.4f}")
        return "\n".join(lines) + "\n"


def runtime_bench(edge_counts: tuple[int, ...], d: int = 32, n_factors: int = 2,
                  n_layers: int = 2, seed: int = 0, repeats: int = 3) -> BenchResult:
    """Time one supervised forward+backward per graph size.

    Graphs grow with constant average degree (nodes scale with edges), so the
    measured work tracks the edge count.  Reports the least-squares slope of
    log(time) against log(edges).
    """
    rows: list[BenchRow] = []
    for n_edges in edge_counts:
        n_users = max(8, n_edges // 10)
        n_items = max(8, n_edges // 12)
        if n_edges > 0:
            data = make_synthetic_dataset(n_users, n_items, n_edges, d=d,
                                          n_factors=max(2, n_factors), seed=seed)
            split_dataset(data, seed=seed)
            graph = build_graph(data)
        else:
            graph = RatingGraph(n_users, n_items, (1.0,), np.zeros(0, dtype=np.int64),
                                np.zeros(0, dtype=np.int64), np.zeros(0),
                                np.zeros((0, d)), np.zeros(0, dtype=np.int64))
        config = TrainConfig(d=d, K=n_factors, L=n_layers, lambda1=0.0, lambda2=0.0,
                             seed=seed, epochs=1)
        net = build_net(config, graph.n_users, graph.n_items, graph.rating_values)
        graph.csr_matrices()  # structural setup is excluded from the timing

        def step():
            if graph.n_edges == 0:
                net.forward(graph)  # empty work: propagation only, no loss
                return
            loss = training_step_loss(net, graph, config, None, None,
                                      np.random.default_rng(0))
            loss.total.backward()
            net.store.zero_grads()

        step()  # warmup
        best = float("inf")
        for _ in range(repeats):
            start = time.perf_counter()
            step()
            best = min(best, time.perf_counter() - start)
        rows.append(BenchRow(graph.n_edges, graph.n_users, graph.n_items, best))

    sized = [r for r in rows if r.n_edges > 0]
    if len(sized) > 1:
        logs = np.log([r.n_edges for r in sized])
        logt = np.log([r.seconds for r in sized])
        slope = float(np.polyfit(logs, logt, 1)[0])
    else:
        slope = float("nan")
    return BenchResult(rows, slope)
