"""Acceptance suite: one test per criterion, one PASS line per criterion.

Run with `pytest tests/test_acceptance.py -v -s` to see the report lines.
"""

import time

import numpy as np
import pytest

import reference as ref
from helpers import finite_diff_grad, relative_grad_error

from dgclr import autodiff as ad
from dgclr import graphnet as gn
from dgclr.autodiff import ParameterStore, Tensor
from dgclr.datasets import (
    TEST,
    TRAIN,
    Interaction,
    InteractionDataset,
    RatingGraph,
    build_graph,
    make_synthetic_dataset,
    split_dataset,
)
from dgclr.evaluation import evaluate_mse, run_ablation, runtime_bench
from dgclr.model import DGCLRNet
from dgclr.training import (
    TrainConfig,
    build_net,
    fit,
    load_model,
    save_checkpoint,
    training_step_loss,
)


def report(number: int, name: str, detail: str) -> None:
    print(f"[criterion {number:2d}] {name}: PASS ({detail})")


def random_graph(rng, n_users, n_items, n_edges, d, n_ratings=3):
    pairs = set()
    while len(pairs) < n_edges:
        pairs.add((int(rng.integers(n_users)), int(rng.integers(n_items))))
    pairs = sorted(pairs)
    eu = np.array([p[0] for p in pairs])
    ei = np.array([p[1] for p in pairs])
    ratings = rng.integers(1, n_ratings + 1, size=len(pairs)).astype(float)
    reviews = rng.normal(size=(len(pairs), d))
    return RatingGraph(n_users, n_items, tuple(float(r) for r in range(1, n_ratings + 1)),
                       eu, ei, ratings, reviews, np.arange(len(pairs)))


# ---------------------------------------------------------------- criterion 1


def test_criterion_1_gradient_suite():
    """Full-objective gradients vs central finite differences, every parameter."""
    start = time.time()
    rng = np.random.default_rng(2024)
    users = ["u0", "u1", "u2"]
    items = ["i0", "i1", "i2"]
    edges = [("u0", "i0", 5.0), ("u0", "i1", 3.0), ("u1", "i1", 1.0),
             ("u1", "i2", 4.0), ("u2", "i0", 2.0)]
    interactions = [Interaction(u, i, r, rng.normal(size=8)) for u, i, r in edges]
    interactions.append(Interaction("u2", "i1", 3.0, rng.normal(size=8)))
    interactions.append(Interaction("u2", "i2", 2.0, rng.normal(size=8)))
    data = InteractionDataset(users, items, interactions, 8,
                              (1.0, 2.0, 3.0, 4.0, 5.0))
    data.split = np.array([TRAIN] * 5 + [1, 2], dtype=np.uint8)
    graph = build_graph(data)
    assert graph.n_edges == 5

    config = TrainConfig(d=8, K=2, L=2, tau=0.5, eta=0.7, lambda1=0.5, lambda2=0.5,
                         edge_keep_ratio=0.8, seed=7)
    net = build_net(config, 3, 3, data.rating_values)
    view_seeds = (1717, 2323)

    def loss_value() -> float:
        step = training_step_loss(net, graph, config, None, view_seeds,
                                  np.random.default_rng(99))
        return step.total.item()

    step = training_step_loss(net, graph, config, None, view_seeds,
                              np.random.default_rng(99))
    step.total.backward()

    worst = 0.0
    checked = 0
    for name, param in net.store.items():
        numeric = finite_diff_grad(loss_value, param.tensor.data, step=1e-5)
        err = relative_grad_error(param.grad, numeric)
        worst = max(worst, err)
        checked += param.tensor.data.size
        assert err < 1e-4, f"{name}: relative gradient error {err:.2e}"
    elapsed = time.time() - start
    assert elapsed < 30.0, f"gradient suite took {elapsed:.1f}s"
    report(1, "gradient suite",
           f"{checked} scalar parameters, worst relative error {worst:.2e}, "
           f"{elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_normalization_suite():
    start = time.time()
    rng = np.random.default_rng(5)
    checked_edges = 0
    for instance in range(100):
        k = int(rng.choice([2, 4, 8]))
        d = k * int(rng.choice([2, 4]))
        n_users = int(rng.integers(3, 9))
        n_items = int(rng.integers(3, 9))
        n_edges = int(rng.integers(2, min(n_users * n_items, 15)))
        graph = random_graph(rng, n_users, n_items, n_edges, d)
        store = ParameterStore(seed=instance)
        net = DGCLRNet(store, n_users, n_items, graph.rating_values, d, k,
                       n_layers=int(rng.choice([1, 2])), tau=float(rng.choice([0.2, 0.5, 1.0])),
                       eta=0.7)
        out = net.forward(graph)
        pred_users = rng.integers(0, n_users, size=4)
        pred_items = rng.integers(0, n_items, size=4)
        _, alpha, _, _ = net.predict(out, pred_users, pred_items)
        for scores in [out.semantic, *out.structural, *out.combined, alpha]:
            arr = scores.data
            assert np.all(np.abs(arr.sum(axis=-1) - 1.0) < 1e-10)
            assert np.all(arr > 0.0) and np.all(arr < 1.0)
        checked_edges += n_edges
    elapsed = time.time() - start
    assert elapsed < 10.0, f"normalization suite took {elapsed:.1f}s"
    report(2, "score normalization",
           f"100 instances, {checked_edges} edges, K in {{2,4,8}}, {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_message_passing_oracle():
    start = time.time()
    rng = np.random.default_rng(11)
    worst = 0.0
    for instance in range(20):
        k = int(rng.choice([1, 2, 4]))
        layers = int(rng.choice([1, 2]))
        chunk = int(rng.choice([2, 4]))
        n_users = int(rng.integers(3, 11))
        n_items = int(rng.integers(3, 11))
        n_edges = int(rng.integers(2, min(n_users * n_items, 25)))
        graph = random_graph(rng, n_users, n_items, n_edges, d=chunk * k)

        u_prev = rng.normal(size=(n_users, k, chunk))
        v_prev = rng.normal(size=(n_items, k, chunk))
        rf = rng.normal(size=(n_edges, k, chunk))
        for _ in range(layers):
            scores = rng.uniform(0.05, 1.0, size=(n_edges, k))
            w_r = {r: [rng.normal(size=(chunk, chunk)) for _ in range(k)]
                   for r in graph.rating_values}
            out_w = rng.normal(size=(chunk, chunk))
            u_vec, v_vec = gn.message_passing_layer(
                graph, Tensor(scores), Tensor(u_prev), Tensor(v_prev), Tensor(rf),
                [[Tensor(w) for w in w_r[r]] for r in graph.rating_values],
                Tensor(out_w))
            u_ref, v_ref = ref.message_passing(
                graph.edge_user, graph.edge_item, graph.edge_rating, scores,
                u_prev, v_prev, rf, w_r, out_w, n_users, n_items)
            worst = max(worst,
                        float(np.max(np.abs(u_vec.data - u_ref), initial=0.0)),
                        float(np.max(np.abs(v_vec.data - v_ref), initial=0.0)))
            np.testing.assert_allclose(u_vec.data, u_ref, atol=1e-10, rtol=1e-10)
            np.testing.assert_allclose(v_vec.data, v_ref, atol=1e-10, rtol=1e-10)
            u_prev, v_prev = u_vec.data, v_vec.data
    elapsed = time.time() - start
    assert elapsed < 30.0, f"oracle suite took {elapsed:.1f}s"
    report(3, "message-passing oracle",
           f"20 instances, worst |diff| {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_single_factor_collapse():
    data = make_synthetic_dataset(10, 8, 45, d=8, seed=2)
    split_dataset(data, seed=3)
    graph = build_graph(data)
    store = ParameterStore(seed=4)
    net = DGCLRNet(store, 10, 8, graph.rating_values, 8, 1, 2, tau=0.5, eta=0.7)
    out = net.forward(graph)

    for scores in [out.semantic, *out.structural, *out.combined]:
        assert np.all(scores.data == 1.0)

    w_review = [
        {r: store[f"mp/review/l{layer}/r{int(r)}/k0"].data for r in graph.rating_values}
        for layer in range(2)]
    u_ref, v_ref = ref.single_channel_forward(
        graph, store["embed/user"].data, store["embed/item"].data,
        store["proj/w/k0"].data, store["proj/b/k0"].data,
        w_review, [store["mp/out/l0"].data, store["mp/out/l1"].data], 2)
    assert np.array_equal(out.u_final.data.reshape(u_ref.shape), u_ref)
    assert np.array_equal(out.v_final.data.reshape(v_ref.shape), v_ref)
    report(4, "single-factor collapse",
           "all scores exactly 1.0; forward bitwise equal to flat reference")


# ---------------------------------------------------------------- criterion 5


def test_criterion_5_overfit_synthetic():
    start = time.time()
    data = make_synthetic_dataset(50, 40, 600, d=32, n_factors=2, noise=0.1, seed=42)
    split_dataset(data, seed=42)
    config = TrainConfig(d=32, K=2, L=2, tau=0.5, eta=0.7, lambda1=0.0, lambda2=0.0,
                         lr=0.01, epochs=200, batch_size=0, seed=0, patience=0)
    result = fit(data, config)
    train_mse = evaluate_mse(result.net, result.graph, data, TRAIN)
    test_mse = evaluate_mse(result.net, result.graph, data, TEST)
    elapsed = time.time() - start
    assert train_mse < 0.05, f"train MSE {train_mse:.4f} >= 0.05"
    assert test_mse < 0.5, f"test MSE {test_mse:.4f} >= 0.5"
    assert elapsed < 120.0, f"overfit run took {elapsed:.1f}s"
    report(5, "synthetic overfit",
           f"train MSE {train_mse:.4f} < 0.05, test MSE {test_mse:.4f} < 0.5, "
           f"{elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 6


def test_criterion_6_disentangling_benefit():
    start = time.time()
    results = {}
    for variant in ("full", "uniform_s"):
        results[variant] = []
        for seed in range(5):
            data = make_synthetic_dataset(50, 40, 600, d=32, n_factors=2,
                                          noise=0.1, seed=42)
            split_dataset(data, seed=42)
            config = TrainConfig(d=32, K=2, L=2, tau=0.2, eta=0.9,
                                 lambda1=0.0, lambda2=0.0, lr=0.01, epochs=300,
                                 seed=seed, patience=0)
            _, test_mse = run_ablation(data, config, variant)
            results[variant].append(test_mse)
    full_mean = float(np.mean(results["full"]))
    uniform_mean = float(np.mean(results["uniform_s"]))
    print("    per-seed test MSE, full:     "
          + " ".join(f"{m:.4f}" for m in results["full"]))
    print("    per-seed test MSE, uniform:  "
          + " ".join(f"{m:.4f}" for m in results["uniform_s"]))
    assert full_mean <= uniform_mean, (
        f"full mean {full_mean:.4f} > uniform mean {uniform_mean:.4f}")
    report(6, "disentangling benefit",
           f"mean test MSE full {full_mean:.4f} <= uniform {uniform_mean:.4f}, "
           f"5 seeds, {time.time() - start:.0f}s")


# ---------------------------------------------------------------- criterion 7


def test_criterion_7_contrastive_symmetric_point():
    data = make_synthetic_dataset(12, 10, 70, d=8, seed=3)
    split_dataset(data, seed=3)
    graph = build_graph(data)
    config = TrainConfig(d=8, K=2, L=2, lambda1=0.5, lambda2=0.5, seed=5)
    net = build_net(config, data.n_users, data.n_items, data.rating_values)
    for name in ("dcl/fnd_user", "dcl/fnd_item", "dcl/fed"):
        net.store[name].tensor.data[...] = 0.0
    step = training_step_loss(net, graph, config, None, (31, 41),
                              np.random.default_rng(7))
    assert step.fnd == 0.0
    assert step.fed == 0.0
    assert step.total.item() == step.sup
    report(7, "contrastive symmetric point",
           "zero discriminators give fnd = fed = 0 exactly; total == supervised")


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_near_linear_scaling():
    start = time.time()
    result = runtime_bench((1_000, 10_000, 100_000), d=32, n_factors=2,
                           n_layers=2, seed=0, repeats=3)
    elapsed = time.time() - start
    times = ", ".join(f"{r.n_edges}e:{r.seconds:.3f}s" for r in result.rows)
    assert 0.8 <= result.exponent <= 1.3, (
        f"fit exponent {result.exponent:.3f} outside [0.8, 1.3] ({times})")
    assert elapsed < 300.0, f"benchmark took {elapsed:.0f}s"
    report(8, "near-linear scaling",
           f"exponent {result.exponent:.3f} in [0.8, 1.3]; {times}; {elapsed:.0f}s")


# ---------------------------------------------------------------- criterion 9


def test_criterion_9_determinism(tmp_path):
    def run(tag):
        data = make_synthetic_dataset(16, 12, 90, d=8, seed=6)
        split_dataset(data, seed=6)
        config = TrainConfig(d=8, K=2, L=2, lambda1=0.4, lambda2=0.4,
                             epochs=5, seed=13, patience=0)
        result = fit(data, config)
        path = tmp_path / f"{tag}.ck"
        save_checkpoint(path, result.store, config,
                        epoch=result.best_epoch, best_val_mse=result.best_val_mse)
        history = [(r.epoch, r.train_loss, r.sup, r.fnd, r.fed, r.val_mse)
                   for r in result.history]
        return path.read_bytes(), history

    blob1, hist1 = run("a")
    blob2, hist2 = run("b")
    assert blob1 == blob2
    assert hist1 == hist2
    report(9, "determinism", "two seeded runs: checkpoints and history bitwise equal")


# --------------------------------------------------------------- criterion 10


def test_criterion_10_checkpoint_round_trip(tmp_path):
    data = make_synthetic_dataset(16, 12, 90, d=8, seed=8)
    split_dataset(data, seed=8)
    config = TrainConfig(d=8, K=2, L=2, lambda1=0.3, lambda2=0.3, epochs=4,
                         seed=3, patience=0)
    result = fit(data, config)
    before = evaluate_mse(result.net, result.graph, data, TEST)

    path = tmp_path / "model.ck"
    save_checkpoint(path, result.store, config)
    net2, _, _ = load_model(path, data)
    after = evaluate_mse(net2, build_graph(data), data, TEST)
    assert after == before
    report(10, "checkpoint round trip", f"test MSE identical: {before!r}")
