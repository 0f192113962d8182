"""Training loop: objective assembly, Adam optimization, checkpoints.

The objective is the supervised MSE over training interactions plus two
weighted contrastive terms; both contrastive paths stay fully dormant when
their weights are zero (no graph views are ever constructed).  Early stopping
tracks validation MSE, and the best-validation parameters are restored when
training ends.

Checkpoints are a self-contained binary: magic "DGCLRCK1", a length-prefixed
config block (the flat key = value text), then named float64 tensors
covering parameter values, Adam moments, step counts, and the bookkeeping
scalars.  Files are written atomically via temp-and-rename.
"""

from __future__ import annotations

import dataclasses
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor, adam_step
from .contrastive import drop_edges, edge_discrimination_loss, node_discrimination_loss
from .datasets import TRAIN, VAL, InteractionDataset, RatingGraph, build_graph
from .model import VARIANTS, DGCLRNet
from .validation import check_choice, check_divisible, check_positive, check_unit_interval

CHECKPOINT_MAGIC = b"DGCLRCK1"


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters; field names double as config-file keys and CLI flags."""

    d: int = 32
    K: int = 2
    L: int = 2
    tau: float = 0.5
    eta: float = 0.7
    edge_keep_ratio: float = 0.8
    lambda1: float = 0.5
    lambda2: float = 0.5
    lr: float = 0.01
    epochs: int = 200
    batch_size: int = 0
    seed: int = 0
    patience: int = 20
    precision: str = "float64"
    variant: str = "full"
    stabilized_cl: bool = False

    @property
    def edge_drop_prob(self) -> float:
        return 1.0 - self.edge_keep_ratio

    def validate(self) -> "TrainConfig":
        check_divisible("d", self.d, "K", self.K)
        check_positive("L", self.L)
        check_positive("tau", self.tau)
        check_unit_interval("eta", self.eta)
        check_unit_interval("edge_keep_ratio", self.edge_keep_ratio)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1/lambda2 must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        check_positive("epochs", self.epochs)
        check_choice("precision", self.precision, ("float64", "float32"))
        check_choice("variant", self.variant, VARIANTS)
        return self

    def replace(self, **overrides) -> "TrainConfig":
        return dataclasses.replace(self, **overrides)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in fields:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            ftype = fields[key].type
            if ftype == "int":
                values[key] = int(val)
            elif ftype == "float":
                values[key] = float(val)
            elif ftype == "bool":
                if val.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(f"config line {lineno}: bad bool {val!r}")
                values[key] = val.lower() in ("true", "1")
            else:
                values[key] = val
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    sup: float
    fnd: float
    fed: float
    val_mse: float


@dataclass
class TrainResult:
    net: DGCLRNet
    store: ParameterStore
    graph: RatingGraph
    config: TrainConfig
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = float("inf")
    diverged: bool = False


# ------------------------------------------------------------------- losses


def supervised_loss(predictions: Tensor, ratings: np.ndarray) -> Tensor:
    """Mean squared error over a nonempty batch of observed ratings."""
    if predictions.shape[0] == 0:
        raise ValueError("supervised loss needs a nonempty batch")
    diff = predictions - Tensor(ratings, dtype=predictions.dtype)
    return (diff * diff).mean()


def total_loss(sup, fnd, fed, lambda1: float, lambda2: float) -> Tensor:
    """sup + lambda1 * fnd + lambda2 * fed, exactly in that form."""
    return ad.as_tensor(sup) + ad.as_tensor(fnd) * lambda1 + ad.as_tensor(fed) * lambda2


# ------------------------------------------------------------------ building


def build_net(config: TrainConfig, n_users: int, n_items: int,
              rating_values: tuple[float, ...]) -> DGCLRNet:
    config.validate()
    dtype = np.float64 if config.precision == "float64" else np.float32
    store = ParameterStore(config.seed, dtype=dtype)
    return DGCLRNet(store, n_users, n_items, rating_values, config.d, config.K,
                    config.L, config.tau, config.eta, variant=config.variant)


@dataclass
class StepLosses:
    total: Tensor
    sup: float
    fnd: float
    fed: float


def training_step_loss(net: DGCLRNet, graph: RatingGraph, config: TrainConfig,
                       batch: np.ndarray | None, view_seeds: tuple[int, int] | None,
                       neg_rng: np.random.Generator) -> StepLosses:
    """Assemble the full objective for one step without updating anything.

    `batch` selects a subset of the graph's edges (None = all).  `view_seeds`
    must be provided when the node-discrimination weight is positive.
    Exposing this as a pure function makes the whole-objective gradient
    checkable against finite differences with frozen sampling.
    """
    scatter_u, _, scatter_i, _ = graph.csr_matrices()
    out = net.forward(graph)
    if batch is None:
        users, items, ratings = graph.edge_user, graph.edge_item, graph.edge_rating
        pred, _, _, features = net.predict(out, users, items,
                                           scatter_u=scatter_u, scatter_i=scatter_i)
        batch_reviews = graph.reviews
        review_factors = out.review_factors
    else:
        users, items, ratings = (graph.edge_user[batch], graph.edge_item[batch],
                                 graph.edge_rating[batch])
        pred, _, _, features = net.predict(out, users, items)
        batch_reviews = graph.reviews[batch]
        review_factors = out.review_factors[batch]

    sup = supervised_loss(pred, ratings)
    loss = sup
    fnd_val = fed_val = 0.0
    if config.lambda1 > 0:
        g1 = drop_edges(graph, config.edge_drop_prob, view_seeds[0])
        g2 = drop_edges(graph, config.edge_drop_prob, view_seeds[1])
        out1, out2 = net.forward(g1), net.forward(g2)
        fnd = node_discrimination_loss(
            out1.u_final, out2.u_final, out1.v_final, out2.v_final,
            net.w_fnd_user, net.w_fnd_item, neg_rng,
            holistic=net.holistic_nd, stabilized=config.stabilized_cl)
        loss = loss + fnd * config.lambda1
        fnd_val = fnd.item()
    if config.lambda2 > 0:
        fed = edge_discrimination_loss(
            features, review_factors, net.w_fed, neg_rng,
            holistic_reviews=batch_reviews if net.holistic_ed else None,
            stabilized=config.stabilized_cl)
        loss = loss + fed * config.lambda2
        fed_val = fed.item()
    return StepLosses(loss, sup.item(), fnd_val, fed_val)


def validation_mse(net: DGCLRNet, graph: RatingGraph, dataset: InteractionDataset,
                   split_code: int = VAL) -> float:
    """MSE over a held-out split; prediction never reads held-out reviews."""
    users, items, ratings, _ = dataset.pairs(split_code)
    if len(users) == 0:
        raise ValueError("empty evaluation split")
    with ad.no_grad():
        out = net.forward(graph)
        pred, _, _, _ = net.predict(out, users, items)
    return float(np.mean((pred.data - ratings) ** 2))


def fit(dataset: InteractionDataset, config: TrainConfig,
        log=None) -> TrainResult:
    """Train on the dataset's train split with early stopping on val MSE."""
    config.validate()
    if dataset.split is None:
        raise ValueError("dataset must be split before fitting")
    if dataset.d != config.d:
        raise ValueError(f"config d={config.d} but dataset vectors have d={dataset.d}")

    graph = build_graph(dataset)
    net = build_net(config, dataset.n_users, dataset.n_items, dataset.rating_values)
    result = TrainResult(net=net, store=net.store, graph=graph, config=config)

    rng = np.random.default_rng([config.seed, 0x5EED])
    n_edges = graph.n_edges
    best_params: dict[str, np.ndarray] | None = None
    bad_epochs = 0

    for epoch in range(config.epochs):
        if config.batch_size and config.batch_size < n_edges:
            order = rng.permutation(n_edges)
            batches = [order[i:i + config.batch_size]
                       for i in range(0, n_edges, config.batch_size)]
        else:
            batches = [None]

        sums = np.zeros(4)
        try:
            for batch in batches:
                seeds = (int(rng.integers(2**63)), int(rng.integers(2**63))) \
                    if config.lambda1 > 0 else None
                step = training_step_loss(net, graph, config, batch, seeds, rng)
                step.total.backward()
                adam_step(net.store, config.lr)
                sums += (step.total.item(), step.sup, step.fnd, step.fed)
        except FloatingPointError:
            result.diverged = True
            break

        train_loss, sup, fnd, fed = sums / len(batches)
        val_mse = validation_mse(net, graph, dataset)
        result.history.append(EpochStats(epoch, train_loss, sup, fnd, fed, val_mse))
        if log is not None:
            log(result.history[-1])

        if np.isfinite(val_mse) and val_mse < result.best_val_mse:
            result.best_val_mse = val_mse
            result.best_epoch = epoch
            best_params = net.store.copy_values()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if config.patience > 0 and bad_epochs >= config.patience:
                break

    if best_params is not None:
        net.store.load_values(best_params)
    return result


# ---------------------------------------------------------------- checkpoints


def _checkpoint_tensors(store: ParameterStore, epoch: int,
                        best_val_mse: float) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, p in store.items():
        tensors[name] = p.data
        tensors[f"{name}/adam_m"] = p.adam_m
        tensors[f"{name}/adam_v"] = p.adam_v
        tensors[f"{name}/step"] = np.array([float(p.step_count)])
    tensors["meta/epoch"] = np.array([float(epoch)])
    tensors["meta/best_val_mse"] = np.array([best_val_mse])
    return tensors


def save_checkpoint(path, store: ParameterStore, config: TrainConfig,
                    epoch: int = -1, best_val_mse: float = float("nan")) -> None:
    """Atomically serialize config, parameters, and optimizer state."""
    tensors = _checkpoint_tensors(store, epoch, best_val_mse)
    config_blob = config.to_text().encode("utf-8")
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<I", len(config_blob))
    payload += config_blob
    payload += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        name_b = name.encode("utf-8")
        payload += struct.pack("<I", len(name_b))
        payload += name_b
        payload += struct.pack("<I", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += arr.tobytes()

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[TrainConfig, dict[str, np.ndarray]]:
    """Parse a checkpoint fully; any truncation or corruption raises."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic or unsupported version")
    off = len(CHECKPOINT_MAGIC)
    try:
        (config_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        config_text = blob[off:off + config_len].decode("utf-8")
        if len(blob[off:off + config_len]) != config_len:
            raise CheckpointError(f"{path}: truncated config block")
        off += config_len
        config = TrainConfig.from_text(config_text)
        (n_tensors,) = struct.unpack_from("<I", blob, off)
        off += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            end = off + count * 8
            if end > len(blob):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).copy()
            off = end
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return config, tensors


def restore_store(store: ParameterStore, tensors: dict[str, np.ndarray]) -> None:
    """Load parameter values and optimizer state; shapes must match exactly."""
    for name, p in store.items():
        for key in (name, f"{name}/adam_m", f"{name}/adam_v", f"{name}/step"):
            if key not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tensors[name].shape}, "
                f"model {p.data.shape}")
        p.tensor.data[...] = tensors[name]
        p.adam_m[...] = tensors[f"{name}/adam_m"]
        p.adam_v[...] = tensors[f"{name}/adam_v"]
        p.step_count = int(tensors[f"{name}/step"][0])


def check_config_compatible(requested: TrainConfig, stored: TrainConfig) -> None:
    """Reject structural mismatches between a checkpoint and a requested config."""
    mismatched = [key for key in ("d", "K", "L", "variant", "precision")
                  if getattr(requested, key) != getattr(stored, key)]
    if mismatched:
        detail = ", ".join(
            f"{k}: requested {getattr(requested, k)!r} vs checkpoint {getattr(stored, k)!r}"
            for k in mismatched)
        raise CheckpointError(f"incompatible checkpoint config ({detail})")


def load_model(path, dataset: InteractionDataset,
               expect: TrainConfig | None = None) -> tuple[DGCLRNet, TrainConfig, dict[str, np.ndarray]]:
    """Rebuild the model a checkpoint describes and load its state."""
    config, tensors = load_checkpoint(path)
    if expect is not None:
        check_config_compatible(expect, config)
    net = build_net(config, dataset.n_users, dataset.n_items, dataset.rating_values)
    restore_store(net.store, tensors)
    return net, config, tensors
