"""Parameter initialisation, Adam, learning-rate schedule and the training loop."""

from __future__ import annotations

import copy
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .config import TrainConfig
from .errors import ContractError, NonFiniteError
from .evaluation import EvalReport, evaluate
from .graph import DatasetSplit, SignedBipartiteGraph
from .losses import (
    BprBatch,
    EdgeBatch,
    EmbeddingGrads,
    LossValues,
    MlpParams,
    bpr_negative,
    bpr_positive,
    l2_penalty,
    mse_rating,
    orthogonality,
    sample_batch,
    sample_edges,
)
from .propagation import EmbeddingState, backward, full_forward, read_embeddings, write_embeddings

logger = logging.getLogger(__name__)

PARAM_NAMES = ("e0_user", "e0_item", "w1", "w2")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class ModelParams:
    """Trainable tensors with matching gradient and Adam moment buffers."""

    tensors: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        for name, t in self.tensors.items():
            self.grads.setdefault(name, np.zeros_like(t))
            self.m.setdefault(name, np.zeros_like(t))
            self.v.setdefault(name, np.zeros_like(t))

    @property
    def e0_user(self) -> np.ndarray:
        return self.tensors["e0_user"]

    @property
    def e0_item(self) -> np.ndarray:
        return self.tensors["e0_item"]

    @property
    def mlp(self) -> MlpParams:
        return MlpParams(self.tensors["w1"], self.tensors["w2"])

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: TrainConfig, num_users: int, num_items: int, rng: np.random.Generator) -> ModelParams:
    """Xavier-uniform init; embedding tables count as (rows x dim) matrices."""
    if num_users < 1 or num_items < 1:
        raise ContractError("need at least one user and one item")
    d = config.dim
    shapes = {
        "e0_user": (num_users, d),
        "e0_item": (num_items, d),
        "w1": (2 * d, 2 * d),
        "w2": (2 * d, 1),
    }
    tensors = {}
    for name in PARAM_NAMES:
        rows, cols = shapes[name]
        a = xavier_bound(rows, cols)
        tensors[name] = rng.uniform(-a, a, size=shapes[name]).astype(config.dtype)
    return ModelParams(tensors)


def adam_step(params: ModelParams, lr: float) -> None:
    """In-place Adam update with bias correction; clears gradients."""
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    params.step += 1
    t = params.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, theta in params.tensors.items():
        g = params.grads[name]
        m, v = params.m[name], params.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    params.zero_grad()


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in config.lr_milestones if m <= epoch)
    return config.lr * config.lr_gamma**passed


def embed(graph: SignedBipartiteGraph, params: ModelParams, num_layers: int) -> EmbeddingState:
    return full_forward(graph, params.e0_user, params.e0_item, num_layers)


def compute_objective(
    graph: SignedBipartiteGraph,
    params: ModelParams,
    config: TrainConfig,
    batch: BprBatch,
    edges: EdgeBatch | None = None,
) -> tuple[LossValues, dict[str, np.ndarray]]:
    """Full objective on one batch and its gradient for every parameter.

    Disabled terms contribute exactly zero value and zero gradient.
    """
    state = embed(graph, params, config.layers)
    losses = _loss_record(config)
    eg = EmbeddingGrads.zeros_like(state)
    mlp_grads = None

    losses.bpr_pos, g = bpr_positive(batch, state, config.c1)
    eg += g
    if config.enable_bpr_neg:
        losses.bpr_neg, g = bpr_negative(batch, state, config.c2, config.signed_neg_bpr)
        eg += g.scaled(config.bpr_neg_weight)
    if config.enable_mse:
        if edges is None:
            raise ContractError("MSE term enabled but no edge batch given")
        losses.mse, g, mlp_grads = mse_rating(edges, state, params.mlp)
        eg += g.scaled(config.mse_weight)
    if config.enable_ortho:
        users, items = batch.touched_nodes()
        losses.ortho, g = orthogonality(users, items, state)
        eg += g.scaled(config.ortho_weight)

    g_user, g_item = backward(graph, state, eg.pos_user, eg.pos_item, eg.neg_user, eg.neg_item)
    losses.l2, l2_grads = l2_penalty(params.tensors)
    grads = {name: config.reg_weight * l2_grads[name] for name in PARAM_NAMES}
    grads["e0_user"] += g_user
    grads["e0_item"] += g_item
    if mlp_grads is not None:
        grads["w1"] += config.mse_weight * mlp_grads.w1
        grads["w2"] += config.mse_weight * mlp_grads.w2
    return losses, grads


def _loss_record(config: TrainConfig, values=(0.0, 0.0, 0.0, 0.0, 0.0)) -> LossValues:
    return LossValues(
        *values,
        reg_weight=config.reg_weight,
        bpr_neg_weight=config.bpr_neg_weight,
        mse_weight=config.mse_weight,
        ortho_weight=config.ortho_weight,
    )


def train_step(
    graph: SignedBipartiteGraph,
    params: ModelParams,
    config: TrainConfig,
    rng: np.random.Generator,
    lr: float,
) -> LossValues:
    batch = sample_batch(graph, config.batch_size, config.negatives_per_obs, rng)
    edges = sample_edges(graph, config.batch_size, rng) if config.enable_mse else None
    losses, grads = compute_objective(graph, params, config, batch, edges)
    if not math.isfinite(losses.total):
        raise NonFiniteError(f"non-finite loss at step {params.step}")
    for name, g in grads.items():
        params.grads[name] += g
    adam_step(params, lr)
    return losses


def train_epoch(
    graph: SignedBipartiteGraph,
    params: ModelParams,
    config: TrainConfig,
    rng: np.random.Generator,
    lr: float | None = None,
) -> LossValues:
    """``ceil(|E| / batch_size)`` steps; returns the mean of each loss term."""
    if lr is None:
        lr = config.lr
    steps = max(1, math.ceil(graph.num_edges / config.batch_size))
    totals = np.zeros(5)
    for _ in range(steps):
        s = train_step(graph, params, config, rng, lr)
        totals += (s.bpr_pos, s.bpr_neg, s.mse, s.ortho, s.l2)
    mean = totals / steps
    return _loss_record(config, mean.tolist())


@dataclass
class EpochLog:
    epoch: int
    lr: float
    losses: LossValues
    secs: float
    recall: float | None = None

    def line(self) -> str:
        s = self.losses
        return (
            f"{self.epoch}\t{self.lr:.6g}\t{s.total:.6f}\t{s.bpr_pos:.6f}\t{s.bpr_neg:.6f}"
            f"\t{s.mse:.6f}\t{s.ortho:.6f}\t{self.secs:.4f}"
        )


LOG_HEADER = "epoch\tlr\tloss_total\tloss_bpr+\tloss_bpr-\tloss_mse\tloss_ortho\tsecs"


@dataclass
class FoldResult:
    fold_index: int
    best_params: ModelParams
    best_epoch: int
    best_recall: float
    log: list[EpochLog]
    report: EvalReport | None = None

    @property
    def secs_per_epoch(self) -> float | None:
        if not self.log:
            return None
        return sum(e.secs for e in self.log) / len(self.log)


def fit_fold(
    split: DatasetSplit,
    config: TrainConfig,
    on_epoch: Callable[[int, EpochLog], None] | None = None,
) -> FoldResult:
    """Train on one split, keeping the parameters with the best Recall@10.

    Evaluation runs every ``config.eval_every`` epochs and after the last one.
    """
    graph = split.train
    rng = np.random.default_rng([config.seed, split.fold_index])
    params = init_params(config, graph.num_users, graph.num_items, rng)
    best, best_epoch, best_recall, best_report = params.copy(), -1, -math.inf, None
    log: list[EpochLog] = []
    select_k = 10 if 10 in config.eval_k else min(config.eval_k)
    filter_k = config.filter_k or None
    for epoch in range(config.epochs):
        lr = lr_schedule(config, epoch)
        t0 = time.perf_counter()
        losses = train_epoch(graph, params, config, rng, lr)
        entry = EpochLog(epoch, lr, losses, time.perf_counter() - t0)
        if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
            state = embed(graph, params, config.layers)
            report = evaluate(state, split, config.eval_k, config.enable_filter, filter_k)
            entry.recall = report.metric("recall", select_k)
            if entry.recall > best_recall:
                best, best_epoch, best_recall, best_report = params.copy(), epoch, entry.recall, report
        log.append(entry)
        logger.debug(entry.line())
        if on_epoch is not None:
            on_epoch(split.fold_index, entry)
    if best_report is not None:
        best_report.secs_per_epoch = sum(e.secs for e in log) / len(log)
    return FoldResult(split.fold_index, best, best_epoch, max(best_recall, 0.0), log, best_report)


def fit(
    splits: Sequence[DatasetSplit],
    config: TrainConfig,
    on_epoch: Callable[[int, EpochLog], None] | None = None,
) -> list[FoldResult]:
    if not splits:
        raise ContractError("fit needs at least one split")
    return [fit_fold(split, config, on_epoch) for split in splits]


# --- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"SGCKPT\x00\x01"
CHECKPOINT_VERSION = 1
_EXT = struct.Struct("<8sIQQ")


def write_checkpoint(stream: BinaryIO, params: ModelParams, num_layers: int) -> None:
    """Embedding checkpoint followed by MLP weights and Adam state.

    Trailer: ``(magic, version, d, step)``, then for w1, w2 the tensor, and
    for each of the four parameters its first and second moments, all
    little-endian float64 in row-major order.
    """
    write_embeddings(stream, params.e0_user, params.e0_item, num_layers)
    d = params.e0_user.shape[1]
    stream.write(_EXT.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, d, params.step))
    for name in ("w1", "w2"):
        stream.write(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())
    for name in PARAM_NAMES:
        stream.write(np.ascontiguousarray(params.m[name], dtype="<f8").tobytes())
        stream.write(np.ascontiguousarray(params.v[name], dtype="<f8").tobytes())


def read_checkpoint(stream: BinaryIO, dtype=np.float64) -> tuple[ModelParams, int]:
    e0_user, e0_item, num_layers = read_embeddings(stream)
    head = stream.read(_EXT.size)
    if len(head) != _EXT.size:
        raise ContractError("checkpoint has no optimizer section")
    magic, version, d, step = _EXT.unpack(head)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ContractError("unrecognised checkpoint trailer")
    shapes = {"e0_user": e0_user.shape, "e0_item": e0_item.shape, "w1": (2 * d, 2 * d), "w2": (2 * d, 1)}

    def take(shape) -> np.ndarray:
        nbytes = int(np.prod(shape)) * 8
        buf = stream.read(nbytes)
        if len(buf) != nbytes:
            raise ContractError("truncated checkpoint")
        return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(dtype)

    tensors = {"e0_user": e0_user.astype(dtype), "e0_item": e0_item.astype(dtype)}
    tensors["w1"] = take(shapes["w1"])
    tensors["w2"] = take(shapes["w2"])
    m, v = {}, {}
    for name in PARAM_NAMES:
        m[name] = take(shapes[name])
        v[name] = take(shapes[name])
    return ModelParams(tensors, m=m, v=v, step=int(step)), num_layers


def save_checkpoint(path: str | Path, params: ModelParams, num_layers: int) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, params, num_layers)


def load_checkpoint(path: str | Path, dtype=np.float64) -> tuple[ModelParams, int]:
    with open(path, "rb") as fh:
        return read_checkpoint(fh, dtype)
