"""Training objectives, their analytic gradients, and batch sampling.

All terms are batch means. Gradients are returned with respect to the
combined (final) embeddings; ``propagation.backward`` carries them on to
the trainable layer-0 tables.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .graph import SignedBipartiteGraph
from .propagation import EmbeddingState

logger = logging.getLogger(__name__)


@dataclass
class MlpParams:
    """Rating head: ``relu([e_u, e_i] @ w1) @ w2`` with w1 (2d, 2d), w2 (2d, 1)."""

    w1: np.ndarray
    w2: np.ndarray

    @property
    def dim(self) -> int:
        return self.w1.shape[0] // 2


@dataclass
class BprBatch:
    """Rows of (user, observed item, unobserved item, sign of the observed edge)."""

    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray
    signs: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def touched_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct users and items (observed and sampled) in the batch."""
        return np.unique(self.users), np.unique(np.concatenate([self.pos_items, self.neg_items]))


@dataclass
class EdgeBatch:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray


@dataclass
class EmbeddingGrads:
    pos_user: np.ndarray
    pos_item: np.ndarray
    neg_user: np.ndarray
    neg_item: np.ndarray

    @classmethod
    def zeros_like(cls, state: EmbeddingState) -> "EmbeddingGrads":
        return cls(
            np.zeros_like(state.final_pos_user),
            np.zeros_like(state.final_pos_item),
            np.zeros_like(state.final_neg_user),
            np.zeros_like(state.final_neg_item),
        )

    def scaled(self, factor: float) -> "EmbeddingGrads":
        if factor == 1.0:
            return self
        return EmbeddingGrads(
            self.pos_user * factor, self.pos_item * factor, self.neg_user * factor, self.neg_item * factor
        )

    def __iadd__(self, other: "EmbeddingGrads") -> "EmbeddingGrads":
        self.pos_user += other.pos_user
        self.pos_item += other.pos_item
        self.neg_user += other.neg_user
        self.neg_item += other.neg_item
        return self


@dataclass
class LossValues:
    bpr_pos: float = 0.0
    bpr_neg: float = 0.0
    mse: float = 0.0
    ortho: float = 0.0
    l2: float = 0.0
    reg_weight: float = 0.0
    bpr_neg_weight: float = 1.0
    mse_weight: float = 1.0
    ortho_weight: float = 1.0

    @property
    def total(self) -> float:
        return (
            self.bpr_pos
            + self.bpr_neg_weight * self.bpr_neg
            + self.mse_weight * self.mse
            + self.ortho_weight * self.ortho
            + self.reg_weight * self.l2
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "bpr_pos": self.bpr_pos,
            "bpr_neg": self.bpr_neg,
            "mse": self.mse,
            "ortho": self.ortho,
            "l2": self.l2,
            "total": self.total,
        }


# --- sampling -----------------------------------------------------------------


def sample_batch(
    graph: SignedBipartiteGraph,
    batch_size: int,
    negatives_per_obs: int,
    rng: np.random.Generator,
) -> BprBatch:
    """Draw observed edges (either sign) with replacement and pair each with
    ``negatives_per_obs`` items the user never interacted with.

    Users who interacted with every item have no valid negative and are
    dropped from the batch with a warning.
    """
    if graph.num_edges == 0:
        raise ContractError("cannot sample from a graph without edges")
    if batch_size < 1 or negatives_per_obs < 1:
        raise ValueError("batch_size and negatives_per_obs must be positive")
    idx = rng.integers(0, graph.num_edges, size=batch_size)
    users = graph.users[idx]
    full = graph.user_degree[users] >= graph.num_items
    if full.any():
        logger.warning("skipping %d draws from users who rated every item", int(full.sum()))
        idx, users = idx[~full], users[~full]
    pos_items = graph.items[idx]
    signs = graph.signs[idx]

    users = np.repeat(users, negatives_per_obs)
    pos_items = np.repeat(pos_items, negatives_per_obs)
    signs = np.repeat(signs, negatives_per_obs)
    neg_items = rng.integers(0, graph.num_items, size=len(users))
    bad = np.flatnonzero(graph.has_edges(users, neg_items))
    while len(bad):
        neg_items[bad] = rng.integers(0, graph.num_items, size=len(bad))
        bad = bad[graph.has_edges(users[bad], neg_items[bad])]
    return BprBatch(users, pos_items, neg_items, signs.astype(np.int8))


def sample_edges(graph: SignedBipartiteGraph, batch_size: int, rng: np.random.Generator) -> EdgeBatch:
    """Uniform draw (with replacement) of training edges with their ratings."""
    idx = rng.integers(0, graph.num_edges, size=batch_size)
    return EdgeBatch(graph.users[idx], graph.items[idx], graph.ratings[idx])


# --- loss terms -------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", a, b)


def _check_batch(batch: BprBatch, state: EmbeddingState) -> None:
    if len(batch) == 0:
        raise ContractError("empty batch")
    if batch.users.max() >= state.final_pos_user.shape[0] or max(
        batch.pos_items.max(), batch.neg_items.max()
    ) >= state.final_pos_item.shape[0]:
        raise ContractError("batch index outside embedding table")


def bpr_positive(batch: BprBatch, state: EmbeddingState, c1: float = 1.5) -> tuple[float, EmbeddingGrads]:
    """Mean of ``-ln sigmoid(c * s(u,i) - s(u,j))`` on the positive scores.

    ``c`` is ``c1`` for liked observed items and 1 for disliked ones, so
    liked items are pushed further above unobserved ones.
    """
    if c1 <= 0:
        raise ValueError("c1 must be positive")
    _check_batch(batch, state)
    u, i, j = batch.users, batch.pos_items, batch.neg_items
    eu = state.final_pos_user[u]
    ei = state.final_pos_item[i]
    ej = state.final_pos_item[j]
    c = np.where(batch.signs > 0, c1, 1.0).astype(eu.dtype)
    x = c * _rowdot(eu, ei) - _rowdot(eu, ej)
    n = len(batch)
    value = float(np.logaddexp(0.0, -x).sum() / n)

    g = (-_sigmoid(-x) / n)[:, None]
    grads = EmbeddingGrads.zeros_like(state)
    np.add.at(grads.pos_user, u, g * (c[:, None] * ei - ej))
    np.add.at(grads.pos_item, i, g * c[:, None] * eu)
    np.add.at(grads.pos_item, j, -g * eu)
    return value, grads


def bpr_negative(
    batch: BprBatch, state: EmbeddingState, c2: float = 1.5, signed: bool = False
) -> tuple[float, EmbeddingGrads]:
    """Mean of ``-ln sigmoid(s-(u,j) - c * s-(u,i))`` on the negative scores.

    ``c`` is ``c2`` for disliked observed items and 1 for liked ones. With
    ``signed=True`` the margin is multiplied by the edge sign, so disliked
    observed items are ranked *above* unobserved ones on the negative score
    (liked ones stay below).
    """
    if c2 <= 0:
        raise ValueError("c2 must be positive")
    _check_batch(batch, state)
    u, i, j = batch.users, batch.pos_items, batch.neg_items
    eu = state.final_neg_user[u]
    ei = state.final_neg_item[i]
    ej = state.final_neg_item[j]
    c = np.where(batch.signs < 0, c2, 1.0).astype(eu.dtype)
    s = batch.signs.astype(eu.dtype) if signed else np.ones(len(batch), dtype=eu.dtype)
    x = s * (_rowdot(eu, ej) - c * _rowdot(eu, ei))
    n = len(batch)
    value = float(np.logaddexp(0.0, -x).sum() / n)

    g = (-_sigmoid(-x) * s / n)[:, None]
    grads = EmbeddingGrads.zeros_like(state)
    np.add.at(grads.neg_user, u, g * (ej - c[:, None] * ei))
    np.add.at(grads.neg_item, j, g * eu)
    np.add.at(grads.neg_item, i, -g * c[:, None] * eu)
    return value, grads


def predict_ratings(mlp: MlpParams, user_emb: np.ndarray, item_emb: np.ndarray) -> np.ndarray:
    z = np.concatenate([user_emb, item_emb], axis=1)
    return (np.maximum(z @ mlp.w1, 0.0) @ mlp.w2)[:, 0]


def mse_rating(
    edges: EdgeBatch, state: EmbeddingState, mlp: MlpParams
) -> tuple[float, EmbeddingGrads, MlpParams]:
    """Mean squared error of the MLP rating head on the positive embeddings.

    Returns the loss, embedding gradients, and gradients for ``w1``/``w2``
    packed in an :class:`MlpParams`. The ReLU derivative at 0 is taken as 0.
    """
    n = len(edges.users)
    if n == 0:
        raise ContractError("empty edge batch")
    d = state.final_pos_user.shape[1]
    if mlp.w1.shape != (2 * d, 2 * d) or mlp.w2.shape != (2 * d, 1):
        raise ContractError("MLP weight shapes do not match the embedding dimension")
    eu = state.final_pos_user[edges.users]
    ei = state.final_pos_item[edges.items]
    z = np.concatenate([eu, ei], axis=1)
    h = z @ mlp.w1
    a = np.maximum(h, 0.0)
    pred = (a @ mlp.w2)[:, 0]
    resid = pred - edges.ratings
    value = float(np.mean(resid**2))

    dpred = (2.0 / n) * resid[:, None]
    g_w2 = a.T @ dpred
    dh = (dpred @ mlp.w2.T) * (h > 0)
    g_w1 = z.T @ dh
    dz = dh @ mlp.w1.T

    grads = EmbeddingGrads.zeros_like(state)
    np.add.at(grads.pos_user, edges.users, dz[:, :d])
    np.add.at(grads.pos_item, edges.items, dz[:, d:])
    return value, grads, MlpParams(g_w1, g_w2)


def orthogonality(
    users: np.ndarray, items: np.ndarray, state: EmbeddingState
) -> tuple[float, EmbeddingGrads]:
    """Mean squared dot product between each node's positive and negative
    embedding, averaged separately over ``users`` and ``items``."""
    grads = EmbeddingGrads.zeros_like(state)
    value = 0.0
    for nodes, pos, neg, gpos, gneg in (
        (users, state.final_pos_user, state.final_neg_user, grads.pos_user, grads.neg_user),
        (items, state.final_pos_item, state.final_neg_item, grads.pos_item, grads.neg_item),
    ):
        if len(nodes) == 0:
            continue
        p, q = pos[nodes], neg[nodes]
        s = _rowdot(p, q)
        value += float(np.mean(s**2))
        coef = (2.0 / len(nodes)) * s[:, None]
        np.add.at(gpos, nodes, coef * q)
        np.add.at(gneg, nodes, coef * p)
    return value, grads


def l2_penalty(tensors: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Sum of squares over all given tensors; gradient ``2 * theta``.

    The caller applies the regularisation weight.
    """
    value = 0.0
    grads = {}
    for name, t in tensors.items():
        value += float(np.sum(np.square(t, dtype=np.float64)))
        grads[name] = 2.0 * t
    return value, grads
