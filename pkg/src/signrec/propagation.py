"""Dual-channel signed propagation over the user-item graph.

Layer 1 aggregates direct neighbours through each sign's edges:

    pos_user[1] = A+ @ e0_item        neg_user[1] = A- @ e0_item
    pos_item[1] = A+^T @ e0_user      neg_item[1] = A-^T @ e0_user

where ``A+``/``A-`` are the symmetrically normalised incidence matrices,
entry ``1 / sqrt(deg_u * deg_i)`` with degrees counted within the sign.
Deeper layers move *both* channels along positive edges only. Final
embeddings average layers 0..L for the positive channel and 1..L for the
negative one. Everything here is linear in ``(e0_user, e0_item)``, so the
backward pass is the transposed chain.
"""

from __future__ import annotations

import struct
import weakref
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ContractError
from .graph import SignedBipartiteGraph

MAX_LAYERS = 8

_norm_cache: "weakref.WeakKeyDictionary[SignedBipartiteGraph, dict]" = weakref.WeakKeyDictionary()


def _normalize(inc: sp.csr_matrix, deg_u: np.ndarray, deg_i: np.ndarray, dtype) -> sp.csr_matrix:
    coo = inc.tocoo()
    # every stored edge has both endpoint degrees >= 1
    vals = 1.0 / np.sqrt(deg_u[coo.row].astype(np.float64) * deg_i[coo.col])
    out = sp.csr_matrix((vals.astype(dtype), (coo.row, coo.col)), shape=inc.shape)
    out.sort_indices()
    return out


def normalized_adjacency(graph: SignedBipartiteGraph, sign: int, dtype=np.float64) -> sp.csr_matrix:
    """Normalised user x item propagation matrix for one edge sign (cached)."""
    dtype = np.dtype(dtype)
    per_graph = _norm_cache.setdefault(graph, {})
    key = (sign, dtype.str)
    if key not in per_graph:
        if sign > 0:
            mat = _normalize(graph.pos_ui, graph.pos_degree_u, graph.pos_degree_i, dtype)
        else:
            mat = _normalize(graph.neg_ui, graph.neg_degree_u, graph.neg_degree_i, dtype)
        per_graph[key] = (mat, mat.T.tocsr())
    return per_graph[key][0]


def _adj(graph: SignedBipartiteGraph, sign: int, dtype) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    normalized_adjacency(graph, sign, dtype)
    return _norm_cache[graph][(sign, np.dtype(dtype).str)]


@dataclass
class EmbeddingState:
    """Initial, per-layer and combined embeddings from one forward pass.

    ``pos_user[l]`` is layer ``l`` for l = 0..L (layer 0 is ``e0_user``);
    ``neg_user[l - 1]`` is layer ``l`` for l = 1..L.
    """

    e0_user: np.ndarray
    e0_item: np.ndarray
    pos_user: list[np.ndarray]
    pos_item: list[np.ndarray]
    neg_user: list[np.ndarray]
    neg_item: list[np.ndarray]
    final_pos_user: np.ndarray
    final_pos_item: np.ndarray
    final_neg_user: np.ndarray
    final_neg_item: np.ndarray

    @property
    def num_layers(self) -> int:
        return len(self.neg_user)

    @property
    def dim(self) -> int:
        return self.e0_user.shape[1]


def _check_shapes(graph: SignedBipartiteGraph, user: np.ndarray, item: np.ndarray) -> None:
    if user.ndim != 2 or item.ndim != 2:
        raise ContractError("embeddings must be 2-D arrays")
    if user.shape[0] != graph.num_users or item.shape[0] != graph.num_items:
        raise ContractError(
            f"embedding rows ({user.shape[0]}, {item.shape[0]}) do not match graph"
            f" size ({graph.num_users}, {graph.num_items})"
        )
    if user.shape[1] != item.shape[1]:
        raise ContractError("user and item embeddings differ in dimension")


def propagate_first_layer(graph: SignedBipartiteGraph, e0_user: np.ndarray, e0_item: np.ndarray):
    """Returns ``(pos_user, neg_user, pos_item, neg_item)`` for layer 1."""
    _check_shapes(graph, e0_user, e0_item)
    dtype = e0_user.dtype
    pos, pos_t = _adj(graph, 1, dtype)
    neg, neg_t = _adj(graph, -1, dtype)
    return pos @ e0_item, neg @ e0_item, pos_t @ e0_user, neg_t @ e0_user


def propagate_higher_layer(
    graph: SignedBipartiteGraph,
    pos_user: np.ndarray,
    pos_item: np.ndarray,
    neg_user: np.ndarray,
    neg_item: np.ndarray,
):
    """One deeper layer; both channels travel along positive edges only.

    Returns ``(pos_user, neg_user, pos_item, neg_item)`` for the next layer.
    """
    _check_shapes(graph, pos_user, pos_item)
    _check_shapes(graph, neg_user, neg_item)
    pos, pos_t = _adj(graph, 1, pos_user.dtype)
    return pos @ pos_item, pos @ neg_item, pos_t @ pos_user, pos_t @ neg_user


def combine_layers(pos_user, pos_item, neg_user, neg_item):
    """Average layer stacks: positive over 0..L, negative over 1..L."""
    if len(neg_user) < 1:
        raise ConfigError("at least one propagation layer is required")
    if len(pos_user) != len(neg_user) + 1:
        raise ContractError("positive stack must hold exactly one more layer than negative")

    def mean(stack):
        out = stack[0].copy()
        for layer in stack[1:]:
            out += layer
        return out / len(stack)

    return mean(pos_user), mean(pos_item), mean(neg_user), mean(neg_item)


def full_forward(
    graph: SignedBipartiteGraph, e0_user: np.ndarray, e0_item: np.ndarray, num_layers: int
) -> EmbeddingState:
    if not 1 <= num_layers <= MAX_LAYERS:
        raise ConfigError(f"num_layers must lie in [1, {MAX_LAYERS}], got {num_layers}")
    pu, nu, pi, ni = propagate_first_layer(graph, e0_user, e0_item)
    pos_user, pos_item = [e0_user, pu], [e0_item, pi]
    neg_user, neg_item = [nu], [ni]
    for _ in range(num_layers - 1):
        pu, nu, pi, ni = propagate_higher_layer(graph, pos_user[-1], pos_item[-1], neg_user[-1], neg_item[-1])
        pos_user.append(pu)
        pos_item.append(pi)
        neg_user.append(nu)
        neg_item.append(ni)
    fpu, fpi, fnu, fni = combine_layers(pos_user, pos_item, neg_user, neg_item)
    return EmbeddingState(e0_user, e0_item, pos_user, pos_item, neg_user, neg_item, fpu, fpi, fnu, fni)


def backward(
    graph: SignedBipartiteGraph,
    state: EmbeddingState | None,
    grad_pos_user: np.ndarray,
    grad_pos_item: np.ndarray,
    grad_neg_user: np.ndarray,
    grad_neg_item: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Pull gradients on the four final matrices back to ``(e0_user, e0_item)``."""
    if state is None or not state.neg_user:
        raise ContractError("backward needs the state retained by full_forward")
    L = state.num_layers
    for g, ref in (
        (grad_pos_user, state.final_pos_user),
        (grad_pos_item, state.final_pos_item),
        (grad_neg_user, state.final_neg_user),
        (grad_neg_item, state.final_neg_item),
    ):
        if g.shape != ref.shape:
            raise ContractError(f"gradient shape {g.shape} does not match {ref.shape}")

    dtype = state.e0_user.dtype
    pos, pos_t = _adj(graph, 1, dtype)
    neg, neg_t = _adj(graph, -1, dtype)

    # positive channel: layer l+1 user = A+ @ item_l, item = A+^T @ user_l
    gu_pos = grad_pos_user / (L + 1)
    gi_pos = grad_pos_item / (L + 1)
    acc_u, acc_i = gu_pos.copy(), gi_pos.copy()
    for _ in range(L):
        acc_u, acc_i = gu_pos + pos @ acc_i, gi_pos + pos_t @ acc_u
    grad_user, grad_item = acc_u, acc_i

    # negative channel: layers 2..L ride on A+, layer 1 comes from A-
    gu_neg = grad_neg_user / L
    gi_neg = grad_neg_item / L
    acc_u, acc_i = gu_neg.copy(), gi_neg.copy()
    for _ in range(L - 1):
        acc_u, acc_i = gu_neg + pos @ acc_i, gi_neg + pos_t @ acc_u
    grad_user = grad_user + neg @ acc_i
    grad_item = grad_item + neg_t @ acc_u
    return grad_user, grad_item


# --- embedding checkpoint -------------------------------------------------

EMBEDDING_MAGIC = b"SGEMB\x00\x00\x01"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<8sIQQQQ")


def write_embeddings(stream: BinaryIO, e0_user: np.ndarray, e0_item: np.ndarray, num_layers: int) -> None:
    """Header ``(magic, version, M, N, d, L)`` then little-endian float64 rows."""
    if e0_user.shape[1] != e0_item.shape[1]:
        raise ContractError("user and item embeddings differ in dimension")
    m, d = e0_user.shape
    n = e0_item.shape[0]
    stream.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, m, n, d, num_layers))
    stream.write(np.ascontiguousarray(e0_user, dtype="<f8").tobytes())
    stream.write(np.ascontiguousarray(e0_item, dtype="<f8").tobytes())


def read_embeddings(stream: BinaryIO) -> tuple[np.ndarray, np.ndarray, int]:
    head = stream.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ContractError("truncated embedding header")
    magic, version, m, n, d, num_layers = _HEADER.unpack(head)
    if magic != EMBEDDING_MAGIC:
        raise ContractError("not an embedding checkpoint")
    if version != EMBEDDING_VERSION:
        raise ContractError(f"unsupported embedding checkpoint version {version}")

    def take(rows: int) -> np.ndarray:
        nbytes = rows * d * 8
        buf = stream.read(nbytes)
        if len(buf) != nbytes:
            raise ContractError("truncated embedding payload")
        return np.frombuffer(buf, dtype="<f8").reshape(rows, d).astype(np.float64)

    return take(m), take(n), int(num_layers)


def save_embeddings(path: str | Path, e0_user: np.ndarray, e0_item: np.ndarray, num_layers: int) -> None:
    with open(path, "wb") as fh:
        write_embeddings(fh, e0_user, e0_item, num_layers)


def load_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    with open(path, "rb") as fh:
        return read_embeddings(fh)
