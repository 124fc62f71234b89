"""Top-K recommendation with the negative-preference filter."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .graph import SignedBipartiteGraph
from .propagation import EmbeddingState


@dataclass(frozen=True)
class RecommendationList:
    user: int
    items: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.items)


def _dot_rows(users: np.ndarray, items: np.ndarray) -> np.ndarray:
    # einsum sums each entry in a fixed order, so a user's scores do not
    # depend on how users are batched (BLAS gemm/gemv round differently and
    # would break exact ties inconsistently)
    return np.einsum("ud,id->ui", users, items)


def score_positive(u: int, state: EmbeddingState) -> np.ndarray:
    return _dot_rows(state.final_pos_user[u : u + 1], state.final_pos_item)[0]


def score_negative(u: int, state: EmbeddingState) -> np.ndarray:
    return _dot_rows(state.final_neg_user[u : u + 1], state.final_neg_item)[0]


def top_n(candidates: np.ndarray, scores: np.ndarray, n: int) -> np.ndarray:
    """The ``n`` best candidates by descending score, ties by ascending index.

    ``scores`` is indexed by item; ``candidates`` must be sorted ascending.
    """
    if n <= 0 or len(candidates) == 0:
        return candidates[:0]
    cand_scores = scores[candidates]
    if n < len(candidates):
        # everything tied with the n-th best value must be kept for the tie-break
        kth = np.partition(cand_scores, len(cand_scores) - n)[len(cand_scores) - n]
        keep = cand_scores >= kth
        candidates, cand_scores = candidates[keep], cand_scores[keep]
    order = np.lexsort((candidates, -cand_scores))
    return candidates[order[:n]]


def _rank(
    u: int,
    exclude: np.ndarray,
    pos_scores: np.ndarray,
    neg_scores: np.ndarray | None,
    k: int,
    filter_k: int,
) -> RecommendationList:
    num_items = len(pos_scores)
    mask = np.ones(num_items, dtype=bool)
    mask[exclude] = False
    candidates = np.flatnonzero(mask)
    if neg_scores is not None:
        disliked = top_n(candidates, neg_scores, filter_k)
        mask[disliked] = False
        candidates = np.flatnonzero(mask)
    items = top_n(candidates, pos_scores, k)
    return RecommendationList(int(u), items, pos_scores[items])


def recommend(
    u: int,
    graph: SignedBipartiteGraph,
    state: EmbeddingState,
    k: int,
    filter_enabled: bool = True,
    filter_k: int | None = None,
) -> RecommendationList:
    """Rank unseen items for ``u`` by positive score.

    With the filter on, the ``filter_k`` (default ``k``) unseen items with the
    highest negative score are removed first, so the list is backfilled from
    deeper in the positive ranking.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    neg = score_negative(u, state) if filter_enabled else None
    return _rank(u, graph.user_items(u), score_positive(u, state), neg, k, filter_k or k)


def recommend_all(
    graph: SignedBipartiteGraph,
    state: EmbeddingState,
    k: int,
    filter_enabled: bool = True,
    filter_k: int | None = None,
    users: Sequence[int] | None = None,
    workers: int = 1,
    chunk_size: int = 512,
) -> list[RecommendationList]:
    """Recommendations for every user (or ``users``), in input order.

    Scores are computed one chunk of users at a time; ``workers > 1`` spreads
    chunks over a thread pool and gives identical output.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if users is None:
        users = range(graph.num_users)
    users = np.asarray(list(users), dtype=np.int64)
    fk = filter_k or k
    inter = graph.interactions

    def run(chunk: np.ndarray) -> list[RecommendationList]:
        pos = _dot_rows(state.final_pos_user[chunk], state.final_pos_item)
        neg = _dot_rows(state.final_neg_user[chunk], state.final_neg_item) if filter_enabled else None
        out = []
        for row, u in enumerate(chunk):
            seen = inter.indices[inter.indptr[u] : inter.indptr[u + 1]]
            out.append(_rank(u, seen, pos[row], None if neg is None else neg[row], k, fk))
        return out

    chunks = [users[s : s + chunk_size] for s in range(0, len(users), chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [rec for part in parts for rec in part]


def write_recommendations(out: TextIO, recs: Iterable[RecommendationList]) -> None:
    """One line per user: ``user_idx item_idx:score ...`` with 6 decimals."""
    for rec in recs:
        fields = " ".join(f"{i}:{s:.6f}" for i, s in zip(rec.items.tolist(), rec.scores.tolist()))
        out.write(f"{rec.user} {fields}".rstrip() + "\n")


def read_recommendations(path: str | Path) -> list[tuple[int, list[tuple[int, float]]]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        pairs = [(int(a), float(b)) for a, b in (p.split(":") for p in parts[1:])]
        rows.append((int(parts[0]), pairs))
    return rows
