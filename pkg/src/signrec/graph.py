"""Rating ingestion, k-core filtering, splitting and the signed bipartite graph."""

from __future__ import annotations

import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptyDatasetError, InvariantError

logger = logging.getLogger(__name__)

SEPARATORS = {"tab": "\t", "comma": ",", "\t": "\t", ",": ","}


@dataclass(frozen=True)
class RatingRecord:
    user_id: str
    item_id: str
    rating: float


@dataclass(frozen=True)
class ParseResult:
    records: list[RatingRecord]
    malformed: int


def parse_ratings(source: bytes | str | Path | BinaryIO, sep: str = "\t") -> ParseResult:
    """Parse ``user<sep>item<sep>rating[<sep>...]`` lines.

    ``source`` may be raw bytes, a path, or a binary stream. Duplicate
    (user, item) pairs keep the last occurrence. Lines with fewer than three
    fields or a non-finite rating are skipped and counted as malformed.
    """
    try:
        delim = SEPARATORS[sep]
    except KeyError:
        raise ValueError(f"unsupported separator {sep!r}; use tab or comma") from None

    if isinstance(source, bytes):
        stream: BinaryIO = io.BytesIO(source)
    elif isinstance(source, (str, Path)):
        stream = open(source, "rb")  # noqa: SIM115 - closed below
    else:
        stream = source

    latest: dict[tuple[str, str], float] = {}
    malformed = 0
    try:
        for raw in stream:
            line = raw.decode("utf-8").strip("\r\n")
            if not line.strip():
                continue
            parts = line.split(delim)
            if len(parts) < 3:
                malformed += 1
                continue
            user, item = parts[0].strip(), parts[1].strip()
            try:
                rating = float(parts[2])
            except ValueError:
                malformed += 1
                continue
            if not user or not item or not math.isfinite(rating):
                malformed += 1
                continue
            key = (user, item)
            # re-insert so that dict order follows the last occurrence
            latest.pop(key, None)
            latest[key] = rating
    finally:
        if stream is not source:
            stream.close()

    if malformed:
        logger.warning("skipped %d malformed rating lines", malformed)
    if not latest:
        raise EmptyDatasetError("no valid rating records found")
    records = [RatingRecord(u, i, r) for (u, i), r in latest.items()]
    return ParseResult(records, malformed)


def kcore_filter(records: Sequence[RatingRecord], min_user: int, min_item: int) -> list[RatingRecord]:
    """Drop users/items below the interaction thresholds until nothing changes."""
    if min_user < 0 or min_item < 0:
        raise ValueError("k-core thresholds must be non-negative")
    kept = list(records)
    while True:
        users = Counter(r.user_id for r in kept)
        items = Counter(r.item_id for r in kept)
        nxt = [r for r in kept if users[r.user_id] >= min_user and items[r.item_id] >= min_item]
        if len(nxt) == len(kept):
            return nxt
        kept = nxt


def sign_edges(
    records: Iterable[RatingRecord], delta: float
) -> tuple[list[RatingRecord], list[RatingRecord], int]:
    """Split records into liked (rating > delta) and disliked (rating < delta).

    Ratings exactly equal to ``delta`` carry no sign and are dropped.
    """
    if not math.isfinite(delta):
        raise ValueError("delta must be finite")
    pos, neg, dropped = [], [], 0
    for r in records:
        if r.rating > delta:
            pos.append(r)
        elif r.rating < delta:
            neg.append(r)
        else:
            dropped += 1
    return pos, neg, dropped


def build_vocabs(records: Sequence[RatingRecord]) -> tuple[dict[str, int], dict[str, int]]:
    """Dense 0-based user and item ids, assigned in sorted token order."""
    users = sorted({r.user_id for r in records})
    items = sorted({r.item_id for r in records})
    return {u: k for k, u in enumerate(users)}, {i: k for k, i in enumerate(items)}


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _incidence(rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]) -> sp.csr_matrix:
    mat = sp.csr_matrix(
        (np.ones(len(rows), dtype=np.float64), (rows, cols)), shape=shape
    )
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


@dataclass(frozen=True, eq=False)
class SignedBipartiteGraph:
    """Immutable signed user-item graph.

    Edges are stored as parallel arrays (``users``, ``items``, ``ratings``,
    ``signs``) sorted by (user, item). Per-sign incidence matrices are
    available in both directions, along with the four degree tables.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    signs: np.ndarray
    pos_ui: sp.csr_matrix = field(repr=False)
    neg_ui: sp.csr_matrix = field(repr=False)
    pos_iu: sp.csr_matrix = field(repr=False)
    neg_iu: sp.csr_matrix = field(repr=False)
    pos_degree_u: np.ndarray = field(repr=False)
    pos_degree_i: np.ndarray = field(repr=False)
    neg_degree_u: np.ndarray = field(repr=False)
    neg_degree_i: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(
        cls,
        num_users: int,
        num_items: int,
        users: Sequence[int] | np.ndarray,
        items: Sequence[int] | np.ndarray,
        signs: Sequence[int] | np.ndarray,
        ratings: Sequence[float] | np.ndarray | None = None,
    ) -> "SignedBipartiteGraph":
        users = np.asarray(users, dtype=np.int64).reshape(-1)
        items = np.asarray(items, dtype=np.int64).reshape(-1)
        signs = np.asarray(signs, dtype=np.int8).reshape(-1)
        if ratings is None:
            ratings = np.where(signs > 0, 1.0, -1.0)
        ratings = np.asarray(ratings, dtype=np.float64).reshape(-1)
        if not (len(users) == len(items) == len(signs) == len(ratings)):
            raise ValueError("edge arrays must have equal length")
        if num_users < 0 or num_items < 0:
            raise ValueError("node counts must be non-negative")
        if len(users) and (
            users.min() < 0 or users.max() >= num_users or items.min() < 0 or items.max() >= num_items
        ):
            raise InvariantError("edge references a node outside the graph")
        if not np.all(np.isin(signs, (-1, 1))):
            raise InvariantError("edge signs must be +1 or -1")

        order = np.lexsort((items, users))
        users, items, signs, ratings = users[order], items[order], signs[order], ratings[order]
        if len(users) > 1:
            same = (np.diff(users) == 0) & (np.diff(items) == 0)
            if same.any():
                k = int(np.flatnonzero(same)[0])
                raise InvariantError(
                    f"pair (user {users[k]}, item {items[k]}) appears more than once"
                    " (positive and negative edges must be disjoint)"
                )

        pos, neg = signs > 0, signs < 0
        shape = (num_users, num_items)
        pos_ui = _incidence(users[pos], items[pos], shape)
        neg_ui = _incidence(users[neg], items[neg], shape)
        pos_iu = pos_ui.T.tocsr()
        neg_iu = neg_ui.T.tocsr()
        pos_iu.sort_indices()
        neg_iu.sort_indices()
        return cls(
            num_users=int(num_users),
            num_items=int(num_items),
            users=_frozen(users),
            items=_frozen(items),
            ratings=_frozen(ratings),
            signs=_frozen(signs),
            pos_ui=pos_ui,
            neg_ui=neg_ui,
            pos_iu=pos_iu,
            neg_iu=neg_iu,
            pos_degree_u=_frozen(np.bincount(users[pos], minlength=num_users)),
            pos_degree_i=_frozen(np.bincount(items[pos], minlength=num_items)),
            neg_degree_u=_frozen(np.bincount(users[neg], minlength=num_users)),
            neg_degree_i=_frozen(np.bincount(items[neg], minlength=num_items)),
        )

    @property
    def num_edges(self) -> int:
        return len(self.users)

    @property
    def num_pos(self) -> int:
        return int(np.count_nonzero(self.signs > 0))

    @property
    def num_neg(self) -> int:
        return int(np.count_nonzero(self.signs < 0))

    @cached_property
    def interactions(self) -> sp.csr_matrix:
        """User x item matrix with +1/-1 entries for every training edge."""
        mat = sp.csr_matrix(
            (self.signs.astype(np.float64), (self.users, self.items)),
            shape=(self.num_users, self.num_items),
        )
        mat.sort_indices()
        return mat

    @cached_property
    def edge_keys(self) -> np.ndarray:
        """Sorted ``user * num_items + item`` keys, for fast membership tests."""
        return _frozen(self.users * self.num_items + self.items)

    def has_edges(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        if not len(self.edge_keys):
            return np.zeros(keys.shape, dtype=bool)
        pos = np.searchsorted(self.edge_keys, keys)
        pos = np.minimum(pos, len(self.edge_keys) - 1)
        return self.edge_keys[pos] == keys

    def user_items(self, u: int) -> np.ndarray:
        """Items user ``u`` interacted with in training, either sign."""
        m = self.interactions
        return m.indices[m.indptr[u] : m.indptr[u + 1]]

    @cached_property
    def user_degree(self) -> np.ndarray:
        return _frozen(self.pos_degree_u + self.neg_degree_u)


def build_graph(
    pos: Iterable[RatingRecord],
    neg: Iterable[RatingRecord],
    user_map: dict[str, int],
    item_map: dict[str, int],
) -> SignedBipartiteGraph:
    users, items, signs, ratings = [], [], [], []
    for sign, recs in ((1, pos), (-1, neg)):
        for r in recs:
            try:
                users.append(user_map[r.user_id])
                items.append(item_map[r.item_id])
            except KeyError as exc:
                raise InvariantError(f"unmapped token {exc.args[0]!r}") from None
            signs.append(sign)
            ratings.append(r.rating)
    return SignedBipartiteGraph.from_edges(
        len(user_map), len(item_map), users, items, signs, ratings
    )


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """One train/test partition.

    ``test_positive[u]`` holds the held-out items rated above ``delta``;
    ``test_all[u]`` holds every held-out ``(item, rating)`` pair.
    """

    train: SignedBipartiteGraph
    train_records: list[RatingRecord] = field(repr=False)
    test_records: list[RatingRecord] = field(repr=False)
    test_positive: dict[int, np.ndarray] = field(repr=False)
    test_all: dict[int, list[tuple[int, float]]] = field(repr=False)
    fold_index: int
    delta: float
    user_map: dict[str, int] = field(repr=False)
    item_map: dict[str, int] = field(repr=False)
    dropped: int = 0

    def test_negative(self, u: int) -> set[int]:
        return {i for i, r in self.test_all.get(u, ()) if r < self.delta}


def _test_size(n: int, ratio: float) -> int:
    if n < 2:
        return 0
    k = int(math.floor(n * (1.0 - ratio) + 0.5))
    return min(max(k, 1), n - 1)


def make_split(
    train_records: list[RatingRecord],
    test_records: list[RatingRecord],
    delta: float,
    user_map: dict[str, int],
    item_map: dict[str, int],
    fold_index: int = 0,
) -> DatasetSplit:
    pos, neg, dropped = sign_edges(train_records, delta)
    graph = build_graph(pos, neg, user_map, item_map)
    test_all: dict[int, list[tuple[int, float]]] = {}
    for r in test_records:
        test_all.setdefault(user_map[r.user_id], []).append((item_map[r.item_id], r.rating))
    for pairs in test_all.values():
        pairs.sort()
    test_positive = {
        u: np.array([i for i, r in pairs if r > delta], dtype=np.int64) for u, pairs in test_all.items()
    }
    return DatasetSplit(
        train=graph,
        train_records=train_records,
        test_records=test_records,
        test_positive=test_positive,
        test_all=test_all,
        fold_index=fold_index,
        delta=delta,
        user_map=user_map,
        item_map=item_map,
        dropped=dropped,
    )


def split_folds(
    records: Sequence[RatingRecord],
    ratio: float = 0.8,
    num_folds: int = 5,
    seed: int = 0,
    delta: float = 2.5,
    user_map: dict[str, int] | None = None,
    item_map: dict[str, int] | None = None,
) -> list[DatasetSplit]:
    """Independent seeded per-user holdout splits.

    Each user's records are shuffled with a generator seeded by
    ``(seed, fold_index)`` and ``round(n * (1 - ratio))`` of them (at least
    one, never all) are held out. Users with a single record stay in train.
    Node ids come from the full record set so every fold shares one index
    space.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    if num_folds < 1:
        raise ValueError("num_folds must be >= 1")
    if user_map is None or item_map is None:
        user_map, item_map = build_vocabs(records)

    by_user: dict[str, list[RatingRecord]] = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)
    ordered_users = sorted(by_user, key=user_map.__getitem__)
    for u in ordered_users:
        by_user[u].sort(key=lambda r: item_map[r.item_id])

    splits = []
    for fold in range(num_folds):
        rng = np.random.default_rng([seed, fold])
        train, test = [], []
        for u in ordered_users:
            recs = by_user[u]
            k = _test_size(len(recs), ratio)
            perm = rng.permutation(len(recs))
            held = set(perm[:k].tolist())
            for idx, r in enumerate(recs):
                (test if idx in held else train).append(r)
        splits.append(make_split(train, test, delta, user_map, item_map, fold))
    return splits
