"""Synthetic rating logs with planted community structure."""

from __future__ import annotations

import numpy as np

from .graph import RatingRecord


def planted_communities(
    users_per_group: int = 50,
    items_per_group: int = 50,
    liked_per_user: int = 40,
    disliked_per_user: int = 10,
    disliked_pool: int = 10,
    popularity: float = 1.0,
    seed: int = 0,
) -> list[RatingRecord]:
    """Two user groups, each liking items from its own item cluster.

    Every user rates ``liked_per_user`` items of its own cluster with 4 or 5
    (drawn without replacement, item ``r`` of the cluster weighted by
    ``(r + 1) ** -popularity``) and ``disliked_per_user`` items from a pool
    of ``disliked_pool`` items in the other cluster with 1 or 2. Users are
    ``u0..``, items ``i0..``; group ``g`` owns items
    ``g * items_per_group ..``.
    """
    rng = np.random.default_rng(seed)
    weights = (np.arange(items_per_group) + 1.0) ** -popularity
    weights /= weights.sum()
    records = []
    for g in range(2):
        own = g * items_per_group
        other = (1 - g) * items_per_group
        pool = other + rng.choice(items_per_group, size=disliked_pool, replace=False)
        for k in range(users_per_group):
            u = f"u{g * users_per_group + k}"
            liked = rng.choice(items_per_group, size=liked_per_user, replace=False, p=weights)
            for i in liked:
                records.append(RatingRecord(u, f"i{own + i}", float(rng.integers(4, 6))))
            for i in rng.choice(pool, size=min(disliked_per_user, disliked_pool), replace=False):
                records.append(RatingRecord(u, f"i{i}", float(rng.integers(1, 3))))
    return records


def community_of_item(item_id: str, items_per_group: int = 50) -> int:
    return int(item_id[1:]) // items_per_group
