"""Precision / Recall / NDCG at K, fold aggregation and report output.

Relevance is binary: an item is relevant to a user iff it was held out and
rated above the positive threshold. Held-out disliked items are never hits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from .errors import ContractError, EmptyDatasetError
from .graph import DatasetSplit
from .propagation import EmbeddingState
from .recommend import recommend_all

RELEVANCE_NOTE = "relevance: held-out items rated above delta; held-out disliked items are not relevant"
METRICS = ("precision", "recall", "ndcg")


def precision_recall_at_k(recs: Sequence, relevant, k: int) -> tuple[float, float]:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = len(relevant.intersection(list(recs)[:k]))
    return hits / k, hits / len(relevant)


def ndcg_at_k(recs: Sequence, relevant, k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(list(recs)[:k]) if i in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / idcg


@dataclass
class EvalReport:
    per_k: dict[int, dict[str, float]]
    users_evaluated: int
    fold_index: int | None = 0
    secs_per_epoch: float | None = None
    # fold index -> per_k, only for aggregated reports
    per_fold: dict[int, dict[int, dict[str, float]]] = field(default_factory=dict)

    @property
    def ks(self) -> tuple[int, ...]:
        return tuple(sorted(self.per_k))

    def metric(self, name: str, k: int) -> float:
        return self.per_k[k][name]

    def rows(self) -> list[tuple[str, int, str, float]]:
        """``(metric, K, fold, value)`` rows for the delimited report."""
        out = []
        folds = self.per_fold or {self.fold_index if self.fold_index is not None else 0: self.per_k}
        for k in self.ks:
            for name in METRICS:
                for fold, per_k in sorted(folds.items()):
                    out.append((name, k, str(fold), per_k[k][name]))
                if self.per_fold:
                    out.append((name, k, "mean", self.per_k[k][name]))
        return out


def evaluate(
    state: EmbeddingState,
    split: DatasetSplit,
    ks: Sequence[int] = (10, 20),
    filter_enabled: bool = True,
    filter_k: int | None = None,
    workers: int = 1,
    secs_per_epoch: float | None = None,
) -> EvalReport:
    """Score one split's held-out positives.

    Recommendations are generated once at ``max(ks)`` and truncated; with
    the filter on, the negative top set has size ``filter_k`` if given,
    otherwise ``max(ks)``.
    """
    ks = sorted(set(int(k) for k in ks))
    users = sorted(u for u, items in split.test_positive.items() if len(items))
    if not users:
        raise EmptyDatasetError("no user has held-out positive items")
    kmax = ks[-1]
    recs = recommend_all(split.train, state, kmax, filter_enabled, filter_k, users=users, workers=workers)
    sums = {k: np.zeros(3) for k in ks}
    for rec in recs:
        rel = split.test_positive[rec.user].tolist()
        items = rec.items.tolist()
        for k in ks:
            p, r = precision_recall_at_k(items, rel, k)
            sums[k] += (p, r, ndcg_at_k(items, rel, k))
    per_k = {k: dict(zip(METRICS, (sums[k] / len(users)).tolist())) for k in ks}
    return EvalReport(per_k, len(users), split.fold_index, secs_per_epoch)


def aggregate_folds(reports: Sequence[EvalReport]) -> EvalReport:
    """Unweighted mean over folds; per-fold values are kept in ``per_fold``."""
    if not reports:
        raise ContractError("nothing to aggregate")
    ks = reports[0].ks
    if any(r.ks != ks for r in reports):
        raise ContractError("reports were computed at different K values")
    per_k = {
        k: {m: sum(r.per_k[k][m] for r in reports) / len(reports) for m in METRICS} for k in ks
    }
    per_fold = {}
    for pos, r in enumerate(reports):
        per_fold[r.fold_index if r.fold_index is not None else pos] = r.per_k
    secs = [r.secs_per_epoch for r in reports if r.secs_per_epoch is not None]
    return EvalReport(
        per_k,
        users_evaluated=sum(r.users_evaluated for r in reports),
        fold_index=None,
        secs_per_epoch=sum(secs) / len(secs) if secs else None,
        per_fold=per_fold,
    )


def format_table(reports: dict[str, EvalReport], scale: float = 100.0) -> str:
    """Aligned metric x method table, values in percent by default."""
    methods = list(reports)
    ks = sorted(set().union(*(r.ks for r in reports.values())))
    header = ["Metric"] + methods
    lines = []
    for k in ks:
        for m in METRICS:
            label = ("NDCG" if m == "ndcg" else m.capitalize()) + f"@{k}"
            row = [label]
            for name in methods:
                rep = reports[name]
                row.append(f"{rep.per_k[k][m] * scale:.3f}" if k in rep.per_k else "-")
            lines.append(row)
    secs_row = ["Secs/Epoch"]
    for name in methods:
        s = reports[name].secs_per_epoch
        secs_row.append("-" if s is None else f"{s:.2f}")
    lines.append(secs_row)
    widths = [max(len(r[c]) for r in [header] + lines) for c in range(len(header))]

    def fmt(row: list[str]) -> str:
        cells = [cell.ljust(w) if c == 0 else cell.rjust(w) for c, (cell, w) in enumerate(zip(row, widths))]
        return "  ".join(cells).rstrip()

    out = [f"# {RELEVANCE_NOTE}", fmt(header), fmt(["-" * w for w in widths])]
    out += [fmt(r) for r in lines]
    return "\n".join(out) + "\n"


def write_report_csv(out: TextIO, reports: dict[str, EvalReport]) -> None:
    """``metric,K,fold,value`` rows; a ``method`` column is added when there
    is more than one report."""
    multi = len(reports) > 1
    out.write(f"# {RELEVANCE_NOTE}\n")
    out.write(("method," if multi else "") + "metric,K,fold,value\n")
    for name, rep in reports.items():
        for metric, k, fold, value in rep.rows():
            prefix = f"{name}," if multi else ""
            out.write(f"{prefix}{metric},{k},{fold},{value:.10f}\n")
