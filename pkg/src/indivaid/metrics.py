"""Gallery/query retrieval evaluation: ranking, mAP, CMC, run aggregation.

Inference ranks on cosine similarity of image features only; the text side
plays no role at test time because gallery and query identities are unseen.
Queries without any same-identity gallery image are excluded from the metrics
and counted in the report.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


@dataclass
class RankingResult:
    """One query's gallery ordering by descending similarity, ties by ascending index."""

    query_index: int
    ordered_gallery: np.ndarray
    scores: np.ndarray


@dataclass
class MetricsReport:
    map: float
    cmc: dict[int, float]
    per_query_ap: list[float] = field(default_factory=list)
    n_query: int = 0
    n_gallery: int = 0
    excluded_queries: int = 0
    n_runs: int = 1
    ci95: dict | None = None


def _as_matrix(features) -> np.ndarray:
    if torch.is_tensor(features):
        features = features.detach().cpu().numpy()
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {arr.shape}")
    return arr


def rank_gallery(query_features, gallery_features) -> list[RankingResult]:
    """Rank every gallery item for every query by cosine similarity."""
    Q = _as_matrix(query_features)
    G = _as_matrix(gallery_features)
    if G.shape[0] == 0:
        raise ValueError("gallery is empty")
    if Q.shape[1] != G.shape[1]:
        raise ValueError(f"feature widths differ: {Q.shape[1]} vs {G.shape[1]}")
    qn = np.linalg.norm(Q, axis=1, keepdims=True)
    gn = np.linalg.norm(G, axis=1, keepdims=True)
    if (qn == 0).any() or (gn == 0).any():
        raise ValueError("zero-norm feature encountered")
    sims = (Q / qn) @ (G / gn).T

    results = []
    for qi, row in enumerate(sims):
        # Stable sort on the negated scores keeps ascending gallery index on ties.
        order = np.argsort(-row, kind="stable")
        results.append(
            RankingResult(query_index=qi, ordered_gallery=order, scores=row[order])
        )
    return results


def average_precision(ranking: RankingResult, relevance) -> float | None:
    """AP of one ranked list; None signals a query with nothing relevant to find."""
    rel = np.asarray(relevance, dtype=bool)
    if rel.shape[0] != ranking.ordered_gallery.shape[0]:
        raise ValueError("relevance length must match gallery size")
    hits = rel[ranking.ordered_gallery]
    total = int(hits.sum())
    if total == 0:
        return None
    ranks = np.nonzero(hits)[0] + 1
    precision_at_hits = np.cumsum(hits)[hits.astype(bool)] / ranks
    return float(precision_at_hits.sum() / total)


def cmc_at_k(rankings, relevance, ks=DEFAULT_KS) -> dict[int, float]:
    """Fraction of queries whose first relevant hit lands within the top k."""
    first_ranks = []
    for ranking, rel in zip(rankings, relevance, strict=True):
        hits = np.asarray(rel, dtype=bool)[ranking.ordered_gallery]
        if not hits.any():
            raise ValueError(
                f"query {ranking.query_index} has no relevant gallery item; "
                "exclude it before computing CMC"
            )
        first_ranks.append(int(np.argmax(hits)) + 1)
    first_ranks = np.asarray(first_ranks)
    return {int(k): float((first_ranks <= k).mean()) for k in ks}


def evaluate_retrieval(
    query_features, query_ids, gallery_features, gallery_ids, ks=DEFAULT_KS
) -> MetricsReport:
    """Full protocol: rank, exclude matchless queries, compute mAP and CMC."""
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    rankings = rank_gallery(query_features, gallery_features)
    if query_ids.shape[0] != len(rankings):
        raise ValueError("one identity label per query required")
    if gallery_ids.shape[0] != rankings[0].ordered_gallery.shape[0]:
        raise ValueError("one identity label per gallery item required")

    kept, relevance, aps = [], [], []
    excluded = 0
    for ranking, qid in zip(rankings, query_ids):
        rel = gallery_ids == qid
        ap = average_precision(ranking, rel)
        if ap is None:
            excluded += 1
            logger.warning("query %d has no gallery match, excluded", ranking.query_index)
            continue
        kept.append(ranking)
        relevance.append(rel)
        aps.append(ap)
    if not kept:
        raise ValueError("every query lacked a gallery match")

    return MetricsReport(
        map=float(np.mean(aps)),
        cmc=cmc_at_k(kept, relevance, ks),
        per_query_ap=aps,
        n_query=len(rankings),
        n_gallery=int(gallery_ids.shape[0]),
        excluded_queries=excluded,
    )


def aggregate_runs(reports) -> MetricsReport:
    """Mean and 95% normal-approximation confidence interval across runs."""
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("aggregation needs at least two runs")
    ks = sorted(reports[0].cmc)
    if any(sorted(r.cmc) != ks for r in reports):
        raise ValueError("reports disagree on CMC ranks")

    def mean_ci(values):
        arr = np.asarray(values, dtype=np.float64)
        ci = 1.96 * arr.std(ddof=1) / np.sqrt(len(arr))
        return float(arr.mean()), float(ci)

    map_mean, map_ci = mean_ci([r.map for r in reports])
    cmc_mean, cmc_ci = {}, {}
    for k in ks:
        cmc_mean[k], cmc_ci[k] = mean_ci([r.cmc[k] for r in reports])
    return MetricsReport(
        map=map_mean,
        cmc=cmc_mean,
        n_query=reports[0].n_query,
        n_gallery=reports[0].n_gallery,
        excluded_queries=reports[0].excluded_queries,
        n_runs=len(reports),
        ci95={"map": map_ci, "cmc": cmc_ci},
    )


def report_to_dict(report: MetricsReport) -> dict:
    if report.n_runs == 1:
        runs = 1
    else:
        runs = {
            "n": report.n_runs,
            "ci95": {
                "map": report.ci95["map"],
                "cmc": {str(k): v for k, v in report.ci95["cmc"].items()},
            },
        }
    return {
        "map": report.map,
        "cmc": {str(k): report.cmc[k] for k in sorted(report.cmc)},
        "n_query": report.n_query,
        "n_gallery": report.n_gallery,
        "excluded_queries": report.excluded_queries,
        "runs": runs,
    }


def write_report(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True))


def write_per_query_ap(report: MetricsReport, path) -> None:
    """Optional per-query AP dump for error analysis."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query", "ap"])
        for i, ap in enumerate(report.per_query_ap):
            writer.writerow([i, f"{ap:.10f}"])
