"""Retrieval metrics (mAP, CMC) and feature-space domain-gap statistics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

CMC_RANKS = (1, 5, 10)
REPORT_VERSION = 1


class NoValidMatch(ValueError):
    pass


class SingleDomain(ValueError):
    pass


@dataclass
class EvalReport:
    map: float
    cmc: dict[int, float]
    gap_between: float
    gap_within: float
    gap_ratio: float
    context: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["cmc"] = {f"rank{k}": v for k, v in self.cmc.items()}
        d["schema_version"] = REPORT_VERSION
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        cmc = {int(k.removeprefix("rank")): v for k, v in doc["cmc"].items()}
        return cls(doc["map"], cmc, doc["gap_between"], doc["gap_within"], doc["gap_ratio"], doc.get("context", {}))


def distance_matrix(query: np.ndarray, gallery: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    q = np.asarray(query, dtype=float)
    g = np.asarray(gallery, dtype=float)
    if metric == "cosine":
        q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        return 1.0 - q @ g.T
    if metric != "euclidean":
        raise ValueError(f"unknown metric {metric!r}")
    return cdist(q, g)


def retrieval_eval(query_feats, gallery_feats, query_ids, gallery_ids, query_views, gallery_views,
                   ranks=CMC_RANKS, metric: str = "euclidean") -> tuple[float, dict[int, float]]:
    """Single-query mAP and CMC.

    Gallery entries sharing both id and view with the query are dropped
    before ranking.  Ties in distance keep gallery order (stable sort).
    """
    dist = distance_matrix(query_feats, gallery_feats, metric)
    query_ids, gallery_ids = np.asarray(query_ids), np.asarray(gallery_ids)
    query_views, gallery_views = np.asarray(query_views), np.asarray(gallery_views)
    aps = []
    first_hit = []
    for q in range(dist.shape[0]):
        keep = ~((gallery_ids == query_ids[q]) & (gallery_views == query_views[q]))
        order = np.argsort(dist[q][keep], kind="stable")
        match = (gallery_ids[keep] == query_ids[q])[order]
        hits = np.flatnonzero(match)
        if hits.size == 0:
            raise NoValidMatch(f"query {q} (id {query_ids[q]}) has no valid gallery match")
        precisions = (np.arange(1, hits.size + 1) / (hits + 1)).tolist()
        aps.append(math.fsum(precisions) / hits.size)
        first_hit.append(int(hits[0]))
    n = len(aps)
    first_hit = np.asarray(first_hit)
    cmc = {k: int(np.sum(first_hit < k)) / n for k in ranks}
    return math.fsum(aps) / n, cmc


def _mean_pairwise(points: np.ndarray) -> float:
    n = len(points)
    if n < 2:
        return 0.0
    d = distance_matrix(points, points)
    iu = np.triu_indices(n, k=1)
    return float(np.mean(d[iu]))


def domain_gap(features, domain_ids, class_ids) -> tuple[float, float, float]:
    """``(between, within, ratio)``.

    ``between`` is the mean distance between domain centroids; ``within`` the
    mean distance between class centroids of the same domain, averaged over
    domains.  ``ratio`` is 0 when ``within`` is 0.
    """
    x = np.asarray(features, dtype=float)
    domain_ids = np.asarray(domain_ids)
    class_ids = np.asarray(class_ids)
    doms = np.unique(domain_ids)
    if doms.size < 2:
        raise SingleDomain("domain gap needs at least two domains")
    dom_centroids = np.array([x[domain_ids == d].mean(axis=0) for d in doms])
    between = _mean_pairwise(dom_centroids)
    per_domain = []
    for d in doms:
        sel = domain_ids == d
        cls = np.unique(class_ids[sel])
        cents = np.array([x[sel & (class_ids == c)].mean(axis=0) for c in cls])
        per_domain.append(_mean_pairwise(cents))
    within = float(np.mean(per_domain))
    ratio = between / within if within > 0 else 0.0
    return between, within, ratio


def query_gallery_split(view_ids) -> tuple[np.ndarray, np.ndarray]:
    """View 0 samples are queries, all other views form the gallery."""
    view_ids = np.asarray(view_ids)
    return view_ids == 0, view_ids != 0


def evaluate_split(feats, class_ids, view_ids, metric: str = "euclidean") -> tuple[float, dict[int, float]]:
    q, g = query_gallery_split(view_ids)
    return retrieval_eval(feats[q], feats[g], class_ids[q], class_ids[g], view_ids[q], view_ids[g], metric=metric)


def build_report(eval_feats, eval_ds, source_feats, source_ds, metric: str = "euclidean", context=None) -> EvalReport:
    """Retrieval on ``eval_ds`` plus the domain gap measured on source features."""
    m, cmc = evaluate_split(eval_feats, eval_ds.class_ids, eval_ds.view_ids, metric)
    gb, gw, gr = domain_gap(source_feats, source_ds.domain_ids, source_ds.class_ids)
    return EvalReport(m, cmc, gb, gw, gr, dict(context or {}))


def save_report(path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


def load_report(path) -> EvalReport:
    return EvalReport.from_json(json.loads(Path(path).read_text()))


FEATURE_ID_COLUMNS = ("class_id", "domain_id")


def feature_dump(features, class_ids, domain_ids, path) -> None:
    """CSV with columns ``class_id, domain_id, f0, f1, ...``; one row per sample."""
    features = np.asarray(features, dtype=float)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(FEATURE_ID_COLUMNS) + [f"f{i}" for i in range(features.shape[1])])
        for c, d, row in zip(class_ids, domain_ids, features):
            w.writerow([int(c), int(d)] + [repr(float(t)) for t in row])


def load_feature_dump(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:2]) != FEATURE_ID_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header[:2]}")
        rows = list(reader)
    ids = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=int).reshape(-1, 2)
    feats = np.array([[float(t) for t in r[2:]] for r in rows]).reshape(len(rows), len(header) - 2)
    return feats, ids[:, 0], ids[:, 1]
