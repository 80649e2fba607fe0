"""Retrieval metrics (mAP, CMC) and per-stage feature divergence between domains."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DIVERGENCE_EPS = 1e-8
CMC_RANKS = (1, 5, 10, 20)


def pairwise_distances(queries, gallery, exclude: np.ndarray | None = None) -> np.ndarray:
    """Cosine distance 0.5 - <q, g> / (2 |q| |g|) for every (query, gallery) pair.

    ``exclude`` is an optional boolean [nq, ng] mask of same-sample pairs;
    those cells are set to +inf so they never rank.
    """
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"embedding dims differ: {q.shape} vs {g.shape}")
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if (qn == 0).any() or (gn == 0).any():
        raise ValueError("zero-norm embedding")
    d = 0.5 - (q @ g.T) / (2.0 * qn[:, None] * gn[None, :])
    d = np.clip(d, 0.0, 1.0)
    if exclude is not None:
        d = np.where(exclude, np.inf, d)
    return d


@dataclass
class RankingResult:
    """Per-query gallery order (ascending distance, ties by gallery index)."""

    order: np.ndarray  # [nq, ng] gallery indices
    distances: np.ndarray  # [nq, ng] sorted distances
    relevant: np.ndarray  # [nq, ng] bool, aligned with ``order``
    valid: np.ndarray = field(default=None)  # [nq] bool, query kept in averages

    def __post_init__(self):
        if self.valid is None:
            self.valid = self.relevant.any(axis=1)

    @property
    def num_queries(self) -> int:
        return int(self.valid.sum())


def rank(distances: np.ndarray, query_ids, gallery_ids) -> RankingResult:
    """Sort every query row; infinite (excluded) cells are dropped from relevance."""
    distances = np.asarray(distances, dtype=np.float64)
    q = np.asarray(query_ids)
    g = np.asarray(gallery_ids)
    if distances.shape != (len(q), len(g)):
        raise ValueError("distance matrix does not match the label arrays")
    order = np.argsort(distances, axis=1, kind="stable")
    sorted_d = np.take_along_axis(distances, order, axis=1)
    relevant = (g[order] == q[:, None]) & np.isfinite(sorted_d)
    return RankingResult(order, sorted_d, relevant)


def _valid_rows(r: RankingResult) -> np.ndarray:
    rel = r.relevant[r.valid]
    if len(rel) == 0:
        raise ValueError("no query has a relevant gallery item")
    return rel


def average_precision(relevant_row: np.ndarray) -> float:
    hits = np.flatnonzero(relevant_row)
    if len(hits) == 0:
        raise ValueError("query has no relevant item")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def mean_average_precision(r: RankingResult) -> float:
    return float(np.mean([average_precision(row) for row in _valid_rows(r)]))


def cmc_rank_k(r: RankingResult, k: int) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    rel = _valid_rows(r)
    first = rel.argmax(axis=1)
    return float(np.mean(first < k))


def retrieval_metrics(q_emb, q_ids, g_emb, g_ids, exclude=None, ranks: Sequence[int] = CMC_RANKS) -> dict:
    r = rank(pairwise_distances(q_emb, g_emb, exclude), q_ids, g_ids)
    return {
        "mAP": mean_average_precision(r),
        "cmc": {str(k): cmc_rank_k(r, k) for k in ranks},
        "num_queries": r.num_queries,
    }


# feature divergence --------------------------------------------------------------

def gaussian_skl(mu_a, var_a, mu_b, var_b) -> np.ndarray:
    """Symmetric KL between univariate Gaussians, elementwise.

    0.5 [KL(A||B) + KL(B||A)] = 0.25 [(va + dm^2) / vb + (vb + dm^2) / va - 2];
    the log terms cancel.
    """
    mu_a, var_a, mu_b, var_b = (np.asarray(v, dtype=np.float64) for v in (mu_a, var_a, mu_b, var_b))
    dm2 = (mu_a - mu_b) ** 2
    return 0.25 * ((var_a + dm2) / var_b + (var_b + dm2) / var_a - 2.0)


@dataclass
class DivergenceReport:
    per_stage: list[float]
    per_channel: list[list[float]]
    domains: tuple[int, int]

    def to_dict(self) -> dict:
        return {"domains": list(self.domains), "per_stage": self.per_stage, "per_channel": self.per_channel}


def channel_divergence(feats_a, feats_b, eps: float = DIVERGENCE_EPS) -> np.ndarray:
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two samples per domain")
    return gaussian_skl(a.mean(0), a.var(0) + eps, b.mean(0), b.var(0) + eps)


def symmetric_feature_divergence(stages_a: Sequence, stages_b: Sequence, domains=(0, 1), eps: float = DIVERGENCE_EPS) -> DivergenceReport:
    """Per-stage mean over channels of the Gaussian SKL of pooled activations [n, c]."""
    if len(stages_a) != len(stages_b):
        raise ValueError("both domains need the same stages")
    per_ch = [channel_divergence(a, b, eps) for a, b in zip(stages_a, stages_b)]
    return DivergenceReport(
        per_stage=[float(c.mean()) for c in per_ch],
        per_channel=[c.tolist() for c in per_ch],
        domains=(int(domains[0]), int(domains[1])),
    )


# reports ----------------------------------------------------------------------------

def write_report(report: dict, path, csv_path=None) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        write_csv(report, csv_path)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, list) and v and not isinstance(v[0], (list, dict)):
            out.update({f"{key}.{i}": x for i, x in enumerate(v)})
        elif not isinstance(v, list):
            out[key] = v
    return out


def write_csv(report: dict, path) -> None:
    rows = report["rows"] if "rows" in report else [report]
    flat = [_flatten(r) for r in rows]
    keys = sorted({k for r in flat for k in r})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(flat)
