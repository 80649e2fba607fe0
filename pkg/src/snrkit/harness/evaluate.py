"""Checkpoint evaluation: held-out retrieval and cross-domain feature divergence."""
from __future__ import annotations

import numpy as np

from .. import evalkit
from ..data import DatasetManifest
from ..model import Model
from .schedule import ConfigError


def embed(model: Model, images: np.ndarray, batch: int = 64) -> tuple[np.ndarray, list[np.ndarray]]:
    """Inference-mode embeddings [n, e] and per-stage pooled activations."""
    embs, pooled = [], []
    for i in range(0, len(images), batch):
        out = model.forward(images[i:i + batch], training=False)
        embs.append(out.embeddings.data.astype(np.float64))
        pooled.append(out.stage_pooled)
    stages = [np.concatenate([p[s] for p in pooled]) for s in range(len(model.stages))]
    return np.concatenate(embs), stages


def evaluate(model: Model, manifest: DatasetManifest, target_domain: int) -> dict:
    """mAP and CMC on one domain's query/gallery split (cosine distance)."""
    q = manifest.split("query", target_domain)
    g = manifest.split("gallery", target_domain)
    if not q or not g:
        raise ConfigError(f"domain {target_domain} has no query/gallery split")
    qe, _ = embed(model, manifest.load_images(q).astype(model.config.dtype))
    ge, _ = embed(model, manifest.load_images(g).astype(model.config.dtype))
    exclude = np.array([[a.path == b.path for b in g] for a in q])
    metrics = evalkit.retrieval_metrics(qe, [s.identity for s in q], ge, [s.identity for s in g], exclude)
    metrics["target_domain"] = int(target_domain)
    metrics["config_hash"] = model.config.digest()
    return metrics


def train_split_rank1(model: Model, manifest: DatasetManifest) -> float:
    """Leave-one-out Rank-1 over the training split (fit check)."""
    s = manifest.split("train")
    e, _ = embed(model, manifest.load_images(s).astype(model.config.dtype))
    ids = np.array([x.identity for x in s])
    d = evalkit.pairwise_distances(e, e, exclude=np.eye(len(s), dtype=bool))
    return evalkit.cmc_rank_k(evalkit.rank(d, ids, ids), 1)


def divergence(model: Model, manifest: DatasetManifest, domain_a: int, domain_b: int, split: str | None = None) -> evalkit.DivergenceReport:
    """Per-stage symmetric KL between the pooled activations of two domains."""
    feats = []
    for dom in (domain_a, domain_b):
        samples = [s for s in manifest.samples if s.domain == dom and (split is None or s.split == split)]
        if len(samples) < 2:
            raise ConfigError(f"domain {dom} has fewer than two samples")
        _, stages = embed(model, manifest.load_images(samples).astype(model.config.dtype))
        feats.append(stages)
    return evalkit.symmetric_feature_divergence(feats[0], feats[1], (domain_a, domain_b))
