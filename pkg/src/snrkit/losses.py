"""Dual causality loss, ReID losses and the joint objective."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

NORM_GUARD = 1e-12
DEFAULT_LAMBDAS = (0.1, 0.1, 0.5, 0.5)
LABEL_SMOOTHING = 0.1


@dataclass(frozen=True)
class TripletIndex:
    anchor: int
    positive: int
    negative: int


@dataclass
class TripletBatch:
    """Column form of a list of triplets."""

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    @classmethod
    def from_list(cls, triplets: Sequence[TripletIndex]) -> "TripletBatch":
        if len(triplets) == 0:
            raise ValueError("empty triplet list")
        return cls(
            np.array([t.anchor for t in triplets], dtype=np.intp),
            np.array([t.positive for t in triplets], dtype=np.intp),
            np.array([t.negative for t in triplets], dtype=np.intp),
        )

    def __len__(self) -> int:
        return len(self.anchor)


def validate_triplets(triplets: Sequence[TripletIndex], labels) -> None:
    labels = np.asarray(labels)
    for t in triplets:
        for i in (t.anchor, t.positive, t.negative):
            if not 0 <= i < len(labels):
                raise ValueError(f"triplet index {i} out of range")
        if t.anchor == t.positive:
            raise ValueError(f"anchor equals positive in {t}")
        if labels[t.anchor] != labels[t.positive]:
            raise ValueError(f"positive has a different identity in {t}")
        if labels[t.anchor] == labels[t.negative]:
            raise ValueError(f"negative shares the anchor identity in {t}")


def random_triplets(labels, rng: np.random.Generator) -> list[TripletIndex]:
    """One uniformly drawn positive and negative per anchor that admits both."""
    labels = np.asarray(labels)
    idx = np.arange(len(labels))
    out = []
    for i, lab in enumerate(labels):
        pos = idx[(labels == lab) & (idx != i)]
        neg = idx[labels != lab]
        if len(pos) == 0 or len(neg) == 0:
            continue
        out.append(TripletIndex(i, int(rng.choice(pos)), int(rng.choice(neg))))
    return out


def _hardest_pairs(emb: np.ndarray, labels: np.ndarray):
    d = np.sqrt(((emb[:, None, :] - emb[None, :, :]) ** 2).sum(-1))
    same = labels[:, None] == labels[None, :]
    eye = np.eye(len(labels), dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    anchors = np.flatnonzero(pos_mask.any(1) & neg_mask.any(1))
    # argmax/argmin return the first index on ties, which keeps selection deterministic
    pos = np.where(pos_mask, d, -np.inf).argmax(1)
    neg = np.where(neg_mask, d, np.inf).argmin(1)
    return anchors, pos[anchors], neg[anchors]


def batch_hard_triplets(embeddings, labels) -> list[TripletIndex]:
    emb = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    a, p, n = _hardest_pairs(emb, np.asarray(labels))
    return [TripletIndex(int(i), int(j), int(k)) for i, j, k in zip(a, p, n)]


def _rows(x: Tensor, idx: np.ndarray) -> Tensor:
    return dc.index(x, idx)


def _d(x: Tensor, i: np.ndarray, j: np.ndarray) -> Tensor:
    return dc.cosine_distance_rows(_rows(x, i), _rows(x, j), guard=NORM_GUARD)


def clarification_terms(f_tilde: Tensor, f_plus: Tensor, tb: TripletBatch) -> Tensor:
    """Per-triplet clarification loss over pooled [n, c] features.

    Restitution should pull the positive closer and push the negative away.
    """
    a, p, n = tb.anchor, tb.positive, tb.negative
    pull = dc.softplus(_d(f_plus, a, p) - _d(f_tilde, a, p))
    push = dc.softplus(_d(f_tilde, a, n) - _d(f_plus, a, n))
    return pull + push


def destruction_terms(f_tilde: Tensor, f_minus: Tensor, tb: TripletBatch) -> Tensor:
    """Per-triplet destruction loss: contamination should do the opposite."""
    a, p, n = tb.anchor, tb.positive, tb.negative
    spread = dc.softplus(_d(f_tilde, a, p) - _d(f_minus, a, p))
    merge = dc.softplus(_d(f_minus, a, n) - _d(f_tilde, a, n))
    return spread + merge


def clarification_loss(f_tilde, f_plus, anchor: int = 0, positive: int = 1, negative: int = 2) -> Tensor:
    """Single-triplet clarification loss; rows of the [n, c] inputs are samples."""
    f_tilde, f_plus = dc._lift(f_tilde), dc._lift(f_plus)
    tb = TripletBatch.from_list([TripletIndex(anchor, positive, negative)])
    return clarification_terms(f_tilde, f_plus, tb).sum()


def destruction_loss(f_tilde, f_minus, anchor: int = 0, positive: int = 1, negative: int = 2) -> Tensor:
    f_tilde, f_minus = dc._lift(f_tilde), dc._lift(f_minus)
    tb = TripletBatch.from_list([TripletIndex(anchor, positive, negative)])
    return destruction_terms(f_tilde, f_minus, tb).sum()


@dataclass
class DualCausality:
    plus: Tensor
    minus: Tensor

    @property
    def total(self) -> Tensor:
        return self.plus + self.minus


def dual_causality_loss(trace, triplets: Sequence[TripletIndex] | TripletBatch) -> DualCausality:
    """Mean over triplets of the clarification and destruction terms for one stage."""
    tb = triplets if isinstance(triplets, TripletBatch) else TripletBatch.from_list(triplets)
    if len(tb) == 0:
        raise ValueError("empty triplet list")
    if trace.f_minus is None:
        raise ValueError("trace lacks the contaminated branch; run the block in training mode")
    plus = clarification_terms(trace.f_tilde, trace.f_plus, tb).mean()
    minus = destruction_terms(trace.f_tilde, trace.f_minus, tb).mean()
    return DualCausality(plus, minus)


def batch_hard_triplet_loss(embeddings: Tensor, labels) -> Tensor:
    """Soft-margin batch-hard triplet loss on Euclidean distances."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("batch-hard triplet loss needs at least two identities")
    emb = embeddings.data.astype(np.float64)
    a, p, n = _hardest_pairs(emb, labels)
    if len(a) == 0:
        raise ValueError("no identity in the batch has two samples")
    d_pos = dc.euclidean_rows(embeddings, a, p)
    d_neg = dc.euclidean_rows(embeddings, a, n)
    return dc.softplus(d_pos - d_neg).mean()


def id_classification_loss(logits: Tensor, labels, smoothing: float = LABEL_SMOOTHING) -> Tensor:
    return dc.softmax_cross_entropy(logits, labels, smoothing)


@dataclass
class LossBreakdown:
    reid_ce: float
    reid_triplet: float
    snr_plus: list[float] = field(default_factory=list)
    snr_minus: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(
    reid_ce: Tensor,
    reid_triplet: Tensor,
    snr_plus: Sequence[Tensor] = (),
    snr_minus: Sequence[Tensor] = (),
    lambdas: Sequence[float] = (),
) -> tuple[Tensor, LossBreakdown]:
    """L_ReID + sum_b lambda_b (L+_b + L-_b) over the active stages."""
    if not (len(snr_plus) == len(snr_minus) == len(lambdas)):
        raise ValueError(
            f"{len(lambdas)} stage weights for {len(snr_plus)}/{len(snr_minus)} stage losses"
        )
    total = reid_ce + reid_triplet
    for lam, lp, lm in zip(lambdas, snr_plus, snr_minus):
        if lam != 0.0:
            total = total + (lp + lm) * float(lam)
    breakdown = LossBreakdown(
        reid_ce=reid_ce.item(),
        reid_triplet=reid_triplet.item(),
        snr_plus=[t.item() for t in snr_plus],
        snr_minus=[t.item() for t in snr_minus],
        lambdas=[float(x) for x in lambdas],
        total=total.item(),
    )
    return total, breakdown
