"""Ranking metrics and semantic-ID diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from .formats import SemanticIdMap

__all__ = [
    "RankedPrediction",
    "rank_of",
    "hits_at_k",
    "ndcg_at_k",
    "mrr",
    "mutual_info",
    "expected_mutual_info",
    "entropy",
    "ami",
    "first_level_labels",
    "prediction_overlap",
    "partial_hits",
    "summarize",
]


@dataclass
class RankedPrediction:
    """Beam output for one user.

    ``candidates[r]`` is the item decoded at rank ``r + 1`` or None when the
    sequence at that rank is not a catalog item (unconstrained decoding).
    ``sequences`` optionally keeps the raw token sequences.
    """

    user_id: str
    candidates: list[str | None]
    truth: str
    sequences: list[tuple[int, ...]] | None = None
    truth_tokens: tuple[int, ...] | None = None
    scores: list[float] = field(default_factory=list)

    def __post_init__(self):
        real = [c for c in self.candidates if c is not None]
        if len(real) != len(set(real)):
            raise ValueError(f"user {self.user_id!r}: duplicate candidates")

    def to_dict(self) -> dict:
        d = {"user_id": self.user_id, "candidates": self.candidates, "truth": self.truth, "scores": self.scores}
        if self.sequences is not None:
            d["sequences"] = [list(s) for s in self.sequences]
            d["truth_tokens"] = list(self.truth_tokens or ())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RankedPrediction":
        seqs = d.get("sequences")
        return cls(
            d["user_id"],
            list(d["candidates"]),
            d["truth"],
            None if seqs is None else [tuple(s) for s in seqs],
            None if seqs is None else tuple(d.get("truth_tokens", ())),
            list(d.get("scores", [])),
        )


def rank_of(pred: RankedPrediction) -> int | None:
    """1-based rank of the truth, None when it was not generated."""
    try:
        return pred.candidates.index(pred.truth) + 1
    except ValueError:
        return None


def _mean(values) -> float:
    values = list(values)
    return float(sum(values) / len(values)) if values else 0.0


def hits_at_k(predictions: Sequence[RankedPrediction], k: int = 5) -> float:
    return _mean(1.0 if (r := rank_of(p)) is not None and r <= k else 0.0 for p in predictions)


def ndcg_at_k(predictions: Sequence[RankedPrediction], k: int = 5) -> float:
    """Binary relevance with one relevant item, so IDCG = 1."""
    return _mean(1.0 / math.log2(r + 1) if (r := rank_of(p)) is not None and r <= k else 0.0
                 for p in predictions)


def mrr(predictions: Sequence[RankedPrediction]) -> float:
    return _mean(1.0 / r if (r := rank_of(p)) is not None else 0.0 for p in predictions)


# -- adjusted mutual information ------------------------------------------------

def _contingency(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"label vectors must be 1-D and equal length, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ValueError("empty labelings")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def entropy(labels) -> float:
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def mutual_info(a, b) -> float:
    table = _contingency(a, b)
    n = table.sum()
    nz = table > 0
    outer = np.outer(table.sum(1), table.sum(0))
    return float(np.sum(table[nz] / n * np.log(n * table[nz] / outer[nz])))


def expected_mutual_info(a, b) -> float:
    """E[MI] under the hypergeometric (fixed-marginals permutation) model."""
    table = _contingency(a, b)
    N = int(table.sum())
    rows, cols = table.sum(1), table.sum(0)
    total = 0.0
    lgN = gammaln(N + 1)
    for ai in rows:
        for bj in cols:
            lo, hi = max(1, ai + bj - N), min(ai, bj)
            if lo > hi:
                continue
            n = np.arange(lo, hi + 1)
            log_p = (
                gammaln(ai + 1) + gammaln(bj + 1) + gammaln(N - ai + 1) + gammaln(N - bj + 1)
                - lgN - gammaln(n + 1) - gammaln(ai - n + 1) - gammaln(bj - n + 1)
                - gammaln(N - ai - bj + n + 1)
            )
            total += float(np.sum(n / N * np.log(N * n / (ai * bj)) * np.exp(log_p)))
    return total


def ami(labels_a, labels_b) -> float:
    """Adjusted mutual information with the arithmetic-mean normalizer.

    Returns 0.0 when the normalizer ``mean(H(a), H(b)) - E[MI]`` vanishes.
    """
    mi = mutual_info(labels_a, labels_b)
    emi = expected_mutual_info(labels_a, labels_b)
    denom = 0.5 * (entropy(labels_a) + entropy(labels_b)) - emi
    if abs(denom) < 1e-15:
        return 0.0
    table = _contingency(labels_a, labels_b)
    if table.shape[0] == table.shape[1] and np.all((table > 0).sum(0) == 1) and np.all((table > 0).sum(1) == 1):
        return 1.0  # same partition up to relabeling
    return float((mi - emi) / denom)


def first_level_labels(sidmap: SemanticIdMap, items: Sequence[str] | None = None) -> np.ndarray:
    """First code of each item, in ascending item-id order unless ``items`` is given."""
    items = sorted(sidmap.entries) if items is None else items
    return np.array([sidmap[i][0][0] for i in items], dtype=np.int64)


# -- cross-system diagnostics ----------------------------------------------------

def prediction_overlap(preds_a: Sequence[RankedPrediction], preds_b: Sequence[RankedPrediction],
                       mode: str = "hits", k: int = 5) -> float:
    """Agreement between two systems over their shared users.

    ``mode="hits"``: both hit@k or both miss. ``mode="top1"``: identical top-1 item.
    """
    if mode not in ("hits", "top1"):
        raise ValueError(f"unknown overlap mode {mode!r}")
    by_user = {p.user_id: p for p in preds_b}
    agree = []
    for pa in preds_a:
        pb = by_user.get(pa.user_id)
        if pb is None:
            continue
        if mode == "hits":
            ha = (r := rank_of(pa)) is not None and r <= k
            hb = (r := rank_of(pb)) is not None and r <= k
            agree.append(ha == hb)
        else:
            ta = pa.candidates[0] if pa.candidates else None
            tb = pb.candidates[0] if pb.candidates else None
            agree.append(ta == tb)
    if not agree:
        raise ValueError("prediction sets share no users")
    return _mean(1.0 if x else 0.0 for x in agree)


def partial_hits(predictions: Sequence[RankedPrediction], modality: str, vocab, k: int = 5) -> float:
    """Hit@k judged on one modality's tokens only.

    A user counts as a hit when any of the top-``k`` generated sequences
    carries exactly the truth's token block for ``modality``, whatever the
    other blocks say. Requires predictions with ``sequences``.
    """
    hits = []
    for p in predictions:
        if p.sequences is None or p.truth_tokens is None:
            raise ValueError("partial_hits needs predictions with token sequences")
        want = vocab.modality_block(p.truth_tokens, modality)
        hits.append(any(vocab.modality_block(s, modality) == want for s in p.sequences[:k]))
    return _mean(1.0 if h else 0.0 for h in hits)


def summarize(predictions: Sequence[RankedPrediction], k: int = 5) -> dict[str, float]:
    return {"MRR": mrr(predictions), f"NDCG@{k}": ndcg_at_k(predictions, k), f"Hits@{k}": hits_at_k(predictions, k)}


def mean_std(rows: Sequence[Mapping[str, float]]) -> dict[str, dict[str, float]]:
    keys = rows[0].keys() if rows else ()
    out = {}
    for key in keys:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return out
