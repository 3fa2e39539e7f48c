"""Full-ranking helpers: grounding, target ranks, Recall@K and NDCG@K."""

from __future__ import annotations

import math

import numpy as np

from .numerics import ShapeError


def ground(scores=None, *, embedding=None, item_embeddings=None):
    """Item indices ordered best first.

    Logits path: descending score. L2 path: ascending distance between
    ``embedding`` and each row of ``item_embeddings``. Ties go to the smaller
    item index either way.
    """
    if scores is None:
        E = np.asarray(item_embeddings, dtype=np.float64)
        e = np.asarray(embedding, dtype=np.float64)
        if E.ndim != 2 or e.shape != (E.shape[1],):
            raise ShapeError(f"cannot ground a vector of shape {e.shape} against embeddings {E.shape}")
        dist = np.sqrt(((E - e) ** 2).sum(axis=1))
        return np.lexsort((np.arange(len(dist)), dist))
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError(f"expected a score vector, got shape {s.shape}")
    return np.lexsort((np.arange(len(s)), -s))


def target_rank(scores, target):
    """1 + items scoring strictly higher + tied items with a smaller index."""
    s = np.asarray(scores)
    t = s[target]
    return 1 + int(np.sum(s > t)) + int(np.sum(s[:target] == t))


def target_ranks(scores, targets):
    s = np.asarray(scores)
    t = s[np.arange(len(s)), targets][:, None]
    before = np.arange(s.shape[1])[None, :] < np.asarray(targets)[:, None]
    return 1 + (s > t).sum(axis=1) + ((s == t) & before).sum(axis=1)


def _check(rank, k):
    if k < 1:
        raise ValueError(f"K must be at least 1, got {k}")
    if rank < 1:
        raise ValueError(f"rank must be at least 1, got {rank}")


def recall_at_k(rank, k):
    """1 if the single relevant item sits within the top K (inclusive)."""
    _check(rank, k)
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank, k):
    """Single relevant item: 1/log2(rank + 1) inside the top K, else 0."""
    _check(rank, k)
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0
