"""Sparse term-weight vectors stored as plain dicts.

All model vectors (document TF-IDF vectors and topic centroids) are
``dict[str, float]`` maps from term to weight. Vectors handed across module
boundaries are treated as immutable; the mutating helpers here are only used
on privately owned accumulators.
"""

from __future__ import annotations

import math

SparseVector = dict[str, float]


def l2_norm(vec: SparseVector) -> float:
    return math.sqrt(sum(w * w for w in vec.values()))


def normalized(vec: SparseVector) -> SparseVector:
    """Return a new vector scaled to unit L2 norm (empty vector stays empty)."""
    norm = l2_norm(vec)
    if norm == 0.0:
        return {}
    return {t: w / norm for t, w in vec.items()}


def dot(a: SparseVector, b: SparseVector) -> float:
    if len(b) < len(a):
        a, b = b, a
    total = 0.0
    for term, weight in a.items():
        other = b.get(term)
        if other is not None:
            total += weight * other
    return total


def cosine(a: SparseVector, b: SparseVector) -> float:
    """Cosine similarity; 0.0 when either vector is empty or zero."""
    na = l2_norm(a)
    nb = l2_norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot(a, b) / (na * nb)


def cosine_unit(a: SparseVector, b: SparseVector) -> float:
    """Cosine for vectors already known to be unit length (plain dot)."""
    return dot(a, b)


def add_into(acc: SparseVector, vec: SparseVector) -> None:
    """acc += vec, in place. acc must be privately owned by the caller."""
    for term, weight in vec.items():
        acc[term] = acc.get(term, 0.0) + weight


def sub_from(acc: SparseVector, vec: SparseVector) -> None:
    """acc -= vec, in place, dropping terms that cancel to ~0."""
    for term, weight in vec.items():
        left = acc.get(term, 0.0) - weight
        if abs(left) < 1e-12:
            acc.pop(term, None)
        else:
            acc[term] = left
