"""Model quality metrics, decline detection, and consensus ranking.

Raw metrics per state: topic count, mean documents per topic, entropy of the
document-over-topics distribution, mean pairwise PMI coherence of per-topic
top terms, and maximum tree depth. For aggregation each metric is first
oriented so that higher is better (topic count and depth score by closeness
to a target), then min-max normalized over the candidate set being compared.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

from .corpus import CorpusStats
from .model import KIND_LEAF, KIND_TOPIC, ModelState, TopicNode

METRICS = ("topic_count", "mean_topic_size", "size_entropy", "coherence_pmi", "max_depth")

TARGET_DEPTH = 2
TOP_TERMS = 10


@dataclass
class QualityVector:
    topic_count: int
    mean_topic_size: float
    size_entropy: float
    coherence_pmi: float
    max_depth: int
    oriented: dict[str, float] = field(default_factory=dict)
    normalized: dict[str, float] = field(default_factory=dict)

    def raw(self) -> dict[str, float]:
        return {
            "topic_count": float(self.topic_count),
            "mean_topic_size": self.mean_topic_size,
            "size_entropy": self.size_entropy,
            "coherence_pmi": self.coherence_pmi,
            "max_depth": float(self.max_depth),
        }

    def to_dict(self) -> dict:
        out = self.raw()
        out["normalized"] = dict(self.normalized)
        return out


def pmi(stats: CorpusStats, a: str, b: str, smoothing: bool = True) -> float:
    """Pointwise mutual information from document-level co-occurrence.

    Marginals are unsmoothed document frequencies; with smoothing enabled the
    joint probability is (count + 1) / (k + 1).
    """
    pa = stats.document_frequency.get(a, 0) / stats.k
    pb = stats.document_frequency.get(b, 0) / stats.k
    if pa == 0.0 or pb == 0.0:
        return 0.0
    joint_count = stats.cooccurrence_count(a, b)
    if smoothing:
        pab = (joint_count + 1) / (stats.k + 1)
    else:
        if joint_count == 0:
            return float("-inf")
        pab = joint_count / stats.k
    return math.log(pab / (pa * pb))


def topic_top_terms(node: TopicNode, limit: int = TOP_TERMS) -> tuple[str, ...]:
    """Highest-weighted centroid terms, ties broken alphabetically (cached)."""
    if node.top_terms_cache is not None and len(node.top_terms_cache) == min(
        limit, len(node.centroid or {})
    ):
        return node.top_terms_cache
    items = (node.centroid or {}).items()
    top = heapq.nsmallest(limit, items, key=lambda kv: (-kv[1], kv[0]))
    terms = tuple(t for t, _ in top)
    node.top_terms_cache = terms
    return terms


def topic_coherence(
    node: TopicNode, stats: CorpusStats, top_n: int = TOP_TERMS, smoothing: bool = True
) -> float:
    """Mean pairwise PMI over the topic's top terms; 0.0 with fewer than 2 terms."""
    terms = topic_top_terms(node, top_n)
    if len(terms) < 2:
        return 0.0
    total = 0.0
    pairs = 0
    for i, a in enumerate(terms):
        for b in terms[i + 1 :]:
            total += pmi(stats, a, b, smoothing)
            pairs += 1
    return total / pairs


def evaluate(state: ModelState, stats: CorpusStats, smoothing: bool = True) -> QualityVector:
    """Compute the metric vector for a state; pure in (state digest, stats)."""
    topics = state.topic_nodes()
    topic_count = len(topics)
    inserted = state.insert_cursor

    sizes: dict[str, int] = {}
    for node in state.nodes.values():
        if node.kind == KIND_LEAF:
            sizes[node.parent] = sizes.get(node.parent, 0) + 1
    total_leaves = sum(sizes.values())
    entropy = 0.0
    if total_leaves > 0 and len(sizes) > 1:
        for count in sizes.values():
            p = count / total_leaves
            entropy -= p * math.log(p)
    if topic_count <= 1:
        entropy = 0.0
    else:
        entropy = min(entropy, math.log(topic_count))

    mean_size = inserted / topic_count if topic_count else 0.0
    coherence = (
        sum(topic_coherence(node, stats, smoothing=smoothing) for node in topics) / topic_count
        if topic_count
        else 0.0
    )
    vector = QualityVector(
        topic_count=topic_count,
        mean_topic_size=mean_size,
        size_entropy=entropy,
        coherence_pmi=coherence,
        max_depth=state.max_depth(),
    )
    vector.oriented = orient(vector, stats.k)
    return vector


def orient(vector: QualityVector, corpus_size: int) -> dict[str, float]:
    """Map raw metrics to higher-is-better scores.

    Topic count is scored by closeness to sqrt(corpus size); depth by
    closeness to the target depth. The remaining metrics already point up.
    """
    target_topics = round(math.sqrt(corpus_size)) if corpus_size > 0 else 1
    return {
        "topic_count": -abs(vector.topic_count - target_topics),
        "mean_topic_size": vector.mean_topic_size,
        "size_entropy": vector.size_entropy,
        "coherence_pmi": vector.coherence_pmi,
        "max_depth": -abs(vector.max_depth - TARGET_DEPTH),
    }


def normalize_candidates(
    vectors: list[QualityVector], metrics: tuple[str, ...] = METRICS
) -> None:
    """Fill each vector's normalized map by min-max over the given set.

    A metric that is constant across the set normalizes to 0.5 for everyone,
    which keeps degenerate metrics neutral in weighted sums.
    """
    if not vectors:
        return
    for vector in vectors:
        if not vector.oriented:
            raise ValueError("quality vector lacks oriented scores; call orient() first")
    for metric in metrics:
        values = [v.oriented[metric] for v in vectors]
        low, high = min(values), max(values)
        for vector in vectors:
            if high == low:
                vector.normalized[metric] = 0.5
            else:
                vector.normalized[metric] = (vector.oriented[metric] - low) / (high - low)


class QualityHistory:
    """Ring buffer of (insert_cursor, QualityVector) readings."""

    def __init__(self, capacity: int = 10):
        self.capacity = capacity
        self.entries: deque[tuple[int, QualityVector]] = deque(maxlen=capacity)

    def push(self, cursor: int, vector: QualityVector) -> None:
        if self.entries and cursor <= self.entries[-1][0]:
            raise ValueError("history cursor must be strictly increasing")
        self.entries.append((cursor, vector))

    def __len__(self) -> int:
        return len(self.entries)


def window_scores(history: QualityHistory) -> list[float]:
    """Equal-weight normalized score per reading, normalized over the window."""
    vectors = [v for _, v in history.entries]
    for vector in vectors:
        vector.normalized = {}
    normalize_candidates(vectors)
    return [sum(v.normalized[m] for m in METRICS) / len(METRICS) for v in vectors]


def should_trigger(
    history: QualityHistory, drop_threshold: float = 0.10, window: int | None = None
) -> tuple[bool, str]:
    """Trigger when the score dropped from the window maximum beyond the threshold.

    Returns (decision, reason); the reason names the worst-declining metric.
    """
    if len(history) < 2:
        return False, "insufficient history"
    scores = window_scores(history)
    if window is not None and window < len(scores):
        scores = scores[-window:]
        vectors = [v for _, v in history.entries][-window:]
    else:
        vectors = [v for _, v in history.entries]
    peak = max(scores[:-1])
    drop = peak - scores[-1]
    if drop <= drop_threshold:
        return False, f"drop {drop:.4f} within threshold"
    peak_index = scores.index(peak)
    declines = {
        m: vectors[peak_index].normalized[m] - vectors[-1].normalized[m] for m in METRICS
    }
    worst = max(sorted(declines), key=lambda m: declines[m])
    return True, f"score dropped {drop:.4f} (worst metric: {worst})"


@dataclass
class RankCandidate:
    sandbox_id: str
    quality: QualityVector
    strategy_id: str | None = None


@dataclass
class RankedEntry:
    sandbox_id: str
    score: float
    strategy_id: str | None = None


def _weighted_score(
    candidate: RankCandidate,
    weights: dict[str, float],
    strategy_weights: dict[str, float],
    metrics: tuple[str, ...],
) -> float:
    total_weight = sum(weights.values())
    base = sum(weights[m] * candidate.quality.normalized[m] for m in metrics) / total_weight
    boost = 0.5 + strategy_weights.get(candidate.strategy_id or "", 0.5)
    return base * boost


def _dominates(a: QualityVector, b: QualityVector, metrics: tuple[str, ...]) -> bool:
    better_somewhere = False
    for metric in metrics:
        if a.normalized[metric] < b.normalized[metric]:
            return False
        if a.normalized[metric] > b.normalized[metric]:
            better_somewhere = True
    return better_somewhere


def consensus_rank(
    candidates: list[RankCandidate],
    method: str = "weighted_sum",
    weights: dict[str, float] | None = None,
    strategy_weights: dict[str, float] | None = None,
    origin: QualityVector | None = None,
) -> list[RankedEntry]:
    """Order competing candidates best-first by the configured consensus rule.

    Normalization bounds cover the candidate set plus the origin state when
    one is given. Ties always fall back to lexicographic sandbox id.
    """
    if not candidates:
        raise ValueError("no candidates to rank")
    metrics = tuple(sorted(weights)) if weights else METRICS
    weights = weights or {m: 1.0 for m in METRICS}
    if any(w < 0 for w in weights.values()) or sum(weights.values()) == 0:
        raise ValueError("weights must be nonnegative and not all zero")
    strategy_weights = strategy_weights or {}

    pool = [c.quality for c in candidates]
    if origin is not None:
        pool = pool + [origin]
    if all(q.oriented for q in pool):
        for q in pool:
            q.normalized = {}
        normalize_candidates(pool, metrics)
    elif any(any(m not in q.normalized for m in metrics) for q in pool):
        raise ValueError("candidates need oriented scores or preset normalized values")

    scored = {
        c.sandbox_id: _weighted_score(c, weights, strategy_weights, metrics)
        for c in candidates
    }

    if method == "weighted_sum":
        ordered = sorted(candidates, key=lambda c: (-scored[c.sandbox_id], c.sandbox_id))
    elif method == "pareto_then_sum":
        remaining = list(candidates)
        layers: list[list[RankCandidate]] = []
        while remaining:
            front = [
                c
                for c in remaining
                if not any(
                    _dominates(other.quality, c.quality, metrics)
                    for other in remaining
                    if other is not c
                )
            ]
            layers.append(sorted(front, key=lambda c: (-scored[c.sandbox_id], c.sandbox_id)))
            remaining = [c for c in remaining if c not in front]
        ordered = [c for layer in layers for c in layer]
    elif method == "borda":
        rank_sums = {c.sandbox_id: 0 for c in candidates}
        for metric in metrics:
            for c in candidates:
                better = sum(
                    1
                    for other in candidates
                    if other.quality.normalized[metric] > c.quality.normalized[metric]
                )
                rank_sums[c.sandbox_id] += better
        ordered = sorted(candidates, key=lambda c: (rank_sums[c.sandbox_id], c.sandbox_id))
    else:
        raise ValueError(f"unknown consensus method: {method}")

    return [
        RankedEntry(sandbox_id=c.sandbox_id, score=scored[c.sandbox_id], strategy_id=c.strategy_id)
        for c in ordered
    ]
