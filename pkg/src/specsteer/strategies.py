"""Catalog of deterministic tree-optimization strategies.

Each strategy mutates the state it is handed (callers pass a private clone),
preserves the document multiset exactly, and reports whether it actually
changed anything. All decisions are made on sorted structures so the result
is a pure function of (state, params, seed).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .corpus import CorpusStats
from .model import (
    KIND_LEAF,
    KIND_TOPIC,
    DEFAULT_MAX_DEPTH,
    DEFAULT_NEW_TOPIC_THRESHOLD,
    ModelState,
    descend_insert,
)
from .vectors import SparseVector, add_into, cosine_unit, normalized


class UnknownStrategyError(KeyError):
    pass


@dataclass(frozen=True)
class StrategyDescriptor:
    strategy_id: str
    display_name: str
    category: str
    parameters: dict = field(default_factory=dict)


@dataclass
class StrategyResult:
    state: ModelState
    applied: bool
    note: str = ""


def _insert_params(params: dict) -> tuple[float, int]:
    threshold = params.get("new_topic_threshold", DEFAULT_NEW_TOPIC_THRESHOLD)
    max_depth = params.get("max_depth", DEFAULT_MAX_DEPTH)
    return threshold, max_depth


def _remove_leaf(state: ModelState, doc_id: str) -> SparseVector:
    """Fully remove a document leaf (node deleted, path recomputed, pruned)."""
    leaf_id = f"doc:{doc_id}"
    leaf = state.node(leaf_id)
    parent = leaf.parent
    state.detach(leaf_id)
    del state.nodes[leaf_id]
    state.recompute_ancestors(parent)
    state.prune_empty_chain(parent)
    return state.doc_vectors[doc_id]


def merge_similar_siblings(
    state: ModelState, params: dict, seed: int, stats: CorpusStats | None
) -> tuple[bool, str]:
    """Merge the sibling topic pair with maximal centroid cosine >= threshold."""
    threshold = params.get("merge_threshold", 0.6)
    best: tuple[float, str, str] | None = None
    for parent_id, parent in sorted(state.nodes.items()):
        if parent.kind == KIND_LEAF:
            continue
        topics = sorted(c for c in parent.children if state.nodes[c].kind == KIND_TOPIC)
        for i, a_id in enumerate(topics):
            a = state.nodes[a_id]
            for b_id in topics[i + 1 :]:
                b = state.nodes[b_id]
                sim = cosine_unit(a.centroid or {}, b.centroid or {})
                if sim < threshold:
                    continue
                candidate = (sim, a_id, b_id)
                if best is None or sim > best[0] or (sim == best[0] and (a_id, b_id) < best[1:]):
                    best = candidate
    if best is None:
        return False, "no sibling pair above merge threshold"
    _, a_id, b_id = best
    a, b = state.nodes[a_id], state.nodes[b_id]
    keeper, loser = (a, b) if a.created_at <= b.created_at else (b, a)
    for child_id in list(loser.children):
        state.detach(child_id)
        state.attach(child_id, keeper.node_id)
    state.detach(loser.node_id)
    del state.nodes[loser.node_id]
    state.recompute_node(keeper.node_id)
    state.recompute_ancestors(keeper.parent)
    return True, f"merged {loser.node_id} into {keeper.node_id}"


def _spherical_two_means(
    vectors: list[SparseVector], seed: int, iterations: int = 10
) -> list[int]:
    """Assign each vector to cluster 0/1 by cosine; seeded initialization."""
    rng = random.Random(seed)
    first, second = rng.sample(range(len(vectors)), 2)
    centers = [dict(vectors[first]), dict(vectors[second])]
    assignment = [0] * len(vectors)
    for _ in range(iterations):
        changed = False
        for i, vec in enumerate(vectors):
            target = 0 if cosine_unit(vec, centers[0]) >= cosine_unit(vec, centers[1]) else 1
            if target != assignment[i]:
                assignment[i] = target
                changed = True
        for cluster in (0, 1):
            total: SparseVector = {}
            for i, vec in enumerate(vectors):
                if assignment[i] == cluster:
                    add_into(total, vec)
            centers[cluster] = normalized(total)
        if not changed:
            break
    return assignment


def split_incoherent_topic(
    state: ModelState, params: dict, seed: int, stats: CorpusStats | None
) -> tuple[bool, str]:
    """Two-way split of the least coherent topic's direct documents.

    The two halves become fresh sibling topics next to the split topic; the
    original topic survives only if it still holds sub-topics.
    """
    from .quality import topic_coherence  # local import avoids a cycle at module load

    candidates = [
        node
        for node in state.topic_nodes()
        if sum(1 for c in node.children if state.nodes[c].kind == KIND_LEAF) >= 2
    ]
    if not candidates or stats is None:
        return False, "no splittable topic"
    scored = sorted(
        ((topic_coherence(node, stats), node.node_id) for node in candidates),
    )
    target = state.nodes[scored[0][1]]
    leaf_ids = sorted(
        (c for c in target.children if state.nodes[c].kind == KIND_LEAF),
        key=lambda c: state.nodes[c].doc_id,
    )
    vectors = [state.leaf_vector(state.nodes[c]) for c in leaf_ids]
    assignment = _spherical_two_means(vectors, seed)
    groups = [
        [leaf_ids[i] for i in range(len(leaf_ids)) if assignment[i] == cluster]
        for cluster in (0, 1)
    ]
    if not groups[0] or not groups[1]:
        return False, "split produced an empty half"
    parent_id = target.parent
    for group in groups:
        topic = state.new_topic(parent_id)
        for leaf_id in group:
            state.detach(leaf_id)
            state.attach(leaf_id, topic.node_id)
        state.recompute_node(topic.node_id)
    state.recompute_node(target.node_id)
    state.prune_empty_chain(target.node_id)
    state.recompute_ancestors(parent_id)
    return True, f"split {target.node_id} into two topics"


def remove_outlier_documents(
    state: ModelState, params: dict, seed: int, stats: CorpusStats | None
) -> tuple[bool, str]:
    """Detach documents far from their topic centroid and reinsert from root."""
    threshold = params.get("outlier_threshold", 0.15)
    outliers = []
    for leaf in state.leaf_nodes():
        parent = state.nodes[leaf.parent]
        sim = cosine_unit(state.leaf_vector(leaf), parent.centroid or {})
        if sim < threshold:
            outliers.append((leaf.created_at, leaf.doc_id))
    if not outliers:
        return False, "no outliers below threshold"
    outliers.sort()
    threshold_new, max_depth = _insert_params(params)
    vectors = {doc_id: _remove_leaf(state, doc_id) for _, doc_id in outliers}
    for _, doc_id in outliers:
        descend_insert(state, doc_id, vectors[doc_id], threshold_new, max_depth)
    return True, f"reinserted {len(outliers)} outlier documents"


def compact_chains(
    state: ModelState, params: dict, seed: int, stats: CorpusStats | None
) -> tuple[bool, str]:
    """Splice out every topic that has exactly one child, until none remain."""
    spliced = 0
    changed = True
    while changed:
        changed = False
        for node_id in sorted(state.nodes):
            node = state.nodes.get(node_id)
            if node is None or node.kind != KIND_TOPIC or len(node.children) != 1:
                continue
            child_id = node.children[0]
            parent = state.nodes[node.parent]
            position = parent.children.index(node_id)
            parent.children[position] = child_id
            state.nodes[child_id].parent = parent.node_id
            del state.nodes[node_id]
            spliced += 1
            changed = True
    if spliced == 0:
        return False, "no single-child chains"
    state.touch()
    return True, f"spliced {spliced} chain links"


def reassign_misfit_document(
    state: ModelState, params: dict, seed: int, stats: CorpusStats | None
) -> tuple[bool, str]:
    """Move the globally worst-fitting document to its globally best topic."""
    worst: tuple[float, str] | None = None
    for leaf in state.leaf_nodes():
        parent = state.nodes[leaf.parent]
        fit = cosine_unit(state.leaf_vector(leaf), parent.centroid or {})
        if worst is None or (fit, leaf.doc_id) < worst:
            worst = (fit, leaf.doc_id)
    if worst is None:
        return False, "no documents"
    doc_id = worst[1]
    vector = state.doc_vectors[doc_id]
    best: tuple[float, int, str] | None = None
    for topic in state.topic_nodes():
        sim = cosine_unit(vector, topic.centroid or {})
        if best is None or sim > best[0] or (sim == best[0] and topic.created_at < best[1]):
            best = (sim, topic.created_at, topic.node_id)
    if best is None:
        return False, "no topics"
    leaf = state.node(f"doc:{doc_id}")
    if best[2] == leaf.parent:
        return False, "worst-fitting document already in its best topic"
    from .model import move_leaf

    move_leaf(state, doc_id, best[2])
    return True, f"moved {doc_id} to {best[2]}"


def rebalance_small_topics(
    state: ModelState, params: dict, seed: int, stats: CorpusStats | None
) -> tuple[bool, str]:
    """Dissolve topics holding fewer than min_size documents; reinsert their docs."""
    min_size = params.get("min_size", 2)
    candidates = [
        node.node_id
        for node in state.topic_nodes()
        if node.leaf_count < min_size
    ]
    candidate_set = set(candidates)
    maximal = []
    for node_id in sorted(candidates):
        ancestor = state.nodes[node_id].parent
        nested = False
        while ancestor is not None:
            if ancestor in candidate_set:
                nested = True
                break
            ancestor = state.nodes[ancestor].parent
        if not nested:
            maximal.append(node_id)
    if not maximal:
        return False, "no undersized topics"
    displaced: list[tuple[int, str]] = []
    for node_id in maximal:
        node = state.nodes[node_id]
        leaf_orders = {
            leaf.doc_id: leaf.created_at
            for leaf in state.leaf_nodes()
            if _is_descendant(state, leaf.node_id, node_id)
        }
        parent = node.parent
        for doc_id in state.remove_subtree(node_id):
            displaced.append((leaf_orders[doc_id], doc_id))
        state.recompute_ancestors(parent)
        state.prune_empty_chain(parent)
    displaced.sort()
    threshold, max_depth = _insert_params(params)
    for _, doc_id in displaced:
        descend_insert(state, doc_id, state.doc_vectors[doc_id], threshold, max_depth)
    return True, f"dissolved {len(maximal)} topics, reinserted {len(displaced)} documents"


def _is_descendant(state: ModelState, node_id: str, ancestor_id: str) -> bool:
    current = state.nodes[node_id].parent
    while current is not None:
        if current == ancestor_id:
            return True
        current = state.nodes[current].parent
    return False


def identity(
    state: ModelState, params: dict, seed: int, stats: CorpusStats | None
) -> tuple[bool, str]:
    """No-op baseline; lets a sandbox speculate on the temporal dimension alone."""
    return False, "identity"


_BUILTINS = [
    (
        StrategyDescriptor(
            "merge_similar_siblings",
            "Merge most-similar sibling topics",
            "merge",
            {"merge_threshold": 0.6},
        ),
        merge_similar_siblings,
    ),
    (
        StrategyDescriptor(
            "split_incoherent_topic", "Split the least coherent topic", "split", {}
        ),
        split_incoherent_topic,
    ),
    (
        StrategyDescriptor(
            "remove_outlier_documents",
            "Re-home documents far from their topic",
            "outlier",
            {"outlier_threshold": 0.15},
        ),
        remove_outlier_documents,
    ),
    (
        StrategyDescriptor("compact_chains", "Collapse single-child chains", "compact", {}),
        compact_chains,
    ),
    (
        StrategyDescriptor(
            "reassign_misfit_document", "Move the worst-fitting document", "reassign", {}
        ),
        reassign_misfit_document,
    ),
    (
        StrategyDescriptor(
            "rebalance_small_topics",
            "Dissolve undersized topics",
            "rebalance",
            {"min_size": 2},
        ),
        rebalance_small_topics,
    ),
    (StrategyDescriptor("identity", "Keep the tree as-is", "identity", {}), identity),
]


def list_strategies() -> list[StrategyDescriptor]:
    """The seven built-in strategies, in fixed catalog order."""
    return [descriptor for descriptor, _ in _BUILTINS]


class StrategyRegistry:
    """Built-in strategies plus registered extensions.

    Extensions are the hook for input-transformation or algorithm-modification
    style speculation; nothing built-in uses them.
    """

    def __init__(self) -> None:
        self._functions = {d.strategy_id: fn for d, fn in _BUILTINS}
        self._descriptors = {d.strategy_id: d for d, _ in _BUILTINS}
        self._extras: list[str] = []

    def register(self, descriptor: StrategyDescriptor, fn) -> None:
        if descriptor.strategy_id in self._functions:
            raise ValueError(f"strategy id already taken: {descriptor.strategy_id}")
        self._functions[descriptor.strategy_id] = fn
        self._descriptors[descriptor.strategy_id] = descriptor
        self._extras.append(descriptor.strategy_id)

    def descriptors(self) -> list[StrategyDescriptor]:
        """Built-ins in catalog order, then extensions in registration order."""
        ordered = [d for d, _ in _BUILTINS] + [self._descriptors[s] for s in self._extras]
        return ordered

    def descriptor(self, strategy_id: str) -> StrategyDescriptor:
        try:
            return self._descriptors[strategy_id]
        except KeyError:
            raise UnknownStrategyError(strategy_id) from None

    def known(self, strategy_id: str) -> bool:
        return strategy_id in self._functions

    def apply(
        self,
        state: ModelState,
        strategy_id: str,
        params: dict | None = None,
        seed: int = 0,
        stats: CorpusStats | None = None,
    ) -> StrategyResult:
        if strategy_id not in self._functions:
            raise UnknownStrategyError(strategy_id)
        merged = dict(self._descriptors[strategy_id].parameters)
        merged.update(params or {})
        applied, note = self._functions[strategy_id](state, merged, seed, stats)
        if applied:
            state.bump_version()
        return StrategyResult(state=state, applied=applied, note=note)


_DEFAULT_REGISTRY = StrategyRegistry()


def apply_strategy(
    state: ModelState,
    strategy_id: str,
    params: dict | None = None,
    seed: int = 0,
    stats: CorpusStats | None = None,
) -> StrategyResult:
    """Apply a built-in strategy to a state the caller owns."""
    return _DEFAULT_REGISTRY.apply(state, strategy_id, params, seed, stats)
