"""Merged difference tree between an origin state and a candidate state.

Document leaves are matched by doc_id; topics are matched greedily by
descending Jaccard similarity of their descendant document sets, accepting
pairs at or above the match threshold. The merged tree follows the candidate
structure, with removed origin subtrees woven back in under their closest
surviving ancestor, and every node annotated as unchanged, added, removed,
moved, or modified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import KIND_LEAF, KIND_ROOT, KIND_TOPIC, ModelState

UNCHANGED = "unchanged"
ADDED = "added"
REMOVED = "removed"
MOVED = "moved"
MODIFIED = "modified"

CHANGE_CLASSES = (UNCHANGED, ADDED, REMOVED, MOVED, MODIFIED)

DEFAULT_MATCH_THRESHOLD = 0.5


@dataclass
class DeltaNode:
    change: str
    kind: str
    origin_id: str | None = None
    candidate_id: str | None = None
    doc_id: str | None = None
    children: list["DeltaNode"] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "change": self.change,
            "kind": self.kind,
            "origin_id": self.origin_id,
            "candidate_id": self.candidate_id,
            "doc_id": self.doc_id,
            "children": [child.to_dict() for child in self.children],
        }


@dataclass
class DeltaTree:
    root: DeltaNode
    summary: dict[str, int]
    match_pairs: list[tuple[str, str, float]]

    def to_dict(self) -> dict:
        return {
            "root": self.root.to_dict(),
            "summary": dict(self.summary),
            "match_pairs": [list(pair) for pair in self.match_pairs],
        }


def _doc_sets(state: ModelState) -> dict[str, frozenset[str]]:
    """Descendant doc_id set per non-leaf node."""
    sets: dict[str, frozenset[str]] = {}

    def visit(node_id: str) -> frozenset[str]:
        node = state.nodes[node_id]
        if node.kind == KIND_LEAF:
            return frozenset((node.doc_id,))
        collected: set[str] = set()
        for child in node.children:
            collected |= visit(child)
        result = frozenset(collected)
        sets[node_id] = result
        return result

    visit(state.root_id)
    return sets


def _jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 0.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def _match_topics(
    origin: ModelState,
    candidate: ModelState,
    origin_sets: dict[str, frozenset[str]],
    candidate_sets: dict[str, frozenset[str]],
    threshold: float,
) -> dict[str, str]:
    """Greedy max-Jaccard topic matching, invariant under argument order.

    The side with the lexicographically smaller digest is used as the primary
    sort key so that diff(a, b) and diff(b, a) agree on the match set.
    """
    origin_topics = sorted(n.node_id for n in origin.topic_nodes())
    candidate_topics = sorted(n.node_id for n in candidate.topic_nodes())
    swap = origin.digest() > candidate.digest()
    pairs = []
    for o_id in origin_topics:
        for c_id in candidate_topics:
            score = _jaccard(origin_sets[o_id], candidate_sets[c_id])
            if score >= threshold and score > 0.0:
                key = (c_id, o_id) if swap else (o_id, c_id)
                pairs.append((-score, key[0], key[1], o_id, c_id))
    pairs.sort()
    mapping: dict[str, str] = {}
    used_candidates: set[str] = set()
    for _, _, _, o_id, c_id in pairs:
        if o_id in mapping or c_id in used_candidates:
            continue
        mapping[o_id] = c_id
        used_candidates.add(c_id)
    return mapping


def diff(
    origin: ModelState,
    candidate: ModelState,
    match_threshold: float = DEFAULT_MATCH_THRESHOLD,
) -> DeltaTree:
    """Merge two states into one annotated tree."""
    origin_sets = _doc_sets(origin)
    candidate_sets = _doc_sets(candidate)
    mapping = _match_topics(origin, candidate, origin_sets, candidate_sets, match_threshold)
    mapping[origin.root_id] = candidate.root_id
    reverse = {c: o for o, c in mapping.items()}

    origin_leaf_parent = {
        n.doc_id: n.parent for n in origin.nodes.values() if n.kind == KIND_LEAF
    }
    candidate_leaf_parent = {
        n.doc_id: n.parent for n in candidate.nodes.values() if n.kind == KIND_LEAF
    }

    match_pairs = sorted(
        (o_id, c_id, _jaccard(origin_sets[o_id], candidate_sets[c_id]))
        for o_id, c_id in mapping.items()
        if o_id != origin.root_id
    )

    def classify_candidate_topic(c_id: str) -> str:
        o_id = reverse.get(c_id)
        if o_id is None:
            return ADDED
        origin_parent = origin.nodes[o_id].parent
        candidate_parent = candidate.nodes[c_id].parent
        if mapping.get(origin_parent) != candidate_parent:
            return MOVED
        if origin_sets[o_id] != candidate_sets[c_id]:
            return MODIFIED
        return UNCHANGED

    def classify_candidate_leaf(doc_id: str) -> str:
        origin_parent = origin_leaf_parent.get(doc_id)
        if origin_parent is None:
            return ADDED
        candidate_parent = candidate_leaf_parent[doc_id]
        return UNCHANGED if mapping.get(origin_parent) == candidate_parent else MOVED

    def build_candidate(c_id: str) -> DeltaNode:
        node = candidate.nodes[c_id]
        if node.kind == KIND_LEAF:
            return DeltaNode(
                change=classify_candidate_leaf(node.doc_id),
                kind=KIND_LEAF,
                origin_id=f"doc:{node.doc_id}" if node.doc_id in origin_leaf_parent else None,
                candidate_id=c_id,
                doc_id=node.doc_id,
            )
        change = UNCHANGED if node.kind == KIND_ROOT else classify_candidate_topic(c_id)
        merged = DeltaNode(
            change=change,
            kind=node.kind,
            origin_id=reverse.get(c_id),
            candidate_id=c_id,
        )
        merged.children = [build_candidate(child) for child in node.children]
        return merged

    root = build_candidate(candidate.root_id)

    merged_by_origin: dict[str, DeltaNode] = {}

    def index_merged(node: DeltaNode) -> None:
        if node.origin_id is not None:
            merged_by_origin[node.origin_id] = node
        for child in node.children:
            index_merged(child)

    index_merged(root)
    if origin.root_id not in merged_by_origin:
        merged_by_origin[origin.root_id] = root

    def weave_removed(o_id: str) -> None:
        """Attach removed origin nodes beneath their nearest surviving ancestor."""
        node = origin.nodes[o_id]
        if node.kind == KIND_LEAF:
            if node.doc_id not in candidate_leaf_parent:
                parent_merged = _origin_anchor(node.parent)
                parent_merged.children.append(
                    DeltaNode(
                        change=REMOVED,
                        kind=KIND_LEAF,
                        origin_id=o_id,
                        doc_id=node.doc_id,
                    )
                )
            return
        if node.kind == KIND_TOPIC and o_id not in mapping:
            merged = DeltaNode(change=REMOVED, kind=KIND_TOPIC, origin_id=o_id)
            merged_by_origin[o_id] = merged
            _origin_anchor(node.parent).children.append(merged)
        for child in node.children:
            weave_removed(child)

    def _origin_anchor(o_id: str | None) -> DeltaNode:
        while o_id is not None:
            merged = merged_by_origin.get(o_id)
            if merged is not None:
                return merged
            o_id = origin.nodes[o_id].parent
        return root

    for child in origin.nodes[origin.root_id].children:
        weave_removed(child)

    summary = {change: 0 for change in CHANGE_CLASSES}

    def tally(node: DeltaNode) -> None:
        summary[node.change] += 1
        for child in node.children:
            tally(child)

    tally(root)
    return DeltaTree(root=root, summary=summary, match_pairs=match_pairs)


def summarize(delta: DeltaTree) -> dict[str, int]:
    """Reccount change annotations over the merged tree."""
    counts = {change: 0 for change in CHANGE_CLASSES}
    stack = [delta.root]
    while stack:
        node = stack.pop()
        counts[node.change] += 1
        stack.extend(node.children)
    return counts
