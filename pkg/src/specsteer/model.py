"""Incremental hierarchical topic tree with document leaves.

The tree has a single root, inner topic nodes carrying centroids, and
doc_leaf nodes referencing documents. Documents are inserted one at a time
by descending from the root: at each level the document is compared against
the topic children's centroids and either descends into the best match or
opens a new topic. Everything is deterministic; equal digests imply
structurally identical states.

A ModelState is a value: it is mutated only by its single owner (the session
loop or one sandbox worker) and must be cloned before being handed to
anyone else.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

from .corpus import Document
from .vectors import SparseVector, add_into, cosine_unit, normalized

KIND_ROOT = "root"
KIND_TOPIC = "topic"
KIND_LEAF = "doc_leaf"

DEFAULT_NEW_TOPIC_THRESHOLD = 0.3
DEFAULT_MAX_DEPTH = 3

CENTROID_TOLERANCE = 1e-6


class ModelInvariantError(AssertionError):
    """A structural or centroid invariant was violated."""


class InsertError(ValueError):
    """Document cannot be inserted (duplicate id or empty vector)."""


@dataclass
class TopicNode:
    node_id: str
    kind: str
    children: list[str] = field(default_factory=list)
    centroid: SparseVector | None = None
    doc_id: str | None = None
    created_at: int = 0
    parent: str | None = None
    # Internal accumulators: centroid == normalized(vector_sum), and
    # leaf_count counts descendant doc leaves.
    vector_sum: SparseVector = field(default_factory=dict)
    leaf_count: int = 0
    top_terms_cache: tuple[str, ...] | None = None

    def clone(self) -> "TopicNode":
        return TopicNode(
            node_id=self.node_id,
            kind=self.kind,
            children=list(self.children),
            centroid=dict(self.centroid) if self.centroid is not None else None,
            doc_id=self.doc_id,
            created_at=self.created_at,
            parent=self.parent,
            vector_sum=dict(self.vector_sum),
            leaf_count=self.leaf_count,
            top_terms_cache=self.top_terms_cache,
        )


class ModelState:
    """Topic tree plus the pending-document buffer and a cached digest."""

    def __init__(self, documents: list[Document] | None = None):
        root = TopicNode(node_id="root", kind=KIND_ROOT, centroid={}, created_at=0)
        self.root_id = "root"
        self.nodes: dict[str, TopicNode] = {root.node_id: root}
        self.buffer: deque[Document] = deque(documents or [])
        self.doc_vectors: dict[str, SparseVector] = {}
        self.insert_cursor = 0
        self.version = 0
        self._next_topic = 1
        self._next_created = 1
        self._digest: str | None = None

    # -- ownership / identity ------------------------------------------------

    def clone(self) -> "ModelState":
        other = ModelState.__new__(ModelState)
        other.root_id = self.root_id
        other.nodes = {nid: node.clone() for nid, node in self.nodes.items()}
        other.buffer = deque(self.buffer)  # Document objects are immutable
        other.doc_vectors = dict(self.doc_vectors)  # vectors never mutated
        other.insert_cursor = self.insert_cursor
        other.version = self.version
        other._next_topic = self._next_topic
        other._next_created = self._next_created
        other._digest = self._digest
        return other

    def touch(self) -> None:
        self._digest = None

    def bump_version(self) -> None:
        self.version += 1
        self.touch()

    @property
    def root(self) -> TopicNode:
        return self.nodes[self.root_id]

    def node(self, node_id: str) -> TopicNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise KeyError(f"unknown node: {node_id}") from None

    def topic_nodes(self) -> list[TopicNode]:
        """All inner topic nodes (root excluded), in sorted node_id order."""
        return [n for _, n in sorted(self.nodes.items()) if n.kind == KIND_TOPIC]

    def leaf_nodes(self) -> list[TopicNode]:
        return [n for _, n in sorted(self.nodes.items()) if n.kind == KIND_LEAF]

    def doc_ids(self) -> set[str]:
        return {n.doc_id for n in self.nodes.values() if n.kind == KIND_LEAF}

    def leaf_vector(self, node: TopicNode) -> SparseVector:
        return self.doc_vectors[node.doc_id]

    def depth_of(self, node_id: str) -> int:
        depth = 0
        node = self.node(node_id)
        while node.parent is not None:
            node = self.nodes[node.parent]
            depth += 1
        return depth

    def max_depth(self) -> int:
        deepest = 0
        stack = [(self.root_id, 0)]
        while stack:
            nid, depth = stack.pop()
            deepest = max(deepest, depth)
            for child in self.nodes[nid].children:
                stack.append((child, depth + 1))
        return deepest

    # -- internal structure edits ---------------------------------------------

    def new_topic(self, parent_id: str) -> TopicNode:
        node = TopicNode(
            node_id=f"t{self._next_topic:05d}",
            kind=KIND_TOPIC,
            centroid={},
            created_at=self._next_created,
            parent=parent_id,
        )
        self._next_topic += 1
        self._next_created += 1
        self.nodes[node.node_id] = node
        self.nodes[parent_id].children.append(node.node_id)
        return node

    def new_leaf(self, parent_id: str, doc_id: str, vector: SparseVector) -> TopicNode:
        node = TopicNode(
            node_id=f"doc:{doc_id}",
            kind=KIND_LEAF,
            doc_id=doc_id,
            created_at=self._next_created,
            parent=parent_id,
        )
        self._next_created += 1
        self.nodes[node.node_id] = node
        self.doc_vectors[doc_id] = vector
        self.nodes[parent_id].children.append(node.node_id)
        return node

    def detach(self, node_id: str) -> TopicNode:
        """Unlink a node from its parent; the node stays in self.nodes."""
        node = self.node(node_id)
        if node.parent is None:
            raise ValueError("cannot detach the root")
        self.nodes[node.parent].children.remove(node_id)
        node.parent = None
        return node

    def attach(self, node_id: str, parent_id: str) -> None:
        node = self.node(node_id)
        if node.parent is not None:
            raise ValueError(f"node {node_id} is already attached")
        node.parent = parent_id
        self.nodes[parent_id].children.append(node_id)

    def remove_subtree(self, node_id: str) -> list[str]:
        """Detach and delete a subtree; returns the doc_ids of removed leaves."""
        self.detach(node_id)
        removed_docs: list[str] = []
        stack = [node_id]
        while stack:
            nid = stack.pop()
            node = self.nodes.pop(nid)
            if node.kind == KIND_LEAF:
                removed_docs.append(node.doc_id)
            stack.extend(node.children)
        return removed_docs

    def prune_empty_chain(self, node_id: str | None) -> None:
        """Delete empty topics walking up from node_id (root is never pruned)."""
        while node_id is not None:
            node = self.nodes.get(node_id)
            if node is None or node.kind != KIND_TOPIC or node.children:
                return
            parent = node.parent
            self.nodes[parent].children.remove(node_id)
            del self.nodes[node_id]
            node_id = parent

    # -- centroid maintenance --------------------------------------------------

    def add_to_path(self, node_id: str, vector: SparseVector) -> None:
        """Incrementally add a leaf vector to all accumulators up to the root."""
        nid: str | None = node_id
        while nid is not None:
            node = self.nodes[nid]
            add_into(node.vector_sum, vector)
            node.leaf_count += 1
            node.centroid = normalized(node.vector_sum)
            node.top_terms_cache = None
            nid = node.parent

    def recompute_node(self, node_id: str) -> None:
        """Recompute one node's accumulators from its children (sorted order)."""
        node = self.nodes[node_id]
        total: SparseVector = {}
        count = 0
        for child_id in sorted(node.children):
            child = self.nodes[child_id]
            if child.kind == KIND_LEAF:
                add_into(total, self.leaf_vector(child))
                count += 1
            else:
                add_into(total, child.vector_sum)
                count += child.leaf_count
        node.vector_sum = total
        node.leaf_count = count
        node.centroid = normalized(total)
        node.top_terms_cache = None

    def recompute_subtree(self, node_id: str) -> None:
        node = self.nodes[node_id]
        if node.kind == KIND_LEAF:
            return
        for child_id in sorted(node.children):
            self.recompute_subtree(child_id)
        self.recompute_node(node_id)

    def recompute_ancestors(self, node_id: str | None) -> None:
        while node_id is not None:
            self.recompute_node(node_id)
            node_id = self.nodes[node_id].parent

    # -- canonical serialization / digest ---------------------------------------

    def canonical_dict(self) -> dict:
        """Canonical snapshot: DFS node order with children visited sorted."""
        nodes = []
        stack = [self.root_id]
        while stack:
            nid = stack.pop()
            node = self.nodes[nid]
            entry: dict = {
                "node_id": node.node_id,
                "kind": node.kind,
                "children": list(node.children),
                "created_at": node.created_at,
            }
            if node.kind == KIND_LEAF:
                entry["doc_id"] = node.doc_id
            else:
                entry["centroid"] = {
                    t: float(f"{w:.12g}") for t, w in (node.centroid or {}).items()
                }
            nodes.append(entry)
            stack.extend(sorted(node.children, reverse=True))
        return {
            "root_id": self.root_id,
            "nodes": nodes,
            "insert_cursor": self.insert_cursor,
            "version": self.version,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        if self._digest is None:
            self._digest = hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()
        return self._digest


def state_from_canonical(
    payload: dict, doc_vectors: dict[str, SparseVector] | None = None
) -> ModelState:
    """Rebuild a state from its canonical snapshot.

    Without doc_vectors the state is inspection-grade (valid for diffing and
    re-digesting, but centroid accumulators are seeded from the serialized
    centroids and further insertion would drift).
    """
    state = ModelState()
    state.nodes = {}
    state.root_id = payload["root_id"]
    state.insert_cursor = payload["insert_cursor"]
    state.version = payload["version"]
    max_topic = 0
    max_created = 0
    for entry in payload["nodes"]:
        node = TopicNode(
            node_id=entry["node_id"],
            kind=entry["kind"],
            children=list(entry["children"]),
            centroid=dict(entry["centroid"]) if "centroid" in entry else None,
            doc_id=entry.get("doc_id"),
            created_at=entry["created_at"],
        )
        state.nodes[node.node_id] = node
        max_created = max(max_created, node.created_at)
        if node.kind == KIND_TOPIC and node.node_id.startswith("t"):
            try:
                max_topic = max(max_topic, int(node.node_id[1:]))
            except ValueError:
                pass
    for node in state.nodes.values():
        for child_id in node.children:
            state.nodes[child_id].parent = node.node_id
    state._next_topic = max_topic + 1
    state._next_created = max_created + 1
    if doc_vectors is not None:
        state.doc_vectors = {
            n.doc_id: doc_vectors[n.doc_id]
            for n in state.nodes.values()
            if n.kind == KIND_LEAF
        }
        state.recompute_subtree(state.root_id)
    else:
        for node in state.nodes.values():
            if node.centroid is not None:
                node.vector_sum = dict(node.centroid)
    return state


# -- insertion ------------------------------------------------------------------


def descend_insert(
    state: ModelState,
    doc_id: str,
    vector: SparseVector,
    threshold: float = DEFAULT_NEW_TOPIC_THRESHOLD,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> str:
    """Insert one document vector; returns the id of the topic that took it.

    Descent rule: among the current node's topic children, pick the one with
    maximal centroid cosine (ties broken by lowest created_at). Descend while
    the maximum reaches the threshold; otherwise open a new topic holding the
    document. At max_depth the document is attached to the current topic.
    """
    node = state.root
    depth = 0
    while depth < max_depth:
        best = None
        best_sim = -1.0
        for child_id in node.children:
            child = state.nodes[child_id]
            if child.kind != KIND_TOPIC:
                continue
            sim = cosine_unit(vector, child.centroid or {})
            if sim > best_sim or (sim == best_sim and best is not None and child.created_at < best.created_at):
                best, best_sim = child, sim
        if best is not None and best_sim >= threshold:
            node = best
            depth += 1
            continue
        topic = state.new_topic(node.node_id)
        state.new_leaf(topic.node_id, doc_id, vector)
        state.add_to_path(topic.node_id, vector)
        return topic.node_id
    state.new_leaf(node.node_id, doc_id, vector)
    state.add_to_path(node.node_id, vector)
    return node.node_id


def insert_document(
    state: ModelState,
    doc: Document,
    threshold: float = DEFAULT_NEW_TOPIC_THRESHOLD,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> ModelState:
    """Insert a document from the stream; advances the cursor and version."""
    if not doc.vector:
        raise InsertError(f"document {doc.id} has an empty vector")
    if doc.id in state.doc_vectors:
        raise InsertError(f"duplicate document id: {doc.id}")
    if state.buffer and state.buffer[0].id == doc.id:
        state.buffer.popleft()
    descend_insert(state, doc.id, doc.vector, threshold, max_depth)
    state.insert_cursor += 1
    state.bump_version()
    return state


def recompute_centroids(state: ModelState, node_id: str) -> ModelState:
    """Restore the centroid invariant for node_id and all its ancestors."""
    node = state.node(node_id)
    state.recompute_subtree(node_id)
    state.recompute_ancestors(node.parent)
    state.touch()
    return state


def move_leaf(state: ModelState, doc_id: str, target_topic_id: str, prune: bool = True) -> None:
    """Move one document leaf under another topic, fixing both centroid paths.

    Does not bump the version; callers owning the public operation do that.
    """
    leaf_id = f"doc:{doc_id}"
    leaf = state.node(leaf_id)
    target = state.node(target_topic_id)
    if target.kind == KIND_LEAF:
        raise ValueError("cannot move a document under a leaf")
    if leaf.parent == target_topic_id:
        return
    source_parent = leaf.parent
    state.detach(leaf_id)
    state.attach(leaf_id, target_topic_id)
    state.recompute_ancestors(source_parent)
    state.recompute_ancestors(target_topic_id)
    if prune:
        state.prune_empty_chain(source_parent)
    state.touch()


# -- validation -------------------------------------------------------------------


def check_state(state: ModelState, check_centroids: bool = True) -> list[str]:
    """Collect invariant violations; empty list means the state is valid."""
    problems: list[str] = []
    root = state.nodes.get(state.root_id)
    if root is None or root.kind != KIND_ROOT:
        return [f"missing or mistyped root {state.root_id}"]
    if root.parent is not None:
        problems.append("root has a parent")

    seen: set[str] = set()
    doc_seen: dict[str, str] = {}
    created_seen: set[int] = set()
    stack = [state.root_id]
    while stack:
        nid = stack.pop()
        if nid in seen:
            problems.append(f"node {nid} reachable twice (cycle or shared child)")
            continue
        seen.add(nid)
        node = state.nodes.get(nid)
        if node is None:
            problems.append(f"dangling child reference {nid}")
            continue
        if node.created_at in created_seen:
            problems.append(f"duplicate created_at {node.created_at}")
        created_seen.add(node.created_at)
        if node.kind == KIND_LEAF:
            if node.children:
                problems.append(f"leaf {nid} has children")
            if node.doc_id is None:
                problems.append(f"leaf {nid} has no doc_id")
            elif node.doc_id in doc_seen:
                problems.append(f"doc {node.doc_id} referenced by two leaves")
            else:
                doc_seen[node.doc_id] = nid
            if node.doc_id is not None and node.doc_id not in state.doc_vectors:
                problems.append(f"leaf {nid} has no stored vector")
        elif node.kind in (KIND_TOPIC, KIND_ROOT):
            if node.kind == KIND_TOPIC and node.leaf_count == 0:
                problems.append(f"topic {nid} holds no documents")
            for child_id in node.children:
                child = state.nodes.get(child_id)
                if child is not None and child.parent != nid:
                    problems.append(f"child {child_id} of {nid} has parent {child.parent}")
            stack.extend(node.children)
        else:
            problems.append(f"node {nid} has unknown kind {node.kind}")

    unreachable = set(state.nodes) - seen
    if unreachable:
        problems.append(f"unreachable nodes: {sorted(unreachable)}")

    for doc in state.buffer:
        if doc.id in doc_seen:
            problems.append(f"buffered document {doc.id} already in tree")

    if check_centroids:
        problems.extend(_check_centroids(state))
    return problems


def _check_centroids(state: ModelState) -> list[str]:
    problems: list[str] = []
    for nid, node in state.nodes.items():
        if node.kind == KIND_LEAF:
            continue
        leaves: list[SparseVector] = []
        stack = list(node.children)
        while stack:
            cid = stack.pop()
            child = state.nodes[cid]
            if child.kind == KIND_LEAF:
                leaves.append(state.leaf_vector(child))
            else:
                stack.extend(child.children)
        mean: SparseVector = {}
        for vec in leaves:
            add_into(mean, vec)
        expected = normalized(mean)
        actual = node.centroid or {}
        if node.leaf_count != len(leaves):
            problems.append(f"{nid}: leaf_count {node.leaf_count} != {len(leaves)}")
        for term in set(expected) | set(actual):
            if abs(expected.get(term, 0.0) - actual.get(term, 0.0)) > CENTROID_TOLERANCE:
                problems.append(f"{nid}: centroid off at term {term!r}")
                break
    return problems


def validate(state: ModelState, check_centroids: bool = True) -> None:
    problems = check_state(state, check_centroids=check_centroids)
    if problems:
        raise ModelInvariantError("; ".join(problems[:10]))
