"""Interaction events, semantic-complexity levels, and speculation proposals.

Starting an interaction (L1) asks only for context: a read-only ranking of
drop targets under the dragged document. A completed interaction (L2)
proposes a handful of similar single-move sandboxes. A repeated interaction
pattern (L3) proposes one sandbox that auto-completes the pattern: every
remaining document in the source topic that fits the target topic better is
moved across.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .engine import Dimensions
from .model import KIND_LEAF, ModelState
from .vectors import cosine_unit

L1 = "L1"
L2 = "L2"
L3 = "L3"

EVENT_TYPES = ("drag_start", "drag_drop", "select", "accept", "reject")

DEFAULT_PATTERN_BUFFER = 10
DEFAULT_REPETITION_THRESHOLD = 3
MAX_NEXT_MOVE_PROPOSALS = 3


class OrphanDropError(ValueError):
    """drag_drop arrived without a matching drag_start."""


@dataclass(frozen=True)
class InteractionEvent:
    event_id: str
    type: str
    doc_id: str | None = None
    source_topic: str | None = None
    target_topic: str | None = None
    cursor: int = 0
    timestamp: float = 0.0

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "type": self.type,
            "doc_id": self.doc_id,
            "source_topic": self.source_topic,
            "target_topic": self.target_topic,
            "cursor": self.cursor,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InteractionEvent":
        return cls(
            event_id=str(data["event_id"]),
            type=data["type"],
            doc_id=data.get("doc_id"),
            source_topic=data.get("source_topic"),
            target_topic=data.get("target_topic"),
            cursor=int(data.get("cursor", 0)),
            timestamp=float(data.get("timestamp", 0.0)),
        )


@dataclass
class PatternState:
    """Recent completed moves plus the currently dragged document."""

    capacity: int = DEFAULT_PATTERN_BUFFER
    repetition_threshold: int = DEFAULT_REPETITION_THRESHOLD
    moves: deque = field(default_factory=deque)
    active_drag: str | None = None

    def __post_init__(self) -> None:
        self.moves = deque(self.moves, maxlen=self.capacity)


def classify_event(event: InteractionEvent, pattern: PatternState) -> str:
    """Map an event to its semantic-complexity level; pure in its inputs."""
    if event.type not in EVENT_TYPES:
        raise ValueError(f"unknown event type: {event.type}")
    if event.type in ("drag_start", "select"):
        return L1
    if event.type in ("accept", "reject"):
        return L2
    # drag_drop
    if pattern.active_drag is None or pattern.active_drag != event.doc_id:
        raise OrphanDropError(f"drag_drop for {event.doc_id} without drag_start")
    key = (event.source_topic, event.target_topic)
    needed = pattern.repetition_threshold - 1
    recent = list(pattern.moves)[-needed:] if needed > 0 else []
    if needed > 0 and len(recent) == needed and all(
        (m[0], m[1]) == key for m in recent
    ):
        return L3
    return L2


def record_event(pattern: PatternState, event: InteractionEvent) -> None:
    """Fold the event into the pattern state (after classification)."""
    if event.type == "drag_start":
        pattern.active_drag = event.doc_id
    elif event.type == "drag_drop":
        pattern.moves.append((event.source_topic, event.target_topic, event.doc_id))
        pattern.active_drag = None


def rank_drop_targets(state: ModelState, doc_vector: dict) -> list[tuple[str, float]]:
    """All topics ranked by cosine against the dragged document (read-only)."""
    scored = [
        (node.node_id, cosine_unit(doc_vector, node.centroid or {}))
        for node in state.topic_nodes()
    ]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored


@dataclass
class SpeculationRequest:
    kind: str  # "drop_targets" | "sandbox"
    trigger_level: str
    dimensions: Dimensions | None = None
    payload: dict = field(default_factory=dict)


def _misfit_moves(state: ModelState, limit: int) -> list[tuple[str, str, float]]:
    """Worst-fitting documents whose best topic differs from their current one."""
    topics = state.topic_nodes()
    if not topics:
        return []
    moves = []
    for leaf in state.leaf_nodes():
        vector = state.leaf_vector(leaf)
        parent = state.nodes[leaf.parent]
        fit = cosine_unit(vector, parent.centroid or {})
        best = None
        for topic in topics:
            sim = cosine_unit(vector, topic.centroid or {})
            if best is None or sim > best[0] or (sim == best[0] and topic.created_at < best[1]):
                best = (sim, topic.created_at, topic.node_id)
        if best and best[2] != leaf.parent:
            moves.append((fit, leaf.doc_id, best[2]))
    moves.sort(key=lambda item: (item[0], item[1]))
    return [(doc_id, target, fit) for fit, doc_id, target in moves[:limit]]


def _pattern_completion_moves(
    state: ModelState, source_topic: str, target_topic: str
) -> tuple[tuple[str, str], ...]:
    """Every source document that fits the target centroid better."""
    if source_topic not in state.nodes or target_topic not in state.nodes:
        return ()
    source = state.nodes[source_topic]
    target = state.nodes[target_topic]
    moves = []
    for child_id in sorted(source.children):
        child = state.nodes[child_id]
        if child.kind != KIND_LEAF:
            continue
        vector = state.leaf_vector(child)
        if cosine_unit(vector, target.centroid or {}) > cosine_unit(
            vector, source.centroid or {}
        ):
            moves.append((child.doc_id, target_topic))
    return tuple(moves)


def propose_speculations(
    level: str, event: InteractionEvent, state: ModelState, config
) -> list[SpeculationRequest]:
    """Translate one classified event into speculation requests."""
    if level == L1:
        if event.doc_id is None or event.doc_id not in state.doc_vectors:
            return []
        ranking = rank_drop_targets(state, state.doc_vectors[event.doc_id])
        return [
            SpeculationRequest(
                kind="drop_targets",
                trigger_level=L1,
                payload={"doc_id": event.doc_id, "ranking": [list(r) for r in ranking]},
            )
        ]
    if level == L2:
        requests = []
        for doc_id, target, fit in _misfit_moves(state, MAX_NEXT_MOVE_PROPOSALS):
            requests.append(
                SpeculationRequest(
                    kind="sandbox",
                    trigger_level=L2,
                    dimensions=Dimensions(strategy_id="identity", moves=((doc_id, target),)),
                    payload={"doc_id": doc_id, "target": target, "fit": fit},
                )
            )
        return requests
    if level == L3:
        moves = _pattern_completion_moves(state, event.source_topic, event.target_topic)
        if not moves:
            return []
        return [
            SpeculationRequest(
                kind="sandbox",
                trigger_level=L3,
                dimensions=Dimensions(strategy_id="identity", moves=moves),
                payload={
                    "source_topic": event.source_topic,
                    "target_topic": event.target_topic,
                    "moves": [list(m) for m in moves],
                },
            )
        ]
    raise ValueError(f"unknown level: {level}")
