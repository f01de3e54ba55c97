"""Session management, wire protocol, provenance log, and replay.

One control loop per session owns the main model state; every mutation
appends exactly one provenance entry carrying the main-state digest, so a
log can be re-executed and verified end to end. Clients talk JSON messages
({"type", "seq", "payload"}) over whatever transport the API layer provides;
subscribers receive ranked sandbox pushes with delta payloads.
"""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import IngestResult, ingest_corpus
from .delta import diff
from .engine import (
    READY,
    Dimensions,
    SpeculationConfig,
    SpeculationEngine,
    StaleSandboxError,
    SandboxStateError,
)
from .interact import (
    InteractionEvent,
    OrphanDropError,
    PatternState,
    classify_event,
    propose_speculations,
    record_event,
)
from .model import ModelState, insert_document
from .quality import QualityHistory, evaluate, should_trigger

logger = logging.getLogger(__name__)

MESSAGE_TYPES = (
    "step",
    "accept",
    "reject",
    "interaction",
    "get_snapshot",
    "get_delta",
    "subscribe",
)

PUSH_QUEUE_LIMIT = 64


class ProtocolError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def encode_message(message: dict) -> str:
    return json.dumps(message, sort_keys=True, separators=(",", ":"))


def decode_message(raw: str) -> dict:
    try:
        message = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProtocolError("bad_json", f"unparseable message: {exc}") from None
    validate_message(message)
    return message


def validate_message(message: object) -> None:
    if not isinstance(message, dict):
        raise ProtocolError("bad_shape", "message must be an object")
    if not isinstance(message.get("type"), str):
        raise ProtocolError("bad_type", "message.type must be a string")
    if message["type"] not in MESSAGE_TYPES:
        raise ProtocolError("unknown_type", f"unknown message type: {message['type']}")
    if not isinstance(message.get("seq"), int):
        raise ProtocolError("bad_seq", "message.seq must be an integer")
    if not isinstance(message.get("payload"), dict):
        raise ProtocolError("bad_payload", "message.payload must be an object")


@dataclass
class ProvenanceEntry:
    seq: int
    kind: str
    payload: dict
    digest_after: str
    ts: float

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind,
            "payload": self.payload,
            "digest_after": self.digest_after,
            "ts": self.ts,
        }

    def normalized_json(self) -> str:
        data = self.to_dict()
        data.pop("ts")
        return json.dumps(data, sort_keys=True, separators=(",", ":"))


class ProvenanceLog:
    """Append-only entry list, optionally mirrored to a jsonl file."""

    def __init__(self, path: str | Path | None = None):
        self.entries: list[ProvenanceEntry] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def append(self, kind: str, payload: dict, digest_after: str) -> ProvenanceEntry:
        entry = ProvenanceEntry(
            seq=len(self.entries),
            kind=kind,
            payload=payload,
            digest_after=digest_after,
            ts=time.time(),
        )
        self.entries.append(entry)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
        return entry


def read_log(path: str | Path) -> list[ProvenanceEntry]:
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        entries.append(
            ProvenanceEntry(
                seq=data["seq"],
                kind=data["kind"],
                payload=data["payload"],
                digest_after=data["digest_after"],
                ts=data.get("ts", 0.0),
            )
        )
    return entries


def normalized_log_lines(path: str | Path) -> list[str]:
    """Provenance as canonical JSON lines with timestamps stripped."""
    return [entry.normalized_json() for entry in read_log(path)]


class Session:
    """Owns one main model state and all speculation bookkeeping."""

    def __init__(
        self,
        session_id: str,
        corpus_path: str | Path,
        config: SpeculationConfig,
        ingest: IngestResult,
        log_path: str | Path | None = None,
    ):
        self.session_id = session_id
        self.corpus_path = str(corpus_path)
        self.config = config
        self.ingest = ingest
        self.stats = ingest.stats
        self.main_state = ModelState(ingest.documents)
        self.engine = SpeculationEngine(config, ingest.stats)
        self.history = QualityHistory(capacity=config.quality_window)
        self.pattern = PatternState(
            capacity=config.pattern_buffer,
            repetition_threshold=config.repetition_threshold,
        )
        self.provenance = ProvenanceLog(log_path)
        self.subscribers: dict[str, deque] = {}
        self._subscriber_counter = 0
        self._push_seq = 0

    # -- construction -------------------------------------------------------------

    @classmethod
    def create(
        cls,
        corpus_path: str | Path,
        config: SpeculationConfig | None = None,
        session_id: str = "session-0001",
        log_path: str | Path | None = None,
    ) -> "Session":
        config = config or SpeculationConfig()
        ingest = ingest_corpus(corpus_path)
        config.corpus_size = ingest.stats.k
        session = cls(session_id, corpus_path, config, ingest, log_path)
        session._log(
            "ingest",
            {
                "corpus_path": str(corpus_path),
                "k": ingest.stats.k,
                "skipped": [list(s) for s in ingest.skipped],
            },
        )
        session._log("config", {"config": config.to_dict()})
        return session

    def _log(self, kind: str, payload: dict) -> ProvenanceEntry:
        return self.provenance.append(kind, payload, self.main_state.digest())

    # -- stepping -----------------------------------------------------------------

    def pending_batch(self):
        batch_id = self.engine.current_batch_id
        if batch_id is None:
            return None
        batch = self.engine.batches[batch_id]
        return None if batch.resolved else batch

    def step(self, count: int) -> list[ProvenanceEntry]:
        """Insert up to `count` buffered documents, speculating as configured."""
        emitted: list[ProvenanceEntry] = []
        for _ in range(count):
            if not self.main_state.buffer:
                break
            if self.config.pause_on_speculation and self.pending_batch() is not None:
                break
            doc = self.main_state.buffer[0]
            insert_document(
                self.main_state,
                doc,
                self.config.new_topic_threshold,
                self.config.max_tree_depth,
            )
            self.engine.invalidate_unresolved(self.main_state.digest())
            quality = evaluate(self.main_state, self.stats)
            self.history.push(self.main_state.insert_cursor, quality)
            emitted.append(
                self._log(
                    "insert",
                    {"doc_id": doc.id, "cursor": self.main_state.insert_cursor},
                )
            )
            fired, reason = self._trigger_decision()
            if fired:
                emitted.extend(self._run_batch("metric_decline", reason))
        return emitted

    def _trigger_decision(self) -> tuple[bool, str]:
        policy = self.config.trigger_policy
        if policy == "off":
            return False, ""
        if policy == "every-buffer":
            cursor = self.main_state.insert_cursor
            if cursor % self.config.buffer_horizon == 0 or not self.main_state.buffer:
                return True, f"buffer boundary at cursor {cursor}"
            return False, ""
        if policy == "metric":
            return should_trigger(self.history, self.config.trigger_drop_threshold)
        raise ValueError(f"unknown trigger policy: {policy}")

    def _run_batch(
        self,
        trigger: str,
        reason: str,
        requests: list[Dimensions] | None = None,
        auto_accept: bool = False,
    ) -> list[ProvenanceEntry]:
        emitted = [
            self._log(
                "trigger",
                {"trigger": trigger, "reason": reason, "cursor": self.main_state.insert_cursor},
            )
        ]
        origin_quality = evaluate(self.main_state, self.stats)
        batch = self.engine.speculate(
            self.main_state, trigger, requests=requests, origin_quality=origin_quality
        )
        for sandbox_id in batch.sandbox_ids:
            sandbox = self.engine.sandboxes[sandbox_id]
            emitted.append(
                self._log(
                    "sandbox_created",
                    {
                        "sandbox_id": sandbox_id,
                        "batch_id": batch.batch_id,
                        "trigger": trigger,
                        "dimensions": sandbox.dimensions.to_dict(),
                        "origin_digest": sandbox.origin_digest,
                    },
                )
            )
        rank_position = {e.sandbox_id: i for i, e in enumerate(batch.ranked)}
        for sandbox_id in batch.sandbox_ids:
            sandbox = self.engine.sandboxes[sandbox_id]
            if sandbox.status == READY:
                emitted.append(
                    self._log(
                        "sandbox_ready",
                        {
                            "sandbox_id": sandbox_id,
                            "batch_id": batch.batch_id,
                            "strategy_id": sandbox.dimensions.strategy_id,
                            "result_digest": sandbox.result.digest(),
                            "applied": sandbox.applied,
                            "rank": rank_position.get(sandbox_id),
                        },
                    )
                )
            else:
                emitted.append(
                    self._log(
                        "sandbox_timed_out",
                        {
                            "sandbox_id": sandbox_id,
                            "batch_id": batch.batch_id,
                            "strategy_id": sandbox.dimensions.strategy_id,
                            "status": sandbox.status,
                        },
                    )
                )
        if batch.ranked:
            self._push_batch(batch)
        if auto_accept and batch.ranked:
            emitted.extend(self.accept(batch.ranked[0].sandbox_id, update_weights=False))
        return emitted

    # -- resolution -----------------------------------------------------------------

    def accept(self, sandbox_id: str, update_weights: bool = True) -> list[ProvenanceEntry]:
        if not update_weights:
            saved = self.engine.weights.as_dict()
        new_main = self.engine.accept(sandbox_id, self.main_state)
        if not update_weights:
            self.engine.weights = type(self.engine.weights)(saved)
        self.main_state = new_main
        entry = self._log("accept", {"sandbox_id": sandbox_id})
        self.engine.invalidate_unresolved(self.main_state.digest())
        return [entry]

    def reject(self, sandbox_id: str) -> list[ProvenanceEntry]:
        changed = self.engine.reject(sandbox_id)
        if not changed:
            return []
        return [self._log("reject", {"sandbox_id": sandbox_id})]

    # -- interaction ------------------------------------------------------------------

    def apply_interaction(self, event: InteractionEvent) -> tuple[str, dict, list[ProvenanceEntry]]:
        """Classify, record, execute (for completed moves), and speculate.

        Returns (level, response payload, emitted provenance entries).
        """
        level = classify_event(event, self.pattern)
        if event.type == "drag_drop":
            if f"doc:{event.doc_id}" not in self.main_state.nodes:
                raise ProtocolError("unknown_doc", f"document not in tree: {event.doc_id}")
            target = self.main_state.nodes.get(event.target_topic or "")
            if target is None or target.kind == "doc_leaf":
                raise ProtocolError("bad_target", f"bad drop target: {event.target_topic}")
        record_event(self.pattern, event)
        emitted = [self._log("interaction", {"event": event.to_dict(), "level": level})]
        response: dict = {"level": level}

        if event.type == "drag_drop":
            # the user's own move: an instantly accepted single-move sandbox
            emitted.extend(
                self._run_batch(
                    "manual",
                    f"user move {event.doc_id} -> {event.target_topic}",
                    requests=[
                        Dimensions(
                            strategy_id="identity",
                            moves=((event.doc_id, event.target_topic),),
                        )
                    ],
                    auto_accept=True,
                )
            )

        requests = propose_speculations(level, event, self.main_state, self.config)
        sandbox_requests = [r.dimensions for r in requests if r.kind == "sandbox"]
        for request in requests:
            if request.kind == "drop_targets":
                response["drop_targets"] = request.payload["ranking"]
        if sandbox_requests:
            emitted.extend(
                self._run_batch(level, f"{level} speculation", requests=sandbox_requests)
            )
        return level, response, emitted

    # -- views ---------------------------------------------------------------------

    def snapshot(self) -> dict:
        quality = evaluate(self.main_state, self.stats)
        return {
            "session_id": self.session_id,
            "state": self.main_state.canonical_dict(),
            "digest": self.main_state.digest(),
            "quality": quality.to_dict(),
            "buffered": len(self.main_state.buffer),
            "pending_batch": self.pending_batch().batch_id if self.pending_batch() else None,
        }

    def sandbox_delta(self, sandbox_id: str) -> dict:
        sandbox = self.engine.sandboxes.get(sandbox_id)
        if sandbox is None:
            raise ProtocolError("unknown_sandbox", f"unknown sandbox: {sandbox_id}")
        if sandbox.result is None:
            raise ProtocolError("no_result", f"sandbox {sandbox_id} has no result")
        return diff(self.main_state, sandbox.result, self.config.match_threshold).to_dict()

    # -- subscriptions ---------------------------------------------------------------

    def subscribe(self) -> str:
        self._subscriber_counter += 1
        subscriber_id = f"sub{self._subscriber_counter:04d}"
        self.subscribers[subscriber_id] = deque(maxlen=PUSH_QUEUE_LIMIT)
        return subscriber_id

    def drain_pushes(self, subscriber_id: str) -> list[dict]:
        queue = self.subscribers.get(subscriber_id)
        if queue is None:
            raise ProtocolError("unknown_subscriber", f"unknown subscriber: {subscriber_id}")
        drained = list(queue)
        queue.clear()
        return drained

    def _push_batch(self, batch) -> None:
        if not self.subscribers:
            return
        summaries = [
            self.engine.sandboxes[entry.sandbox_id].summary() | {"score": entry.score}
            for entry in batch.ranked
        ]
        deltas = {}
        for entry in batch.ranked[:3]:
            sandbox = self.engine.sandboxes[entry.sandbox_id]
            deltas[entry.sandbox_id] = diff(
                self.main_state, sandbox.result, self.config.match_threshold
            ).to_dict()
        self._push_seq += 1
        push = {
            "type": "sandbox_ready",
            "seq": self._push_seq,
            "payload": {
                "batch_id": batch.batch_id,
                "trigger": batch.trigger,
                "ranked": summaries,
                "deltas": deltas,
            },
        }
        for queue in self.subscribers.values():
            queue.append(push)

    # -- message dispatch --------------------------------------------------------------

    def handle_message(self, message: dict) -> dict:
        """Dispatch one validated protocol message; errors leave state untouched."""
        try:
            validate_message(message)
        except ProtocolError as exc:
            return _error_response(message, exc)
        seq = message["seq"]
        payload = message["payload"]
        try:
            if message["type"] == "step":
                count = int(payload.get("count", 1))
                entries = self.step(count)
                return _ok(seq, {"events": [e.to_dict() for e in entries]})
            if message["type"] == "accept":
                self.accept(str(payload["sandbox_id"]))
                return _ok(seq, {"digest": self.main_state.digest()})
            if message["type"] == "reject":
                self.reject(str(payload["sandbox_id"]))
                return _ok(seq, {"digest": self.main_state.digest()})
            if message["type"] == "interaction":
                event = InteractionEvent.from_dict(payload)
                level, response, _ = self.apply_interaction(event)
                return _ok(seq, response)
            if message["type"] == "get_snapshot":
                return _ok(seq, self.snapshot())
            if message["type"] == "get_delta":
                return _ok(seq, self.sandbox_delta(str(payload["sandbox_id"])))
            if message["type"] == "subscribe":
                return _ok(seq, {"subscriber_id": self.subscribe()})
        except ProtocolError as exc:
            return _error_response(message, exc)
        except (KeyError, ValueError, OrphanDropError) as exc:
            return _error_response(message, ProtocolError("bad_request", str(exc)))
        except (StaleSandboxError, SandboxStateError) as exc:
            return _error_response(message, ProtocolError("conflict", str(exc)))
        raise AssertionError("unreachable")


def _ok(seq: int, payload: dict) -> dict:
    return {"type": "ok", "seq": seq, "payload": payload}


def _error_response(message: object, exc: ProtocolError) -> dict:
    seq = message.get("seq", -1) if isinstance(message, dict) else -1
    return {
        "type": "error",
        "seq": seq if isinstance(seq, int) else -1,
        "payload": {"code": exc.code, "message": exc.message},
    }


class SessionManager:
    """Process-wide session registry (single session unless configured)."""

    def __init__(self) -> None:
        self.sessions: dict[str, Session] = {}
        self._counter = 0

    def create_session(
        self,
        corpus_path: str | Path,
        config: SpeculationConfig | None = None,
        log_path: str | Path | None = None,
    ) -> Session:
        config = config or SpeculationConfig()
        if self.sessions and not config.allow_multi_session:
            raise RuntimeError("multi-session disabled; set allow_multi_session")
        self._counter += 1
        session_id = f"session-{self._counter:04d}"
        session = Session.create(corpus_path, config, session_id, log_path)
        self.sessions[session_id] = session
        return session

    def get(self, session_id: str) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise KeyError(f"unknown session: {session_id}") from None

    def handle_message(self, session_id: str, message: dict) -> dict:
        return self.get(session_id).handle_message(message)


# -- replay -------------------------------------------------------------------------


@dataclass
class ReplayReport:
    ok: bool
    final_digest: str = ""
    entries_checked: int = 0
    divergence_seq: int | None = None
    message: str = ""
    truncated: bool = False


DETERMINISTIC_KINDS = ("insert", "trigger", "sandbox_created", "sandbox_ready", "sandbox_timed_out")


def replay(log_path: str | Path) -> ReplayReport:
    """Re-execute a provenance log and verify the digest chain.

    Deterministic entries are regenerated by stepping the rebuilt session;
    user actions (accept, reject, interaction) are re-injected. The first
    mismatching entry is reported as a divergence.
    """
    logged = read_log(log_path)
    if not logged:
        return ReplayReport(ok=False, message="no entries")
    if logged[0].kind != "ingest" or len(logged) < 2 or logged[1].kind != "config":
        return ReplayReport(ok=False, message="log does not start with ingest + config")

    config = SpeculationConfig.from_dict(logged[1].payload["config"])
    session = Session.create(logged[0].payload["corpus_path"], config, "replay")

    def mismatch(expected: ProvenanceEntry, actual: ProvenanceEntry | None) -> ReplayReport | None:
        if actual is None:
            return ReplayReport(
                ok=False,
                divergence_seq=expected.seq,
                message=f"divergence at seq {expected.seq}: nothing regenerated",
            )
        if (
            expected.kind != actual.kind
            or expected.digest_after != actual.digest_after
            or expected.payload != actual.payload
        ):
            return ReplayReport(
                ok=False,
                divergence_seq=expected.seq,
                message=f"divergence at seq {expected.seq}: {expected.kind} mismatch",
            )
        return None

    checked = 0
    for expected, actual in zip(logged[:2], session.provenance.entries[:2]):
        report = mismatch(expected, actual)
        if report is not None:
            return report
        checked += 1

    position = 2
    truncated = False
    while position < len(logged):
        entry = logged[position]
        try:
            if entry.kind in DETERMINISTIC_KINDS:
                emitted = session.step(1)
                if not emitted:
                    return ReplayReport(
                        ok=False,
                        divergence_seq=entry.seq,
                        message=f"divergence at seq {entry.seq}: session would not advance",
                    )
            elif entry.kind == "accept":
                emitted = session.accept(entry.payload["sandbox_id"])
            elif entry.kind == "reject":
                emitted = session.reject(entry.payload["sandbox_id"])
                if not emitted:
                    return ReplayReport(
                        ok=False,
                        divergence_seq=entry.seq,
                        message=f"divergence at seq {entry.seq}: reject regenerated nothing",
                    )
            elif entry.kind == "interaction":
                event = InteractionEvent.from_dict(entry.payload["event"])
                _, _, emitted = session.apply_interaction(event)
            else:
                return ReplayReport(
                    ok=False,
                    divergence_seq=entry.seq,
                    message=f"divergence at seq {entry.seq}: unknown kind {entry.kind}",
                )
        except (KeyError, ValueError, RuntimeError) as exc:
            return ReplayReport(
                ok=False,
                divergence_seq=entry.seq,
                message=f"divergence at seq {entry.seq}: {exc}",
            )
        for regenerated in emitted:
            if position >= len(logged):
                truncated = True
                break
            report = mismatch(logged[position], regenerated)
            if report is not None:
                return report
            checked += 1
            position += 1
        if truncated:
            session.engine.invalidate_unresolved(session.main_state.digest())
            break

    return ReplayReport(
        ok=True,
        final_digest=logged[min(position, len(logged)) - 1].digest_after,
        entries_checked=checked,
        truncated=truncated,
        message="truncated mid-batch; unresolved sandboxes dropped" if truncated else "ok",
    )
