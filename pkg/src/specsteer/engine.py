"""Speculative sandbox scheduling, budgets, ranking, and accept/reject.

A sandbox holds a deep copy of the current model state plus an assignment on
the speculation dimensions (optimization strategy, temporal forecast horizon,
parameter overrides, and optional document moves). Batches of sandboxes run
concurrently on a worker pool; each computation cooperatively checks its
deadline at least once per document insert and is excluded from ranking when
it exceeds its trigger-level budget. The main state is never touched: only
an explicit accept replaces it with a sandbox result.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

from .corpus import CorpusStats
from .model import ModelState, insert_document
from .quality import METRICS, QualityVector, RankCandidate, RankedEntry, consensus_rank, evaluate
from .strategies import StrategyRegistry

PENDING = "pending"
RUNNING = "running"
READY = "ready"
TIMED_OUT = "timed_out"
CANCELLED = "cancelled"
ACCEPTED = "accepted"
REJECTED = "rejected"

TRIGGER_METRIC = "metric_decline"
TRIGGER_MANUAL = "manual"
TRIGGER_LEVELS = ("metric_decline", "L1", "L2", "L3", "manual")


class StaleSandboxError(RuntimeError):
    pass


class SandboxStateError(RuntimeError):
    pass


@dataclass
class SpeculationConfig:
    """Session-wide knobs; every field is settable from the config file."""

    corpus_size: int = 0
    strategy_count: int = 7
    buffer_horizon: int = 10
    budgets_ms: dict = field(
        default_factory=lambda: {
            "L1": 500.0,
            "L2": 5000.0,
            "L3": 5000.0,
            "metric_decline": 5000.0,
            "manual": 5000.0,
        }
    )
    max_workers: int = 4
    new_topic_threshold: float = 0.3
    max_tree_depth: int = 3
    trigger_drop_threshold: float = 0.10
    quality_window: int = 10
    match_threshold: float = 0.5
    acceptance_ema_rate: float = 0.3
    consensus_method: str = "weighted_sum"
    metric_weights: dict = field(default_factory=lambda: {m: 1.0 for m in METRICS})
    strategy_params: dict = field(default_factory=dict)
    trigger_policy: str = "metric"  # metric | every-buffer | off
    pause_on_speculation: bool = True
    serialize_workers: bool = False
    pattern_buffer: int = 10
    repetition_threshold: int = 3
    allow_multi_session: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SpeculationConfig":
        config = cls()
        for key, value in data.items():
            if not hasattr(config, key):
                raise ValueError(f"unknown config field: {key}")
            setattr(config, key, value)
        return config

    def budget_for(self, trigger: str) -> float:
        return float(self.budgets_ms.get(trigger, self.budgets_ms.get("manual", 5000.0)))


@dataclass
class Dimensions:
    """Assignment on the speculation dimensions for one sandbox."""

    strategy_id: str = "identity"
    temporal_horizon: int = 0
    parameter_overrides: dict = field(default_factory=dict)
    moves: tuple = ()  # ((doc_id, target_topic_id), ...) applied before the strategy

    def to_dict(self) -> dict:
        return {
            "strategy_id": self.strategy_id,
            "temporal_horizon": self.temporal_horizon,
            "parameter_overrides": dict(self.parameter_overrides),
            "moves": [list(m) for m in self.moves],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Dimensions":
        return cls(
            strategy_id=data.get("strategy_id", "identity"),
            temporal_horizon=data.get("temporal_horizon", 0),
            parameter_overrides=dict(data.get("parameter_overrides", {})),
            moves=tuple(tuple(m) for m in data.get("moves", [])),
        )


@dataclass
class Sandbox:
    sandbox_id: str
    origin_digest: str
    trigger: str
    dimensions: Dimensions
    created_at_cursor: int
    batch_id: str
    status: str = PENDING
    result: ModelState | None = None
    quality: QualityVector | None = None
    runtime_ms: float = 0.0
    applied: bool = False
    note: str = ""
    cancel_requested: bool = False
    forecast_inserted: int = 0
    forecast_truncated: bool = False
    _work_state: ModelState | None = None

    def summary(self) -> dict:
        return {
            "sandbox_id": self.sandbox_id,
            "batch_id": self.batch_id,
            "status": self.status,
            "trigger": self.trigger,
            "strategy_id": self.dimensions.strategy_id,
            "temporal_horizon": self.dimensions.temporal_horizon,
            "applied": self.applied,
            "origin_digest": self.origin_digest,
            "result_digest": self.result.digest() if self.result is not None else None,
            "quality": self.quality.to_dict() if self.quality is not None else None,
            "runtime_ms": self.runtime_ms,
            "note": self.note,
        }


@dataclass
class Batch:
    batch_id: str
    trigger: str
    cursor: int
    origin_digest: str
    sandbox_ids: list[str]
    ranked: list[RankedEntry] = field(default_factory=list)
    resolved: bool = False


class StrategyWeights:
    """Acceptance-history weights per strategy, EMA-updated in [0, 1]."""

    def __init__(self, initial: dict[str, float] | None = None):
        self._weights: dict[str, float] = dict(initial or {})

    def get(self, strategy_id: str) -> float:
        return self._weights.get(strategy_id, 0.5)

    def update(self, strategy_id: str, outcome: str, rate: float) -> float:
        if not 0.0 < rate < 1.0:
            raise ValueError("EMA rate must be in (0, 1)")
        if outcome not in (ACCEPTED, REJECTED):
            raise ValueError(f"unknown outcome: {outcome}")
        target = 1.0 if outcome == ACCEPTED else 0.0
        new = (1.0 - rate) * self.get(strategy_id) + rate * target
        self._weights[strategy_id] = new
        return new

    def as_dict(self) -> dict[str, float]:
        return dict(self._weights)


def update_strategy_weights(
    weights: StrategyWeights, strategy_id: str, outcome: str, rate: float
) -> StrategyWeights:
    """EMA update: w' = (1 - rate) * w + rate * [outcome == accepted]."""
    weights.update(strategy_id, outcome, rate)
    return weights


def derive_seed(session_seed: int, sandbox_id: str) -> int:
    raw = hashlib.sha256(f"{session_seed}:{sandbox_id}".encode("utf-8")).digest()
    return int.from_bytes(raw[:8], "big")


def forecast(
    state: ModelState,
    horizon: int,
    threshold: float = 0.3,
    max_depth: int = 3,
    abort_check=None,
) -> tuple[int, bool]:
    """Insert the next min(horizon, buffered) documents into the given state.

    Returns (inserted count, truncated flag); the abort check runs once per
    insert and stops the forecast early when it returns True.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    truncated = horizon > len(state.buffer)
    to_insert = min(horizon, len(state.buffer))
    inserted = 0
    for _ in range(to_insert):
        if abort_check is not None and abort_check():
            break
        insert_document(state, state.buffer[0], threshold, max_depth)
        inserted += 1
    return inserted, truncated


def search_space_accounting(k: int, n: int, b: int) -> dict[str, float]:
    """Size of the speculative search relative to exhaustive alternatives.

    sandboxes_total counts one batch of n strategies per buffer period;
    the log10 figures cover every strategy choice path, every document
    insertion order, and every labelled tree over k nodes (Cayley).
    """
    if k < 1 or n < 1 or b < 1:
        raise ValueError("k, n, b must all be >= 1")
    return {
        "sandboxes_total": math.ceil(k / b) * n,
        "full_option_paths_log10": (k / b) * math.log10(n),
        "incremental_orders_log10": math.lgamma(k + 1) / math.log(10),
        "all_trees_log10": (k - 2) * math.log10(k) if k >= 2 else 0.0,
    }


class SpeculationEngine:
    """Owns sandbox lifecycle and ranking for one session."""

    def __init__(
        self,
        config: SpeculationConfig,
        stats: CorpusStats,
        registry: StrategyRegistry | None = None,
    ):
        self.config = config
        self.stats = stats
        self.registry = registry or StrategyRegistry()
        self.weights = StrategyWeights()
        self.sandboxes: dict[str, Sandbox] = {}
        self.batches: dict[str, Batch] = {}
        self.current_batch_id: str | None = None
        self._sandbox_counter = 0
        self._batch_counter = 0

    # -- creation ----------------------------------------------------------------

    def open_sandbox(
        self,
        state: ModelState,
        dimensions: Dimensions,
        trigger: str = TRIGGER_MANUAL,
        batch_id: str = "",
    ) -> Sandbox:
        """Create a pending sandbox over a deep, independent copy of the state."""
        self._sandbox_counter += 1
        sandbox = Sandbox(
            sandbox_id=f"sb{self._sandbox_counter:05d}",
            origin_digest=state.digest(),
            trigger=trigger,
            dimensions=dimensions,
            created_at_cursor=state.insert_cursor,
            batch_id=batch_id,
        )
        sandbox._work_state = state.clone()
        self.sandboxes[sandbox.sandbox_id] = sandbox
        return sandbox

    # -- execution ---------------------------------------------------------------

    def execute(self, sandbox: Sandbox) -> Sandbox:
        """Run one sandbox to completion, enforcing its trigger-level budget."""
        budget_ms = self.config.budget_for(sandbox.trigger)
        start = time.perf_counter()
        deadline = start + budget_ms / 1000.0

        def over_deadline() -> bool:
            return sandbox.cancel_requested or time.perf_counter() > deadline

        sandbox.status = RUNNING
        state = sandbox._work_state
        seed = derive_seed(self.config.seed, sandbox.sandbox_id)
        params = dict(self.config.strategy_params.get(sandbox.dimensions.strategy_id, {}))
        params.update(sandbox.dimensions.parameter_overrides)
        params.setdefault("new_topic_threshold", self.config.new_topic_threshold)
        params.setdefault("max_depth", self.config.max_tree_depth)

        aborted = False
        failed: str | None = None
        from .model import move_leaf

        try:
            for doc_id, target in sandbox.dimensions.moves:
                if over_deadline():
                    aborted = True
                    break
                move_leaf(state, doc_id, target)
            if not aborted:
                result = self.registry.apply(
                    state, sandbox.dimensions.strategy_id, params, seed, self.stats
                )
                sandbox.applied = result.applied
                sandbox.note = result.note
                if sandbox.dimensions.moves:
                    state.bump_version()
                aborted = over_deadline()
            if not aborted and sandbox.dimensions.temporal_horizon > 0:
                inserted, truncated = forecast(
                    state,
                    sandbox.dimensions.temporal_horizon,
                    params["new_topic_threshold"],
                    params["max_depth"],
                    abort_check=over_deadline,
                )
                sandbox.forecast_inserted = inserted
                sandbox.forecast_truncated = truncated
                aborted = over_deadline()
            if not aborted:
                sandbox.quality = evaluate(state, self.stats)
                aborted = over_deadline()
        except Exception as exc:  # a broken extension or move must not kill the batch
            failed = f"{type(exc).__name__}: {exc}"

        sandbox.runtime_ms = (time.perf_counter() - start) * 1000.0
        if failed is not None:
            sandbox.status = CANCELLED
            sandbox.quality = None
            sandbox.note = failed
        elif sandbox.cancel_requested:
            sandbox.status = CANCELLED
            sandbox.quality = None
        elif aborted or sandbox.runtime_ms > budget_ms:
            sandbox.status = TIMED_OUT
            sandbox.quality = None
        else:
            sandbox.status = READY
            sandbox.result = state
        sandbox._work_state = None
        return sandbox

    def run_batch(self, sandboxes: list[Sandbox]) -> None:
        """Execute a batch, concurrently unless serialized for determinism."""
        workers = self.config.max_workers
        if self.config.serialize_workers or workers <= 1 or len(sandboxes) <= 1:
            for sandbox in sandboxes:
                self.execute(sandbox)
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(self.execute, sandboxes))

    # -- speculation entry points ---------------------------------------------------

    def strategy_ids_for_batch(self) -> list[str]:
        ids = [d.strategy_id for d in self.registry.descriptors()]
        return ids[: self.config.strategy_count] if self.config.strategy_count else ids

    def speculate(
        self,
        state: ModelState,
        trigger: str,
        requests: list[Dimensions] | None = None,
        origin_quality: QualityVector | None = None,
    ) -> Batch:
        """Open, run, and rank one batch of sandboxes from the current state.

        A metric or manual trigger with no explicit requests schedules one
        sandbox per strategy, each forecast over the buffer horizon. Repeat
        calls at an unchanged cursor while a batch is unresolved coalesce into
        the existing batch.
        """
        cursor = state.insert_cursor
        if requests is None and self.current_batch_id is not None:
            current = self.batches[self.current_batch_id]
            if not current.resolved and current.cursor == cursor and current.trigger == trigger:
                return current

        if requests is None:
            horizon = min(self.config.buffer_horizon, len(state.buffer))
            requests = [
                Dimensions(strategy_id=sid, temporal_horizon=horizon)
                for sid in self.strategy_ids_for_batch()
            ]

        self._batch_counter += 1
        batch_id = f"batch{self._batch_counter:04d}"
        sandboxes = [
            self.open_sandbox(state, dims, trigger=trigger, batch_id=batch_id)
            for dims in requests
        ]
        batch = Batch(
            batch_id=batch_id,
            trigger=trigger,
            cursor=cursor,
            origin_digest=state.digest(),
            sandbox_ids=[s.sandbox_id for s in sandboxes],
        )
        self.batches[batch_id] = batch
        self.current_batch_id = batch_id
        self.run_batch(sandboxes)
        batch.ranked = self.rank_batch(batch, origin_quality)
        if not batch.ranked:
            batch.resolved = True  # nothing ready, nothing to resolve
        return batch

    def rank_batch(
        self, batch: Batch, origin_quality: QualityVector | None = None
    ) -> list[RankedEntry]:
        candidates = [
            RankCandidate(
                sandbox_id=s.sandbox_id,
                quality=s.quality,
                strategy_id=s.dimensions.strategy_id,
            )
            for s in (self.sandboxes[sid] for sid in batch.sandbox_ids)
            if s.status == READY
        ]
        if not candidates:
            return []
        return consensus_rank(
            candidates,
            method=self.config.consensus_method,
            weights=dict(self.config.metric_weights),
            strategy_weights=self.weights.as_dict(),
            origin=origin_quality,
        )

    # -- resolution -------------------------------------------------------------------

    def accept(self, sandbox_id: str, main_state: ModelState) -> ModelState:
        """Replace the main state with a ready sandbox's result.

        Raises StaleSandboxError when the sandbox was not derived from the
        current main state; sibling sandboxes of the batch are auto-rejected
        and the acceptance-history weights are updated for all of them.
        """
        sandbox = self._get(sandbox_id)
        if sandbox.origin_digest != main_state.digest():
            raise StaleSandboxError(f"stale sandbox {sandbox_id}")
        if sandbox.status == ACCEPTED:
            return main_state
        if sandbox.status != READY:
            raise SandboxStateError(f"sandbox {sandbox_id} is {sandbox.status}, not ready")
        sandbox.status = ACCEPTED
        self.weights.update(
            sandbox.dimensions.strategy_id, ACCEPTED, self.config.acceptance_ema_rate
        )
        batch = self.batches[sandbox.batch_id]
        for sibling_id in batch.sandbox_ids:
            if sibling_id == sandbox_id:
                continue
            sibling = self.sandboxes[sibling_id]
            if sibling.status == READY:
                sibling.status = REJECTED
                self.weights.update(
                    sibling.dimensions.strategy_id, REJECTED, self.config.acceptance_ema_rate
                )
        batch.resolved = True
        return sandbox.result

    def reject(self, sandbox_id: str) -> bool:
        """Reject a ready sandbox; repeated resolution is an idempotent no-op."""
        sandbox = self._get(sandbox_id)
        if sandbox.status in (REJECTED, ACCEPTED):
            return False
        if sandbox.status != READY:
            raise SandboxStateError(f"sandbox {sandbox_id} is {sandbox.status}, not ready")
        sandbox.status = REJECTED
        self.weights.update(
            sandbox.dimensions.strategy_id, REJECTED, self.config.acceptance_ema_rate
        )
        batch = self.batches[sandbox.batch_id]
        if all(
            self.sandboxes[sid].status not in (PENDING, RUNNING, READY)
            for sid in batch.sandbox_ids
        ):
            batch.resolved = True
        return True

    def invalidate_unresolved(self, current_digest: str) -> list[str]:
        """Cancel sandboxes whose origin no longer matches the main state."""
        cancelled = []
        for sandbox in self.sandboxes.values():
            if sandbox.status in (PENDING, RUNNING, READY) and sandbox.origin_digest != current_digest:
                sandbox.status = CANCELLED
                sandbox.cancel_requested = True
                cancelled.append(sandbox.sandbox_id)
        for batch in self.batches.values():
            if not batch.resolved and batch.origin_digest != current_digest:
                batch.resolved = True
        return cancelled

    def counts_by_status(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for sandbox in self.sandboxes.values():
            counts[sandbox.status] = counts.get(sandbox.status, 0) + 1
        return counts

    def _get(self, sandbox_id: str) -> Sandbox:
        try:
            return self.sandboxes[sandbox_id]
        except KeyError:
            raise KeyError(f"unknown sandbox: {sandbox_id}") from None
