import math
import random
import time

import pytest

from specsteer.engine import (
    ACCEPTED,
    READY,
    REJECTED,
    TIMED_OUT,
    Dimensions,
    Sandbox,
    SpeculationConfig,
    SpeculationEngine,
    StaleSandboxError,
    StrategyWeights,
    derive_seed,
    forecast,
    search_space_accounting,
    update_strategy_weights,
)
from specsteer.model import KIND_LEAF, ModelState, insert_document
from specsteer.quality import evaluate
from specsteer.strategies import StrategyDescriptor, StrategyRegistry

from helpers import random_state, stats_for_state


def build_engine(ingest, **overrides):
    config = SpeculationConfig(corpus_size=ingest.stats.k, serialize_workers=True, **overrides)
    return SpeculationEngine(config, ingest.stats)


def warmed_state(ingest, inserts=10):
    state = ModelState(ingest.documents)
    for _ in range(inserts):
        insert_document(state, state.buffer[0])
    return state


# -- forecast ---------------------------------------------------------------------


def test_forecast_zero_horizon_keeps_digest(small_ingest):
    state = warmed_state(small_ingest)
    before = state.digest()
    inserted, truncated = forecast(state, 0)
    assert (inserted, truncated) == (0, False)
    assert state.digest() == before


def test_forecast_inserts_exactly_horizon(small_ingest):
    state = warmed_state(small_ingest)
    leaves_before = sum(1 for n in state.nodes.values() if n.kind == KIND_LEAF)
    inserted, truncated = forecast(state, 10)
    assert inserted == 10
    assert truncated is False
    leaves_after = sum(1 for n in state.nodes.values() if n.kind == KIND_LEAF)
    assert leaves_after == leaves_before + 10


def test_forecast_truncates_on_short_buffer(small_ingest):
    state = warmed_state(small_ingest, inserts=36)  # 4 left in the buffer
    inserted, truncated = forecast(state, 10)
    assert inserted == 4
    assert truncated is True


def test_forecast_rejects_negative_horizon(small_ingest):
    with pytest.raises(ValueError):
        forecast(warmed_state(small_ingest), -1)


# -- sandboxes -------------------------------------------------------------------


def test_sandbox_isolation_origin_untouched(small_ingest):
    engine = build_engine(small_ingest)
    state = warmed_state(small_ingest)
    before = state.digest()
    sandbox = engine.open_sandbox(state, Dimensions(strategy_id="rebalance_small_topics", temporal_horizon=5))
    engine.execute(sandbox)
    assert sandbox.status == READY
    assert state.digest() == before
    assert sandbox.result.digest() != before


def test_fresh_identity_sandbox_result_equals_origin(small_ingest):
    engine = build_engine(small_ingest)
    state = warmed_state(small_ingest)
    sandbox = engine.open_sandbox(state, Dimensions(strategy_id="identity", temporal_horizon=0))
    engine.execute(sandbox)
    assert sandbox.status == READY
    assert sandbox.result.digest() == state.digest()


def test_speculate_schedules_one_sandbox_per_strategy(small_ingest):
    engine = build_engine(small_ingest)
    state = warmed_state(small_ingest)
    batch = engine.speculate(state, "metric_decline", origin_quality=evaluate(state, small_ingest.stats))
    assert len(batch.sandbox_ids) == 7
    strategies = [engine.sandboxes[sid].dimensions.strategy_id for sid in batch.sandbox_ids]
    assert len(set(strategies)) == 7
    ready = [sid for sid in batch.sandbox_ids if engine.sandboxes[sid].status == READY]
    assert ready  # ranking covers the ready subset
    assert {entry.sandbox_id for entry in batch.ranked} == set(ready)


def test_speculate_three_strategies_forecast_ten(small_ingest):
    engine = build_engine(small_ingest)
    state = warmed_state(small_ingest)
    cursor = state.insert_cursor
    requests = [
        Dimensions(strategy_id=sid, temporal_horizon=10)
        for sid in ("merge_similar_siblings", "split_incoherent_topic", "identity")
    ]
    batch = engine.speculate(state, "manual", requests=requests)
    assert len(batch.sandbox_ids) == 3
    for sid in batch.sandbox_ids:
        sandbox = engine.sandboxes[sid]
        assert sandbox.status == READY
        assert sandbox.result.insert_cursor == cursor + 10


def test_speculation_coalesces_at_same_cursor(small_ingest):
    engine = build_engine(small_ingest)
    state = warmed_state(small_ingest)
    first = engine.speculate(state, "metric_decline")
    second = engine.speculate(state, "metric_decline")
    assert first.batch_id == second.batch_id


def test_delayed_strategy_times_out_under_L1_budget(small_ingest):
    engine = build_engine(small_ingest)

    def sleepy(state, params, seed, stats):
        time.sleep(0.6)
        return True, "slept"

    engine.registry.register(
        StrategyDescriptor("sleepy_600ms", "Sleeps 600ms", "extension"), sleepy
    )
    state = warmed_state(small_ingest)
    requests = [
        Dimensions(strategy_id="sleepy_600ms"),
        Dimensions(strategy_id="identity"),
    ]
    batch = engine.speculate(state, "L1", requests=requests)
    sleeper = engine.sandboxes[batch.sandbox_ids[0]]
    honest = engine.sandboxes[batch.sandbox_ids[1]]
    assert sleeper.status == TIMED_OUT
    assert sleeper.result is None
    assert honest.status == READY
    ranked_ids = {entry.sandbox_id for entry in batch.ranked}
    assert sleeper.sandbox_id not in ranked_ids
    assert honest.sandbox_id in ranked_ids


def test_ready_runtime_never_exceeds_budget(small_ingest):
    engine = build_engine(small_ingest)
    state = warmed_state(small_ingest)
    batch = engine.speculate(state, "metric_decline")
    budget = engine.config.budget_for("metric_decline")
    for sid in batch.sandbox_ids:
        sandbox = engine.sandboxes[sid]
        if sandbox.status == READY:
            assert sandbox.runtime_ms <= budget


# -- accept / reject ----------------------------------------------------------------


def test_accept_replaces_main_and_rejects_siblings(small_ingest):
    engine = build_engine(small_ingest)
    state = warmed_state(small_ingest)
    batch = engine.speculate(state, "metric_decline", origin_quality=evaluate(state, small_ingest.stats))
    top = batch.ranked[0].sandbox_id
    new_main = engine.accept(top, state)
    assert new_main.digest() == engine.sandboxes[top].result.digest()
    assert engine.sandboxes[top].status == ACCEPTED
    for sid in batch.sandbox_ids:
        if sid != top and engine.sandboxes[sid].status not in (TIMED_OUT,):
            assert engine.sandboxes[sid].status == REJECTED
    assert engine.batches[batch.batch_id].resolved


def test_accept_stale_sandbox_fails(small_ingest):
    engine = build_engine(small_ingest)
    state = warmed_state(small_ingest)
    batch = engine.speculate(state, "metric_decline")
    insert_document(state, state.buffer[0])  # main advances one insert
    with pytest.raises(StaleSandboxError, match="stale"):
        engine.accept(batch.ranked[0].sandbox_id, state)


def test_accept_unknown_sandbox(small_ingest):
    engine = build_engine(small_ingest)
    state = warmed_state(small_ingest)
    with pytest.raises(KeyError):
        engine.accept("sb99999", state)


def test_reject_keeps_main_and_is_idempotent(small_ingest):
    engine = build_engine(small_ingest)
    state = warmed_state(small_ingest)
    batch = engine.speculate(state, "metric_decline")
    before = state.digest()
    ready = [sid for sid in batch.sandbox_ids if engine.sandboxes[sid].status == READY]
    for sid in ready:
        assert engine.reject(sid) is True
    assert state.digest() == before
    assert engine.reject(ready[0]) is False  # double resolve: no-op
    assert engine.batches[batch.batch_id].resolved
    # session can continue inserting as if nothing happened
    insert_document(state, state.buffer[0])
    assert state.digest() != before


def test_invalidate_unresolved_cancels_stale(small_ingest):
    engine = build_engine(small_ingest)
    state = warmed_state(small_ingest)
    batch = engine.speculate(state, "metric_decline")
    insert_document(state, state.buffer[0])
    cancelled = engine.invalidate_unresolved(state.digest())
    ready_or_pending = [
        sid for sid in batch.sandbox_ids if engine.sandboxes[sid].status == READY
    ]
    assert ready_or_pending == []
    assert cancelled


# -- weights ------------------------------------------------------------------------


def test_weight_update_examples():
    weights = StrategyWeights()
    assert weights.update("merge", ACCEPTED, 0.3) == pytest.approx(0.65)
    weights2 = StrategyWeights()
    assert weights2.update("merge", REJECTED, 0.3) == pytest.approx(0.35)


def test_weight_update_via_module_op():
    weights = StrategyWeights()
    update_strategy_weights(weights, "split", ACCEPTED, 0.3)
    assert weights.get("split") == pytest.approx(0.65)


def test_weights_stay_in_unit_interval():
    rng = random.Random(77)
    weights = StrategyWeights()
    for _ in range(5000):
        outcome = ACCEPTED if rng.random() < 0.5 else REJECTED
        rate = rng.uniform(0.01, 0.99)
        value = weights.update("s", outcome, rate)
        assert 0.0 <= value <= 1.0


def test_weight_update_validates_rate():
    with pytest.raises(ValueError):
        StrategyWeights().update("s", ACCEPTED, 1.0)


# -- accounting -----------------------------------------------------------------------


def test_accounting_matches_frozen_oracle_values():
    result = search_space_accounting(280, 7, 10)
    assert result["sandboxes_total"] == 196
    assert result["full_option_paths_log10"] == pytest.approx(23.6627451204, abs=1e-6)
    assert result["incremental_orders_log10"] == pytest.approx(565.2245920470, abs=1e-6)
    assert result["all_trees_log10"] == pytest.approx(680.3099327131, abs=1e-6)
    assert math.floor(result["full_option_paths_log10"]) == 23
    assert math.floor(result["incremental_orders_log10"]) == 565
    assert math.floor(result["all_trees_log10"]) == 680


def test_accounting_small_case_cayley():
    result = search_space_accounting(4, 1, 4)
    assert result["sandboxes_total"] == 1
    assert result["all_trees_log10"] == pytest.approx(math.log10(16), abs=1e-12)
    assert result["full_option_paths_log10"] == 0.0
    assert result["incremental_orders_log10"] == pytest.approx(math.log10(24), abs=1e-9)


def test_accounting_ceil_for_partial_buffer():
    assert search_space_accounting(284, 7, 10)["sandboxes_total"] == 29 * 7
    with pytest.raises(ValueError):
        search_space_accounting(0, 7, 10)


def test_derive_seed_deterministic():
    assert derive_seed(42, "sb00001") == derive_seed(42, "sb00001")
    assert derive_seed(42, "sb00001") != derive_seed(43, "sb00001")
