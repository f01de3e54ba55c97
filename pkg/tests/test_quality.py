import math
import random
from itertools import combinations

import pytest

from specsteer.corpus import CorpusStats
from specsteer.model import ModelState, insert_document
from specsteer.quality import (
    METRICS,
    QualityHistory,
    QualityVector,
    RankCandidate,
    consensus_rank,
    evaluate,
    normalize_candidates,
    pmi,
    should_trigger,
    topic_coherence,
    topic_top_terms,
)

from helpers import doc_from_terms, make_stats, random_state, stats_for_state


def make_qv(**oriented) -> QualityVector:
    qv = QualityVector(
        topic_count=0, mean_topic_size=0.0, size_entropy=0.0, coherence_pmi=0.0, max_depth=0
    )
    qv.oriented = {m: oriented.get(m, 0.0) for m in METRICS}
    return qv


def flat_qv(value: float) -> QualityVector:
    return make_qv(**{m: value for m in METRICS})


def preset_qv(normalized: dict) -> QualityVector:
    qv = QualityVector(
        topic_count=0, mean_topic_size=0.0, size_entropy=0.0, coherence_pmi=0.0, max_depth=0
    )
    qv.normalized = dict(normalized)
    return qv


# -- PMI and coherence ---------------------------------------------------------


def test_pmi_universal_term_is_zero_unsmoothed():
    # "aa1" in all docs: p(a,b) = p(b), so PMI = ln(p(b) / (1 * p(b))) = 0
    stats = make_stats([{"aa1", "bb1"}, {"aa1", "bb1"}, {"aa1", "cc1"}])
    assert pmi(stats, "aa1", "bb1", smoothing=False) == pytest.approx(0.0, abs=1e-12)


def test_pmi_smoothing_bounds_joint():
    stats = make_stats([{"aa1"}, {"bb1"}, {"cc1"}])
    value = pmi(stats, "aa1", "bb1", smoothing=True)
    # never co-occur: joint = 1/(k+1), marginals 1/3 each
    assert value == pytest.approx(math.log((1 / 4) / (1 / 9)), abs=1e-12)


def brute_force_topic_coherence(terms, token_sets, smoothing=True):
    """Independent oracle: exhaustive document pair counting from raw sets."""
    k = len(token_sets)
    total = 0.0
    pairs = 0
    for a, b in combinations(terms, 2):
        df_a = sum(1 for s in token_sets if a in s)
        df_b = sum(1 for s in token_sets if b in s)
        if df_a == 0 or df_b == 0:
            continue
        joint = sum(1 for s in token_sets if a in s and b in s)
        if smoothing:
            p_ab = (joint + 1) / (k + 1)
        else:
            p_ab = joint / k
        total += math.log(p_ab / ((df_a / k) * (df_b / k)))
        pairs += 1
    return total / pairs if pairs else 0.0


def test_topic_coherence_matches_bruteforce_oracle_on_toy_corpus():
    token_sets = [
        {"star", "orbit", "nova"},
        {"star", "orbit"},
        {"puck", "rink"},
        {"puck", "rink", "star"},
        {"nova", "rink"},
    ]
    stats = make_stats(token_sets)
    state = ModelState()
    topic = state.new_topic("root")
    state.new_leaf(topic.node_id, "d1", {"star": 0.8, "orbit": 0.5, "nova": 0.33})
    state.new_leaf(topic.node_id, "d2", {"puck": 0.9, "rink": 0.44})
    state.recompute_subtree("root")
    for node in state.topic_nodes():
        terms = topic_top_terms(node, 10)
        expected = brute_force_topic_coherence(terms, token_sets)
        assert topic_coherence(node, stats) == pytest.approx(expected, abs=1e-9)


def test_topic_with_fewer_than_two_terms_contributes_zero():
    stats = make_stats([{"aa1"}, {"bb1"}])
    state = ModelState()
    topic = state.new_topic("root")
    state.new_leaf(topic.node_id, "d1", {"aa1": 1.0})
    state.recompute_subtree("root")
    assert topic_coherence(state.nodes[topic.node_id], stats) == 0.0


# -- evaluate: entropy, sizes, depth -------------------------------------------


def test_single_topic_entropy_zero():
    stats = make_stats([{"aa1"}, {"ab1"}])
    state = ModelState()
    topic = state.new_topic("root")
    state.new_leaf(topic.node_id, "d1", {"aa1": 1.0})
    state.new_leaf(topic.node_id, "d2", {"ab1": 1.0})
    state.recompute_subtree("root")
    state.insert_cursor = 2
    qv = evaluate(state, stats)
    assert qv.size_entropy == 0.0
    assert qv.topic_count == 1
    assert qv.mean_topic_size == 2.0
    assert qv.max_depth == 2


def test_evaluate_hand_computed_two_topics():
    stats = make_stats([{"aa1"}, {"ab1"}, {"ac1"}])
    state = ModelState()
    t1 = state.new_topic("root")
    t2 = state.new_topic("root")
    state.new_leaf(t1.node_id, "d1", {"aa1": 1.0})
    state.new_leaf(t1.node_id, "d2", {"ab1": 1.0})
    state.new_leaf(t2.node_id, "d3", {"ac1": 1.0})
    state.recompute_subtree("root")
    state.insert_cursor = 3
    qv = evaluate(state, stats)
    assert qv.topic_count == 2
    assert qv.mean_topic_size == pytest.approx(1.5)
    # sizes (2, 1): entropy = -(2/3 ln 2/3 + 1/3 ln 1/3)
    expected = -(2 / 3 * math.log(2 / 3) + 1 / 3 * math.log(1 / 3))
    assert qv.size_entropy == pytest.approx(expected, abs=1e-12)
    assert qv.size_entropy <= math.log(qv.topic_count) + 1e-12
    assert qv.max_depth == 2


def test_evaluate_pure_function_of_state(small_ingest):
    state = ModelState(small_ingest.documents)
    for _ in range(12):
        insert_document(state, state.buffer[0])
    first = evaluate(state, small_ingest.stats)
    second = evaluate(state, small_ingest.stats)
    assert first.raw() == second.raw()


# -- trigger decision ------------------------------------------------------------


def history_from_scores(values):
    history = QualityHistory(capacity=10)
    for i, value in enumerate(values):
        history.push(i, flat_qv(value))
    return history


def test_trigger_flat_history_false():
    fired, _ = should_trigger(history_from_scores([0.5, 0.5, 0.5]), 0.10)
    assert fired is False


def test_trigger_fires_on_dropped_score():
    # normalized scores become (0, 1, 0.8): drop 0.2 > 0.1
    fired, reason = should_trigger(history_from_scores([0.0, 1.0, 0.8]), 0.10)
    assert fired is True
    assert "dropped" in reason


def test_trigger_ignores_small_oscillation():
    fired, _ = should_trigger(
        history_from_scores([0.0, 1.0, 0.95, 1.0, 0.95]), 0.10
    )
    assert fired is False


def test_history_requires_increasing_cursor():
    history = QualityHistory()
    history.push(3, flat_qv(0.1))
    with pytest.raises(ValueError):
        history.push(3, flat_qv(0.2))


# -- consensus ranking ------------------------------------------------------------


def test_weighted_sum_example():
    a = RankCandidate("sa", preset_qv({"m1": 0.8, "m2": 0.6}))
    b = RankCandidate("sb", preset_qv({"m1": 0.7, "m2": 0.9}))
    ranked = consensus_rank([a, b], weights={"m1": 1.0, "m2": 1.0})
    assert [r.sandbox_id for r in ranked] == ["sb", "sa"]
    assert ranked[0].score == pytest.approx(0.80)
    assert ranked[1].score == pytest.approx(0.70)


def test_weighted_sum_strategy_boost():
    a = RankCandidate("sa", preset_qv({"m1": 0.8}), strategy_id="merge")
    b = RankCandidate("sb", preset_qv({"m1": 0.7}), strategy_id="split")
    ranked = consensus_rank(
        [a, b], weights={"m1": 1.0}, strategy_weights={"merge": 0.1, "split": 0.9}
    )
    # split's history boost (1.4) beats merge's (0.6): 0.98 vs 0.48
    assert [r.sandbox_id for r in ranked] == ["sb", "sa"]
    assert ranked[0].score == pytest.approx(0.7 * 1.4)


def test_empty_candidates_rejected():
    with pytest.raises(ValueError):
        consensus_rank([])


def test_pareto_never_ranks_dominated_above_dominator():
    rng = random.Random(5)
    for _ in range(200):
        candidates = [
            RankCandidate(f"s{i}", make_qv(**{m: rng.random() for m in METRICS}))
            for i in range(rng.randint(2, 8))
        ]
        ranked = consensus_rank(candidates, method="pareto_then_sum")
        position = {r.sandbox_id: i for i, r in enumerate(ranked)}
        by_id = {c.sandbox_id: c for c in candidates}
        for x in candidates:
            for y in candidates:
                if x is y:
                    continue
                xq, yq = by_id[x.sandbox_id].quality, by_id[y.sandbox_id].quality
                dominates = all(
                    xq.normalized[m] >= yq.normalized[m] for m in METRICS
                ) and any(xq.normalized[m] > yq.normalized[m] for m in METRICS)
                if dominates:
                    assert position[x.sandbox_id] < position[y.sandbox_id]


def test_borda_matches_bruteforce_rank_sums():
    rng = random.Random(11)
    for _ in range(100):
        candidates = [
            RankCandidate(f"s{i}", make_qv(**{m: rng.choice([0.1, 0.5, 0.9]) for m in METRICS}))
            for i in range(3)
        ]
        ranked = consensus_rank(candidates, method="borda")
        # oracle: competition rank per metric = 1 + number strictly better
        normalized = {c.sandbox_id: c.quality.normalized for c in candidates}
        sums = {}
        for c in candidates:
            total = 0
            for m in METRICS:
                total += 1 + sum(
                    1
                    for other in candidates
                    if normalized[other.sandbox_id][m] > normalized[c.sandbox_id][m]
                )
            sums[c.sandbox_id] = total
        expected = sorted(sums, key=lambda sid: (sums[sid], sid))
        assert [r.sandbox_id for r in ranked] == expected


def test_weighted_sum_monotonicity_property():
    rng = random.Random(23)
    for _ in range(1000):
        size = rng.randint(2, 6)
        base = [
            {m: rng.random() for m in METRICS}
            for _ in range(size)
        ]
        candidates = [RankCandidate(f"s{i}", make_qv(**base[i])) for i in range(size)]
        ranked = consensus_rank(candidates)
        target = rng.randrange(size)
        metric = rng.choice(METRICS)
        improved = [dict(values) for values in base]
        improved[target][metric] += rng.uniform(0.01, 1.0)
        candidates2 = [RankCandidate(f"s{i}", make_qv(**improved[i])) for i in range(size)]
        ranked2 = consensus_rank(candidates2)
        pos1 = [r.sandbox_id for r in ranked].index(f"s{target}")
        pos2 = [r.sandbox_id for r in ranked2].index(f"s{target}")
        assert pos2 <= pos1


def test_scale_robustness_of_normalization():
    rng = random.Random(31)
    for _ in range(100):
        size = rng.randint(2, 6)
        base = [{m: rng.uniform(0.1, 5.0) for m in METRICS} for _ in range(size)]
        metric = rng.choice(METRICS)
        factor = rng.uniform(0.5, 10.0)
        scaled = [dict(values) for values in base]
        for values in scaled:
            values[metric] *= factor
        first = [RankCandidate(f"s{i}", make_qv(**base[i])) for i in range(size)]
        second = [RankCandidate(f"s{i}", make_qv(**scaled[i])) for i in range(size)]
        order1 = [r.sandbox_id for r in consensus_rank(first)]
        order2 = [r.sandbox_id for r in consensus_rank(second)]
        norms1 = {c.sandbox_id: c.quality.normalized[metric] for c in first}
        norms2 = {c.sandbox_id: c.quality.normalized[metric] for c in second}
        for sid in norms1:
            assert norms1[sid] == pytest.approx(norms2[sid], abs=1e-9)
        assert order1 == order2


def test_normalized_values_within_unit_interval(small_ingest):
    state = ModelState(small_ingest.documents)
    for _ in range(20):
        insert_document(state, state.buffer[0])
    qualities = [evaluate(state, small_ingest.stats) for _ in range(3)]
    qualities[1].oriented["coherence_pmi"] += 0.5
    qualities[2].oriented["size_entropy"] += 0.1
    normalize_candidates(qualities)
    for qv in qualities:
        for metric in METRICS:
            assert 0.0 <= qv.normalized[metric] <= 1.0
