"""Shared builders for tests: synthetic corpora and randomized model states."""

from __future__ import annotations

import json
import random
from pathlib import Path

from specsteer.corpus import CorpusStats, Document, IngestResult, ingest_corpus
from specsteer.model import ModelState, insert_document
from specsteer.vectors import normalized

GROUPS = ("astro", "crypto", "engine", "garden", "hockey", "kernel", "meteor", "pottery")


def write_synthetic_corpus(
    path: Path,
    docs: int = 280,
    groups: int = 8,
    seed: int = 7,
    tokens_per_doc: int = 30,
) -> Path:
    """Write a deterministic jsonl corpus with group-specific vocabularies."""
    rng = random.Random(seed)
    group_names = GROUPS[:groups]
    pools = {
        name: [f"{name}{i:02d}" for i in range(40)] for name in group_names
    }
    shared = [f"common{i:02d}" for i in range(60)]
    lines = []
    for index in range(docs):
        group = group_names[index % len(group_names)]
        tokens = []
        for _ in range(tokens_per_doc):
            if rng.random() < 0.7:
                tokens.append(rng.choice(pools[group]))
            else:
                tokens.append(rng.choice(shared))
        lines.append(
            json.dumps({"id": f"d{index:04d}", "text": " ".join(tokens), "label": group})
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def ingest_synthetic(tmp_path: Path, docs: int = 280, seed: int = 7) -> IngestResult:
    corpus = write_synthetic_corpus(tmp_path / f"corpus{docs}_{seed}.jsonl", docs=docs, seed=seed)
    return ingest_corpus(corpus)


def write_decline_corpus(path: Path, seed: int = 3) -> Path:
    """Corpus whose tail is scattered noise, forcing a quality-metric decline.

    Twelve documents drawn from two tight vocabularies build coherent topics;
    ten noise documents then drag PMI coherence down far enough to fire the
    default trigger threshold.
    """
    rng = random.Random(seed)
    pool_a = [f"alpha{i:02d}" for i in range(8)]
    pool_b = [f"bravo{i:02d}" for i in range(8)]
    scatter = [f"noise{i:02d}" for i in range(40)]
    lines = []
    index = 0
    for i in range(12):
        pool = pool_a if i % 2 == 0 else pool_b
        tokens = [rng.choice(pool) for _ in range(12)]
        lines.append(json.dumps({"id": f"d{index:03d}", "text": " ".join(tokens)}))
        index += 1
    for _ in range(10):
        tokens = [rng.choice(scatter) for _ in range(12)]
        lines.append(json.dumps({"id": f"d{index:03d}", "text": " ".join(tokens)}))
        index += 1
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def make_stats(token_sets: list[set[str]]) -> CorpusStats:
    return CorpusStats([frozenset(s) for s in token_sets])


def doc_from_terms(doc_id: str, index: int, weights: dict[str, float]) -> Document:
    """Document with an explicit (normalized) vector, bypassing TF-IDF."""
    return Document(
        id=doc_id,
        ingest_index=index,
        tokens=tuple(sorted(weights)),
        vector=normalized(dict(weights)),
        label=None,
    )


def random_vector(rng: random.Random, vocab: list[str], size: int = 4) -> dict[str, float]:
    terms = rng.sample(vocab, min(size, len(vocab)))
    return normalized({t: rng.uniform(0.2, 1.0) for t in terms})


def random_state(
    rng: random.Random,
    docs: int = 8,
    vocab_size: int = 12,
    threshold: float | None = None,
    max_depth: int = 3,
) -> ModelState:
    """Build a valid random state by inserting random documents."""
    vocab = [f"w{i:02d}" for i in range(vocab_size)]
    state = ModelState()
    threshold = rng.choice([0.2, 0.4, 0.6]) if threshold is None else threshold
    for i in range(docs):
        doc = doc_from_terms(f"r{i:03d}", i, random_vector(rng, vocab))
        insert_document(state, doc, threshold, max_depth)
    return state


def stats_for_state(state: ModelState) -> CorpusStats:
    """Corpus stats derived from the term sets of a state's documents."""
    return CorpusStats([frozenset(vec) for vec in state.doc_vectors.values()])
