"""Corpus ingestion: tokenize, two-pass TF-IDF, ordered document stream.

Supported inputs are a flat directory of UTF-8 ``.txt`` files (one document
per file, ordered by filename) or a single ``.jsonl`` file with one
``{"id": ..., "text": ..., "label"?: ...}`` object per line (file order).
Ingestion is deterministic: the same source always yields the same stream
and the same corpus statistics.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .vectors import SparseVector, normalized

logger = logging.getLogger(__name__)

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")

_STOPWORDS_RESOURCE = "stopwords_en.txt"


class CorpusError(Exception):
    """Unusable corpus source (missing path, zero documents)."""


class DegenerateVectorError(ValueError):
    """Every token appears in every document: TF-IDF weights are all zero."""


def load_stopwords(path: str | Path | None = None) -> frozenset[str]:
    """Load the stopword list (one term per line, UTF-8).

    With no path, the built-in English list shipped with the package is used
    so that runs are reproducible across machines.
    """
    if path is None:
        text = (
            resources.files("specsteer")
            .joinpath("data")
            .joinpath(_STOPWORDS_RESOURCE)
            .read_text("utf-8")
        )
    else:
        text = Path(path).read_text("utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


@dataclass(frozen=True)
class TokenizerOptions:
    min_token_len: int = 3
    stopwords: frozenset[str] = field(default_factory=load_stopwords)


def tokenize(text: str, options: TokenizerOptions | None = None) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop short tokens and stopwords."""
    opts = options or TokenizerOptions()
    out = []
    for raw in _TOKEN_SPLIT.split(text.lower()):
        if len(raw) < opts.min_token_len:
            continue
        if raw in opts.stopwords:
            continue
        out.append(raw)
    return out


@dataclass(frozen=True)
class Document:
    """One corpus document with its L2-normalized TF-IDF vector."""

    id: str
    ingest_index: int
    tokens: tuple[str, ...]
    vector: SparseVector
    label: str | None = None


class CorpusStats:
    """Document frequencies plus lazily cached term co-occurrence counts.

    Co-occurrence is counted at the document level (number of documents
    containing both terms) and only materialized for the term pairs that are
    actually queried, which in practice is the union of per-topic top terms.
    """

    def __init__(self, token_sets: list[frozenset[str]]):
        self.k = len(token_sets)
        self.document_frequency: dict[str, int] = {}
        self._postings: dict[str, set[int]] = {}
        for index, terms in enumerate(token_sets):
            for term in terms:
                self.document_frequency[term] = self.document_frequency.get(term, 0) + 1
                self._postings.setdefault(term, set()).add(index)
        self.vocabulary = frozenset(self.document_frequency)
        self.cooccurrence: dict[tuple[str, str], int] = {}

    def cooccurrence_count(self, a: str, b: str) -> int:
        """Number of documents containing both terms (cached)."""
        key = (a, b) if a <= b else (b, a)
        cached = self.cooccurrence.get(key)
        if cached is not None:
            return cached
        pa = self._postings.get(a)
        pb = self._postings.get(b)
        count = len(pa & pb) if pa and pb else 0
        self.cooccurrence[key] = count
        return count


@dataclass
class IngestResult:
    documents: list[Document]
    stats: CorpusStats
    skipped: list[tuple[str, str]]  # (doc id, reason)


def vectorize(tokens: list[str] | tuple[str, ...], stats: CorpusStats) -> SparseVector:
    """TF-IDF with raw term counts and idf = ln(k / df), L2-normalized.

    Terms appearing in every document get weight 0 before normalization; a
    vector that is all zero raises DegenerateVectorError.
    """
    counts: dict[str, int] = {}
    for token in tokens:
        counts[token] = counts.get(token, 0) + 1
    weights: SparseVector = {}
    for term, tf in counts.items():
        df = stats.document_frequency.get(term, 0)
        if df == 0 or df == stats.k:
            continue
        weights[term] = tf * math.log(stats.k / df)
    vec = normalized(weights)
    if not vec:
        raise DegenerateVectorError("degenerate vector")
    return vec


def _read_raw(source_path: str | Path) -> list[tuple[str, str, str | None]]:
    """Yield (id, text, label) triples in deterministic stream order."""
    path = Path(source_path)
    if not path.exists():
        raise CorpusError(f"corpus path does not exist: {path}")
    raw: list[tuple[str, str, str | None]] = []
    if path.is_dir():
        for file in sorted(path.glob("*.txt")):
            raw.append((file.stem, file.read_text("utf-8"), None))
    elif path.suffix == ".jsonl":
        with path.open("r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle):
                if not line.strip():
                    continue
                record = json.loads(line)
                if "id" not in record or "text" not in record:
                    raise CorpusError(f"line {line_no}: jsonl record needs 'id' and 'text'")
                raw.append((str(record["id"]), record["text"], record.get("label")))
    else:
        raise CorpusError(f"unsupported corpus source: {path}")
    if not raw:
        raise CorpusError(f"no documents found in {path}")
    seen: set[str] = set()
    for doc_id, _, _ in raw:
        if doc_id in seen:
            raise CorpusError(f"duplicate document id: {doc_id}")
        seen.add(doc_id)
    return raw


def ingest_corpus(
    source_path: str | Path, options: TokenizerOptions | None = None
) -> IngestResult:
    """Two-pass ingestion: tokenize and count DF first, then vectorize.

    Documents that end up empty after stopword removal, or whose TF-IDF
    vector degenerates to zero, are skipped with a warning record rather
    than aborting the stream. Statistics are recomputed over the surviving
    documents so that df <= k always holds for the emitted stream.
    """
    opts = options or TokenizerOptions()
    skipped: list[tuple[str, str]] = []
    tokenized: list[tuple[str, list[str], str | None]] = []
    for doc_id, text, label in _read_raw(source_path):
        tokens = tokenize(text, opts)
        if not tokens:
            skipped.append((doc_id, "no tokens after stopword removal"))
            logger.warning("skipping document %s: no usable tokens", doc_id)
            continue
        tokenized.append((doc_id, tokens, label))

    # Degenerate vectors (every term universal) remove a document, which
    # changes df/k for the rest; loop until the survivor set is stable.
    while True:
        if not tokenized:
            raise CorpusError("corpus has no usable documents")
        stats = CorpusStats([frozenset(tokens) for _, tokens, _ in tokenized])
        surviving = []
        for doc_id, tokens, label in tokenized:
            try:
                vectorize(tokens, stats)
            except DegenerateVectorError:
                skipped.append((doc_id, "degenerate vector"))
                logger.warning("skipping document %s: degenerate vector", doc_id)
                continue
            surviving.append((doc_id, tokens, label))
        if len(surviving) == len(tokenized):
            break
        tokenized = surviving

    documents = [
        Document(
            id=doc_id,
            ingest_index=index,
            tokens=tuple(tokens),
            vector=vectorize(tokens, stats),
            label=label,
        )
        for index, (doc_id, tokens, label) in enumerate(tokenized)
    ]
    return IngestResult(documents=documents, stats=stats, skipped=skipped)
