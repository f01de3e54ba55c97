from __future__ import annotations

import pytest

from helpers import ingest_synthetic, write_synthetic_corpus


@pytest.fixture(scope="session")
def desk_corpus_path(tmp_path_factory):
    """The 280-document synthetic corpus used by the acceptance runs."""
    root = tmp_path_factory.mktemp("desk")
    return write_synthetic_corpus(root / "desk280.jsonl", docs=280, seed=7)


@pytest.fixture(scope="session")
def desk_ingest(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_ingest")
    return ingest_synthetic(root, docs=280, seed=7)


@pytest.fixture(scope="session")
def small_ingest(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ingest")
    return ingest_synthetic(root, docs=40, seed=11)


@pytest.fixture
def txt_corpus(tmp_path):
    texts = {
        "alpha": "galaxy telescope orbit galaxy nebula starlight",
        "beta": "goalie hockey puck skates rink goalie slapshot",
        "gamma": "compiler kernel syscall scheduler compiler memory",
    }
    for name, text in texts.items():
        (tmp_path / f"{name}.txt").write_text(text, encoding="utf-8")
    return tmp_path
