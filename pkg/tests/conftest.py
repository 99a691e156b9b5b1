import json
from pathlib import Path

import pytest

from graphlay.corpus import Article, Concept, Lexicon, Section, SemType, load_corpus, mini_lexicon

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def lexicon() -> Lexicon:
    return mini_lexicon()


@pytest.fixture(scope="session")
def corpus8():
    return load_corpus(FIXTURES / "corpus8.jsonl")


@pytest.fixture(scope="session")
def corpus8_manifest():
    return json.loads((FIXTURES / "corpus8_manifest.json").read_text())


@pytest.fixture(scope="session")
def hand_article() -> Article:
    """Small hand-written article with known concept mentions."""
    return Article(
        id="hand-001",
        title="Sleep and Memory in the Brain",
        keywords=("sleep", "memory"),
        pub_date="2023-05-10",
        abstract=Section(
            "Abstract",
            "We studied how Slow Wave Sleep supports Memory. Neuron activity was recorded in the brain.",
        ),
        sections=(
            Section("Methods", "Cells were grown and we measured the genome of each cell line."),
            Section("Results", "Allogeneic tissue and histocompatibility were discussed without naming other ideas."),
        ),
        lay_summary="Sleep helps the brain store memories.",
    )


@pytest.fixture()
def tiny_lexicon() -> Lexicon:
    """Two concepts, one semtype; enough for matcher corner cases."""
    return Lexicon(
        concepts={
            "C1": Concept(("Cells",), "basic units", ("T1",)),
            "C2": Concept(("Slow Wave Sleep",), "deep sleep stage", ("T1",)),
        },
        semtypes={"T1": SemType("Thing", "anything")},
        relations=(),
    )
