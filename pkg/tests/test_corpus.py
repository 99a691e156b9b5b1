import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphlay.corpus import (
    Article,
    Section,
    article_to_json,
    dump_corpus,
    generate_synthetic_corpus,
    load_corpus,
    load_lexicon,
    mini_lexicon,
    sentence_texts,
    split_sentences,
    token_surfaces,
    tokenize,
)
from graphlay.errors import CorpusError, LexiconError


def _write_lines(path, lines):
    path.write_text("\n".join(json.dumps(l) for l in lines) + "\n", encoding="utf-8")


MINIMAL = {
    "id": "a1",
    "title": "T",
    "keywords": ["k"],
    "pub_date": "2024-01-02",
    "abstract": {"title": "Abstract", "text": "Some text."},
    "sections": [],
    "lay_summary": "Lay.",
}


class TestLoadCorpus:
    def test_single_minimal_article(self, tmp_path):
        path = tmp_path / "c.jsonl"
        _write_lines(path, [MINIMAL])
        corpus = load_corpus(path)
        assert len(corpus) == 1
        assert corpus[0].id == "a1"
        assert corpus[0].abstract.text == "Some text."

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "c.jsonl"
        _write_lines(path, [MINIMAL, MINIMAL])
        with pytest.raises(CorpusError, match="duplicate"):
            load_corpus(path)

    def test_missing_field_reports_line(self, tmp_path):
        bad = dict(MINIMAL)
        del bad["title"]
        path = tmp_path / "c.jsonl"
        _write_lines(path, [MINIMAL | {"id": "a0"}, bad])
        with pytest.raises(CorpusError, match=":2"):
            load_corpus(path)

    def test_parse_error_reports_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps(MINIMAL) + "\n{not json\n", encoding="utf-8")
        with pytest.raises(CorpusError, match=":2"):
            load_corpus(path)

    def test_empty_section_text_rejected(self, tmp_path):
        bad = dict(MINIMAL, abstract={"title": "A", "text": ""})
        path = tmp_path / "c.jsonl"
        _write_lines(path, [bad])
        with pytest.raises(CorpusError):
            load_corpus(path)

    def test_bundled_fixture_matches_manifest(self, corpus8, corpus8_manifest):
        assert len(corpus8) == corpus8_manifest["n_articles"]
        for art in corpus8:
            entry = corpus8_manifest["articles"][art.id]
            assert len(art.sections) == entry["n_sections"]
            assert art.title == entry["title"]

    def test_round_trip(self, tmp_path, corpus8):
        out = tmp_path / "round.jsonl"
        dump_corpus(corpus8, out)
        again = load_corpus(out)
        assert again == corpus8


class TestLoadLexicon:
    def test_bundled_mini_lexicon_clean(self, lexicon):
        assert len(lexicon.concepts) == 12
        assert len(lexicon.semtypes) == 6
        assert lexicon.dropped_concepts == ()

    def test_concept_without_definition_dropped(self, tmp_path):
        obj = {
            "concepts": {
                "C1": {"names": ["X"], "definition": "", "semtypes": ["T1"]},
                "C2": {"names": ["Y"], "definition": "has one", "semtypes": ["T1"]},
            },
            "semtypes": {"T1": {"name": "T", "definition": "d"}},
            "relations": [],
        }
        path = tmp_path / "lex.json"
        path.write_text(json.dumps(obj))
        lex = load_lexicon(path)
        assert lex.dropped_concepts == ("C1",)
        assert set(lex.concepts) == {"C2"}

    def test_unknown_relation_rejected(self, tmp_path):
        obj = {
            "concepts": {"C1": {"names": ["X"], "definition": "d", "semtypes": ["T1"]}},
            "semtypes": {"T1": {"name": "T", "definition": "d"}},
            "relations": [["T1", "frobnicates", "T1"]],
        }
        path = tmp_path / "lex.json"
        path.write_text(json.dumps(obj))
        with pytest.raises(LexiconError, match="frobnicates"):
            load_lexicon(path)

    def test_unresolvable_semtype_rejected(self, tmp_path):
        obj = {
            "concepts": {"C1": {"names": ["X"], "definition": "d", "semtypes": ["T9"]}},
            "semtypes": {"T1": {"name": "T", "definition": "d"}},
            "relations": [],
        }
        path = tmp_path / "lex.json"
        path.write_text(json.dumps(obj))
        with pytest.raises(LexiconError, match="T9"):
            load_lexicon(path)


class TestTokenize:
    def test_apostrophes_kept(self):
        assert token_surfaces("It's a test.") == ["It's", "a", "test"]

    def test_empty(self):
        assert tokenize("") == []

    def test_hand_tokenized_sentence(self):
        text = "Neuron activity was recorded in the brain."
        assert token_surfaces(text) == ["Neuron", "activity", "was", "recorded", "in", "the", "brain"]

    def test_offsets_exact(self):
        text = "ab  cd'e!"
        for tok in tokenize(text):
            assert text[tok.start:tok.end] == tok.surface

    @given(st.text(max_size=80))
    @settings(max_examples=200, deadline=None)
    def test_no_alphanumeric_lost(self, text):
        kept = "".join(t.surface for t in tokenize(text))
        assert sorted(ch for ch in text if ch.isalnum() and ch.isascii()) == sorted(
            ch for ch in kept if ch.isalnum()
        )


class TestSplitSentences:
    def test_two_sentences(self):
        assert sentence_texts("A b. C d!") == ["A b.", "C d!"]

    def test_no_terminator(self):
        assert sentence_texts("No terminator") == ["No terminator"]

    def test_empty(self):
        assert split_sentences("") == []

    def test_abbreviations_paragraph(self):
        para = (
            "Dr. Smith studied slow wave sleep (see Fig. 2). "
            "The results, e.g. memory gains, were clear. "
            "Did the cells divide? They did! "
            "Final values reached approx. 3.5 units."
        )
        assert sentence_texts(para) == [
            "Dr. Smith studied slow wave sleep (see Fig. 2).",
            "The results, e.g. memory gains, were clear.",
            "Did the cells divide?",
            "They did!",
            "Final values reached approx. 3.5 units.",
        ]

    @given(st.text(alphabet="aB .?!\n'3", max_size=60))
    @settings(max_examples=200, deadline=None)
    def test_spans_cover_all_non_whitespace(self, text):
        spans = split_sentences(text)
        covered = "".join(text[s.start:s.end] for s in spans)
        assert sorted(c for c in text if not c.isspace()) == sorted(
            c for c in covered if not c.isspace()
        )
        for s in spans:
            assert 0 <= s.start < s.end <= len(text)


class TestSyntheticCorpus:
    def test_deterministic_bytes(self, lexicon, tmp_path):
        a = generate_synthetic_corpus(7, 3, lexicon)
        b = generate_synthetic_corpus(7, 3, lexicon)
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        dump_corpus(a, pa)
        dump_corpus(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_seed_changes_output(self, lexicon):
        assert generate_synthetic_corpus(7, 2, lexicon) != generate_synthetic_corpus(8, 2, lexicon)

    def test_every_section_mentions_three_concept_names(self, lexicon):
        names = [n for c in lexicon.concepts.values() for n in c.names]
        for art in generate_synthetic_corpus(7, 8, lexicon):
            for sec in (art.abstract, *art.sections):
                mentioned = {n for n in names if n in sec.text}
                assert len(mentioned) >= 3

    def test_empty_lexicon_rejected(self, lexicon):
        from graphlay.corpus import Lexicon

        empty = Lexicon(concepts={}, semtypes={}, relations=())
        with pytest.raises(CorpusError):
            generate_synthetic_corpus(1, 1, empty)

    def test_abstracts_contain_concepts_via_matcher(self, lexicon):
        from graphlay.concepts import match_concepts

        for art in generate_synthetic_corpus(7, 8, lexicon):
            assert match_concepts(art.abstract.text, lexicon, mode="exact")
